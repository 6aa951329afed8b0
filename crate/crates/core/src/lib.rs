//! Radiative Gaussian reconstruction and rigid registration engine.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cal;
pub mod drr;
pub mod error;
pub mod filter;
pub mod gaussians;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod phantom;
pub mod pipeline;
pub mod reconstruct;
pub mod reduce;
pub mod register;
pub mod volume;

pub use cal::CalHead;
pub use drr::Biplanar;
pub use error::{Error, Result};
pub use gaussians::{Gaussian, GaussianSet};
pub use geometry::{CArmView, SE3Pose, Twist, Vec3};
pub use image::ProjImage;
pub use losses::LossWeights;
pub use phantom::PhantomKind;
pub use pipeline::{run_pipeline, PipelineConfig, RunManifest};
pub use reconstruct::{ReconConfig, ReconOutput};
pub use register::{joint_refine, register_volumes, JointConfig, RegConfig, RegistrationResult};
pub use volume::{Grid, Volume};
