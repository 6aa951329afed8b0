//! Synthetic phantoms inside a 60 × 80 × 60 mm box (80 mm along y).

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussians::{normalize_quat, voxelize, Gaussian, GaussianSet, DEFAULT_TAU};
use crate::geometry::Vec3;
use crate::volume::{Grid, Volume};

/// Half extents of the phantom box in mm.
pub const BOX_HALF_MM: [f64; 3] = [30.0, 40.0, 30.0];
/// Slab thickness along z (mm) and density.
pub const SLAB_THICKNESS_MM: f64 = 40.0;
pub const SLAB_DENSITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhantomKind {
    #[serde(rename = "gauss16")]
    Gauss16,
    #[serde(rename = "gauss64")]
    Gauss64,
    #[serde(rename = "vertebra-like")]
    VertebraLike,
    #[serde(rename = "slab")]
    Slab,
}

impl FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gauss16" => Ok(Self::Gauss16),
            "gauss64" => Ok(Self::Gauss64),
            "vertebra-like" => Ok(Self::VertebraLike),
            "slab" => Ok(Self::Slab),
            other => Err(Error::input(format!(
                "unknown phantom kind {other:?} (expected gauss16, gauss64, vertebra-like or slab)"
            ))),
        }
    }
}

impl fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gauss16 => "gauss16",
            Self::Gauss64 => "gauss64",
            Self::VertebraLike => "vertebra-like",
            Self::Slab => "slab",
        })
    }
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    /// Ground-truth set for exactly representable phantoms.
    pub set: Option<GaussianSet>,
}

/// Random Gaussian mixture whose 2.5σ ellipsoids (axis-aligned bound) stay
/// inside the box.
pub fn gaussian_mixture(n: usize, scale_mm: (f64, f64), seed: u64) -> Result<GaussianSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items = (0..n)
        .map(|_| {
            let log_scale = Vec3::from_fn(|_, _| rng.random_range(scale_mm.0..scale_mm.1).ln());
            let q = normalize_quat([
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            ]);
            let reach = 2.5 * log_scale.max().exp();
            let position = Vec3::from_fn(|k, _| {
                let h = BOX_HALF_MM[k] - reach;
                rng.random_range(-h..h)
            });
            Gaussian {
                rho: rng.random_range(0.3..1.0),
                position,
                orient: q,
                log_scale,
            }
        })
        .collect();
    GaussianSet::new(items)
}

/// Cancellous body inside a cortical shell, two pedicle tubes and a
/// spinous wedge; densities {0.3, 0.6, 1.0}. The y axis is cranio-caudal
/// and z points anterior.
fn vertebra_density(x: &Vec3) -> f64 {
    let (ax, az, half_h, cz) = (20.0, 14.0, 13.0, 10.0);
    let r = ((x.x / ax).powi(2) + ((x.z - cz) / az).powi(2)).sqrt();
    if x.y.abs() <= half_h && r <= 1.0 {
        let shell = 2.0 / az;
        return if r > 1.0 - shell || x.y.abs() > half_h - 2.0 {
            1.0
        } else {
            0.3
        };
    }
    for side in [-1.0, 1.0] {
        let d = ((x.x - side * 12.0).powi(2) + x.y.powi(2)).sqrt();
        if d <= 4.0 && (-14.0..=-2.0).contains(&x.z) {
            return 0.6;
        }
    }
    if (-28.0..=-12.0).contains(&x.z) {
        let half_w = 2.0 + 6.0 * (x.z + 28.0) / 16.0;
        if x.x.abs() <= half_w && x.y.abs() <= 8.0 {
            return 0.6;
        }
    }
    0.0
}

pub fn make_phantom(kind: PhantomKind, seed: u64, grid: &Grid) -> Result<Phantom> {
    match kind {
        PhantomKind::Gauss16 | PhantomKind::Gauss64 => {
            let (n, scale) = if kind == PhantomKind::Gauss16 {
                (16, (3.0, 8.0))
            } else {
                (64, (2.0, 5.0))
            };
            let set = gaussian_mixture(n, scale, seed)?;
            Ok(Phantom {
                volume: voxelize(&set, grid, DEFAULT_TAU),
                set: Some(set),
            })
        }
        PhantomKind::VertebraLike => Ok(Phantom {
            volume: Volume::from_fn(*grid, |x| vertebra_density(&x)),
            set: None,
        }),
        PhantomKind::Slab => Ok(Phantom {
            volume: Volume::from_fn(*grid, |x| {
                let inside =
                    x.x.abs() < BOX_HALF_MM[0] && x.y.abs() < BOX_HALF_MM[1] && x.z.abs() < 0.5 * SLAB_THICKNESS_MM;
                if inside {
                    SLAB_DENSITY
                } else {
                    0.0
                }
            }),
            set: None,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::drr::render_drr;
    use crate::geometry::{CArmView, SE3Pose};

    #[test]
    fn slab_line_integral_is_twenty() {
        let grid = Grid::centered([40, 40, 64], 1.0).unwrap();
        let p = make_phantom(PhantomKind::Slab, 0, &grid).unwrap();
        let view = CArmView::new(1124.0, 700.0, (33, 33), 0.5, SE3Pose::identity()).unwrap();
        let got = render_drr(&p.volume, &view).get(16, 16);
        assert!((got - 20.0).abs() < 0.02, "{got}");
    }

    #[test]
    fn mixtures_are_reproducible_and_inside_the_box() {
        let grid = Grid::centered([24, 32, 24], 2.5).unwrap();
        let a = make_phantom(PhantomKind::Gauss16, 3, &grid).unwrap();
        let b = make_phantom(PhantomKind::Gauss16, 3, &grid).unwrap();
        assert_eq!(a.volume, b.volume);
        let set = a.set.unwrap();
        assert_eq!(set.len(), 16);
        for g in set.iter() {
            for k in 0..3 {
                assert!(g.position[k].abs() + 2.5 * g.log_scale.max().exp() <= BOX_HALF_MM[k] + 1e-9);
            }
        }
        assert_ne!(make_phantom(PhantomKind::Gauss16, 4, &grid).unwrap().volume, a.volume);
        assert_eq!(
            make_phantom(PhantomKind::Gauss64, 1, &grid).unwrap().set.unwrap().len(),
            64
        );
    }

    #[test]
    fn vertebra_has_mass_inside_the_box() {
        let grid = Grid::centered([40, 48, 40], 2.0).unwrap();
        let v = make_phantom(PhantomKind::VertebraLike, 0, &grid).unwrap().volume;
        assert!(v.mass() > 0.0);
        let mut levels: Vec<f64> = v.data().iter().copied().filter(|&d| d > 0.0).collect();
        levels.sort_by(f64::total_cmp);
        levels.dedup();
        assert_eq!(levels, vec![0.3, 0.6, 1.0]);
        for idx in 0..grid.len() {
            if v.data()[idx] > 0.0 {
                let x = grid.center_of(idx);
                assert!((0..3).all(|k| x[k].abs() <= BOX_HALF_MM[k]));
            }
        }
    }

    #[test]
    fn kinds_parse_and_display() {
        for k in [
            PhantomKind::Gauss16,
            PhantomKind::Gauss64,
            PhantomKind::VertebraLike,
            PhantomKind::Slab,
        ] {
            assert_eq!(k.to_string().parse::<PhantomKind>().unwrap(), k);
        }
        assert!("cube".parse::<PhantomKind>().is_err());
    }
}
