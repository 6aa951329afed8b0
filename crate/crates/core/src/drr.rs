//! Ray-marched DRRs of voxel volumes and biplanar acquisition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{sample_pose, CArmView, Vec3};
use crate::image::ProjImage;
use crate::volume::Volume;

/// DRR with the default step `min(spacing) / 2`.
pub fn render_drr(v: &Volume, view: &CArmView) -> ProjImage {
    let s = v.grid().spacing;
    render_drr_with_step(v, view, s.x.min(s.y).min(s.z) / 2.0)
}

/// Midpoint-rule line integrals of the trilinear field over each ray's
/// intersection with the volume support. The segment is split into
/// `⌈length / step⌉` equal parts.
pub fn render_drr_with_step(v: &Volume, view: &CArmView, step: f64) -> ProjImage {
    let (w, h) = (view.width(), view.height());
    let fan = view.fan();
    let (lo, hi) = v.grid().support_bounds();
    let data: Vec<f64> = (0..w * h)
        .into_par_iter()
        .map(|idx| {
            let ray = fan.ray((idx % w) as f64, (idx / w) as f64);
            let Some((t0, t1)) = clip_ray(&ray.origin, &ray.dir, &lo, &hi) else {
                return 0.0;
            };
            let n = ((t1 - t0) / step).ceil().max(1.0) as usize;
            let dt = (t1 - t0) / n as f64;
            let mut acc = 0.0;
            for k in 0..n {
                let t = t0 + (k as f64 + 0.5) * dt;
                acc += v.sample_trilinear(&(ray.origin + ray.dir * t));
            }
            acc * dt
        })
        .collect();
    ProjImage::from_raw(w, h, view.pixel_pitch(), data)
}

/// Slab intersection of a ray with an axis-aligned box, restricted to
/// `t ≥ 0`.
fn clip_ray(o: &Vec3, d: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
    let mut t0 = 0.0f64;
    let mut t1 = f64::INFINITY;
    for k in 0..3 {
        if d[k].abs() < 1e-15 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
            continue;
        }
        let a = (lo[k] - o[k]) / d[k];
        let b = (hi[k] - o[k]) / d[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t1 > t0).then_some((t0, t1))
}

/// AP and LA acquisitions with their exact views.
#[derive(Debug, Clone)]
pub struct Biplanar {
    pub ap: ProjImage,
    pub la: ProjImage,
    pub view_ap: CArmView,
    pub view_la: CArmView,
}

impl Biplanar {
    pub fn images(&self) -> [&ProjImage; 2] {
        [&self.ap, &self.la]
    }

    pub fn views(&self) -> [&CArmView; 2] {
        [&self.view_ap, &self.view_la]
    }
}

/// Gantry views at 0° (AP) and 90° (LA), each with an independent uniform
/// rotation perturbation in `[-perturb_deg, perturb_deg]` on every axis.
pub fn biplanar_views(base: &CArmView, perturb_deg: f64, seed: u64) -> Result<(CArmView, CArmView)> {
    if !(perturb_deg >= 0.0) {
        return Err(Error::input(format!(
            "perturbation must be ≥ 0 degrees, got {perturb_deg}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p_ap = sample_pose(&mut rng, (-perturb_deg, perturb_deg), (0.0, 0.0))?;
    let p_la = sample_pose(&mut rng, (-perturb_deg, perturb_deg), (0.0, 0.0))?;
    Ok((base.at_gantry_angle(0.0, &p_ap), base.at_gantry_angle(90.0, &p_la)))
}

pub fn make_biplanar(v: &Volume, base: &CArmView, perturb_deg: f64, seed: u64) -> Result<Biplanar> {
    let (view_ap, view_la) = biplanar_views(base, perturb_deg, seed)?;
    Ok(Biplanar {
        ap: render_drr(v, &view_ap),
        la: render_drr(v, &view_la),
        view_ap,
        view_la,
    })
}
