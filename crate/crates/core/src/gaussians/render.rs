//! X-ray rasterizer: exact infinite-line integrals of each Gaussian along
//! every detector ray.
//!
//! For a ray `o + t d` (`|d| = 1`) and a Gaussian `(ρ, p, Σ)` with
//! `m = o - p`, `a = dᵀΣ⁻¹d`, `b = dᵀΣ⁻¹m`, `c = mᵀΣ⁻¹m`:
//!
//! ```text
//! ∫ ρ exp(-½ (m + t d)ᵀ Σ⁻¹ (m + t d)) dt = ρ √(2π / a) exp(-½ (c - b² / a))
//! ```
//!
//! `E = c - b²/a` is the squared Mahalanobis distance from the Gaussian to the
//! line; a pair contributes only when `E ≤ τ²`. It is evaluated as
//! `m⊥ᵀΣ⁻¹m⊥` with `m⊥ = m - (b/a) d`, which avoids cancellation when the
//! source is far from the Gaussian.

use rayon::prelude::*;

use super::{GaussianSet, Splat, SplatGrad};
use crate::error::{Error, Result};
use crate::geometry::{CArmView, Mat3, RayFan, Vec3};
use crate::image::ProjImage;

const TILE: usize = 16;
const SQRT_2PI: f64 = 2.506_628_274_631_000_7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RenderMode {
    /// Every Gaussian against every pixel.
    Brute,
    /// 16×16 pixel tiles with per-tile Gaussian lists.
    #[default]
    Tiled,
}

/// Line integral of one splat and the squared Mahalanobis line distance.
#[inline]
pub fn line_integral(s: &Splat, origin: &Vec3, dir: &Vec3) -> (f64, f64) {
    let m = origin - s.position;
    let sd = s.inv_cov * dir;
    let a = dir.dot(&sd);
    let perp = m - dir * (m.dot(&sd) / a);
    let e = perp.dot(&(s.inv_cov * perp)).max(0.0);
    (s.rho * SQRT_2PI / a.sqrt() * (-0.5 * e).exp(), e)
}

fn check_dir(dir: &Vec3) -> Result<()> {
    if (dir.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::input(format!(
            "ray direction must be unit length (|d| = {})",
            dir.norm()
        )));
    }
    Ok(())
}

/// Exact line integral of the whole set along a ray (no truncation).
pub fn ray_integral(set: &GaussianSet, origin: &Vec3, dir: &Vec3) -> Result<f64> {
    ray_integral_truncated(set, origin, dir, f64::INFINITY)
}

/// Line integral skipping Gaussians farther than `tau` from the line.
pub fn ray_integral_truncated(set: &GaussianSet, origin: &Vec3, dir: &Vec3, tau: f64) -> Result<f64> {
    check_dir(dir)?;
    let tau2 = tau * tau;
    Ok(set
        .splats()
        .iter()
        .map(|s| {
            let (v, e) = line_integral(s, origin, dir);
            if e <= tau2 {
                v
            } else {
                0.0
            }
        })
        .sum())
}

/// Tiled rasterization at truncation radius `tau`.
pub fn rasterize(set: &GaussianSet, view: &CArmView, tau: f64) -> ProjImage {
    rasterize_splats(&set.splats(), view, tau, RenderMode::Tiled)
}

/// Brute-force rasterization at truncation radius `tau`.
pub fn rasterize_brute(set: &GaussianSet, view: &CArmView, tau: f64) -> ProjImage {
    rasterize_splats(&set.splats(), view, tau, RenderMode::Brute)
}

/// Per-view constants of one splat.
#[derive(Clone, Copy)]
struct ViewSplat {
    rho: f64,
    inv_cov: Mat3,
    m: Vec3,
    sm: Vec3,
}

impl ViewSplat {
    fn new(s: &Splat, source: &Vec3) -> Self {
        let m = source - s.position;
        Self {
            rho: s.rho,
            inv_cov: s.inv_cov,
            m,
            sm: s.inv_cov * m,
        }
    }

    /// Returns `(base, a, m⊥)` with `base = √(2π/a) exp(-E/2)`, or `None`
    /// when the pair is culled.
    #[inline]
    fn eval(&self, d: &Vec3, tau2: f64) -> Option<(f64, f64, Vec3)> {
        let a = d.dot(&(self.inv_cov * d));
        let b = d.dot(&self.sm);
        let perp = self.m - d * (b / a);
        let e = perp.dot(&(self.inv_cov * perp)).max(0.0);
        if e > tau2 {
            return None;
        }
        Some((SQRT_2PI / a.sqrt() * (-0.5 * e).exp(), a, perp))
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
struct PixelRect {
    u0: usize,
    u1: usize,
    v0: usize,
    v1: usize,
}

/// Conservative pixel bounds of the rays passing within Mahalanobis `tau` of
/// the splat: the projected corners of the gantry-aligned box enclosing the
/// τ-ellipsoid. The whole detector when the box reaches behind the source.
fn pixel_bounds(s: &Splat, fan: &RayFan, w: usize, h: usize, tau: f64) -> Option<PixelRect> {
    let full = PixelRect {
        u0: 0,
        u1: w - 1,
        v0: 0,
        v1: h - 1,
    };
    if !tau.is_finite() {
        return Some(full);
    }
    let rot = fan.gantry_rotation();
    let g = fan.to_gantry(&s.position);
    let cov_g = rot * s.cov * rot.transpose();
    let half = Vec3::from_fn(|k, _| tau * cov_g[(k, k)].max(0.0).sqrt());
    let (mut umin, mut umax, mut vmin, mut vmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for corner in 0..8 {
        let sx = if corner & 1 == 0 { -1.0 } else { 1.0 };
        let sy = if corner & 2 == 0 { -1.0 } else { 1.0 };
        let sz = if corner & 4 == 0 { -1.0 } else { 1.0 };
        let p = g + Vec3::new(sx * half.x, sy * half.y, sz * half.z);
        match fan.project_gantry(&p) {
            Some((u, v)) => {
                umin = umin.min(u);
                umax = umax.max(u);
                vmin = vmin.min(v);
                vmax = vmax.max(v);
            }
            None => return Some(full),
        }
    }
    // small slack absorbs rounding in the projection
    let eps = 1e-6;
    let u0 = (umin - eps).ceil().max(0.0);
    let v0 = (vmin - eps).ceil().max(0.0);
    let u1 = (umax + eps).floor().min((w - 1) as f64);
    let v1 = (vmax + eps).floor().min((h - 1) as f64);
    if u0 > u1 || v0 > v1 {
        return None;
    }
    Some(PixelRect {
        u0: u0 as usize,
        u1: u1 as usize,
        v0: v0 as usize,
        v1: v1 as usize,
    })
}

fn pixel_dirs(fan: &RayFan, w: usize, h: usize) -> Vec<Vec3> {
    (0..w * h)
        .into_par_iter()
        .with_min_len(1024)
        .map(|idx| fan.ray((idx % w) as f64, (idx / w) as f64).dir)
        .collect()
}

/// Rasterizes prepared splats. Densities may be signed; rendering is linear
/// in them.
pub fn rasterize_splats(splats: &[Splat], view: &CArmView, tau: f64, mode: RenderMode) -> ProjImage {
    let (w, h) = (view.width(), view.height());
    let fan = view.fan();
    let source = fan.source();
    let vs: Vec<ViewSplat> = splats.iter().map(|s| ViewSplat::new(s, &source)).collect();
    let dirs = pixel_dirs(&fan, w, h);
    let tau2 = tau * tau;

    let data = match mode {
        RenderMode::Brute => (0..w * h)
            .into_par_iter()
            .with_min_len(256)
            .map(|idx| {
                let d = &dirs[idx];
                let mut acc = 0.0;
                for s in &vs {
                    if let Some((base, ..)) = s.eval(d, tau2) {
                        acc += s.rho * base;
                    }
                }
                acc
            })
            .collect(),
        RenderMode::Tiled => {
            let tx = w.div_ceil(TILE);
            let ty = h.div_ceil(TILE);
            let mut lists: Vec<Vec<u32>> = vec![Vec::new(); tx * ty];
            for (i, s) in splats.iter().enumerate() {
                if let Some(r) = pixel_bounds(s, &fan, w, h, tau) {
                    for ty_i in r.v0 / TILE..=r.v1 / TILE {
                        for tx_i in r.u0 / TILE..=r.u1 / TILE {
                            lists[tx_i + tx * ty_i].push(i as u32);
                        }
                    }
                }
            }
            let tiles: Vec<Vec<f64>> = (0..tx * ty)
                .into_par_iter()
                .map(|t| {
                    let (tu, tv) = (t % tx, t / tx);
                    let (u_lo, v_lo) = (tu * TILE, tv * TILE);
                    let (u_hi, v_hi) = ((u_lo + TILE).min(w), (v_lo + TILE).min(h));
                    let mut out = Vec::with_capacity((u_hi - u_lo) * (v_hi - v_lo));
                    for v in v_lo..v_hi {
                        for u in u_lo..u_hi {
                            let d = &dirs[u + w * v];
                            let mut acc = 0.0;
                            for &i in &lists[t] {
                                let s = &vs[i as usize];
                                if let Some((base, ..)) = s.eval(d, tau2) {
                                    acc += s.rho * base;
                                }
                            }
                            out.push(acc);
                        }
                    }
                    out
                })
                .collect();
            let mut data = vec![0.0; w * h];
            for (t, tile) in tiles.iter().enumerate() {
                let (tu, tv) = (t % tx, t / tx);
                let (u_lo, v_lo) = (tu * TILE, tv * TILE);
                let u_hi = (u_lo + TILE).min(w);
                let span = u_hi - u_lo;
                for (r, row) in tile.chunks(span).enumerate() {
                    let start = u_lo + w * (v_lo + r);
                    data[start..start + span].copy_from_slice(row);
                }
            }
            data
        }
    };
    ProjImage::from_raw(w, h, view.pixel_pitch(), data)
}

/// Gradient of `Σ_pixels grad_image · I` with respect to every splat, for the
/// same truncation as the forward pass. Parallel over splats; each splat's
/// sum runs in fixed pixel order.
pub fn rasterize_backward(splats: &[Splat], view: &CArmView, tau: f64, grad_image: &[f64]) -> Vec<SplatGrad> {
    let (w, h) = (view.width(), view.height());
    assert_eq!(grad_image.len(), w * h);
    let fan = view.fan();
    let source = fan.source();
    let dirs = pixel_dirs(&fan, w, h);
    let tau2 = tau * tau;

    splats
        .par_iter()
        .map(|s| {
            let Some(r) = pixel_bounds(s, &fan, w, h, tau) else {
                return SplatGrad::default();
            };
            let vsp = ViewSplat::new(s, &source);
            // E is the minimum over t of (m + t d)ᵀΣ⁻¹(m + t d), so
            // ∂E/∂Σ⁻¹ = m⊥m⊥ᵀ and ∂E/∂m = 2Σ⁻¹m⊥; ∂a/∂Σ⁻¹ = ddᵀ.
            let mut g_rho = 0.0;
            let mut s_dd = Mat3::zeros();
            let mut s_pp = Mat3::zeros();
            let mut s_p = Vec3::zeros();
            for v in r.v0..=r.v1 {
                for u in r.u0..=r.u1 {
                    let idx = u + w * v;
                    let gp = grad_image[idx];
                    if gp == 0.0 {
                        continue;
                    }
                    let d = &dirs[idx];
                    let Some((base, a, perp)) = vsp.eval(d, tau2) else {
                        continue;
                    };
                    g_rho += gp * base;
                    let gi = gp * vsp.rho * base;
                    s_dd += (d * d.transpose()) * (gi / a);
                    s_pp += (perp * perp.transpose()) * gi;
                    s_p += perp * gi;
                }
            }
            SplatGrad {
                rho: g_rho,
                // m = o - p
                position: s.inv_cov * s_p,
                inv_cov: (s_dd + s_pp) * -0.5,
            }
        })
        .collect()
}
