//! Reconstruction and registration objectives with analytic gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{ssim_windowed, WINDOW_2D, WINDOW_3D};
use crate::geometry::SE3Pose;
use crate::image::ProjImage;
use crate::reduce::pairwise_sum;
use crate::volume::Volume;

/// Translation weight of the geodesic pose distance, per mm.
pub const GEODESIC_TRANS_WEIGHT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// SSIM weight of the reconstruction loss.
    pub lambda1: f64,
    /// TV weight of the reconstruction loss.
    pub lambda2: f64,
    /// Geodesic pose weight of the registration loss.
    pub lambda_geo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 0.2,
            lambda2: 0.05,
            lambda_geo: 0.02,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_geo", self.lambda_geo),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

fn check_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::input(format!(
            "{what} shape mismatch: {} vs {} values",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::input(format!("{what} of empty arrays")));
    }
    Ok(())
}

fn check_images(a: &ProjImage, b: &ProjImage) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::input(format!(
            "image shape mismatch: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

fn check_volumes(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::input(format!(
            "volume shape mismatch: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss(a: &[f64], b: &[f64]) -> Result<f64> {
    check_len(a, b, "l1")?;
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - y).abs()).collect();
    Ok(pairwise_sum(&d) / d.len() as f64)
}

/// L1 value and its (sub)gradient with respect to `a`.
pub fn l1_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    let value = l1_loss(a, b)?;
    let k = 1.0 / a.len() as f64;
    let grad = a.iter().zip(b).map(|(x, y)| k * sign(x - y)).collect();
    Ok((value, grad))
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean SSIM of two images (11×11 Gaussian window, σ = 1.5).
pub fn ssim_images(a: &ProjImage, b: &ProjImage) -> Result<f64> {
    check_images(a, b)?;
    Ok(ssim_windowed(a.data(), b.data(), a.dims3(), WINDOW_2D, false)?.value)
}

/// Mean SSIM of two volumes (7³ Gaussian window, σ = 1.5).
pub fn ssim_volumes(a: &Volume, b: &Volume) -> Result<f64> {
    check_volumes(a, b)?;
    Ok(ssim_windowed(a.data(), b.data(), a.dims(), WINDOW_3D, false)?.value)
}

/// Anisotropic total variation: mean of `|ΔV|` over all forward differences
/// along the three axes.
pub fn tv3d(v: &Volume) -> f64 {
    tv3d_with_grad(v.data(), v.dims(), false).0
}

pub fn tv3d_with_grad(data: &[f64], dims: [usize; 3], want_grad: bool) -> (f64, Vec<f64>) {
    let [nx, ny, nz] = dims;
    let strides = [1, nx, nx * ny];
    let mut diffs = Vec::new();
    let mut grad = vec![0.0; if want_grad { data.len() } else { 0 }];
    let mut signs = Vec::new();
    for axis in 0..3 {
        if dims[axis] < 2 {
            continue;
        }
        let st = strides[axis];
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let c = [i, j, k];
                    if c[axis] + 1 >= dims[axis] {
                        continue;
                    }
                    let idx = i + nx * (j + ny * k);
                    let d = data[idx + st] - data[idx];
                    diffs.push(d.abs());
                    if want_grad {
                        signs.push((idx, st, sign(d)));
                    }
                }
            }
        }
    }
    if diffs.is_empty() {
        return (0.0, grad);
    }
    let k = 1.0 / diffs.len() as f64;
    for (idx, st, s) in signs {
        grad[idx + st] += k * s;
        grad[idx] -= k * s;
    }
    (pairwise_sum(&diffs) * k, grad)
}

/// Global NCC loss `1 - ncc`, with a flag for zero-variance inputs (which
/// are assigned correlation 0).
#[derive(Debug, Clone)]
pub struct NccEval {
    pub loss: f64,
    pub degenerate: bool,
    pub grad_a: Option<Vec<f64>>,
}

pub fn ncc3d(a: &[f64], b: &[f64], want_grad: bool) -> Result<NccEval> {
    check_len(a, b, "ncc")?;
    let n = a.len() as f64;
    let mean_a = pairwise_sum(a) / n;
    let mean_b = pairwise_sum(b) / n;
    let da: Vec<f64> = a.iter().map(|v| v - mean_a).collect();
    let db: Vec<f64> = b.iter().map(|v| v - mean_b).collect();
    let prod = |x: &[f64], y: &[f64]| -> f64 {
        let p: Vec<f64> = x.iter().zip(y).map(|(u, v)| u * v).collect();
        pairwise_sum(&p)
    };
    let s_ab = prod(&da, &db);
    let s_aa = prod(&da, &da);
    let s_bb = prod(&db, &db);
    let degenerate = |s: f64, x: &[f64]| s <= 1e-24 * prod(x, x) || s == 0.0;
    if degenerate(s_aa, a) || degenerate(s_bb, b) {
        return Ok(NccEval {
            loss: 1.0,
            degenerate: true,
            grad_a: want_grad.then(|| vec![0.0; a.len()]),
        });
    }
    let denom = (s_aa * s_bb).sqrt();
    let ncc = s_ab / denom;
    let grad_a = want_grad.then(|| da.iter().zip(&db).map(|(x, y)| -(y / denom - ncc * x / s_aa)).collect());
    Ok(NccEval {
        loss: 1.0 - ncc,
        degenerate: false,
        grad_a,
    })
}

/// `1 - NCC(A, B)` with global statistics.
pub fn ncc3d_loss(a: &Volume, b: &Volume) -> Result<f64> {
    check_volumes(a, b)?;
    Ok(ncc3d(a.data(), b.data(), false)?.loss)
}

/// Rotation angle of `R_gtᵀ R̂` plus 0.01/mm times the translation gap.
pub fn geodesic_loss(t_gt: &SE3Pose, t_hat: &SE3Pose) -> f64 {
    let r = t_gt.rotation_matrix().transpose() * t_hat.rotation_matrix();
    let cos = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    cos.acos() + GEODESIC_TRANS_WEIGHT * (t_gt.translation() - t_hat.translation()).norm()
}

/// Components of the two-view reconstruction loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReconTerms {
    pub l1: [f64; 2],
    pub ssim: [f64; 2],
    pub tv: f64,
    pub total: f64,
}

impl ReconTerms {
    pub fn assemble(l1: [f64; 2], ssim: [f64; 2], tv: f64, w: &LossWeights) -> Self {
        let view = |k: usize| l1[k] + w.lambda1 * (1.0 - ssim[k]);
        Self {
            l1,
            ssim,
            tv,
            total: 0.5 * (view(0) + view(1)) + w.lambda2 * tv,
        }
    }
}

/// Mean over the two views of `L1 + λ1(1 - SSIM)`, plus `λ2·TV(V_pred)`.
pub fn recon_loss(
    pred: [&ProjImage; 2],
    meas: [&ProjImage; 2],
    v_pred: &Volume,
    w: &LossWeights,
) -> Result<ReconTerms> {
    let mut l1 = [0.0; 2];
    let mut ssim = [0.0; 2];
    for k in 0..2 {
        check_images(pred[k], meas[k])?;
        l1[k] = l1_loss(pred[k].data(), meas[k].data())?;
        ssim[k] = ssim_images(pred[k], meas[k])?;
    }
    Ok(ReconTerms::assemble(l1, ssim, tv3d(v_pred), w))
}

/// Per-view image term `L1 + λ1(1 - SSIM)` with its gradient with respect to
/// the prediction.
pub fn image_term_with_grad(pred: &ProjImage, meas: &ProjImage, lambda1: f64) -> Result<(f64, f64, Vec<f64>)> {
    check_images(pred, meas)?;
    let (l1, mut grad) = l1_with_grad(pred.data(), meas.data())?;
    let s = ssim_windowed(pred.data(), meas.data(), pred.dims3(), WINDOW_2D, lambda1 != 0.0)?;
    if let Some(gs) = &s.grad_a {
        for (g, d) in grad.iter_mut().zip(gs) {
            *g -= lambda1 * d;
        }
    }
    Ok((l1, s.value, grad))
}

/// Components of the registration loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegTerms {
    pub ncc: f64,
    pub ssim: f64,
    pub geodesic: Option<f64>,
    pub total: f64,
    pub degenerate: bool,
}

/// Image-similarity part of the registration loss between a resampled
/// moving volume and the fixed volume, with its gradient with respect to the
/// moving voxels.
pub fn similarity_with_grad(
    moving: &[f64],
    fixed: &[f64],
    dims: [usize; 3],
    want_grad: bool,
) -> Result<(RegTerms, Option<Vec<f64>>)> {
    let ncc = ncc3d(moving, fixed, want_grad)?;
    let ssim = ssim_windowed(moving, fixed, dims, WINDOW_3D, want_grad)?;
    let terms = RegTerms {
        ncc: ncc.loss,
        ssim: ssim.value,
        geodesic: None,
        total: ncc.loss + (1.0 - ssim.value),
        degenerate: ncc.degenerate,
    };
    let grad = match (ncc.grad_a, ssim.grad_a) {
        (Some(gn), Some(gs)) => Some(gn.iter().zip(&gs).map(|(a, b)| a - b).collect()),
        _ => None,
    };
    Ok((terms, grad))
}

/// `NCC(V_CT·T̂, V_rec) + (1 - SSIM) + λ_geo·geodesic(T_gt, T̂)`; the geodesic
/// term is present only when `t_gt` is given.
pub fn reg_loss(
    v_ct: &Volume,
    t_hat: &SE3Pose,
    v_rec: &Volume,
    t_gt: Option<&SE3Pose>,
    w: &LossWeights,
) -> Result<RegTerms> {
    let moving = v_ct.resample_rigid(t_hat, v_rec.grid());
    let (mut terms, _) = similarity_with_grad(moving.data(), v_rec.data(), v_rec.dims(), false)?;
    if let Some(gt) = t_gt {
        let g = geodesic_loss(gt, t_hat);
        terms.geodesic = Some(g);
        terms.total += w.lambda_geo * g;
    }
    Ok(terms)
}
