//! Radiative Gaussians: a set of anisotropic 3D Gaussians carrying a scalar
//! attenuation density, their density field, the X-ray rasterizer and the
//! density voxelizer.
//!
//! Each Gaussian is `(ρ, p, q, s)` with covariance
//! `Σ = R(q) diag(exp(2 s)) R(q)ᵀ`. For optimization a set is flattened into
//! [`PARAMS_PER_GAUSSIAN`] free parameters per Gaussian:
//! `[softplus⁻¹(ρ), p.x, p.y, p.z, q.w, q.x, q.y, q.z, s.x, s.y, s.z]`.

mod io;
mod render;
mod voxelize;

pub use render::{
    line_integral, rasterize, rasterize_backward, rasterize_brute, rasterize_splats, ray_integral,
    ray_integral_truncated, RenderMode,
};
pub use voxelize::{voxelize, voxelize_backward, voxelize_splats};

use nalgebra::{Quaternion, UnitQuaternion};

use crate::error::{Error, Result};
use crate::geometry::{Mat3, SE3Pose, Vec3};

/// Default Mahalanobis truncation radius.
pub const DEFAULT_TAU: f64 = 3.0;

pub const PARAMS_PER_GAUSSIAN: usize = 11;

pub const LOG_SCALE_MIN: f64 = -2.995_732_273_553_991; // ln 0.05 mm
pub const LOG_SCALE_MAX: f64 = 4.605_170_185_988_092; // ln 100 mm

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub rho: f64,
    pub position: Vec3,
    /// Unit quaternion `w, x, y, z`.
    pub orient: [f64; 4],
    pub log_scale: Vec3,
}

impl Gaussian {
    pub fn isotropic(rho: f64, position: Vec3, scale: f64) -> Self {
        Self {
            rho,
            position,
            orient: [1.0, 0.0, 0.0, 0.0],
            log_scale: Vec3::repeat(scale.ln()),
        }
    }

    pub fn rotation(&self) -> Mat3 {
        rotation_from_unit_quat(&normalize_quat(self.orient))
    }

    pub fn covariance(&self) -> Mat3 {
        let r = self.rotation();
        r * Mat3::from_diagonal(&self.log_scale.map(|s| (2.0 * s).exp())) * r.transpose()
    }

    pub fn inv_covariance(&self) -> Mat3 {
        let r = self.rotation();
        r * Mat3::from_diagonal(&self.log_scale.map(|s| (-2.0 * s).exp())) * r.transpose()
    }

    /// Unnormalized density contribution at `x` (no truncation).
    pub fn density_at(&self, x: &Vec3) -> f64 {
        let m = x - self.position;
        self.rho * (-0.5 * m.dot(&(self.inv_covariance() * m))).exp()
    }

    /// Total mass `ρ (2π)^{3/2} |Σ|^{1/2}`.
    pub fn mass(&self) -> f64 {
        let det_sqrt = self.log_scale.sum().exp();
        self.rho * (2.0 * std::f64::consts::PI).powf(1.5) * det_sqrt
    }
}

/// A set of radiative Gaussians.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GaussianSet {
    items: Vec<Gaussian>,
}

impl GaussianSet {
    /// Validates densities and normalizes quaternions.
    pub fn new(items: Vec<Gaussian>) -> Result<Self> {
        let mut items = items;
        for (i, g) in items.iter_mut().enumerate() {
            if !(g.rho >= 0.0 && g.rho.is_finite()) {
                return Err(Error::input(format!(
                    "gaussian {i}: rho must be finite and >= 0, got {}",
                    g.rho
                )));
            }
            if !g.position.iter().chain(g.log_scale.iter()).all(|v| v.is_finite()) {
                return Err(Error::input(format!("gaussian {i}: non-finite position or scale")));
            }
            let n = g.orient.iter().map(|c| c * c).sum::<f64>().sqrt();
            if !(n.is_finite() && n > 1e-12) {
                return Err(Error::input(format!("gaussian {i}: degenerate quaternion")));
            }
            if (n - 1.0).abs() > 1e-12 {
                g.orient = g.orient.map(|c| c / n);
            }
        }
        Ok(Self { items })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Gaussian] {
        &self.items
    }

    pub fn iter(&self) -> impl Iterator<Item = &Gaussian> {
        self.items.iter()
    }

    /// Union of two sets.
    pub fn union(&self, other: &GaussianSet) -> GaussianSet {
        let mut items = self.items.clone();
        items.extend_from_slice(&other.items);
        GaussianSet { items }
    }

    /// Moves every Gaussian by the rigid `pose`.
    pub fn transform(&self, pose: &SE3Pose) -> GaussianSet {
        let rot = *pose.rotation();
        let items = self
            .items
            .iter()
            .map(|g| {
                let q = rot * unit_quat(g.orient);
                let c = q.quaternion();
                Gaussian {
                    rho: g.rho,
                    position: pose.apply(&g.position),
                    orient: [c.w, c.i, c.j, c.k],
                    log_scale: g.log_scale,
                }
            })
            .collect();
        GaussianSet { items }
    }

    /// Density field `σ(x) = Σ ρ_i exp(-½ mᵀΣ⁻¹m)`, skipping Gaussians whose
    /// Mahalanobis distance to `x` exceeds `tau`.
    pub fn density_at(&self, x: &Vec3, tau: f64) -> f64 {
        let tau2 = tau * tau;
        self.splats()
            .iter()
            .map(|s| {
                let m = x - s.position;
                let d2 = m.dot(&(s.inv_cov * m));
                if d2 <= tau2 {
                    s.rho * (-0.5 * d2).exp()
                } else {
                    0.0
                }
            })
            .sum()
    }

    pub fn splats(&self) -> Vec<Splat> {
        self.items.iter().map(Splat::from_gaussian).collect()
    }

    /// Splats with the densities replaced, e.g. by a signed effect channel.
    pub fn splats_with_densities(&self, rho: &[f64]) -> Vec<Splat> {
        assert_eq!(rho.len(), self.items.len());
        self.items
            .iter()
            .zip(rho)
            .map(|(g, &r)| Splat {
                rho: r,
                ..Splat::from_gaussian(g)
            })
            .collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.items.iter().map(Gaussian::mass).sum()
    }

    /// Flattened free parameters.
    pub fn to_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.items.len() * PARAMS_PER_GAUSSIAN);
        for g in &self.items {
            out.push(softplus_inv(g.rho));
            out.extend_from_slice(g.position.as_slice());
            out.extend_from_slice(&g.orient);
            out.extend_from_slice(g.log_scale.as_slice());
        }
        out
    }

    /// Inverse of [`GaussianSet::to_params`]; quaternions are normalized.
    pub fn from_params(params: &[f64]) -> Result<GaussianSet> {
        if !params.len().is_multiple_of(PARAMS_PER_GAUSSIAN) {
            return Err(Error::input(format!(
                "parameter vector length {} is not a multiple of {PARAMS_PER_GAUSSIAN}",
                params.len()
            )));
        }
        let items = params
            .chunks_exact(PARAMS_PER_GAUSSIAN)
            .map(|c| Gaussian {
                rho: softplus(c[0]),
                position: Vec3::new(c[1], c[2], c[3]),
                orient: [c[4], c[5], c[6], c[7]],
                log_scale: Vec3::new(c[8], c[9], c[10]),
            })
            .collect();
        GaussianSet::new(items)
    }

    /// Writes `<stem>.json` and `<stem>.raw`.
    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        io::write(self, path.as_ref())
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<GaussianSet> {
        io::read(path.as_ref())
    }

    pub(crate) fn from_items_unchecked(items: Vec<Gaussian>) -> Self {
        Self { items }
    }
}

/// Precomputed render-time form of one Gaussian.
#[derive(Debug, Clone, Copy)]
pub struct Splat {
    pub rho: f64,
    pub position: Vec3,
    pub cov: Mat3,
    pub inv_cov: Mat3,
}

impl Splat {
    pub fn from_gaussian(g: &Gaussian) -> Self {
        let r = g.rotation();
        let rt = r.transpose();
        Self {
            rho: g.rho,
            position: g.position,
            cov: r * Mat3::from_diagonal(&g.log_scale.map(|s| (2.0 * s).exp())) * rt,
            inv_cov: r * Mat3::from_diagonal(&g.log_scale.map(|s| (-2.0 * s).exp())) * rt,
        }
    }
}

/// Gradient of a scalar with respect to one splat's render-time quantities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatGrad {
    pub rho: f64,
    pub position: Vec3,
    /// Gradient with respect to the (symmetric) inverse covariance.
    pub inv_cov: Mat3,
}

impl Default for SplatGrad {
    fn default() -> Self {
        Self {
            rho: 0.0,
            position: Vec3::zeros(),
            inv_cov: Mat3::zeros(),
        }
    }
}

impl SplatGrad {
    pub fn add(&mut self, other: &SplatGrad) {
        self.rho += other.rho;
        self.position += other.position;
        self.inv_cov += other.inv_cov;
    }

    pub fn scale(&self, k: f64) -> SplatGrad {
        SplatGrad {
            rho: self.rho * k,
            position: self.position * k,
            inv_cov: self.inv_cov * k,
        }
    }
}

/// Chains per-splat gradients (with respect to density value, position and
/// inverse covariance) into the flattened free-parameter gradient of
/// `params`, accumulating into `out`.
pub fn chain_param_grads(params: &[f64], grads: &[SplatGrad], out: &mut [f64]) {
    assert_eq!(params.len(), grads.len() * PARAMS_PER_GAUSSIAN);
    assert_eq!(out.len(), params.len());
    for ((p, g), o) in params
        .chunks_exact(PARAMS_PER_GAUSSIAN)
        .zip(grads)
        .zip(out.chunks_exact_mut(PARAMS_PER_GAUSSIAN))
    {
        o[0] += g.rho * sigmoid(p[0]);
        o[1] += g.position.x;
        o[2] += g.position.y;
        o[3] += g.position.z;

        let q_raw = [p[4], p[5], p[6], p[7]];
        let qn = normalize_quat(q_raw);
        let r = rotation_from_unit_quat(&qn);
        let d = Vec3::new((-2.0 * p[8]).exp(), (-2.0 * p[9]).exp(), (-2.0 * p[10]).exp());
        let gs = (g.inv_cov + g.inv_cov.transpose()) * 0.5;

        // Σ⁻¹ = R D Rᵀ
        let rgr = r.transpose() * gs * r;
        for k in 0..3 {
            o[8 + k] += -2.0 * d[k] * rgr[(k, k)];
        }
        let d_r = gs * r * Mat3::from_diagonal(&d) * 2.0;
        let d_qn = rotation_grad_to_quat(&qn, &d_r);
        let n = q_raw.iter().map(|c| c * c).sum::<f64>().sqrt();
        let dot: f64 = (0..4).map(|k| qn[k] * d_qn[k]).sum();
        for k in 0..4 {
            o[4 + k] += (d_qn[k] - qn[k] * dot) / n;
        }
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inv(y: f64) -> f64 {
    let y = y.max(1e-12);
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn normalize_quat(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|c| c * c).sum::<f64>().sqrt();
    q.map(|c| c / n)
}

fn unit_quat(q: [f64; 4]) -> UnitQuaternion<f64> {
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
}

pub(crate) fn rotation_from_unit_quat(q: &[f64; 4]) -> Mat3 {
    let [w, x, y, z] = *q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Pulls a gradient with respect to `R(q)` back to the unit quaternion's
/// components (before the normalization chain).
fn rotation_grad_to_quat(q: &[f64; 4], g: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let dw = 2.0 * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)] - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    [dw, dx, dy, dz]
}

/// Clamps log-scales into the allowed range in place.
pub fn clamp_log_scales(params: &mut [f64]) {
    for c in params.chunks_exact_mut(PARAMS_PER_GAUSSIAN) {
        for v in &mut c[8..11] {
            *v = v.clamp(LOG_SCALE_MIN, LOG_SCALE_MAX);
        }
    }
}

/// Renormalizes raw quaternions in place.
pub fn renormalize_quats(params: &mut [f64]) {
    for c in params.chunks_exact_mut(PARAMS_PER_GAUSSIAN) {
        let q = normalize_quat([c[4], c[5], c[6], c[7]]);
        c[4..8].copy_from_slice(&q);
    }
}

#[cfg(test)]
pub(crate) mod test_util {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Random anisotropic Gaussians inside a box of half-extent `half` mm.
    pub fn random_set(n: usize, seed: u64, half: f64, scale: (f64, f64)) -> GaussianSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let items = (0..n)
            .map(|_| Gaussian {
                rho: rng.random_range(0.2..1.0),
                position: Vec3::from_fn(|_, _| rng.random_range(-half..half)),
                orient: [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                ],
                log_scale: Vec3::from_fn(|_, _| rng.random_range(scale.0.ln()..scale.1.ln())),
            })
            .collect();
        GaussianSet::new(items).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::test_util::random_set;
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn center_value_and_one_sigma() {
        let g = GaussianSet::new(vec![Gaussian::isotropic(0.7, Vec3::new(1.0, 2.0, 3.0), 4.0)]).unwrap();
        assert!((g.density_at(&Vec3::new(1.0, 2.0, 3.0), f64::INFINITY) - 0.7).abs() < 1e-15);
        let at = g.density_at(&Vec3::new(5.0, 2.0, 3.0), f64::INFINITY);
        assert!((at - 0.7 * (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn density_is_sum_of_parts() {
        let set = random_set(8, 11, 10.0, (1.0, 5.0));
        let x = Vec3::new(1.0, -2.0, 0.5);
        let total = set.density_at(&x, f64::INFINITY);
        let parts: f64 = set.iter().map(|g| g.density_at(&x)).sum();
        assert!((total - parts).abs() <= 1e-7 * parts.abs());
    }

    #[test]
    fn rotation_matches_nalgebra() {
        let set = random_set(5, 3, 1.0, (1.0, 2.0));
        for g in set.iter() {
            let ours = g.rotation();
            let theirs = unit_quat(g.orient).to_rotation_matrix().into_inner();
            assert!((ours - theirs).abs().max() < 1e-14);
        }
    }

    #[test]
    fn params_round_trip() {
        let set = random_set(6, 5, 20.0, (0.5, 8.0));
        let back = GaussianSet::from_params(&set.to_params()).unwrap();
        for (a, b) in set.iter().zip(back.iter()) {
            assert!((a.rho - b.rho).abs() < 1e-12);
            assert_eq!(a.position, b.position);
            assert_eq!(a.log_scale, b.log_scale);
        }
    }

    #[test]
    fn negative_rho_is_rejected() {
        let mut g = Gaussian::isotropic(1.0, Vec3::zeros(), 1.0);
        g.rho = -0.1;
        assert!(GaussianSet::new(vec![g]).is_err());
    }

    /// Checks `chain_param_grads` on `f(params) = Σ_i tr(W_i Σ_i⁻¹) + w·p + c ρ`.
    #[test]
    fn parameter_chain_rule_matches_finite_differences() {
        let set = random_set(3, 9, 5.0, (0.8, 3.0));
        let mut params = set.to_params();
        // unnormalized quaternions exercise the normalization chain
        for c in params.chunks_exact_mut(PARAMS_PER_GAUSSIAN) {
            for k in 4..8 {
                c[k] *= 1.7;
            }
        }
        let weights: Vec<(Mat3, Vec3, f64)> = (0..3)
            .map(|i| {
                let a = Mat3::from_fn(|r, c| ((r * 3 + c + i) as f64 * 0.37).sin());
                (a + a.transpose(), Vec3::new(0.3, -0.2, 0.9 + i as f64), 0.5 + i as f64)
            })
            .collect();
        let f = |p: &[f64]| -> f64 {
            let s = GaussianSet::from_params(p).unwrap();
            s.splats()
                .iter()
                .zip(&weights)
                .map(|(sp, (w, v, c))| (w.component_mul(&sp.inv_cov)).sum() + v.dot(&sp.position) + c * sp.rho)
                .sum()
        };
        let grads: Vec<SplatGrad> = weights
            .iter()
            .map(|(w, v, c)| SplatGrad {
                rho: *c,
                position: *v,
                inv_cov: *w,
            })
            .collect();
        let mut analytic = vec![0.0; params.len()];
        chain_param_grads(&params, &grads, &mut analytic);
        let err = crate::optim::fd_check(f, &params, &analytic, 1e-5).unwrap();
        assert!(err < 1e-6, "chain rule rel err {err}");
    }

    proptest! {
        #[test]
        fn covariance_is_spd(
            q in prop::array::uniform4(-1.0f64..1.0),
            s in prop::array::uniform3(-2.0f64..3.0),
        ) {
            prop_assume!(q.iter().map(|c| c * c).sum::<f64>() > 1e-3);
            let set = GaussianSet::new(vec![Gaussian {
                rho: 1.0,
                position: Vec3::zeros(),
                orient: q,
                log_scale: Vec3::from(s),
            }]).unwrap();
            let g = set.items()[0];
            let n = g.orient.iter().map(|c| c * c).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-7);
            let cov = g.covariance();
            prop_assert!((cov - cov.transpose()).abs().max() < 1e-9 * cov.abs().max());
            let eig = cov.symmetric_eigenvalues();
            prop_assert!(eig.iter().all(|&e| e > 0.0));
            let prod = cov * g.inv_covariance();
            prop_assert!((prod - Mat3::identity()).abs().max() < 1e-9);
        }
    }
}
