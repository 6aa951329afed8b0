//! Rigid 3D/3D registration of a reference volume to the reconstruction,
//! and joint refinement of pose and Gaussians.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cal::CalHead;
use crate::drr::Biplanar;
use crate::error::{Error, Result};
use crate::gaussians::{
    chain_param_grads, clamp_log_scales, renormalize_quats, voxelize, voxelize_backward, voxelize_splats, GaussianSet,
    PARAMS_PER_GAUSSIAN,
};
use crate::geometry::{sample_pose, se3_exp, PoseJson, SE3Pose, Twist, Vec3};
use crate::losses::{similarity_with_grad, RegTerms};
use crate::optim::{clip_global_norm, AdamState, CLIP_NORM};
use crate::reconstruct::{Objective, ReconConfig};
use crate::reduce::par_sum_vec;
use crate::volume::{write_json, Grid, Volume};

/// Translation unit of the twist, mm.
pub const TRANS_UNIT_MM: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegConfig {
    /// Pyramid levels; level `l` of `L` is downsampled by `2^(L-1-l)`.
    pub levels: usize,
    pub max_iters: usize,
    /// Adam learning rate per level, coarse to fine.
    pub lr: Vec<f64>,
    pub n_starts: usize,
    pub conv_window: usize,
    pub conv_tol: f64,
    /// Geodesic weight; used only when a ground-truth pose is supplied.
    pub lambda_geo: f64,
    pub seed: u64,
    pub start_rot_deg: f64,
    pub start_trans_mm: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            max_iters: 300,
            lr: vec![0.05, 0.02, 0.01],
            n_starts: 8,
            conv_window: 20,
            conv_tol: 1e-6,
            lambda_geo: 0.02,
            seed: 0,
            start_rot_deg: 10.0,
            start_trans_mm: 20.0,
        }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("levels must be ≥ 1".into()));
        }
        if self.n_starts == 0 {
            return Err(Error::Config("n_starts must be ≥ 1".into()));
        }
        if self.lr.len() != self.levels {
            return Err(Error::Config(format!(
                "lr has {} entries for {} levels",
                self.lr.len(),
                self.levels
            )));
        }
        if self.lr.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
            return Err(Error::Config(format!(
                "lr entries must be finite and > 0, got {:?}",
                self.lr
            )));
        }
        if self.conv_window == 0 || !(self.conv_tol >= 0.0) {
            return Err(Error::Config("conv_window must be ≥ 1 and conv_tol ≥ 0".into()));
        }
        for (name, v) in [
            ("lambda_geo", self.lambda_geo),
            ("start_rot_deg", self.start_rot_deg),
            ("start_trans_mm", self.start_trans_mm),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// One start of a multi-start registration.
#[derive(Debug, Clone, PartialEq)]
pub struct StartResult {
    pub init: SE3Pose,
    pub pose: SE3Pose,
    /// Final full-resolution objective (infinite when diverged).
    pub objective: f64,
    pub iters: usize,
    pub diverged: bool,
    /// Objective per iteration, all levels concatenated.
    pub trajectory: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationResult {
    pub pose: SE3Pose,
    pub objective: f64,
    pub iters: usize,
    pub wall_ms: f64,
    pub starts: Vec<StartResult>,
}

#[derive(Serialize)]
struct StartJson<'a> {
    init: PoseJson,
    #[serde(flatten)]
    pose: PoseJson,
    objective: Option<f64>,
    iters: usize,
    diverged: bool,
    trajectory: &'a [f64],
}

#[derive(Serialize)]
struct ResultJson<'a> {
    #[serde(flatten)]
    pose: PoseJson,
    objective: f64,
    iters: usize,
    wall_ms: f64,
    starts: Vec<StartJson<'a>>,
}

impl RegistrationResult {
    pub fn to_json_value(&self) -> serde_json::Value {
        let starts = self
            .starts
            .iter()
            .map(|s| StartJson {
                init: s.init.to_json(),
                pose: s.pose.to_json(),
                objective: s.objective.is_finite().then_some(s.objective),
                iters: s.iters,
                diverged: s.diverged,
                trajectory: &s.trajectory,
            })
            .collect();
        serde_json::to_value(ResultJson {
            pose: self.pose.to_json(),
            objective: self.objective,
            iters: self.iters,
            wall_ms: self.wall_ms,
            starts,
        })
        .expect("registration result serializes")
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path.as_ref(), &self.to_json_value())
    }
}

/// Registration objective and its gradient with respect to a left twist
/// about `center`, `T ← C·exp(δ)·C⁻¹·T`, with `δ = (ω rad, v / 10 mm)`.
pub fn pose_objective(
    moving: &Volume,
    fixed: &Volume,
    pose: &SE3Pose,
    center: &Vec3,
    want_grad: bool,
) -> Result<(RegTerms, Option<[f64; 6]>)> {
    if !want_grad {
        let m = moving.resample_rigid(pose, fixed.grid());
        let (terms, _) = similarity_with_grad(m.data(), fixed.data(), fixed.dims(), false)?;
        return Ok((terms, None));
    }
    let (m, g) = moving.resample_rigid_with_gradient(pose, fixed.grid());
    let (terms, dm) = similarity_with_grad(m.data(), fixed.data(), fixed.dims(), true)?;
    let dm = dm.expect("gradient requested");
    let grid = fixed.grid();
    // ∂M/∂ω = g × (x − c), ∂M/∂v = −g·unit
    let grad = par_sum_vec::<6, _>(dm.len(), |idx, acc| {
        let d = dm[idx];
        if d == 0.0 {
            return;
        }
        let gi = g[idx];
        let w = gi.cross(&(grid.center_of(idx) - center)) * d;
        acc[0] += w.x;
        acc[1] += w.y;
        acc[2] += w.z;
        acc[3] -= d * gi.x * TRANS_UNIT_MM;
        acc[4] -= d * gi.y * TRANS_UNIT_MM;
        acc[5] -= d * gi.z * TRANS_UNIT_MM;
    });
    Ok((terms, Some(grad)))
}

/// `C·exp(δ)·C⁻¹·T` with the twist translation in units of 10 mm.
pub fn apply_twist(pose: &SE3Pose, delta: &[f64; 6], center: &Vec3) -> SE3Pose {
    let tw = Twist::new(
        Vec3::new(delta[0], delta[1], delta[2]),
        Vec3::new(delta[3], delta[4], delta[5]) * TRANS_UNIT_MM,
    );
    let c = SE3Pose::translation_only(*center);
    c.compose(&se3_exp(&tw)).compose(&c.inverse()).compose(pose)
}

/// Adam descent on the pose by left twists about the moving centroid. The
/// state persists across calls, so interleaved use continues one trajectory.
#[derive(Debug, Clone)]
pub struct PoseDescent {
    pose: SE3Pose,
    adam: AdamState,
    lr: f64,
    /// Intensity centroid of the moving volume in its own frame.
    centroid: Vec3,
}

impl PoseDescent {
    pub fn new(moving: &Volume, pose: SE3Pose, lr: f64) -> Self {
        Self {
            pose,
            adam: AdamState::new(6),
            lr,
            centroid: moving.centroid(),
        }
    }

    pub fn pose(&self) -> &SE3Pose {
        &self.pose
    }

    /// Evaluates the objective at the current pose and takes one step.
    /// Returns the pre-step terms.
    pub fn step(&mut self, moving: &Volume, fixed: &Volume) -> Result<RegTerms> {
        let center = self.pose.apply(&self.centroid);
        let (terms, grad) = pose_objective(moving, fixed, &self.pose, &center, true)?;
        let grad = grad.expect("gradient requested");
        if !terms.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged(format!(
                "pose objective {} with gradient {grad:?} at {:?}",
                terms.total,
                self.pose.to_json()
            )));
        }
        let mut delta = [0.0; 6];
        self.adam.step(&mut delta, &grad, self.lr)?;
        self.pose = apply_twist(&self.pose, &delta, &center);
        Ok(terms)
    }
}

fn check_variance(v: &Volume, name: &str) -> Result<()> {
    if !(v.max() > v.min()) {
        return Err(Error::input(format!("{name} has zero variance")));
    }
    Ok(())
}

fn pyramid(v: &Volume, levels: usize) -> Vec<Volume> {
    let mut out = vec![v.clone()];
    for _ in 1..levels {
        let next = out.last().expect("non-empty").downsample2();
        out.push(next);
    }
    out.reverse();
    out
}

fn full_objective(v_ct: &Volume, v_rec: &Volume, pose: &SE3Pose) -> Result<f64> {
    let c = pose.apply(&v_ct.centroid());
    Ok(pose_objective(v_ct, v_rec, pose, &c, false)?.0.total)
}

/// Runs one start through the pyramid.
fn run_start(pyr_ct: &[Volume], pyr_rec: &[Volume], init: SE3Pose, cfg: &RegConfig) -> StartResult {
    let mut pose = init;
    let mut trajectory = Vec::new();
    for (level, (ct, rec)) in pyr_ct.iter().zip(pyr_rec).enumerate() {
        let mut descent = PoseDescent::new(ct, pose, cfg.lr[level]);
        let mut hist = Vec::with_capacity(cfg.max_iters);
        let mut best = (f64::INFINITY, pose);
        for _ in 0..cfg.max_iters {
            let at = *descent.pose();
            let terms = match descent.step(ct, rec) {
                Ok(t) => t,
                Err(_) => {
                    trajectory.extend(hist);
                    return StartResult {
                        init,
                        pose: best.1,
                        objective: f64::INFINITY,
                        iters: trajectory.len(),
                        diverged: true,
                        trajectory,
                    };
                }
            };
            if terms.total < best.0 {
                best = (terms.total, at);
            }
            hist.push(terms.total);
            let n = hist.len();
            if n > cfg.conv_window {
                let old = hist[n - 1 - cfg.conv_window];
                if old - terms.total < cfg.conv_tol * old.abs().max(1e-12) {
                    break;
                }
            }
        }
        // the final pose was never evaluated; keep it only if it is better
        let last = *descent.pose();
        let last_obj = pose_objective(ct, rec, &last, &last.apply(&ct.centroid()), false)
            .map(|(t, _)| t.total)
            .unwrap_or(f64::INFINITY);
        pose = if last_obj < best.0 { last } else { best.1 };
        trajectory.extend(hist);
    }
    let objective =
        full_objective(&pyr_ct[pyr_ct.len() - 1], &pyr_rec[pyr_rec.len() - 1], &pose).unwrap_or(f64::INFINITY);
    StartResult {
        init,
        pose,
        objective,
        iters: trajectory.len(),
        diverged: !objective.is_finite(),
        trajectory,
    }
}

/// Start poses: `t_init` followed by perturbations about the moving
/// centroid.
pub fn start_poses(v_ct: &Volume, t_init: &SE3Pose, cfg: &RegConfig) -> Result<Vec<SE3Pose>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let c = SE3Pose::translation_only(t_init.apply(&v_ct.centroid()));
    let mut out = vec![*t_init];
    for _ in 1..cfg.n_starts {
        let p = sample_pose(
            &mut rng,
            (-cfg.start_rot_deg, cfg.start_rot_deg),
            (-cfg.start_trans_mm, cfg.start_trans_mm),
        )?;
        out.push(c.compose(&p).compose(&c.inverse()).compose(t_init));
    }
    Ok(out)
}

/// Finds `T̂` minimizing `NCC + (1 − SSIM)` between `v_ct` moved by `T̂` and
/// `v_rec`, by multi-start coarse-to-fine Adam on the twist.
pub fn register_volumes(
    v_ct: &Volume,
    v_rec: &Volume,
    cfg: &RegConfig,
    t_init: Option<&SE3Pose>,
) -> Result<RegistrationResult> {
    let t0 = Instant::now();
    cfg.validate()?;
    check_variance(v_ct, "reference volume")?;
    check_variance(v_rec, "reconstructed volume")?;
    let init = t_init.copied().unwrap_or_else(SE3Pose::identity);
    let starts = start_poses(v_ct, &init, cfg)?;
    let pyr_ct = pyramid(v_ct, cfg.levels);
    let pyr_rec = pyramid(v_rec, cfg.levels);
    let results: Vec<StartResult> = starts
        .into_par_iter()
        .map(|s| run_start(&pyr_ct, &pyr_rec, s, cfg))
        .collect();
    // objective first, then start order
    let best = results
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.diverged)
        .min_by(|a, b| a.1.objective.total_cmp(&b.1.objective).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i);
    let Some(best) = best else {
        let partial = results
            .iter()
            .map(|r| format!("start ended at {:?} after {} iters", r.pose.to_json(), r.iters))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::Diverged(format!("all registration starts diverged: {partial}")));
    };
    Ok(RegistrationResult {
        pose: results[best].pose,
        objective: results[best].objective,
        iters: results[best].iters,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        starts: results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JointConfig {
    pub rounds: usize,
    pub gaussian_steps: usize,
    pub pose_steps: usize,
    /// Adam rate of the Gaussian block (scaled per group as in
    /// reconstruction).
    pub gaussian_lr: f64,
    /// Adam rate of the pose block.
    pub pose_lr: f64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            gaussian_steps: 30,
            pose_steps: 30,
            gaussian_lr: 0.01,
            pose_lr: 0.01,
        }
    }
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gaussian_lr", self.gaussian_lr), ("pose_lr", self.pose_lr)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and > 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Total objective after a round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub rec: f64,
    pub reg: f64,
    pub total: f64,
    pub best: f64,
}

#[derive(Debug, Clone)]
pub struct JointOutput {
    pub set: GaussianSet,
    pub volume: Volume,
    pub head: Option<CalHead>,
    pub registration: RegistrationResult,
    /// Round 0 is the starting point.
    pub rounds: Vec<RoundRecord>,
    /// Pose after every pose step.
    pub pose_trajectory: Vec<SE3Pose>,
}

struct JointState<'a> {
    objective: Objective<'a>,
    recon: &'a ReconConfig,
    grid: Grid,
    head: Option<CalHead>,
    n_g: usize,
}

impl JointState<'_> {
    fn set_of(&self, params: &[f64]) -> Result<GaussianSet> {
        GaussianSet::from_params(&params[..self.n_g])
    }

    fn head_of(&self, params: &[f64]) -> Result<Option<CalHead>> {
        self.head
            .as_ref()
            .map(|h| {
                let mut h = h.clone();
                h.set_params(&params[self.n_g..])?;
                Ok(h)
            })
            .transpose()
    }

    /// `L_rec + L_reg` for fixed `moved = V_CT·T̂` and its gradient with
    /// respect to the Gaussian (and head) parameters.
    fn gaussian_eval(
        &self,
        params: &[f64],
        moved: &Volume,
        bars: &[Vec<f64>],
        want_grad: bool,
    ) -> Result<(f64, f64, Vec<f64>)> {
        let head = self.head_of(params)?;
        let eval = self.objective.evaluate(params, head.as_ref(), bars, want_grad)?;
        let set = self.set_of(params)?;
        let splats = set.splats();
        let v_rec = voxelize_splats(&splats, &self.grid, self.recon.tau);
        // both similarity terms are symmetric, so the gradient with respect
        // to the fixed volume comes from swapping the arguments
        let (reg, g_rec) = similarity_with_grad(&v_rec, moved.data(), self.grid.dims, want_grad)?;
        let mut grad = eval.grad;
        if let Some(g_rec) = g_rec {
            let sg = voxelize_backward(&splats, &self.grid, self.recon.tau, &g_rec);
            let mut gp = vec![0.0; self.n_g];
            chain_param_grads(&params[..self.n_g], &sg, &mut gp);
            for (a, b) in grad[..self.n_g].iter_mut().zip(&gp) {
                *a += b;
            }
        }
        Ok((eval.total, reg.total, grad))
    }
}

/// Alternating refinement of the Gaussians and the pose under
/// `L_reg + L_rec`. Returns the best-so-far state by total objective.
#[allow(clippy::too_many_arguments)]
pub fn joint_refine(
    set: &GaussianSet,
    head: Option<&CalHead>,
    v_ct: &Volume,
    meas: &Biplanar,
    t_init: &SE3Pose,
    recon: &ReconConfig,
    cfg: &JointConfig,
) -> Result<JointOutput> {
    let t0 = Instant::now();
    cfg.validate()?;
    check_variance(v_ct, "reference volume")?;
    if set.is_empty() {
        return Err(Error::input("Gaussian set is empty"));
    }
    let state = JointState {
        objective: Objective::new(recon, meas)?,
        recon,
        grid: recon.output_grid()?,
        head: head.cloned(),
        n_g: set.len() * PARAMS_PER_GAUSSIAN,
    };
    let mut params = set.to_params();
    if let Some(h) = head {
        params.extend_from_slice(h.params());
    }
    let scales = recon.lr_scales.expand(set.len(), params.len() - state.n_g);
    let mut g_adam = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(recon.seed ^ 0x0007_01e7);
    let mut descent = PoseDescent::new(v_ct, *t_init, cfg.pose_lr);
    let mut pose_trajectory = Vec::with_capacity(cfg.rounds * cfg.pose_steps);

    let totals = |params: &[f64], pose: &SE3Pose| -> Result<(f64, f64)> {
        let moved = v_ct.resample_rigid(pose, &state.grid);
        let (rec, reg, _) = state.gaussian_eval(params, &moved, &[], false)?;
        Ok((rec, reg))
    };
    let draw = |rng: &mut ChaCha8Rng| match &state.head {
        Some(h) => h.counterfactual_attention(rng, set.len()),
        None => Vec::new(),
    };
    // the effect channel is stochastic, so round totals use fixed draws
    let eval_bars = draw(&mut ChaCha8Rng::seed_from_u64(recon.seed ^ 0xe7a1));
    let totals_fixed = |params: &[f64], pose: &SE3Pose| -> Result<(f64, f64)> {
        if state.head.is_none() {
            return totals(params, pose);
        }
        let moved = v_ct.resample_rigid(pose, &state.grid);
        let (rec, reg, _) = state.gaussian_eval(params, &moved, &eval_bars, false)?;
        Ok((rec, reg))
    };

    let (rec0, reg0) = totals_fixed(&params, t_init)?;
    let mut best = (rec0 + reg0, params.clone(), *t_init);
    let mut rounds = vec![RoundRecord {
        round: 0,
        rec: rec0,
        reg: reg0,
        total: rec0 + reg0,
        best: rec0 + reg0,
    }];
    for round in 1..=cfg.rounds {
        let moved = v_ct.resample_rigid(descent.pose(), &state.grid);
        for _ in 0..cfg.gaussian_steps {
            let bars = draw(&mut rng);
            let (rec, reg, mut grad) = state.gaussian_eval(&params, &moved, &bars, true)?;
            if !(rec + reg).is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged(format!("joint round {round}: objective {}", rec + reg)));
            }
            clip_global_norm(&mut grad, CLIP_NORM);
            g_adam.step_scaled(&mut params, &grad, cfg.gaussian_lr, &scales)?;
            renormalize_quats(&mut params[..state.n_g]);
            clamp_log_scales(&mut params[..state.n_g]);
        }
        let v_rec = voxelize(&state.set_of(&params)?, &state.grid, recon.tau);
        for _ in 0..cfg.pose_steps {
            descent.step(v_ct, &v_rec)?;
            pose_trajectory.push(*descent.pose());
        }
        let (rec, reg) = totals_fixed(&params, descent.pose())?;
        let total = rec + reg;
        if total < best.0 {
            best = (total, params.clone(), *descent.pose());
        }
        rounds.push(RoundRecord {
            round,
            rec,
            reg,
            total,
            best: best.0,
        });
    }
    let (_, params, pose) = best;
    let out_set = state.set_of(&params)?;
    let out_head = state.head_of(&params)?;
    let volume = voxelize(&out_set, &state.grid, recon.tau);
    let objective = full_objective(v_ct, &volume, &pose)?;
    let iters = cfg.rounds * cfg.pose_steps;
    let registration = RegistrationResult {
        pose,
        objective,
        iters,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        starts: vec![StartResult {
            init: *t_init,
            pose,
            objective,
            iters,
            diverged: false,
            trajectory: rounds.iter().map(|r| r.reg).collect(),
        }],
    };
    Ok(JointOutput {
        set: out_set,
        volume,
        head: out_head,
        registration,
        rounds,
        pose_trajectory,
    })
}
