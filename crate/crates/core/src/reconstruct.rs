//! Per-scene fitting of a Gaussian set to a biplanar acquisition, optionally
//! with the counterfactual-attention effect channel.

use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cal::{CalHead, CalShape, Tokens, DEFAULT_K};
use crate::drr::Biplanar;
use crate::error::{Error, Result};
use crate::gaussians::{
    chain_param_grads, clamp_log_scales, rasterize_backward, rasterize_splats, renormalize_quats, voxelize,
    voxelize_backward, voxelize_splats, Gaussian, GaussianSet, RenderMode, Splat, SplatGrad, DEFAULT_TAU,
    PARAMS_PER_GAUSSIAN,
};
use crate::geometry::{CArmView, Vec3};
use crate::image::ProjImage;
use crate::losses::{image_term_with_grad, tv3d_with_grad, LossWeights, ReconTerms};
use crate::optim::{clip_global_norm, AdamState, LrSchedule, CLIP_NORM};
use crate::volume::{Grid, Volume};

/// Silhouette threshold relative to each image maximum.
pub const HULL_THRESHOLD: f64 = 0.05;
/// Cells per axis of the visual-hull occupancy grid.
const HULL_CELLS: usize = 48;
/// Token features per Gaussian for the effect channel.
pub const TOKEN_FEATURES: usize = 7;

/// Regular grid centered in the reconstruction box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub spacing_mm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalReconConfig {
    pub enabled: bool,
    pub hidden: usize,
    pub k: usize,
}

impl Default for CalReconConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            hidden: 16,
            k: DEFAULT_K,
        }
    }
}

/// Multipliers on the scheduled learning rate per parameter group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LrScales {
    pub density: f64,
    /// Positions are in mm.
    pub position: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub head: f64,
}

impl Default for LrScales {
    fn default() -> Self {
        Self {
            density: 0.03,
            position: 1.0,
            rotation: 0.01,
            log_scale: 0.01,
            head: 0.1,
        }
    }
}

impl LrScales {
    fn validate(&self) -> Result<()> {
        let all = [self.density, self.position, self.rotation, self.log_scale, self.head];
        if all.iter().all(|v| *v >= 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("lr_scales must be finite and ≥ 0".into()))
        }
    }

    /// Per-parameter multipliers for `n` Gaussians followed by `head` head
    /// parameters.
    pub fn expand(&self, n: usize, head: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n * PARAMS_PER_GAUSSIAN + head);
        for _ in 0..n {
            out.push(self.density);
            out.extend([self.position; 3]);
            out.extend([self.rotation; 4]);
            out.extend([self.log_scale; 3]);
        }
        out.extend(std::iter::repeat_n(self.head, head));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconConfig {
    pub n_gaussians: usize,
    pub box_min_mm: [f64; 3],
    pub box_max_mm: [f64; 3],
    pub schedule: LrSchedule,
    pub lr_scales: LrScales,
    pub weights: LossWeights,
    pub tau: f64,
    pub seed: u64,
    /// Output grid for `V_rec`.
    pub grid: GridSpec,
    /// Coarser grid on which the TV regularizer is evaluated each epoch.
    pub tv_grid: GridSpec,
    pub cal: CalReconConfig,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            n_gaussians: 4096,
            box_min_mm: [-30.0, -40.0, -30.0],
            box_max_mm: [30.0, 40.0, 30.0],
            schedule: LrSchedule::default(),
            lr_scales: LrScales::default(),
            weights: LossWeights::default(),
            tau: DEFAULT_TAU,
            seed: 0,
            grid: GridSpec {
                dims: [96, 96, 96],
                spacing_mm: 1.0,
            },
            tv_grid: GridSpec {
                dims: [32, 32, 32],
                spacing_mm: 2.5,
            },
            cal: CalReconConfig::default(),
        }
    }
}

impl ReconConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_gaussians == 0 {
            return Err(Error::Config("n_gaussians must be ≥ 1".into()));
        }
        for k in 0..3 {
            if !(self.box_max_mm[k] > self.box_min_mm[k])
                || !self.box_min_mm[k].is_finite()
                || !self.box_max_mm[k].is_finite()
            {
                return Err(Error::Config(format!(
                    "bounding box is degenerate on axis {k}: [{}, {}]",
                    self.box_min_mm[k], self.box_max_mm[k]
                )));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.cal.enabled && (self.cal.hidden == 0 || self.cal.k == 0) {
            return Err(Error::Config("cal.hidden and cal.k must be ≥ 1".into()));
        }
        self.schedule.validate()?;
        self.lr_scales.validate()?;
        self.weights.validate()?;
        self.output_grid()?;
        self.tv_grid()?;
        Ok(())
    }

    pub fn box_center(&self) -> Vec3 {
        Vec3::from_fn(|k, _| 0.5 * (self.box_min_mm[k] + self.box_max_mm[k]))
    }

    pub fn box_half(&self) -> Vec3 {
        Vec3::from_fn(|k, _| 0.5 * (self.box_max_mm[k] - self.box_min_mm[k]))
    }

    fn grid_of(&self, spec: &GridSpec) -> Result<Grid> {
        let c = self.box_center();
        let origin = Vec3::from_fn(|k, _| c[k] - 0.5 * (spec.dims[k] as f64 - 1.0) * spec.spacing_mm);
        Grid::new(spec.dims, Vec3::repeat(spec.spacing_mm), origin).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn output_grid(&self) -> Result<Grid> {
        self.grid_of(&self.grid)
    }

    pub fn tv_grid(&self) -> Result<Grid> {
        self.grid_of(&self.tv_grid)
    }
}

/// Objective components of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub rec: ReconTerms,
    /// Effect-channel terms when the CAL channel is on.
    pub effect: Option<ReconTerms>,
    pub total: f64,
    /// Best total seen up to and including this epoch.
    pub best: f64,
}

#[derive(Debug, Clone)]
pub struct ReconOutput {
    pub set: GaussianSet,
    pub volume: Volume,
    pub history: Vec<EpochRecord>,
    pub head: Option<CalHead>,
}

/// Writes the per-epoch loss history as CSV.
pub fn write_history_csv(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("epoch,l1_ap,l1_la,ssim_ap,ssim_la,tv,total\n");
    for r in history {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.rec.l1[0], r.rec.l1[1], r.rec.ssim[0], r.rec.ssim[1], r.rec.tv, r.total
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Occupancy of the visual hull on a coarse grid spanning the box, or `None`
/// when either silhouette is empty.
fn hull_cells(cfg: &ReconConfig, meas: &Biplanar) -> Option<Vec<usize>> {
    let views = meas.views();
    let images = meas.images();
    if images.iter().any(|im| !(im.max() > 0.0)) {
        return None;
    }
    let fans = [views[0].fan(), views[1].fan()];
    let cell = Vec3::from_fn(|k, _| (cfg.box_max_mm[k] - cfg.box_min_mm[k]) / HULL_CELLS as f64);
    let inside = |im: &ProjImage, fan: &crate::geometry::RayFan, x: &Vec3| -> bool {
        let Some((u, v)) = fan.project_gantry(&fan.to_gantry(x)) else {
            return false;
        };
        let (u, v) = (u.round(), v.round());
        if u < 0.0 || v < 0.0 || u >= im.width() as f64 || v >= im.height() as f64 {
            return false;
        }
        im.get(u as usize, v as usize) > HULL_THRESHOLD * im.max()
    };
    let n = HULL_CELLS;
    let cells: Vec<usize> = (0..n * n * n)
        .filter(|&idx| {
            let (i, j, k) = (idx % n, (idx / n) % n, idx / (n * n));
            let x = Vec3::new(
                cfg.box_min_mm[0] + (i as f64 + 0.5) * cell.x,
                cfg.box_min_mm[1] + (j as f64 + 0.5) * cell.y,
                cfg.box_min_mm[2] + (k as f64 + 0.5) * cell.z,
            );
            inside(images[0], &fans[0], &x) && inside(images[1], &fans[1], &x)
        })
        .collect();
    (!cells.is_empty()).then_some(cells)
}

/// Positions uniform in the visual hull of the thresholded silhouettes (the
/// full box when the hull is empty), isotropic scales of
/// `diag / (2 n^{1/3})`, and a common density chosen so that the AP
/// rendering mean matches the measured mean.
pub fn init_gaussians(cfg: &ReconConfig, meas: &Biplanar) -> Result<GaussianSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n_gaussians;
    let lo = Vec3::from(cfg.box_min_mm);
    let extent = Vec3::from(cfg.box_max_mm) - lo;
    let cell = extent / HULL_CELLS as f64;
    let hull = hull_cells(cfg, meas);
    let positions: Vec<Vec3> = (0..n)
        .map(|_| {
            let jitter = Vec3::from_fn(|_, _| rng.random::<f64>());
            match &hull {
                Some(cells) => {
                    let idx = cells[rng.random_range(0..cells.len())];
                    let c = Vec3::new(
                        (idx % HULL_CELLS) as f64,
                        ((idx / HULL_CELLS) % HULL_CELLS) as f64,
                        (idx / (HULL_CELLS * HULL_CELLS)) as f64,
                    );
                    lo + (c + jitter).component_mul(&cell)
                }
                None => lo + jitter.component_mul(&extent),
            }
        })
        .collect();
    let scale = extent.norm() / (2.0 * (n as f64).cbrt());
    let unit = GaussianSet::new(positions.iter().map(|p| Gaussian::isotropic(1.0, *p, scale)).collect())?;
    let rendered = rasterize_splats(&unit.splats(), &meas.view_ap, cfg.tau, RenderMode::Tiled).mean();
    let measured = meas.ap.mean();
    let rho = if rendered > 0.0 && measured > 0.0 {
        measured / rendered
    } else {
        1e-6
    };
    GaussianSet::new(
        positions
            .into_iter()
            .map(|p| Gaussian::isotropic(rho, p, scale))
            .collect(),
    )
}

/// Detached per-Gaussian tokens `[ρ, normalized position, log-scales]`.
pub fn gaussian_tokens(set: &GaussianSet, cfg: &ReconConfig) -> Result<Tokens> {
    let c = cfg.box_center();
    let h = cfg.box_half();
    let mut data = Vec::with_capacity(set.len() * TOKEN_FEATURES);
    for g in set.iter() {
        data.push(g.rho);
        data.extend((0..3).map(|k| (g.position[k] - c[k]) / h[k]));
        data.extend_from_slice(g.log_scale.as_slice());
    }
    Tokens::new(set.len(), TOKEN_FEATURES, data)
}

/// Objective evaluation for a flat parameter vector `[gaussians, head]`.
pub struct Objective<'a> {
    cfg: &'a ReconConfig,
    meas: &'a Biplanar,
    tv_grid: Grid,
    head_shape: Option<CalShape>,
}

/// Objective value, its components, and the gradient.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub rec: ReconTerms,
    pub effect: Option<ReconTerms>,
    pub total: f64,
    pub grad: Vec<f64>,
}

impl<'a> Objective<'a> {
    pub fn new(cfg: &'a ReconConfig, meas: &'a Biplanar) -> Result<Self> {
        cfg.validate()?;
        let head_shape = cfg.cal.enabled.then_some(CalShape {
            features: TOKEN_FEATURES,
            hidden: cfg.cal.hidden,
            outputs: 1,
            k: cfg.cal.k,
        });
        Ok(Self {
            cfg,
            meas,
            tv_grid: cfg.tv_grid()?,
            head_shape,
        })
    }

    /// Image and TV terms for splats with densities as given, accumulating
    /// per-splat gradients into `grads`.
    fn channel(&self, splats: &[Splat], grads: Option<&mut [SplatGrad]>) -> Result<ReconTerms> {
        let w = &self.cfg.weights;
        let tau = self.cfg.tau;
        let mut l1 = [0.0; 2];
        let mut ssim = [0.0; 2];
        let mut per_view = Vec::with_capacity(2);
        for (k, (view, meas)) in self.meas.views().into_iter().zip(self.meas.images()).enumerate() {
            let pred = rasterize_splats(splats, view, tau, RenderMode::Tiled);
            let (a, s, g) = image_term_with_grad(&pred, meas, w.lambda1)?;
            l1[k] = a;
            ssim[k] = s;
            per_view.push((view, g));
        }
        let vol = voxelize_splats(splats, &self.tv_grid, tau);
        let (tv, g_vol) = tv3d_with_grad(&vol, self.tv_grid.dims, grads.is_some());
        if let Some(grads) = grads {
            for (view, g) in per_view {
                let scaled: Vec<f64> = g.iter().map(|v| 0.5 * v).collect();
                add_grads(grads, &rasterize_backward(splats, view, tau, &scaled));
            }
            let scaled: Vec<f64> = g_vol.iter().map(|v| w.lambda2 * v).collect();
            add_grads(grads, &voxelize_backward(splats, &self.tv_grid, tau, &scaled));
        }
        Ok(ReconTerms::assemble(l1, ssim, tv, w))
    }

    pub fn param_len(&self, n_gaussians: usize) -> usize {
        n_gaussians * PARAMS_PER_GAUSSIAN + self.head_shape.map_or(0, |s| CalHead::param_count(&s))
    }

    /// Evaluates the objective. `bars` are the counterfactual attention maps
    /// (used only with the CAL channel on).
    pub fn evaluate(
        &self,
        params: &[f64],
        head: Option<&CalHead>,
        bars: &[Vec<f64>],
        want_grad: bool,
    ) -> Result<Evaluation> {
        self.evaluate_with_tokens(params, head, bars, None, want_grad)
    }

    /// As [`Objective::evaluate`], optionally with the effect-channel tokens
    /// held fixed instead of derived from `params`.
    pub fn evaluate_with_tokens(
        &self,
        params: &[f64],
        head: Option<&CalHead>,
        bars: &[Vec<f64>],
        tokens: Option<&Tokens>,
        want_grad: bool,
    ) -> Result<Evaluation> {
        let n_head = head.map_or(0, |h| h.params().len());
        let n_g = params
            .len()
            .checked_sub(n_head)
            .ok_or_else(|| Error::input("parameter vector too short"))?;
        let gp = &params[..n_g];
        let set = GaussianSet::from_params(gp)?;
        let splats = set.splats();
        let mut sg = want_grad.then(|| vec![SplatGrad::default(); set.len()]);
        let rec = self.channel(&splats, sg.as_deref_mut())?;
        let mut grad = vec![0.0; if want_grad { params.len() } else { 0 }];
        let mut effect = None;
        if let Some(head) = head {
            let mut head = head.clone();
            head.set_params(&params[n_g..])?;
            let (terms, eg, hg) = self.effect_channel(&set, &head, bars, tokens, want_grad)?;
            if let (Some(sg), Some(eg)) = (sg.as_mut(), eg) {
                add_grads(sg, &eg);
                grad[n_g..].copy_from_slice(&hg);
            }
            effect = Some(terms);
        }
        if let Some(sg) = &sg {
            chain_param_grads(gp, sg, &mut grad[..n_g]);
        }
        let total = rec.total + effect.map_or(0.0, |e| e.total);
        Ok(Evaluation {
            rec,
            effect,
            total,
            grad,
        })
    }

    /// Effect channel: densities `ρ_i · N · (A_i s_f − mean_k Ā_ki s_k)` with
    /// gains `s = exp(Y(pool))`. Returns its terms, the per-splat gradient
    /// (density component already chained to `ρ_i`) and the head gradient.
    fn effect_channel(
        &self,
        set: &GaussianSet,
        head: &CalHead,
        bars: &[Vec<f64>],
        tokens: Option<&Tokens>,
        want_grad: bool,
    ) -> Result<(ReconTerms, Option<Vec<SplatGrad>>, Vec<f64>)> {
        let n = set.len();
        let nf = n as f64;
        let x = match tokens {
            Some(t) => t.clone(),
            None => gaussian_tokens(set, self.cfg)?,
        };
        let attn = head.attention(&x)?;
        let fact = head.mlp(&x.pool(&attn));
        let s_f = fact.y[0].exp();
        let cfs: Vec<_> = bars.iter().map(|b| head.mlp(&x.pool(b))).collect();
        let s_k: Vec<f64> = cfs.iter().map(|c| c.y[0].exp()).collect();
        let kf = bars.len().max(1) as f64;
        let coef: Vec<f64> = (0..n)
            .map(|i| {
                let cf: f64 = bars.iter().zip(&s_k).map(|(b, s)| b[i] * s).sum::<f64>() / kf;
                nf * (attn[i] * s_f - cf)
            })
            .collect();
        let rho: Vec<f64> = set.iter().zip(&coef).map(|(g, c)| g.rho * c).collect();
        let splats = set.splats_with_densities(&rho);
        let mut eg = want_grad.then(|| vec![SplatGrad::default(); n]);
        let terms = self.channel(&splats, eg.as_deref_mut())?;
        let mut hg = vec![0.0; head.params().len()];
        if let Some(eg) = eg.as_mut() {
            let dcoef: Vec<f64> = eg.iter().zip(set.iter()).map(|(g, gs)| g.rho * gs.rho).collect();
            for (g, c) in eg.iter_mut().zip(&coef) {
                g.rho *= c;
            }
            let ds_f: f64 = nf * attn.iter().zip(&dcoef).map(|(a, d)| a * d).sum::<f64>();
            let mut d_attn: Vec<f64> = dcoef.iter().map(|d| nf * s_f * d).collect();
            let dz = head.mlp_backward(&fact, &[s_f * ds_f], &mut hg);
            for (t, da) in d_attn.iter_mut().enumerate() {
                *da += dz.iter().zip(x.row(t)).map(|(a, b)| a * b).sum::<f64>();
            }
            head.attention_backward(&x, &attn, &d_attn, &mut hg);
            for ((bar, cache), s) in bars.iter().zip(&cfs).zip(&s_k) {
                let ds: f64 = -nf / kf * bar.iter().zip(&dcoef).map(|(b, d)| b * d).sum::<f64>();
                head.mlp_backward(cache, &[s * ds], &mut hg);
            }
        }
        Ok((terms, eg, hg))
    }
}

fn add_grads(acc: &mut [SplatGrad], g: &[SplatGrad]) {
    for (a, b) in acc.iter_mut().zip(g) {
        a.add(b);
    }
}

/// Visual-hull initialization followed by [`reconstruct_from`].
pub fn reconstruct_scene(cfg: &ReconConfig, meas: &Biplanar) -> Result<ReconOutput> {
    let init = init_gaussians(cfg, meas)?;
    reconstruct_from(cfg, meas, &init)
}

/// Same as [`reconstruct_scene`]; the effect channel is used when
/// `cfg.cal.enabled` is set.
pub fn reconstruct_scene_cal(cfg: &ReconConfig, meas: &Biplanar) -> Result<ReconOutput> {
    reconstruct_scene(cfg, meas)
}

/// Adam on the flattened parameters from a given initial set. Returns the
/// best-so-far set, its voxelization on the output grid, and the history.
pub fn reconstruct_from(cfg: &ReconConfig, meas: &Biplanar, init: &GaussianSet) -> Result<ReconOutput> {
    if init.is_empty() {
        return Err(Error::input("initial Gaussian set is empty"));
    }
    let objective = Objective::new(cfg, meas)?;
    let mut head = match objective.head_shape {
        Some(shape) => Some(CalHead::new(shape, cfg.seed)?),
        None => None,
    };
    let n_g = init.len() * PARAMS_PER_GAUSSIAN;
    let mut params = init.to_params();
    if let Some(h) = &head {
        params.extend_from_slice(h.params());
    }
    let mut adam = AdamState::new(params.len());
    let scales = cfg.lr_scales.expand(init.len(), params.len() - n_g);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x05ee_dca1);
    let mut best = (f64::INFINITY, params.clone());
    let mut history = Vec::with_capacity(cfg.schedule.max_epochs);
    for epoch in 0..cfg.schedule.max_epochs {
        let lr = cfg.schedule.lr(epoch);
        let bars = match &head {
            Some(h) => h.counterfactual_attention(&mut rng, init.len()),
            None => Vec::new(),
        };
        let eval = objective.evaluate(&params, head.as_ref(), &bars, true)?;
        if !eval.total.is_finite() || eval.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged(state_dump(epoch, lr, &eval, &params)));
        }
        if eval.total < best.0 {
            best = (eval.total, params.clone());
        }
        history.push(EpochRecord {
            epoch,
            rec: eval.rec,
            effect: eval.effect,
            total: eval.total,
            best: best.0,
        });
        let mut grad = eval.grad;
        clip_global_norm(&mut grad, CLIP_NORM);
        adam.step_scaled(&mut params, &grad, lr, &scales)?;
        renormalize_quats(&mut params[..n_g]);
        clamp_log_scales(&mut params[..n_g]);
    }
    let final_params = if history.is_empty() { params } else { best.1 };
    let set = GaussianSet::from_params(&final_params[..n_g])?;
    if let Some(h) = head.as_mut() {
        h.set_params(&final_params[n_g..])?;
    }
    let volume = voxelize(&set, &cfg.output_grid()?, cfg.tau);
    Ok(ReconOutput {
        set,
        volume,
        history,
        head,
    })
}

fn state_dump(epoch: usize, lr: f64, eval: &Evaluation, params: &[f64]) -> String {
    let finite = |v: &[f64]| v.iter().filter(|x| x.is_finite()).count();
    let (lo, hi) = params
        .iter()
        .filter(|x| x.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    format!(
        "epoch {epoch}, lr {lr}, total {}, l1 {:?}, ssim {:?}, tv {}, finite params {}/{} in [{lo}, {hi}], finite grads {}/{}",
        eval.total,
        eval.rec.l1,
        eval.rec.ssim,
        eval.rec.tv,
        finite(params),
        params.len(),
        finite(&eval.grad),
        eval.grad.len()
    )
}

/// Rasterizes a set into both views of an acquisition (test and pipeline
/// helper for exactly representable measurements).
pub fn render_biplanar(set: &GaussianSet, view_ap: &CArmView, view_la: &CArmView, tau: f64) -> Biplanar {
    let splats = set.splats();
    Biplanar {
        ap: rasterize_splats(&splats, view_ap, tau, RenderMode::Tiled),
        la: rasterize_splats(&splats, view_la, tau, RenderMode::Tiled),
        view_ap: *view_ap,
        view_la: *view_la,
    }
}
