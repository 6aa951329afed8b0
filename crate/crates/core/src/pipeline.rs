//! End-to-end orchestration: phantom, biplanar DRRs, reconstruction,
//! registration, optional joint refinement and evaluation. Stages exchange
//! data only through files in the output directory.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cal::CalHead;
use crate::drr::{biplanar_views, render_drr, Biplanar};
use crate::error::{Error, Result};
use crate::gaussians::{voxelize, GaussianSet, DEFAULT_TAU};
use crate::geometry::{sample_pose, se3_exp, se3_log, CArmView, PoseJson, SE3Pose, Twist};
use crate::image::ProjImage;
use crate::losses::{reg_loss, LossWeights};
use crate::metrics::{
    mtre, psnr, summarize, write_trials_csv, TargetPoints, TrialRecord, TrialSummary, CR_BIN_MM, CR_MIN_TRIALS,
    SUCCESS_MM,
};
use crate::phantom::{make_phantom, PhantomKind};
use crate::reconstruct::{reconstruct_scene, render_biplanar, write_history_csv, GridSpec, ReconConfig};
use crate::register::{joint_refine, register_volumes, JointConfig, RegConfig};
use crate::volume::{read_json, write_json, Grid, Volume};

pub const MANIFEST: &str = "run_manifest.json";

/// Detector and source geometry shared by both views.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub width: usize,
    pub height: usize,
    pub pitch_mm: f64,
    pub sdd_mm: f64,
    pub sad_mm: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            pitch_mm: 0.8,
            sdd_mm: 1124.0,
            sad_mm: 700.0,
        }
    }
}

impl DetectorConfig {
    pub fn base_view(&self) -> Result<CArmView> {
        CArmView::new(
            self.sdd_mm,
            self.sad_mm,
            (self.width, self.height),
            self.pitch_mm,
            SE3Pose::identity(),
        )
        .map_err(|e| Error::Config(e.to_string()))
    }
}

/// Capture-range sweep settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub phantom: PhantomKind,
    pub grid: GridSpec,
    pub trials_per_bin: usize,
    /// Initial mTRE bins cover `[0, max_mm)`.
    pub max_mm: f64,
    pub register: RegConfig,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomKind::Gauss16,
            grid: GridSpec {
                dims: [20, 24, 20],
                spacing_mm: 4.0,
            },
            trials_per_bin: 20,
            max_mm: 30.0,
            register: RegConfig::default(),
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials_per_bin < CR_MIN_TRIALS {
            return Err(Error::Config(format!(
                "trials_per_bin must be ≥ {CR_MIN_TRIALS}, got {}",
                self.trials_per_bin
            )));
        }
        if !(self.max_mm >= 0.0) || !self.max_mm.is_finite() {
            return Err(Error::Config(format!(
                "max_mm must be finite and ≥ 0, got {}",
                self.max_mm
            )));
        }
        spec_grid(&self.grid)?;
        self.register.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub phantom: PhantomKind,
    /// Grid of the phantom and of the reference volume.
    pub phantom_grid: GridSpec,
    pub detector: DetectorConfig,
    /// Uniform per-axis perturbation of the AP and LA views, degrees.
    pub view_perturb_deg: f64,
    /// Ranges of the ground-truth reference-to-intraoperative pose.
    pub pose_rot_deg: f64,
    pub pose_trans_mm: f64,
    /// Skip reconstruction and use the reference volume moved by the
    /// ground-truth pose as `V_rec`.
    pub registration_only: bool,
    pub joint: bool,
    pub recon: ReconConfig,
    pub register: RegConfig,
    pub joint_refine: JointConfig,
    pub sweep: SweepConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            phantom: PhantomKind::VertebraLike,
            phantom_grid: GridSpec {
                dims: [96, 96, 96],
                spacing_mm: 1.0,
            },
            detector: DetectorConfig::default(),
            view_perturb_deg: 15.0,
            pose_rot_deg: 10.0,
            pose_trans_mm: 10.0,
            registration_only: false,
            joint: false,
            recon: ReconConfig::default(),
            register: RegConfig::default(),
            joint_refine: JointConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&s).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Sets the pipeline seed and every stage seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.recon.seed = seed;
        self.register.seed = seed;
        self.sweep.seed = seed;
        self.sweep.register.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        spec_grid(&self.phantom_grid)?;
        self.detector.base_view()?;
        for (name, v) in [
            ("view_perturb_deg", self.view_perturb_deg),
            ("pose_rot_deg", self.pose_rot_deg),
            ("pose_trans_mm", self.pose_trans_mm),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        self.recon.validate()?;
        self.register.validate()?;
        self.joint_refine.validate()?;
        self.sweep.validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    fn phantom_grid(&self) -> Result<Grid> {
        spec_grid(&self.phantom_grid)
    }
}

fn spec_grid(spec: &GridSpec) -> Result<Grid> {
    Grid::centered(spec.dims, spec.spacing_mm).map_err(|e| Error::Config(e.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Phantom,
    Drr,
    Reconstruct,
    Register,
    Joint,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Phantom,
        Stage::Drr,
        Stage::Reconstruct,
        Stage::Register,
        Stage::Joint,
        Stage::Eval,
    ];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Phantom => "phantom",
            Stage::Drr => "drr",
            Stage::Reconstruct => "reconstruct",
            Stage::Register => "register",
            Stage::Joint => "joint",
            Stage::Eval => "eval",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.to_string() == s)
            .ok_or_else(|| Error::input(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ViewsFile {
    ap: CArmView,
    la: CArmView,
}

/// Evaluation output of the `eval` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub init_mtre_mm: f64,
    pub mtre_mm: f64,
    pub success: bool,
    pub joint_mtre_mm: Option<f64>,
    pub rotation_error_deg: f64,
    pub translation_error_mm: f64,
    pub ncc_loss: f64,
    pub ssim: f64,
    pub geodesic: Option<f64>,
    pub reg_total: f64,
    /// PSNR of `V_rec` against the ground-truth volume on the output grid.
    pub psnr_db: f64,
}

fn path(out: &Path, name: &str) -> PathBuf {
    out.join(name)
}

fn read_pose(p: &Path) -> Result<SE3Pose> {
    SE3Pose::try_from(read_json::<PoseJson>(p)?)
}

fn read_biplanar(out: &Path) -> Result<Biplanar> {
    let views: ViewsFile = read_json(&path(out, "views.json"))?;
    Ok(Biplanar {
        ap: ProjImage::read(path(out, "drr_ap"))?,
        la: ProjImage::read(path(out, "drr_la"))?,
        view_ap: views.ap,
        view_la: views.la,
    })
}

/// Writes the reference volume, the intraoperative ground truth and the
/// ground-truth pose. The phantom is generated in the intraoperative frame;
/// the reference volume is it moved by the inverse pose.
pub fn stage_phantom(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let grid = cfg.phantom_grid()?;
    let ph = make_phantom(cfg.phantom, cfg.seed, &grid)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9053);
    let t_gt = sample_pose(
        &mut rng,
        (-cfg.pose_rot_deg, cfg.pose_rot_deg),
        (-cfg.pose_trans_mm, cfg.pose_trans_mm),
    )?;
    let v_ct = match &ph.set {
        Some(set) => voxelize(&set.transform(&t_gt.inverse()), &grid, DEFAULT_TAU),
        None => ph.volume.resample_rigid(&t_gt.inverse(), &grid),
    };
    v_ct.write(path(out, "ct"))?;
    ph.volume.write(path(out, "phantom"))?;
    if let Some(set) = &ph.set {
        set.write(path(out, "phantom_set"))?;
    }
    write_json(&path(out, "t_gt.json"), &t_gt.to_json())
}

/// Renders the AP and LA acquisitions of the intraoperative phantom; the
/// Gaussian set is rasterized when present, the voxel volume ray-marched
/// otherwise.
pub fn stage_drr(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let base = cfg.detector.base_view()?;
    let (view_ap, view_la) = biplanar_views(&base, cfg.view_perturb_deg, cfg.seed ^ 0xd22)?;
    let set_path = path(out, "phantom_set.json");
    let bi = if set_path.exists() {
        render_biplanar(&GaussianSet::read(&set_path)?, &view_ap, &view_la, DEFAULT_TAU)
    } else {
        let v = Volume::read(path(out, "phantom"))?;
        Biplanar {
            ap: render_drr(&v, &view_ap),
            la: render_drr(&v, &view_la),
            view_ap,
            view_la,
        }
    };
    bi.ap.write(path(out, "drr_ap"))?;
    bi.la.write(path(out, "drr_la"))?;
    write_json(
        &path(out, "views.json"),
        &ViewsFile {
            ap: bi.view_ap,
            la: bi.view_la,
        },
    )
}

pub fn stage_reconstruct(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    if cfg.registration_only {
        let v_ct = Volume::read(path(out, "ct"))?;
        let t_gt = read_pose(&path(out, "t_gt.json"))?;
        return v_ct
            .resample_rigid(&t_gt, &cfg.recon.output_grid()?)
            .write(path(out, "v_rec"));
    }
    let meas = read_biplanar(out)?;
    let rec = reconstruct_scene(&cfg.recon, &meas)?;
    rec.set.write(path(out, "recon_set"))?;
    rec.volume.write(path(out, "v_rec"))?;
    if let Some(head) = &rec.head {
        head.write(path(out, "cal_head"))?;
    }
    write_history_csv(path(out, "recon_history.csv"), &rec.history)
}

pub fn stage_register(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    let v_ct = Volume::read(path(out, "ct"))?;
    let v_rec = Volume::read(path(out, "v_rec"))?;
    let r = register_volumes(&v_ct, &v_rec, &cfg.register, None)?;
    r.write(path(out, "registration.json"))?;
    write_json(&path(out, "pose.json"), &r.pose.to_json())
}

pub fn stage_joint(cfg: &PipelineConfig, out: &Path) -> Result<()> {
    if cfg.registration_only {
        return Err(Error::Config(
            "joint refinement needs a reconstruction (registration_only is set)".into(),
        ));
    }
    let set = GaussianSet::read(path(out, "recon_set"))?;
    let head_path = path(out, "cal_head.json");
    let head = if head_path.exists() {
        Some(CalHead::read(&head_path)?)
    } else {
        None
    };
    let v_ct = Volume::read(path(out, "ct"))?;
    let meas = read_biplanar(out)?;
    let pose = read_pose(&path(out, "pose.json"))?;
    let j = joint_refine(&set, head.as_ref(), &v_ct, &meas, &pose, &cfg.recon, &cfg.joint_refine)?;
    j.set.write(path(out, "joint_set"))?;
    j.volume.write(path(out, "v_joint"))?;
    write_json(&path(out, "joint_pose.json"), &j.registration.pose.to_json())?;
    let mut csv = String::from("round,rec,reg,total,best\n");
    for r in &j.rounds {
        csv.push_str(&format!(
            "{},{:.9},{:.9},{:.9},{:.9}\n",
            r.round, r.rec, r.reg, r.total, r.best
        ));
    }
    let p = path(out, "joint_rounds.csv");
    fs::write(&p, csv).map_err(|e| Error::io(&p, e))
}

pub fn stage_eval(cfg: &PipelineConfig, out: &Path) -> Result<EvalReport> {
    let v_ct = Volume::read(path(out, "ct"))?;
    let v_rec = Volume::read(path(out, "v_rec"))?;
    let t_gt = read_pose(&path(out, "t_gt.json"))?;
    let pose = read_pose(&path(out, "pose.json"))?;
    let joint_path = path(out, "joint_pose.json");
    let joint_pose = if cfg.joint && joint_path.exists() {
        Some(read_pose(&joint_path)?)
    } else {
        None
    };
    let pts = TargetPoints::for_volume(&v_ct);
    let weights = LossWeights {
        lambda_geo: cfg.register.lambda_geo,
        ..cfg.recon.weights
    };
    let terms = reg_loss(&v_ct, &pose, &v_rec, Some(&t_gt), &weights)?;
    let truth = Volume::read(path(out, "phantom"))?.resample_rigid(&SE3Pose::identity(), v_rec.grid());
    let err = t_gt.inverse().compose(&pose);
    let m = mtre(&t_gt, &pose, &pts);
    let report = EvalReport {
        init_mtre_mm: mtre(&t_gt, &SE3Pose::identity(), &pts),
        mtre_mm: m,
        success: m < SUCCESS_MM,
        joint_mtre_mm: joint_pose.map(|p| mtre(&t_gt, &p, &pts)),
        rotation_error_deg: err.rotation_angle().to_degrees(),
        translation_error_mm: (pose.translation() - t_gt.translation()).norm(),
        ncc_loss: terms.ncc,
        ssim: terms.ssim,
        geodesic: terms.geodesic,
        reg_total: terms.total,
        psnr_db: psnr(truth.data(), v_rec.data(), None)?,
    };
    write_json(&path(out, "metrics.json"), &report)?;
    Ok(report)
}

pub fn run_stage(stage: Stage, cfg: &PipelineConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match stage {
        Stage::Phantom => stage_phantom(cfg, out),
        Stage::Drr => stage_drr(cfg, out),
        Stage::Reconstruct => stage_reconstruct(cfg, out),
        Stage::Register => stage_register(cfg, out),
        Stage::Joint => stage_joint(cfg, out),
        Stage::Eval => stage_eval(cfg, out).map(|_| ()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// `ok`, `failed` or `skipped`.
    pub status: String,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileRecord {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub pipeline: u64,
    pub reconstruct: u64,
    pub register: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config_sha256: String,
    pub seeds: Seeds,
    pub stages: Vec<StageRecord>,
    pub failed_stage: Option<String>,
    pub error: Option<String>,
    pub metrics: Option<EvalReport>,
    pub files: Vec<FileRecord>,
}

fn hash_files(out: &Path) -> Result<Vec<FileRecord>> {
    let mut names: Vec<String> = fs::read_dir(out)
        .map_err(|e| Error::io(out, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n != MANIFEST)
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|name| {
            let p = out.join(&name);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            Ok(FileRecord {
                path: name,
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            })
        })
        .collect()
}

/// Runs every stage in order and writes the manifest, also on failure.
/// Returns the manifest, or the first stage error.
pub fn run_pipeline(cfg: &PipelineConfig, out: &Path) -> Result<RunManifest> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config_sha256: cfg.hash(),
        seeds: Seeds {
            pipeline: cfg.seed,
            reconstruct: cfg.recon.seed,
            register: cfg.register.seed,
        },
        stages: Vec::new(),
        failed_stage: None,
        error: None,
        metrics: None,
        files: Vec::new(),
    };
    let mut failure = None;
    for stage in Stage::ALL {
        if failure.is_some() || (stage == Stage::Joint && !cfg.joint) {
            manifest.stages.push(StageRecord {
                name: stage.to_string(),
                status: "skipped".into(),
                wall_ms: 0.0,
            });
            continue;
        }
        let t0 = Instant::now();
        let res = if stage == Stage::Eval {
            stage_eval(cfg, out).map(|r| manifest.metrics = Some(r))
        } else {
            run_stage(stage, cfg, out)
        };
        let ok = res.is_ok();
        manifest.stages.push(StageRecord {
            name: stage.to_string(),
            status: if ok { "ok" } else { "failed" }.into(),
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        if let Err(e) = res {
            manifest.failed_stage = Some(stage.to_string());
            manifest.error = Some(e.to_string());
            failure = Some(e);
        }
    }
    manifest.files = hash_files(out)?;
    write_json(&out.join(MANIFEST), &manifest)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(manifest),
    }
}

/// Re-hashes the files listed in the manifest; returns the names of those
/// that are missing or whose content changed.
pub fn verify_manifest(out: &Path) -> Result<Vec<String>> {
    let manifest: RunManifest = read_json(&out.join(MANIFEST))?;
    let mut bad = Vec::new();
    for f in &manifest.files {
        let p = out.join(&f.path);
        match fs::read(&p) {
            Ok(bytes) if sha256_hex(&bytes) == f.sha256 => {}
            _ => bad.push(f.path.clone()),
        }
    }
    Ok(bad)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub trials: Vec<TrialRecord>,
    pub summary: Option<TrialSummary>,
    pub capture_range: String,
    pub warning: Option<String>,
}

/// Pose about `center` along the twist `xi` scaled so that its mTRE over
/// `pts` equals `target` (bisection; mTRE grows with the scale).
fn pose_at_mtre(xi: &Twist, center: &crate::geometry::Vec3, pts: &TargetPoints, target: f64) -> SE3Pose {
    let c = SE3Pose::translation_only(*center);
    let at = |s: f64| {
        let tw = Twist::new(xi.omega * s, xi.v * s);
        c.compose(&se3_exp(&tw)).compose(&c.inverse())
    };
    let id = SE3Pose::identity();
    let mut hi = 1.0;
    while mtre(&at(hi), &id, pts) < target && hi < 1e3 {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if mtre(&at(mid), &id, pts) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    at(0.5 * (lo + hi))
}

/// Registration trials stratified over 5 mm initial-mTRE bins up to
/// `max_mm`. Each trial moves the phantom by a pose whose initial mTRE is
/// drawn uniformly inside its bin and registers from the identity.
pub fn sweep_cr(cfg: &SweepConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let grid = spec_grid(&cfg.grid)?;
    let v_ct = make_phantom(cfg.phantom, cfg.seed, &grid)?.volume;
    let pts = TargetPoints::for_volume(&v_ct);
    let centroid = v_ct.centroid();
    let n_bins = (cfg.max_mm / CR_BIN_MM).floor() as usize;
    let mut trials = Vec::with_capacity(n_bins * cfg.trials_per_bin);
    for bin in 0..n_bins {
        for i in 0..cfg.trials_per_bin {
            let trial_id = bin * cfg.trials_per_bin + i;
            let seed = cfg.seed.wrapping_mul(0x9e37_79b9).wrapping_add(trial_id as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dir = se3_log(&sample_pose(&mut rng, (-10.0, 10.0), (-20.0, 20.0))?);
            let lo = bin as f64 * CR_BIN_MM;
            let target = rng.random_range(lo..lo + CR_BIN_MM).max(1e-3);
            let t_star = pose_at_mtre(&dir, &centroid, &pts, target);
            let v_rec = v_ct.resample_rigid(&t_star, &grid);
            let reg_cfg = RegConfig {
                seed,
                ..cfg.register.clone()
            };
            let r = register_volumes(&v_ct, &v_rec, &reg_cfg, None)?;
            let fin = mtre(&t_star, &r.pose, &pts);
            trials.push(TrialRecord {
                trial_id,
                seed,
                init_mtre_mm: mtre(&t_star, &SE3Pose::identity(), &pts),
                final_mtre_mm: fin,
                success: fin < SUCCESS_MM,
                objective: r.objective,
                wall_ms: r.wall_ms,
            });
        }
    }
    let pairs: Vec<(f64, f64)> = trials.iter().map(|t| (t.init_mtre_mm, t.final_mtre_mm)).collect();
    let cr = crate::metrics::capture_range(&pairs);
    let summary = if trials.is_empty() {
        None
    } else {
        Some(summarize(&trials)?)
    };
    Ok(SweepReport {
        trials,
        summary,
        capture_range: cr.to_string(),
        warning: cr.warning,
    })
}

/// Writes `cr_trials.csv` and `cr_report.json`.
pub fn write_sweep(report: &SweepReport, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_trials_csv(&out.join("cr_trials.csv"), &report.trials)?;
    write_json(
        &out.join("cr_report.json"),
        &serde_json::json!({
            "capture_range": report.capture_range,
            "warning": report.warning,
            "summary": report.summary,
        }),
    )
}
