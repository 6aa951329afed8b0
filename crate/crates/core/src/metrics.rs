//! Evaluation metrics: mTRE, success rate, capture range, PSNR, and report
//! emission.

use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{SE3Pose, Vec3};
use crate::volume::Volume;

/// mTRE threshold for a successful registration, mm (strict).
pub const SUCCESS_MM: f64 = 2.0;
/// Capture-range bin width, mm.
pub const CR_BIN_MM: f64 = 5.0;
pub const CR_MIN_TRIALS: usize = 10;
pub const CR_MIN_SR: f64 = 95.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TargetPoints(Vec<Vec3>);

impl TargetPoints {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::input("target point set is empty"));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::input("target point is not finite"));
        }
        Ok(Self(points))
    }

    /// 3×3×3 lattice spanning the box `[lo, hi]`.
    pub fn lattice(lo: Vec3, hi: Vec3) -> Self {
        let mut pts = Vec::with_capacity(27);
        for k in 0..3 {
            for j in 0..3 {
                for i in 0..3 {
                    let f = Vec3::new(i as f64, j as f64, k as f64) * 0.5;
                    pts.push(lo + (hi - lo).component_mul(&f));
                }
            }
        }
        Self(pts)
    }

    /// Lattice over the tight bounding box of voxels above 5% of the maximum;
    /// falls back to the grid extent for an empty volume.
    pub fn for_volume(v: &Volume) -> Self {
        let (lo, hi) = v.support_box(0.05).unwrap_or_else(|| {
            let g = v.grid();
            let n = Vec3::new(g.dims[0] as f64 - 1.0, g.dims[1] as f64 - 1.0, g.dims[2] as f64 - 1.0);
            (g.origin, g.origin + n.component_mul(&g.spacing))
        });
        Self::lattice(lo, hi)
    }

    pub fn points(&self) -> &[Vec3] {
        &self.0
    }
}

/// Mean distance between the target points mapped by `t_hat` and by `t_gt`.
pub fn mtre(t_gt: &SE3Pose, t_hat: &SE3Pose, pts: &TargetPoints) -> f64 {
    let sum: f64 = pts.0.iter().map(|p| (t_hat.apply(p) - t_gt.apply(p)).norm()).sum();
    sum / pts.0.len() as f64
}

/// Percentage of trials with mTRE strictly below 2 mm.
pub fn success_rate(final_mtre: &[f64]) -> Result<f64> {
    if final_mtre.is_empty() {
        return Err(Error::input("success rate of zero trials"));
    }
    let ok = final_mtre.iter().filter(|&&m| m < SUCCESS_MM).count();
    Ok(100.0 * ok as f64 / final_mtre.len() as f64)
}

/// Capture range as a `[lo, hi)` interval in mm; `0-0` when no bin qualifies.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptureRange {
    pub lo_mm: f64,
    pub hi_mm: f64,
    pub warning: Option<String>,
}

impl CaptureRange {
    /// Upper edge, mm (0 for an empty range).
    pub fn upper(&self) -> f64 {
        self.hi_mm
    }
}

impl fmt::Display for CaptureRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.lo_mm, self.hi_mm)
    }
}

/// Per-bin summary of `(initial mTRE, final mTRE)` trials.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrBin {
    pub lo_mm: f64,
    pub hi_mm: f64,
    pub trials: usize,
    pub success_rate: f64,
}

pub fn cr_bins(trials: &[(f64, f64)]) -> Vec<CrBin> {
    let n_bins = trials
        .iter()
        .map(|&(init, _)| (init / CR_BIN_MM).floor() as usize + 1)
        .max()
        .unwrap_or(0);
    let mut bins: Vec<(usize, usize)> = vec![(0, 0); n_bins];
    for &(init, fin) in trials {
        let b = (init / CR_BIN_MM).floor() as usize;
        bins[b].0 += 1;
        if fin < SUCCESS_MM {
            bins[b].1 += 1;
        }
    }
    bins.iter()
        .enumerate()
        .map(|(b, &(n, ok))| CrBin {
            lo_mm: b as f64 * CR_BIN_MM,
            hi_mm: (b + 1) as f64 * CR_BIN_MM,
            trials: n,
            success_rate: if n == 0 { 0.0 } else { 100.0 * ok as f64 / n as f64 },
        })
        .collect()
}

/// The highest bin `[a, b)` such that it and every lower bin hold at least
/// ten trials with a within-bin success rate of at least 95%. The reported
/// interval is that bin.
pub fn capture_range(trials: &[(f64, f64)]) -> CaptureRange {
    let bins = cr_bins(trials);
    let mut best: Option<&CrBin> = None;
    let mut warning = None;
    for bin in &bins {
        if bin.trials < CR_MIN_TRIALS {
            warning = Some(format!(
                "bin {}-{} mm under-populated ({} < {CR_MIN_TRIALS} trials)",
                bin.lo_mm, bin.hi_mm, bin.trials
            ));
            break;
        }
        if bin.success_rate < CR_MIN_SR {
            break;
        }
        best = Some(bin);
    }
    if bins.is_empty() {
        warning = Some("no trials populated any bin".into());
    }
    match best {
        Some(b) => CaptureRange {
            lo_mm: b.lo_mm,
            hi_mm: b.hi_mm,
            warning,
        },
        None => CaptureRange {
            lo_mm: 0.0,
            hi_mm: 0.0,
            warning,
        },
    }
}

/// `10·log10(peak² / MSE)` with `peak = max(reference)` unless given.
/// Identical inputs give `+∞`.
pub fn psnr(reference: &[f64], test: &[f64], peak: Option<f64>) -> Result<f64> {
    if reference.len() != test.len() {
        return Err(Error::input(format!(
            "psnr shape mismatch: {} vs {} values",
            reference.len(),
            test.len()
        )));
    }
    if reference.is_empty() {
        return Err(Error::input("psnr of empty arrays"));
    }
    let sq: Vec<f64> = reference.iter().zip(test).map(|(a, b)| (a - b) * (a - b)).collect();
    let mse = crate::reduce::pairwise_sum(&sq) / sq.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    let peak = peak.unwrap_or_else(|| reference.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    Ok(10.0 * (peak * peak / mse).log10())
}

/// Formats `mean±std` (sample std) with two decimals, e.g. `1.14±1.01`.
pub fn mean_std_string(values: &[f64]) -> String {
    if values.is_empty() {
        return "nan±nan".into();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    format!("{:.2}±{:.2}", mean, var.sqrt())
}

/// One registration trial of an evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_id: usize,
    pub seed: u64,
    pub init_mtre_mm: f64,
    pub final_mtre_mm: f64,
    pub success: bool,
    pub objective: f64,
    pub wall_ms: f64,
}

pub fn write_trials_csv(path: &Path, trials: &[TrialRecord]) -> Result<()> {
    let mut out = String::from("trial_id,seed,init_mtre_mm,final_mtre_mm,success,objective,wall_ms\n");
    for t in trials {
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{},{:.9},{:.1}\n",
            t.trial_id, t.seed, t.init_mtre_mm, t.final_mtre_mm, t.success, t.objective, t.wall_ms
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Aggregate of a set of trials, formatted like a results table row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialSummary {
    pub trials: usize,
    pub mtre_mm: String,
    pub success_rate: f64,
    pub capture_range: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
    pub bins: Vec<CrBin>,
}

pub fn summarize(trials: &[TrialRecord]) -> Result<TrialSummary> {
    let finals: Vec<f64> = trials.iter().map(|t| t.final_mtre_mm).collect();
    let pairs: Vec<(f64, f64)> = trials.iter().map(|t| (t.init_mtre_mm, t.final_mtre_mm)).collect();
    let cr = capture_range(&pairs);
    Ok(TrialSummary {
        trials: trials.len(),
        mtre_mm: mean_std_string(&finals),
        success_rate: (success_rate(&finals)? * 100.0).round() / 100.0,
        capture_range: cr.to_string(),
        warning: cr.warning,
        bins: cr_bins(&pairs),
    })
}
