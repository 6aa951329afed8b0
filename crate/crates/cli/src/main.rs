use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use radgs_core::drr::render_drr;
use radgs_core::geometry::Vec3;
use radgs_core::phantom::{make_phantom, PhantomKind};
use radgs_core::pipeline::{
    run_pipeline, run_stage, stage_eval, sweep_cr, verify_manifest, write_sweep, PipelineConfig, Stage,
};
use radgs_core::reconstruct::GridSpec;
use radgs_core::register::{apply_twist, pose_objective, RegConfig};
use radgs_core::{CArmView, Error, Grid, SE3Pose};

const EXIT_RUNTIME: u8 = 1;
const EXIT_CONFIG: u8 = 2;

#[derive(Parser)]
#[command(
    name = "radgs",
    version,
    about = "Gaussian reconstruction and rigid registration from biplanar X-ray projections"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "radgs-out")]
    out: PathBuf,
    /// Worker threads (falls back to RADGS_THREADS, then all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom, reference volume and ground-truth pose.
    Phantom(Common),
    /// Render the AP and LA acquisitions.
    Drr(Common),
    /// Reconstruct Gaussians and V_rec from the acquisitions.
    Reconstruct(Common),
    /// Register the reference volume to V_rec.
    Register(Common),
    /// Jointly refine the Gaussians and the pose.
    Joint(Common),
    /// Compute evaluation metrics.
    Eval(Common),
    /// Run every stage and write the run manifest.
    Run(Common),
    /// Capture-range sweep over stratified initial misalignments.
    SweepCr(Common),
    /// Re-hash the artifacts listed in the run manifest.
    Verify(Common),
    /// Quick numerical self-checks.
    Selftest(Common),
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    }
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>, Error> {
    let n = match flag {
        Some(n) => n,
        None => match std::env::var("RADGS_THREADS") {
            Ok(s) => s
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("RADGS_THREADS must be a positive integer, got {s:?}")))?,
            Err(_) => return Ok(None),
        },
    };
    if n == 0 {
        return Err(Error::Config("thread count must be ≥ 1".into()));
    }
    Ok(Some(n))
}

fn setup(common: &Common) -> Result<PipelineConfig, Error> {
    if let Some(n) = thread_count(common.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let cfg = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    Ok(match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn selftest(out: &Path) -> Result<bool, Error> {
    let mut all = true;
    let mut report = |name: &str, ok: bool, detail: String| {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        all &= ok;
    };

    let grid = Grid::centered([40, 40, 64], 1.0)?;
    let slab = make_phantom(PhantomKind::Slab, 0, &grid)?.volume;
    let view = CArmView::new(1124.0, 700.0, (33, 33), 0.5, SE3Pose::identity())?;
    let li = render_drr(&slab, &view).get(16, 16);
    report(
        "slab line integral",
        (li - 20.0).abs() < 0.02,
        format!("{li:.4} (expected 20)"),
    );

    let grid = Grid::centered([24, 24, 24], 2.0)?;
    let blob = |x: Vec3, c: Vec3, s: Vec3, a: f64| a * (-0.5 * (x - c).component_div(&s).norm_squared()).exp();
    let moving = radgs_core::Volume::from_fn(grid, |x| {
        blob(x, Vec3::new(-4.0, 2.0, 0.0), Vec3::new(6.0, 4.0, 5.0), 1.0)
            + blob(x, Vec3::new(7.0, -5.0, 3.0), Vec3::new(3.0, 5.0, 3.0), 0.7)
            + blob(x, Vec3::new(1.0, 8.0, -6.0), Vec3::new(4.0, 3.0, 3.0), 0.5)
    });
    let fixed = moving.resample_rigid(
        &SE3Pose::from_euler_xyz(Vec3::new(0.1, -0.05, 0.08), Vec3::new(2.0, -1.5, 1.0)),
        &grid,
    );
    let pose = SE3Pose::from_euler_xyz(Vec3::new(0.03, 0.02, -0.04), Vec3::new(0.7, 0.3, -0.4));
    let c = pose.apply(&moving.centroid());
    let (_, g) = pose_objective(&moving, &fixed, &pose, &c, true)?;
    let g = g.expect("gradient requested");
    let f = |d: &[f64]| {
        let p = apply_twist(&pose, &[d[0], d[1], d[2], d[3], d[4], d[5]], &c);
        pose_objective(&moving, &fixed, &p, &c, false)
            .map(|(t, _)| t.total)
            .unwrap_or(f64::NAN)
    };
    let rel = radgs_core::optim::fd_check(f, &[0.0; 6], &g, 1e-6)?;
    report("pose gradient", rel < 1e-4, format!("relative error {rel:.2e}"));

    let mut cfg = PipelineConfig {
        phantom: PhantomKind::Slab,
        phantom_grid: GridSpec {
            dims: [40, 48, 32],
            spacing_mm: 2.5,
        },
        registration_only: true,
        register: RegConfig {
            n_starts: 2,
            max_iters: 150,
            ..Default::default()
        },
        ..Default::default()
    };
    cfg.detector.width = 48;
    cfg.detector.height = 48;
    cfg.detector.pitch_mm = 3.0;
    cfg.recon.grid = GridSpec {
        dims: [32, 40, 32],
        spacing_mm: 2.5,
    };
    let dir = out.join("selftest");
    let m = run_pipeline(&cfg, &dir)?;
    let mtre = m.metrics.map_or(f64::INFINITY, |r| r.mtre_mm);
    report("registration pipeline", mtre < 2.0, format!("mTRE {mtre:.3} mm"));
    Ok(all)
}

fn run(cmd: Command) -> Result<ExitCode, Error> {
    let (stage, common) = match &cmd {
        Command::Phantom(c) => (Some(Stage::Phantom), c),
        Command::Drr(c) => (Some(Stage::Drr), c),
        Command::Reconstruct(c) => (Some(Stage::Reconstruct), c),
        Command::Register(c) => (Some(Stage::Register), c),
        Command::Joint(c) => (Some(Stage::Joint), c),
        Command::Eval(c) => (Some(Stage::Eval), c),
        Command::Run(c) | Command::SweepCr(c) | Command::Verify(c) | Command::Selftest(c) => (None, c),
    };
    let cfg = setup(common)?;
    let out = &common.out;
    if let Some(stage) = stage {
        if stage == Stage::Eval {
            print_json(&stage_eval(&cfg, out)?);
        } else {
            run_stage(stage, &cfg, out)?;
        }
        eprintln!("{stage}: wrote {}", out.display());
        return Ok(ExitCode::SUCCESS);
    }
    match cmd {
        Command::Run(_) => {
            let m = run_pipeline(&cfg, out)?;
            print_json(&m.metrics);
        }
        Command::SweepCr(_) => {
            let r = sweep_cr(&cfg.sweep)?;
            write_sweep(&r, out)?;
            if let Some(w) = &r.warning {
                eprintln!("warning: {w}");
            }
            print_json(&serde_json::json!({ "capture_range": r.capture_range, "summary": r.summary }));
        }
        Command::Verify(_) => {
            let bad = verify_manifest(out)?;
            if !bad.is_empty() {
                for b in &bad {
                    eprintln!("modified or missing: {b}");
                }
                return Ok(ExitCode::from(EXIT_RUNTIME));
            }
            println!("all artifacts match the manifest");
        }
        Command::Selftest(_) => {
            if !selftest(out)? {
                return Ok(ExitCode::from(EXIT_RUNTIME));
            }
        }
        _ => unreachable!("stage commands return above"),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
