mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ptz_core::metrics::{clear_mot, BoxRecord};
use ptz_core::pipeline::{
    initialize, run, scale_probe, sweep, Execution, PipelineError, RunConfig, SweepAxis,
    TimingReport,
};
use ptz_core::scene_map::serialize_map;
use ptz_core::simulator::{Scenario, Simulator};
use ptz_core::tracker::{TrackRecord, TrackingMode};
use serde::Serialize;
use thiserror::Error;

use output::{read_csv, Manifest, OutputDir};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("calibration failed on {rate:.1}% of frames (limit {limit:.1}%)")]
    CalibrationFailure { rate: f64, limit: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),
    #[error(transparent)]
    Pipeline(PipelineError),
    #[error("{0}")]
    Format(String),
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Config(m) => CliError::Config(m),
            e => CliError::Pipeline(e),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::CalibrationFailure { .. } => 2,
            CliError::Config(_) => 3,
            _ => 1,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(
    name = "ptz",
    version,
    about = "PTZ calibration and world-plane tracking experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Keyframe pass and off-line initialization; writes the scene map.
    Init(InitArgs),
    /// Full on-line loop: calibration, detection and tracking.
    Run(RunArgs),
    /// Calibration error against landmark count or RANSAC threshold.
    Sweep(SweepArgs),
    /// CLEAR MOT and USC metrics of a trajectory file against ground truth.
    Eval(EvalArgs),
    /// Per-stage timing table, sequential and parallel.
    Timings(TimingsArgs),
    /// Homology head prediction over a pose and zoom grid.
    ScaleProbe(ScaleProbeArgs),
    /// Prints a built-in scenario as TOML.
    Scenario { name: String },
}

#[derive(Args, Clone)]
struct Common {
    /// Built-in scenario name or path to a scenario TOML file.
    #[arg(long, default_value = "crossing")]
    scenario: String,
    /// Run configuration TOML; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Simulator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Seed of the algorithm's random streams.
    #[arg(long)]
    algo_seed: Option<u64>,
    #[arg(long)]
    frames: Option<u64>,
    /// Landmarks sampled from the view map per frame.
    #[arg(long)]
    landmarks: Option<usize>,
    #[arg(long)]
    ransac_threshold: Option<f64>,
    #[arg(long)]
    no_map_updating: bool,
    #[arg(long)]
    no_proximity_check: bool,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long, value_enum)]
    execution: Option<ExecutionArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    /// World-plane (3D) tracking.
    World,
    /// Image-plane (2D) tracking.
    Image,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExecutionArg {
    Sequential,
    Parallel,
}

#[derive(Args)]
struct InitArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Reproduce a run from its manifest; scenario and configuration flags are ignored.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    /// Run every combination of map updating, proximity check and tracking
    /// mode, one subdirectory each.
    #[arg(long)]
    ablation: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    LandmarkCount,
    RansacThreshold,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum)]
    axis: AxisArg,
    /// Comma-separated parameter values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    /// Number of simulator seeds, starting at 0.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth box CSV.
    #[arg(long)]
    gt: PathBuf,
    /// Trajectory CSV written by `run`.
    #[arg(long)]
    hyp: PathBuf,
    /// Sequence length; defaults to one past the last frame of either file.
    #[arg(long)]
    frames: Option<u64>,
    #[arg(long, default_value_t = 0.5)]
    voc: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct TimingsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ScaleProbeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_value = "-30,-15,0,15,30"
    )]
    pans: Vec<f64>,
    #[arg(
        long,
        value_delimiter = ',',
        allow_hyphen_values = true,
        default_value = "-40,-25,-10"
    )]
    tilts: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "800,1400,2085")]
    focals: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

fn load_scenario(name: &str) -> Result<Scenario> {
    if Scenario::builtin_names().any(|n| n == name) {
        return Scenario::builtin(name).map_err(|e| CliError::Config(e.to_string()));
    }
    let path = Path::new(name);
    let text = std::fs::read_to_string(path)
        .map_err(|_| CliError::Config(format!("unknown scenario {name}")))?;
    Scenario::from_toml(&text).map_err(|e| CliError::Config(e.to_string()))
}

impl Common {
    fn resolve(&self) -> Result<(Scenario, RunConfig)> {
        let mut scenario = load_scenario(&self.scenario)?;
        if let Some(seed) = self.seed {
            scenario = scenario.with_seed(seed);
        }
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = self.algo_seed {
            cfg.seed = s;
        }
        if let Some(n) = self.frames {
            cfg.frames = Some(n);
        }
        if let Some(n) = self.landmarks {
            cfg.calibration.matching.sample_size = n;
        }
        if let Some(t) = self.ransac_threshold {
            cfg.calibration.ransac.threshold_px = t;
        }
        if self.no_map_updating {
            cfg.calibration.map_updating = false;
        }
        if self.no_proximity_check {
            cfg.calibration.lifecycle.proximity_check = false;
        }
        if let Some(m) = self.mode {
            cfg.tracker.mode = match m {
                Mode::World => TrackingMode::World,
                Mode::Image => TrackingMode::Image,
            };
        }
        if let Some(e) = self.execution {
            cfg.execution = match e {
                ExecutionArg::Sequential => Execution::Sequential,
                ExecutionArg::Parallel => Execution::Parallel,
            };
        }
        cfg.validate()?;
        scenario
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok((scenario, cfg))
    }
}

fn simulator(scenario: &Scenario, cfg: &RunConfig) -> Result<Simulator> {
    let mut s = scenario.clone();
    if let Some(n) = cfg.frames {
        s.frames = s.frames.min(n);
    }
    Simulator::new(s).map_err(|e| CliError::Config(e.to_string()))
}

fn cmd_init(args: InitArgs) -> Result<()> {
    let (scenario, cfg) = args.common.resolve()?;
    let out = OutputDir::create(
        &args.out,
        args.force,
        &["manifest.json", "scene_map.bin", "init_report.json"],
    )?;
    let sim = simulator(&scenario, &cfg)?;
    let init = initialize(&sim, &cfg)?;
    out.write_json("manifest.json", &Manifest::new("init", &scenario, &cfg))?;
    let bytes = serialize_map(&init.map).map_err(|e| CliError::Format(e.to_string()))?;
    out.write_bytes("scene_map.bin", &bytes)?;
    let report = init.report(&sim);
    out.write_json("init_report.json", &report)?;
    println!(
        "{} keyframes, {} pairs, rms {:.3} -> {:.3} px, {} landmarks",
        report.keyframes,
        report.pairs.len(),
        report.initial_rms_px,
        report.final_rms_px,
        report.landmarks
    );
    Ok(())
}

const RUN_FILES: [&str; 9] = [
    "manifest.json",
    "init_report.json",
    "diagnostics.csv",
    "trajectories.csv",
    "ground_truth.csv",
    "calibration.json",
    "mot.json",
    "events.csv",
    "timings.json",
];

fn run_one(scenario: &Scenario, cfg: &RunConfig, dir: &Path, force: bool) -> Result<()> {
    let out = OutputDir::create(dir, force, &RUN_FILES)?;
    out.write_json("manifest.json", &Manifest::new("run", scenario, cfg))?;
    let sim = simulator(scenario, cfg)?;
    let init = initialize(&sim, cfg)?;
    out.write_json("init_report.json", &init.report(&sim))?;
    let result = run(&sim, &init, cfg)?;
    out.write_csv("diagnostics.csv", &result.diagnostics)?;
    out.write_csv("trajectories.csv", &result.trajectories)?;
    out.write_csv("ground_truth.csv", &result.ground_truth)?;
    out.write_json("calibration.json", &result.calibration)?;
    out.write_json("timings.json", &result.timings)?;
    if cfg.tracking {
        let (report, events) = result.evaluate(cfg.voc_threshold)?;
        out.write_json("mot.json", &report)?;
        out.write_events("events.csv", &events)?;
        println!(
            "{}: MOTA {:.1}%  MOTP {:.1}%  ID_SW {}  TR_FR {}",
            dir.display(),
            report.mota,
            report.motp,
            report.id_sw,
            report.tr_fr
        );
    }
    let c = result.calibration;
    println!(
        "{}: {} frames, reprojection {:.3} px, focal error {:.3}%, failures {:.2}%, {:.1} fps",
        dir.display(),
        c.frames,
        c.mean_reproj_px,
        c.mean_focal_err_pct,
        100.0 * c.failure_rate,
        result.timings.fps
    );
    if c.failure_rate > cfg.max_failure_rate {
        return Err(CliError::CalibrationFailure {
            rate: 100.0 * c.failure_rate,
            limit: 100.0 * cfg.max_failure_rate,
        });
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let (scenario, cfg) = match &args.manifest {
        Some(path) => {
            let m = Manifest::read(path)?;
            m.config.validate()?;
            (m.scenario, m.config)
        }
        None => args.common.resolve()?,
    };
    if !args.ablation {
        return run_one(&scenario, &cfg, &args.out, args.force);
    }
    let mut worst: Option<CliError> = None;
    for updating in [true, false] {
        for proximity in [true, false] {
            for mode in [TrackingMode::World, TrackingMode::Image] {
                let mut c = cfg.clone();
                c.calibration.map_updating = updating;
                c.calibration.lifecycle.proximity_check = proximity;
                c.tracker.mode = mode;
                let name = format!(
                    "update-{}_proximity-{}_{}",
                    if updating { "on" } else { "off" },
                    if proximity { "on" } else { "off" },
                    if mode == TrackingMode::World {
                        "3d"
                    } else {
                        "2d"
                    }
                );
                match run_one(&scenario, &c, &args.out.join(name), args.force) {
                    Ok(()) => {}
                    Err(e @ CliError::CalibrationFailure { .. }) => {
                        eprintln!("{e}");
                        worst.get_or_insert(e);
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    worst.map_or(Ok(()), Err)
}

#[derive(Serialize)]
struct SweepSummaryRow {
    value: f64,
    seeds: usize,
    mean_reproj_px: f64,
    mean_failure_rate: f64,
    mean_inliers: f64,
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let (scenario, mut cfg) = args.common.resolve()?;
    let out = OutputDir::create(
        &args.out,
        args.force,
        &["manifest.json", "sweep.csv", "sweep_summary.csv"],
    )?;
    out.write_json("manifest.json", &Manifest::new("sweep", &scenario, &cfg))?;
    let mut scenario = scenario;
    if let Some(n) = cfg.frames.take() {
        scenario.frames = scenario.frames.min(n);
    }
    let axis = match args.axis {
        AxisArg::LandmarkCount => SweepAxis::LandmarkCount,
        AxisArg::RansacThreshold => SweepAxis::RansacThreshold,
    };
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let records = sweep(&scenario, &cfg, axis, &args.values, &seeds)?;
    out.write_csv("sweep.csv", &records)?;
    let summary: Vec<SweepSummaryRow> = args
        .values
        .iter()
        .map(|&v| {
            let rows: Vec<_> = records.iter().filter(|r| r.value == v).collect();
            let n = rows.len().max(1) as f64;
            SweepSummaryRow {
                value: v,
                seeds: rows.len(),
                mean_reproj_px: rows.iter().map(|r| r.mean_reproj_px).sum::<f64>() / n,
                mean_failure_rate: rows.iter().map(|r| r.failure_rate).sum::<f64>() / n,
                mean_inliers: rows.iter().map(|r| r.mean_inliers).sum::<f64>() / n,
            }
        })
        .collect();
    println!(
        "{:>10} {:>14} {:>10} {:>10}",
        "value", "reproj (px)", "failures", "inliers"
    );
    for r in &summary {
        println!(
            "{:>10} {:>14.4} {:>10.4} {:>10.1}",
            r.value, r.mean_reproj_px, r.mean_failure_rate, r.mean_inliers
        );
    }
    out.write_csv("sweep_summary.csv", &summary)?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let out = OutputDir::create(&args.out, args.force, &["mot.json", "events.csv"])?;
    let gt: Vec<BoxRecord> = read_csv(&args.gt)?;
    let tracks: Vec<TrackRecord> = read_csv(&args.hyp)?;
    let hyp: Vec<BoxRecord> = tracks.iter().filter_map(BoxRecord::from_track).collect();
    let frames = args.frames.unwrap_or_else(|| {
        gt.iter()
            .map(|b| b.frame)
            .chain(tracks.iter().map(|t| t.frame))
            .max()
            .map_or(0, |f| f + 1)
    });
    if !(0.0..=1.0).contains(&args.voc) {
        return Err(CliError::Config("VOC threshold must lie in [0, 1]".into()));
    }
    let (report, events) =
        clear_mot(&gt, &hyp, frames, args.voc).map_err(|e| CliError::Format(e.to_string()))?;
    out.write_json("mot.json", &report)?;
    out.write_events("events.csv", &events)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(|e| CliError::Format(e.to_string()))?
    );
    Ok(())
}

#[derive(Serialize)]
struct TimingsFile {
    sequential: TimingReport,
    parallel: TimingReport,
    available_cores: usize,
}

fn print_timings(seq: &TimingReport, par: &TimingReport) {
    let rows = [
        (
            "Frame acquisition",
            seq.stages_ms.acquisition,
            par.stages_ms.acquisition,
        ),
        (
            "Landmark matching",
            seq.stages_ms.matching,
            par.stages_ms.matching,
        ),
        (
            "Homography estimation",
            seq.stages_ms.estimation,
            par.stages_ms.estimation,
        ),
        (
            "Map update",
            seq.stages_ms.map_update,
            par.stages_ms.map_update,
        ),
        (
            "World projection",
            seq.stages_ms.world_projection,
            par.stages_ms.world_projection,
        ),
        ("Tracking", seq.stages_ms.tracking, par.stages_ms.tracking),
    ];
    println!("{:<24} {:>12} {:>12}", "module", "seq (ms)", "par (ms)");
    for (name, s, p) in rows {
        println!("{name:<24} {s:>12.3} {p:>12.3}");
    }
    println!(
        "{:<24} {:>12.3} {:>12.3}",
        "stage sum", seq.stage_sum_ms, par.stage_sum_ms
    );
    println!(
        "{:<24} {:>12.3} {:>12.3}",
        "wall per frame", seq.wall_ms_per_frame, par.wall_ms_per_frame
    );
    println!("{:<24} {:>12.1} {:>12.1}", "fps", seq.fps, par.fps);
}

fn cmd_timings(args: TimingsArgs) -> Result<()> {
    let (scenario, cfg) = args.common.resolve()?;
    let out = match &args.out {
        Some(dir) => Some(OutputDir::create(
            dir,
            args.force,
            &["manifest.json", "timings.json"],
        )?),
        None => None,
    };
    let sim = simulator(&scenario, &cfg)?;
    let init = initialize(&sim, &cfg)?;
    let seq = run(
        &sim,
        &init,
        &RunConfig {
            execution: Execution::Sequential,
            ..cfg.clone()
        },
    )?
    .timings;
    let par = run(
        &sim,
        &init,
        &RunConfig {
            execution: Execution::Parallel,
            ..cfg.clone()
        },
    )?
    .timings;
    print_timings(&seq, &par);
    if let Some(out) = out {
        out.write_json("manifest.json", &Manifest::new("timings", &scenario, &cfg))?;
        out.write_json(
            "timings.json",
            &TimingsFile {
                sequential: seq,
                parallel: par,
                available_cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
            },
        )?;
    }
    Ok(())
}

fn cmd_scale_probe(args: ScaleProbeArgs) -> Result<()> {
    let (scenario, cfg) = args.common.resolve()?;
    let out = OutputDir::create(
        &args.out,
        args.force,
        &["manifest.json", "scale_probe.csv", "scale_probe_points.csv"],
    )?;
    let sim = simulator(&scenario, &cfg)?;
    let probe = scale_probe(&sim, &cfg, &args.pans, &args.tilts, &args.focals)?;
    out.write_json(
        "manifest.json",
        &Manifest::new("scale-probe", &scenario, &cfg),
    )?;
    out.write_csv("scale_probe.csv", &probe.records)?;
    out.write_csv("scale_probe_points.csv", &probe.points)?;
    let worst = probe
        .records
        .iter()
        .map(|r| r.max_rel_err)
        .fold(0.0, f64::max);
    println!(
        "{} poses, worst head error {:.4}% of height",
        probe.records.len(),
        100.0 * worst
    );
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init(a) => cmd_init(a),
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Timings(a) => cmd_timings(a),
        Command::ScaleProbe(a) => cmd_scale_probe(a),
        Command::Scenario { name } => {
            print!("{}", load_scenario(&name)?.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
