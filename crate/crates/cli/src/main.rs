//! `skytrack` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use skytrack_core::analytics::{analyze, load_dataset, AnalyticsConfig};
use skytrack_core::camera::{load_reference_tracks, recalibrate, CalibrationConfig, CameraPose};
use skytrack_core::error::{Error, ErrorKind, Result};
use skytrack_core::evaluation::{score, ScoreConfig};
use skytrack_core::io;
use skytrack_core::pipeline::{run_reconstruct_files, run_scenario_suite, PipelineConfig};
use skytrack_core::semantic_map::SemanticMap;
use skytrack_core::shape_prior::fleet::{generate_fleet, FleetConfig, DEFAULT_FLEET};
use skytrack_core::shape_prior::{build_prior, load_annotated_models, DEFAULT_BASIS_SIZE};
use skytrack_core::state_estimation::load_trajectories;
use skytrack_core::synth::{generate, presets, GroundTruth, ScenarioSpec};

#[derive(Parser, Debug)]
#[command(name = "skytrack", version, about = "Vehicle trajectory reconstruction from aerial keypoint detections")]
struct Cli {
    /// Suppress the structured log on stderr.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the camera pose for every frame and write poses.jsonl.
    Calibrate(CalibrateArgs),
    /// Build a PCA shape prior from annotated models or the synthetic fleet.
    BuildPrior(BuildPriorArgs),
    /// Reconstruct trajectories from keypoint detections.
    Reconstruct(ReconstructArgs),
    /// Run traffic analytics over a trajectory dataset.
    Analyze(AnalyzeArgs),
    /// Generate a synthetic scenario with ground truth.
    Synth(SynthArgs),
    /// Score reconstructed trajectories against ground truth.
    Score(ScoreArgs),
    /// Generate, reconstruct and score a batch of scenarios.
    Suite(SuiteArgs),
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[arg(long)]
    calibration: PathBuf,
    #[arg(long)]
    reference_tracks: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct BuildPriorArgs {
    /// JSONL of annotated 3D models; the synthetic fleet is used when absent.
    #[arg(long)]
    models: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_FLEET.count)]
    fleet_count: usize,
    #[arg(long, default_value_t = DEFAULT_FLEET.seed)]
    fleet_seed: u64,
    #[arg(long, default_value_t = DEFAULT_BASIS_SIZE)]
    k: usize,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    /// JSON pipeline config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    detections: Option<PathBuf>,
    #[arg(long)]
    reference_tracks: Option<PathBuf>,
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    map: Option<PathBuf>,
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    frame_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    robust_loss: Option<bool>,
    #[arg(long)]
    iou_threshold: Option<f64>,
    #[arg(long)]
    max_misses: Option<usize>,
    #[arg(long)]
    map_gate: Option<bool>,
    #[arg(long)]
    r_position: Option<f64>,
    #[arg(long)]
    r_heading: Option<f64>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    trajectories: PathBuf,
    #[arg(long)]
    map: PathBuf,
    /// JSON analytics config (queries, zones, rules).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    Intersection,
    Highway,
    Stationary,
}

impl Preset {
    fn spec(self, sigma: f64) -> ScenarioSpec {
        match self {
            Preset::Intersection => presets::intersection(sigma),
            Preset::Highway => presets::highway(sigma),
            Preset::Stationary => presets::stationary(sigma),
        }
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// JSON scenario description.
    #[arg(long, conflicts_with = "preset")]
    scenario: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Keypoint noise in pixels for presets.
    #[arg(long, default_value_t = 0.0)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    output_dir: PathBuf,
}

#[derive(Args, Debug)]
struct ScoreArgs {
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    trajectories: PathBuf,
    #[arg(long)]
    match_distance: Option<f64>,
    /// Writes the full report here; the headline goes to stdout either way.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SuiteArgs {
    /// Scenario files; the built-in noiseless suite when none are given.
    #[arg(long = "scenario")]
    scenarios: Vec<PathBuf>,
    /// Adds the intersection preset at this noise level.
    #[arg(long)]
    sigma: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: PathBuf,
}

struct Log {
    quiet: bool,
}

impl Log {
    fn event(&self, event: &str, fields: Value) {
        if self.quiet {
            return;
        }
        let mut rec = json!({ "event": event });
        if let (Value::Object(dst), Value::Object(src)) = (&mut rec, fields) {
            dst.extend(src);
        }
        eprintln!("{rec}");
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 1,
        ErrorKind::Data => 2,
        ErrorKind::Internal => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let log = Log { quiet: cli.quiet };
    match run(cli.command, &log) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.kind();
            log.event("error", json!({ "kind": format!("{kind:?}").to_lowercase(), "message": e.to_string() }));
            if log.quiet {
                eprintln!("error: {e}");
            }
            ExitCode::from(exit_code(kind))
        }
    }
}

fn run(cmd: Command, log: &Log) -> Result<()> {
    match cmd {
        Command::Calibrate(a) => calibrate(a, log),
        Command::BuildPrior(a) => build_prior_cmd(a, log),
        Command::Reconstruct(a) => reconstruct(a, log),
        Command::Analyze(a) => analyze_cmd(a, log),
        Command::Synth(a) => synth(a, log),
        Command::Score(a) => score_cmd(a, log),
        Command::Suite(a) => suite(a, log),
    }
}

fn calibrate(a: CalibrateArgs, log: &Log) -> Result<()> {
    let cal = CalibrationConfig::load(&a.calibration)?;
    let frames = match &a.reference_tracks {
        Some(p) => load_reference_tracks(p)?,
        None => Vec::new(),
    };
    let n = frames.len().max(1);
    let reference = cal.reference_set(frames);
    let mut previous: Option<CameraPose> = None;
    let mut rows = Vec::with_capacity(n);
    for frame in 0..n {
        let r = recalibrate(&reference, frame, &cal.intrinsics, previous.as_ref(), &cal.recalibration)?;
        previous = Some(r.pose);
        if r.degraded {
            log.event("camera_degraded", json!({ "frame": frame }));
        }
        rows.push(json!({
            "frame": frame,
            "pose": r.pose,
            "degraded": r.degraded,
            "rms": r.rms.is_finite().then_some(r.rms),
            "points_used": r.points_used,
        }));
    }
    io::write_atomic(&a.output, &io::to_jsonl_bytes(&rows)?)?;
    log.event("calibrate_done", json!({ "frames": n, "output": a.output }));
    Ok(())
}

fn build_prior_cmd(a: BuildPriorArgs, log: &Log) -> Result<()> {
    let shapes = match &a.models {
        Some(p) => load_annotated_models(p)?,
        None => generate_fleet(&FleetConfig { count: a.fleet_count, seed: a.fleet_seed }),
    };
    let prior = build_prior(&shapes, a.k)?;
    prior.save(&a.output)?;
    log.event("prior_built", json!({ "models": shapes.len(), "k": prior.k(), "output": a.output }));
    Ok(())
}

fn load_pipeline_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn reconstruct(a: ReconstructArgs, log: &Log) -> Result<()> {
    let mut cfg = load_pipeline_config(a.config.as_deref())?;
    let paths = &mut cfg.paths;
    for (dst, src) in [
        (&mut paths.detections, a.detections),
        (&mut paths.reference_tracks, a.reference_tracks),
        (&mut paths.calibration, a.calibration),
        (&mut paths.map, a.map),
        (&mut paths.prior, a.prior),
        (&mut paths.output_dir, a.output_dir),
    ] {
        if src.is_some() {
            *dst = src;
        }
    }
    if let Some(v) = a.frame_rate {
        cfg.frame_rate = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lambda {
        cfg.fit.lambda = v;
    }
    if let Some(v) = a.robust_loss {
        cfg.fit.robust_loss = v;
    }
    if let Some(v) = a.iou_threshold {
        cfg.association.iou_threshold = v;
    }
    if let Some(v) = a.max_misses {
        cfg.association.max_misses = v;
    }
    if let Some(v) = a.map_gate {
        cfg.association.map_gate = v;
    }
    if let Some(v) = a.r_position {
        cfg.ekf.r_position = v;
    }
    if let Some(v) = a.r_heading {
        cfg.ekf.r_heading = v;
    }
    log.event("reconstruct_start", json!({ "paths": cfg.paths, "seed": cfg.seed }));
    let out = run_reconstruct_files(&cfg)?;
    for d in &out.diagnostics {
        for f in d.fits.iter().filter(|f| f.error.is_some()) {
            log.event("fit_failed", json!({ "frame": d.frame, "detection_id": f.detection_id, "error": f.error }));
        }
        for e in &d.errors {
            log.event("frame_error", json!({ "frame": d.frame, "error": e }));
        }
    }
    log.event("reconstruct_done", json!({ "summary": out.summary }));
    Ok(())
}

fn analyze_cmd(a: AnalyzeArgs, log: &Log) -> Result<()> {
    let cfg: AnalyticsConfig = match &a.config {
        Some(p) => io::read_json(p)?,
        None => AnalyticsConfig::default(),
    };
    let map = SemanticMap::load(&a.map)?;
    let dataset = load_dataset(&a.trajectories)?;
    let report = analyze(&dataset, &map, &cfg)?;
    report.write(&a.output_dir)?;
    log.event(
        "analyze_done",
        json!({ "trajectories": dataset.len(), "incidents": report.incidents.len(), "output_dir": a.output_dir }),
    );
    Ok(())
}

fn synth(a: SynthArgs, log: &Log) -> Result<()> {
    let spec = match (&a.scenario, a.preset) {
        (Some(p), _) => ScenarioSpec::load(p)?,
        (None, Some(p)) => p.spec(a.sigma),
        (None, None) => return Err(Error::Config("either --scenario or --preset is required".into())),
    };
    let scene = generate(&spec, a.seed)?;
    scene.write(&a.output_dir)?;
    log.event(
        "synth_done",
        json!({ "scenario": spec.name, "frames": scene.truth.frames.len(), "vehicles": scene.truth.vehicles.len(), "output_dir": a.output_dir }),
    );
    Ok(())
}

fn score_cmd(a: ScoreArgs, log: &Log) -> Result<()> {
    let truth = GroundTruth::load(&a.truth)?;
    let records = load_trajectories(&a.trajectories)?;
    let mut cfg = ScoreConfig::default();
    if let Some(d) = a.match_distance {
        cfg.match_distance = d;
    }
    let report = score(&truth, &records, &cfg);
    if let Some(p) = &a.output {
        io::write_json(p, &report)?;
    }
    let headline = json!({
        "mota": report.mot.mota,
        "motp": report.mot.motp,
        "id_switches": report.mot.id_switches,
        "false_positives": report.mot.false_positives,
        "misses": report.mot.misses,
        "position_mean_m": report.errors.position.mean,
        "position_median_m": report.errors.position.median,
        "heading_mean_deg": report.errors.heading_deg.mean,
    });
    println!("{headline}");
    log.event("score_done", json!({ "objects": report.mot.objects }));
    Ok(())
}

fn suite(a: SuiteArgs, log: &Log) -> Result<()> {
    let cfg = load_pipeline_config(a.config.as_deref())?;
    let mut specs = Vec::new();
    for p in &a.scenarios {
        specs.push(ScenarioSpec::load(p)?);
    }
    for &s in &a.sigma {
        specs.push(presets::intersection(s));
    }
    if specs.is_empty() {
        specs = presets::noiseless_suite();
    }
    let runs: Vec<(ScenarioSpec, u64)> = specs
        .iter()
        .flat_map(|s| (0..a.trials).map(move |t| (s.clone(), a.seed + t)))
        .collect();
    let card = run_scenario_suite(&runs, &cfg, &ScoreConfig::default());
    io::write_json(&a.output_dir.join("scorecard.json"), &card)?;
    io::write_atomic(&a.output_dir.join("scorecard.csv"), &card.to_csv()?)?;
    let failed = card.scenarios.iter().filter(|s| s.error.is_some()).count();
    for s in &card.scenarios {
        match (&s.score, &s.error) {
            (Some(r), _) => log.event(
                "scenario_done",
                json!({ "scenario": s.name, "seed": s.seed, "mota": r.mot.mota, "position_mean_m": r.errors.position.mean }),
            ),
            (None, e) => log.event("scenario_failed", json!({ "scenario": s.name, "seed": s.seed, "error": e })),
        }
    }
    log.event("suite_done", json!({ "scenarios": card.scenarios.len(), "failed": failed }));
    Ok(())
}
