//! Batch reconstruction: per-frame recalibration, gating and association,
//! per-detection model fitting, filtering and shape accumulation; plus the
//! synthetic scenario suite.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::AnalyticsConfig;
use crate::camera::{load_reference_tracks, recalibrate, CalibrationConfig, CameraIntrinsics, CameraModel, CameraPose, RecalibrationConfig, ReferencePointSet};
use crate::error::{Error, Result};
use crate::evaluation::{score, ScoreConfig, ScoreReport};
use crate::io;
use crate::keypoints::{load_detections, DetectionLimits, FrameDetections, KeypointDetection};
use crate::model_fitting::{fit_vehicle, FitConfig, FitInit, VehicleFit};
use crate::semantic_map::SemanticMap;
use crate::shape_prior::{ShapeParams, ShapePrior};
use crate::state_estimation::{export_trajectory, trajectories_to_bytes, update_shape, EkfConfig, EkfState, TrackStates, TrajectoryRecord};
use crate::synth::{generate_with_prior, ScenarioSpec, Scene};
use crate::tracking::{AssociationConfig, Gate, Track, Tracker};

pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelinePaths {
    pub detections: Option<PathBuf>,
    pub reference_tracks: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub map: Option<PathBuf>,
    pub prior: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: PipelinePaths,
    /// Used for frames whose record carries no timestamp.
    pub frame_rate: f64,
    pub fit: FitConfig,
    pub association: AssociationConfig,
    pub ekf: EkfConfig,
    pub analytics: AnalyticsConfig,
    /// Neighbours consulted when classifying a track's shape.
    pub classify_neighbors: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: PipelinePaths::default(),
            frame_rate: 30.0,
            fit: FitConfig::default(),
            association: AssociationConfig::default(),
            ekf: EkfConfig::default(),
            analytics: AnalyticsConfig::default(),
            classify_neighbors: 5,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return Err(Error::Config(format!("frame_rate must be positive, got {}", self.frame_rate)));
        }
        if self.classify_neighbors == 0 {
            return Err(Error::Config("classify_neighbors must be at least 1".into()));
        }
        self.fit.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.association.validate().map_err(Error::Config)?;
        self.ekf.validate().map_err(Error::Config)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    /// Fit settings with the run seed folded in.
    fn fit_config(&self) -> FitConfig {
        FitConfig { seed: self.fit.seed ^ self.seed, ..self.fit }
    }
}

/// Everything a reconstruction needs, already loaded.
#[derive(Debug, Clone, Copy)]
pub struct ReconstructInputs<'a> {
    pub detections: &'a [FrameDetections],
    pub reference: &'a ReferencePointSet,
    pub intrinsics: &'a CameraIntrinsics,
    pub recalibration: RecalibrationConfig,
    pub map: Option<&'a SemanticMap>,
    pub prior: &'a ShapePrior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraDiagnostics {
    pub degraded: bool,
    pub rms: Option<f64>,
    pub points_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub detection_id: u64,
    pub track: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub residual: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    pub converged: bool,
    pub visible: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// One structured log record per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDiagnostics {
    pub frame: usize,
    pub t: f64,
    pub camera: CameraDiagnostics,
    pub detections: usize,
    pub gated: Vec<u64>,
    pub spawned: Vec<u64>,
    pub confirmed: Vec<u64>,
    pub lost: Vec<u64>,
    pub dropped: Vec<u64>,
    pub fits: Vec<FitDiagnostics>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunSummary {
    pub frames: usize,
    pub detections: usize,
    pub gated: usize,
    pub fits: usize,
    pub fit_failures: usize,
    pub degraded_frames: usize,
    pub tracks: usize,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructOutput {
    pub records: Vec<TrajectoryRecord>,
    pub diagnostics: Vec<FrameDiagnostics>,
    pub summary: RunSummary,
}

impl ReconstructOutput {
    pub fn files(&self) -> Result<Vec<(&'static str, Vec<u8>)>> {
        Ok(vec![
            (TRAJECTORIES_FILE, trajectories_to_bytes(&self.records)?),
            (DIAGNOSTICS_FILE, io::to_jsonl_bytes(&self.diagnostics)?),
            (SUMMARY_FILE, io::to_json_bytes(&self.summary)?),
        ])
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, bytes) in self.files()? {
            io::write_atomic(&dir.join(name), &bytes)?;
        }
        Ok(())
    }
}

fn regularization_target(d: &KeypointDetection, track: &Track, prior: &ShapePrior) -> ShapeParams {
    d.category
        .as_ref()
        .and_then(|c| prior.templates.get(&c.label))
        .or_else(|| track.vehicle_type.as_ref().and_then(|t| prior.templates.get(t)))
        .cloned()
        .unwrap_or_else(|| ShapeParams::zeros(prior.k()))
}

/// Runs the frame loop over `inputs`. Frames absent from the detection list
/// are processed as empty frames.
pub fn run_reconstruct(inputs: &ReconstructInputs<'_>, cfg: &PipelineConfig) -> Result<ReconstructOutput> {
    cfg.validate()?;
    let fit_cfg = cfg.fit_config();
    let mut by_index: BTreeMap<usize, &FrameDetections> = BTreeMap::new();
    for f in inputs.detections {
        by_index.insert(f.frame_index, f);
    }
    let last = by_index.keys().next_back().copied();
    let mut tracker = Tracker::new(cfg.association);
    let mut pose: Option<CameraPose> = None;
    let mut last_time: BTreeMap<u64, f64> = BTreeMap::new();
    let mut diagnostics = Vec::new();
    let mut summary = RunSummary::default();

    for frame in 0..last.map_or(0, |l| l + 1) {
        let empty;
        let fd = match by_index.get(&frame) {
            Some(f) => *f,
            None => {
                empty = FrameDetections { frame_index: frame, timestamp: None, detections: Vec::new() };
                &empty
            }
        };
        let t = fd.time(cfg.frame_rate);

        let recal = recalibrate(inputs.reference, frame, inputs.intrinsics, pose.as_ref(), &inputs.recalibration)
            .map_err(|e| Error::Config(format!("frame {frame}: camera calibration failed: {e}")))?;
        pose = Some(recal.pose);
        let camera = CameraModel { intrinsics: *inputs.intrinsics, pose: recal.pose };
        summary.degraded_frames += recal.degraded as usize;

        let gate = inputs.map.map(|map| Gate { map, camera: &camera });
        let step = tracker.step(fd, gate);

        let work: Vec<(u64, usize)> = {
            let mut w: Vec<(u64, usize)> = step.matched.iter().chain(&step.spawned).copied().collect();
            w.sort_by_key(|&(_, d)| d);
            w
        };
        let jobs: Vec<(u64, &KeypointDetection, ShapeParams, Option<f64>)> = work
            .iter()
            .map(|&(key, d)| {
                let det = &fd.detections[d];
                let track = tracker.track(key).expect("track from step report");
                (key, det, regularization_target(det, track, inputs.prior), track.filter.map(|f| f.heading()))
            })
            .collect();
        let results: Vec<std::result::Result<VehicleFit, String>> = jobs
            .par_iter()
            .map(|(_, det, b_t, prev)| {
                fit_vehicle(det, inputs.prior, &camera, b_t, &fit_cfg, FitInit::Auto { previous_heading: *prev }).map_err(|e| e.to_string())
            })
            .collect();

        let mut fits = Vec::with_capacity(jobs.len());
        let mut errors = Vec::new();
        for ((key, det, _, _), result) in jobs.iter().zip(results) {
            summary.fits += 1;
            let track = tracker.track_mut(*key).expect("track from step report");
            let mut diag = FitDiagnostics {
                detection_id: det.detection_id,
                track: *key,
                residual: None,
                iterations: None,
                converged: false,
                visible: det.visible_count(),
                error: None,
            };
            let fit = match result {
                Ok(fit) if fit.converged => {
                    diag.residual = Some(fit.residual);
                    diag.iterations = Some(fit.iterations);
                    diag.converged = true;
                    Some(fit)
                }
                Ok(fit) => {
                    diag.residual = Some(fit.residual);
                    diag.iterations = Some(fit.iterations);
                    diag.error = Some("fit did not converge".into());
                    None
                }
                Err(e) => {
                    diag.error = Some(e);
                    None
                }
            };
            if fit.is_none() {
                summary.fit_failures += 1;
            }
            let state = match advance(track, fit.as_ref(), t, last_time.get(key).copied(), inputs.prior, cfg) {
                Ok(s) => s,
                Err(e) => {
                    errors.push(format!("track {key}: {e}"));
                    None
                }
            };
            if let Some(s) = state {
                last_time.insert(*key, t);
                track.filter = Some(s);
            }
            let rec = track.history.last_mut().expect("record pushed this frame");
            rec.fit = fit;
            rec.state = state;
            fits.push(diag);
        }

        let det_id = |i: usize| fd.detections[i].detection_id;
        summary.frames += 1;
        summary.detections += fd.detections.len();
        summary.gated += step.gated.len();
        diagnostics.push(FrameDiagnostics {
            frame,
            t,
            camera: CameraDiagnostics {
                degraded: recal.degraded,
                rms: recal.rms.is_finite().then_some(recal.rms),
                points_used: recal.points_used,
            },
            detections: fd.detections.len(),
            gated: step.gated.iter().map(|&i| det_id(i)).collect(),
            spawned: step.spawned.iter().map(|&(k, _)| k).collect(),
            confirmed: step.confirmed.clone(),
            lost: step.lost.clone(),
            dropped: step.dropped.clone(),
            fits,
            errors,
        });
    }
    tracker.finish();

    let times: BTreeMap<usize, f64> = diagnostics.iter().map(|d| (d.frame, d.t)).collect();
    let mut records = Vec::new();
    for track in tracker.confirmed_tracks() {
        let (Some(id), Some(shape)) = (track.track_id, track.shape.as_ref()) else {
            continue;
        };
        let states: Vec<(usize, f64, EkfState)> = track
            .history
            .iter()
            .filter_map(|r| r.state.map(|s| (r.frame, times[&r.frame], s)))
            .collect();
        if states.is_empty() {
            continue;
        }
        summary.tracks += 1;
        records.extend(export_trajectory(&TrackStates {
            track_id: id,
            states: &states,
            shape,
            vehicle_type: track.vehicle_type.as_deref().unwrap_or("unknown"),
        }));
    }
    summary.records = records.len();
    Ok(ReconstructOutput { records, diagnostics, summary })
}

/// Folds one frame's fit into the track's shape, type and filter; returns
/// the filter state at `t`, predicted only when the fit failed.
fn advance(
    track: &mut Track,
    fit: Option<&VehicleFit>,
    t: f64,
    last_t: Option<f64>,
    prior: &ShapePrior,
    cfg: &PipelineConfig,
) -> Result<Option<EkfState>> {
    let Some(fit) = fit else {
        return match (track.filter, last_t) {
            (Some(f), Some(lt)) => Ok(Some(f.predict(t - lt, &cfg.ekf)?)),
            _ => Ok(None),
        };
    };
    let shape = update_shape(track.shape.as_ref(), fit, prior)?;
    track.vehicle_type = Some(prior.classify(&shape.b, cfg.classify_neighbors)?.label);
    let z = Vector3::new(fit.pose.x, fit.pose.y, fit.pose.heading);
    let state = match (track.filter, last_t) {
        (Some(f), Some(lt)) => {
            let mut f = f.predict(t - lt, &cfg.ekf)?;
            f.wheelbase = shape.wheelbase;
            f.update(&z, &cfg.ekf)?.state
        }
        _ => EkfState::from_fit(fit, shape.wheelbase, &cfg.ekf)?,
    };
    track.shape = Some(shape);
    Ok(Some(state))
}

/// Loads the configured inputs, runs the reconstruction and writes the
/// outputs into the output directory.
pub fn run_reconstruct_files(cfg: &PipelineConfig) -> Result<ReconstructOutput> {
    cfg.validate()?;
    let need = |p: &Option<PathBuf>, what: &str| p.clone().ok_or_else(|| Error::Config(format!("missing {what} path")));
    let calibration = CalibrationConfig::load(&need(&cfg.paths.calibration, "calibration")?)?;
    let prior = ShapePrior::load(&need(&cfg.paths.prior, "prior")?)?;
    let out_dir = need(&cfg.paths.output_dir, "output directory")?;
    let limits = DetectionLimits { image_size: calibration.intrinsics.image_size, frame_rate: cfg.frame_rate };
    let detections = load_detections(&need(&cfg.paths.detections, "detections")?, &limits)?;
    let frames = match &cfg.paths.reference_tracks {
        Some(p) => load_reference_tracks(p)?,
        None => Vec::new(),
    };
    let map = cfg.paths.map.as_deref().map(SemanticMap::load).transpose()?;
    let reference = calibration.reference_set(frames);
    let inputs = ReconstructInputs {
        detections: &detections,
        reference: &reference,
        intrinsics: &calibration.intrinsics,
        recalibration: calibration.recalibration,
        map: map.as_ref(),
        prior: &prior,
    };
    let out = run_reconstruct(&inputs, cfg)?;
    out.write(&out_dir)?;
    Ok(out)
}

/// Reconstructs a generated scene in memory.
pub fn reconstruct_scene(scene: &Scene, cfg: &PipelineConfig) -> Result<ReconstructOutput> {
    let reference = scene.calibration.reference_set(scene.reference_tracks.clone());
    let inputs = ReconstructInputs {
        detections: &scene.detections,
        reference: &reference,
        intrinsics: &scene.calibration.intrinsics,
        recalibration: scene.calibration.recalibration,
        map: Some(&scene.map),
        prior: &scene.prior,
    };
    let cfg = PipelineConfig { frame_rate: scene.spec.frame_rate, ..cfg.clone() };
    run_reconstruct(&inputs, &cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub name: String,
    pub seed: u64,
    pub pixel_sigma: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<ScoreReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scorecard {
    pub scenarios: Vec<ScenarioResult>,
}

impl Scorecard {
    /// One row per scenario with the headline numbers.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let head = [
            "scenario", "seed", "pixel_sigma", "ok", "mota", "id_switches", "false_positives", "misses", "position_mean_m",
            "position_median_m", "heading_mean_deg", "length_mean_m", "width_mean_m", "height_mean_m", "speed_mean_mps", "error",
        ];
        let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
        w.write_record(head).map_err(csv_err)?;
        for s in &self.scenarios {
            let mut row = vec![s.name.clone(), s.seed.to_string(), s.pixel_sigma.to_string(), s.score.is_some().to_string()];
            match &s.score {
                Some(r) => {
                    let e = &r.errors;
                    row.extend(
                        [r.mot.mota, r.mot.id_switches as f64, r.mot.false_positives as f64, r.mot.misses as f64, e.position.mean, e.position.median, e.heading_deg.mean, e.length.mean, e.width.mean, e.height.mean, e.speed.mean]
                            .map(|v| v.to_string()),
                    );
                }
                None => row.extend(std::iter::repeat_n(String::new(), 11)),
            }
            row.push(s.error.clone().unwrap_or_default());
            w.write_record(row).map_err(csv_err)?;
        }
        w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))
    }
}

/// Generates, reconstructs and scores each scenario; a failing scenario is
/// recorded and the suite moves on.
pub fn run_scenario_suite(specs: &[(ScenarioSpec, u64)], cfg: &PipelineConfig, score_cfg: &ScoreConfig) -> Scorecard {
    let mut priors: Vec<(crate::synth::PriorSpec, ShapePrior)> = Vec::new();
    let mut scenarios = Vec::with_capacity(specs.len());
    for (spec, seed) in specs {
        let mut run = || -> Result<ScoreReport> {
            spec.validate()?;
            let prior = match priors.iter().find(|(p, _)| *p == spec.prior) {
                Some((_, p)) => p.clone(),
                None => {
                    let p = spec.prior.build()?;
                    priors.push((spec.prior, p.clone()));
                    p
                }
            };
            let scene = generate_with_prior(spec, *seed, prior)?;
            let out = reconstruct_scene(&scene, cfg)?;
            Ok(score(&scene.truth, &out.records, score_cfg))
        };
        let (score, error) = match run() {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        scenarios.push(ScenarioResult { name: spec.name.clone(), seed: *seed, pixel_sigma: spec.noise.pixel_sigma, score, error });
    }
    Scorecard { scenarios }
}
