//! Scoring reconstructed trajectories against ground truth: CLEAR-MOT
//! tracking metrics and per-vehicle pose, dimension and speed errors.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::angle::angle_diff;
use crate::state_estimation::TrajectoryRecord;
use crate::synth::{GroundTruth, VehicleTruth};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreConfig {
    /// Largest centre distance for a ground-truth/hypothesis match, metres.
    pub match_distance: f64,
    /// Share of frames tracked for a vehicle to count as mostly tracked.
    pub mostly_tracked: f64,
    /// Share of frames tracked below which a vehicle counts as mostly lost.
    pub mostly_lost: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self { match_distance: 2.0, mostly_tracked: 0.8, mostly_lost: 0.2 }
    }
}

/// A ground-truth object in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Object {
    pub id: u64,
    pub x: f64,
    pub y: f64,
}

/// Summary of absolute errors.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorStats {
    pub count: usize,
    pub mean: f64,
    pub median: f64,
    pub rms: f64,
    pub max: f64,
}

impl ErrorStats {
    pub fn from_values(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mut v: Vec<f64> = values.iter().map(|x| x.abs()).collect();
        v.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Self {
            count: n,
            mean: v.iter().sum::<f64>() / n as f64,
            median,
            rms: (v.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt(),
            max: v[n - 1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MotMetrics {
    pub frames: usize,
    pub objects: usize,
    pub matches: usize,
    pub false_positives: usize,
    pub misses: usize,
    pub id_switches: usize,
    pub mota: f64,
    /// Mean centre distance of matches, metres.
    pub motp: f64,
    pub tracks: usize,
    pub mostly_tracked: usize,
    pub partially_tracked: usize,
    pub mostly_lost: usize,
}

/// One frame's matches as (object id, hypothesis id).
pub type FrameMatches = Vec<(u64, u64)>;

/// CLEAR-MOT over frame-aligned objects and hypotheses.
///
/// Correspondences from the previous frame are kept while they stay within
/// the gate; the rest are paired greedily by increasing distance, ties going
/// to the lower object id, then the lower hypothesis id.
pub fn clear_mot(frames: &[(Vec<Object>, Vec<Object>)], cfg: &ScoreConfig) -> (MotMetrics, Vec<FrameMatches>) {
    let dist = |a: &Object, b: &Object| ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
    let mut m = MotMetrics { frames: frames.len(), ..MotMetrics::default() };
    let mut last: BTreeMap<u64, u64> = BTreeMap::new();
    let mut present: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    let mut dsum = 0.0;
    let mut all = Vec::with_capacity(frames.len());
    for (objects, hyps) in frames {
        m.objects += objects.len();
        let mut used_o = vec![false; objects.len()];
        let mut used_h = vec![false; hyps.len()];
        let mut pairs: Vec<(usize, usize, f64)> = Vec::new();
        for (oi, o) in objects.iter().enumerate() {
            if let Some(&h) = last.get(&o.id) {
                if let Some(hi) = hyps.iter().position(|x| x.id == h) {
                    let d = dist(o, &hyps[hi]);
                    if d <= cfg.match_distance && !used_h[hi] {
                        used_o[oi] = true;
                        used_h[hi] = true;
                        pairs.push((oi, hi, d));
                    }
                }
            }
        }
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (oi, o) in objects.iter().enumerate().filter(|(i, _)| !used_o[*i]) {
            for (hi, h) in hyps.iter().enumerate().filter(|(i, _)| !used_h[*i]) {
                let d = dist(o, h);
                if d <= cfg.match_distance {
                    cands.push((d, oi, hi));
                }
            }
        }
        cands.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then(objects[a.1].id.cmp(&objects[b.1].id))
                .then(hyps[a.2].id.cmp(&hyps[b.2].id))
        });
        for (d, oi, hi) in cands {
            if !used_o[oi] && !used_h[hi] {
                used_o[oi] = true;
                used_h[hi] = true;
                pairs.push((oi, hi, d));
            }
        }
        let mut frame_matches = Vec::with_capacity(pairs.len());
        for &(oi, hi, d) in &pairs {
            let (o, h) = (objects[oi].id, hyps[hi].id);
            if last.get(&o).is_some_and(|&prev| prev != h) {
                m.id_switches += 1;
            }
            last.insert(o, h);
            dsum += d;
            frame_matches.push((o, h));
        }
        frame_matches.sort_unstable();
        for (oi, o) in objects.iter().enumerate() {
            let e = present.entry(o.id).or_default();
            e.0 += 1;
            e.1 += used_o[oi] as usize;
        }
        m.matches += pairs.len();
        m.misses += objects.len() - pairs.len();
        m.false_positives += hyps.len() - pairs.len();
        all.push(frame_matches);
    }
    m.mota = if m.objects == 0 {
        1.0
    } else {
        1.0 - (m.misses + m.false_positives + m.id_switches) as f64 / m.objects as f64
    };
    m.motp = if m.matches == 0 { 0.0 } else { dsum / m.matches as f64 };
    m.tracks = present.len();
    for &(n, hit) in present.values() {
        let r = hit as f64 / n as f64;
        if r > cfg.mostly_tracked {
            m.mostly_tracked += 1;
        } else if r < cfg.mostly_lost {
            m.mostly_lost += 1;
        } else {
            m.partially_tracked += 1;
        }
    }
    (m, all)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PoseErrors {
    /// Euclidean centre distance, metres.
    pub position: ErrorStats,
    /// Along the true heading, metres.
    pub longitudinal: ErrorStats,
    /// Across the true heading, metres.
    pub lateral: ErrorStats,
    pub heading_deg: ErrorStats,
    pub length: ErrorStats,
    pub width: ErrorStats,
    pub height: ErrorStats,
    pub speed: ErrorStats,
}

#[derive(Debug, Default)]
struct ErrorSamples {
    position: Vec<f64>,
    longitudinal: Vec<f64>,
    lateral: Vec<f64>,
    heading: Vec<f64>,
    length: Vec<f64>,
    width: Vec<f64>,
    height: Vec<f64>,
    speed: Vec<f64>,
}

impl ErrorSamples {
    fn stats(&self) -> PoseErrors {
        PoseErrors {
            position: ErrorStats::from_values(&self.position),
            longitudinal: ErrorStats::from_values(&self.longitudinal),
            lateral: ErrorStats::from_values(&self.lateral),
            heading_deg: ErrorStats::from_values(&self.heading),
            length: ErrorStats::from_values(&self.length),
            width: ErrorStats::from_values(&self.width),
            height: ErrorStats::from_values(&self.height),
            speed: ErrorStats::from_values(&self.speed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleScore {
    pub id: u64,
    pub frames_in_view: usize,
    pub frames_matched: usize,
    pub errors: PoseErrors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub mot: MotMetrics,
    pub errors: PoseErrors,
    pub vehicles: Vec<VehicleScore>,
}

impl ScoreReport {
    pub fn mean_position_error(&self) -> f64 {
        self.errors.position.mean
    }
}

/// Scores exported trajectories against the ground truth of the same scene.
/// Objects are the vehicles for which a detection was emitted.
/// A matched (truth, hypothesis) pair in one frame.
#[derive(Debug, Clone, Copy)]
pub struct MatchedPair<'a> {
    pub frame: usize,
    pub truth: &'a VehicleTruth,
    pub record: &'a TrajectoryRecord,
}

impl MatchedPair<'_> {
    pub fn position_error(&self) -> f64 {
        (self.record.x - self.truth.x).hypot(self.record.y - self.truth.y)
    }
}

/// Runs CLEAR-MOT on in-view vehicles and returns the metrics with every
/// matched pair in frame order.
pub fn match_records<'a>(
    truth: &'a GroundTruth,
    records: &'a [TrajectoryRecord],
    cfg: &ScoreConfig,
) -> (MotMetrics, Vec<MatchedPair<'a>>) {
    let mut by_frame: BTreeMap<usize, Vec<&TrajectoryRecord>> = BTreeMap::new();
    for r in records {
        by_frame.entry(r.frame).or_default().push(r);
    }
    let frames: Vec<(Vec<Object>, Vec<Object>)> = truth
        .frames
        .iter()
        .map(|f| {
            let objects = f.vehicles.iter().filter(|v| v.in_view).map(|v| Object { id: v.id, x: v.x, y: v.y }).collect();
            let hyps = by_frame
                .get(&f.frame)
                .map(|rs| rs.iter().map(|r| Object { id: r.track_id, x: r.x, y: r.y }).collect())
                .unwrap_or_default();
            (objects, hyps)
        })
        .collect();
    let (mot, matches) = clear_mot(&frames, cfg);
    let mut pairs = Vec::new();
    for (f, fm) in truth.frames.iter().zip(&matches) {
        let recs = by_frame.get(&f.frame);
        for &(oid, hid) in fm {
            pairs.push(MatchedPair {
                frame: f.frame,
                truth: f.vehicles.iter().find(|v| v.id == oid).expect("matched object exists"),
                record: recs.and_then(|rs| rs.iter().find(|r| r.track_id == hid)).copied().expect("matched hypothesis exists"),
            });
        }
    }
    (mot, pairs)
}

pub fn score(truth: &GroundTruth, records: &[TrajectoryRecord], cfg: &ScoreConfig) -> ScoreReport {
    let (mot, pairs) = match_records(truth, records, cfg);
    let mut total = ErrorSamples::default();
    let mut per: BTreeMap<u64, (usize, ErrorSamples)> = BTreeMap::new();
    for f in &truth.frames {
        for v in f.vehicles.iter().filter(|v| v.in_view) {
            per.entry(v.id).or_default().0 += 1;
        }
    }
    for p in &pairs {
        let (v, r) = (p.truth, p.record);
        let dims = truth.vehicle(v.id).map_or([f64::NAN; 3], |i| i.dimensions);
        let (dx, dy) = (r.x - v.x, r.y - v.y);
        let (c, s) = (v.heading.cos(), v.heading.sin());
        let e = &mut per.get_mut(&v.id).expect("counted above").1;
        for samples in [&mut total, e] {
            samples.position.push(dx.hypot(dy));
            samples.longitudinal.push(dx * c + dy * s);
            samples.lateral.push(-dx * s + dy * c);
            samples.heading.push(angle_diff(r.heading, v.heading).to_degrees());
            samples.length.push(r.length - dims[0]);
            samples.width.push(r.width - dims[1]);
            samples.height.push(r.height - dims[2]);
            samples.speed.push(r.speed - v.speed);
        }
    }
    let vehicles = per
        .into_iter()
        .map(|(id, (n, e))| VehicleScore {
            id,
            frames_in_view: n,
            frames_matched: e.position.len(),
            errors: e.stats(),
        })
        .collect();
    ScoreReport { mot, errors: total.stats(), vehicles }
}
