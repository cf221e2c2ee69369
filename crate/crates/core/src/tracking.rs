//! Tracking by detection: bounding-box IoU association and track lifecycle.
//!
//! A track is born tentative, becomes confirmed after [`CONFIRM_HITS`]
//! consecutive associated frames and only then receives a public id. A
//! tentative track that misses a frame is dropped. Confirmed tracks become
//! lost after `max_misses` consecutive misses and finished at the end of the
//! sequence.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::camera::CameraModel;
use crate::keypoints::{FrameDetections, KeypointDetection};
use crate::model_fitting::VehicleFit;
use crate::semantic_map::SemanticMap;
use crate::state_estimation::{EkfState, ShapeEstimate};

pub const CONFIRM_HITS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssociationConfig {
    /// Pairs need IoU strictly above this.
    pub iou_threshold: f64,
    /// Consecutive misses after which a confirmed track is lost.
    pub max_misses: usize,
    /// Drop detections whose ground position is off the traversable area.
    pub map_gate: bool,
    /// Shift each track's last box by its last per-frame displacement.
    pub extrapolate_boxes: bool,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.3,
            max_misses: 10,
            map_gate: true,
            extrapolate_boxes: true,
        }
    }
}

impl AssociationConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(format!("iou_threshold must be in (0, 1), got {}", self.iou_threshold));
        }
        if self.max_misses == 0 {
            return Err("max_misses must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrackState {
    Tentative,
    Confirmed,
    Lost,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame: usize,
    pub detection_id: u64,
    pub bounding_box: [f64; 4],
    pub fit: Option<VehicleFit>,
    pub state: Option<EkfState>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    /// Creation-order key, stable for the life of the tracker.
    pub key: u64,
    /// Public id, assigned at confirmation.
    pub track_id: Option<u64>,
    pub state: TrackState,
    pub history: Vec<TrackRecord>,
    pub hits: usize,
    pub misses: usize,
    pub filter: Option<EkfState>,
    pub shape: Option<ShapeEstimate>,
    pub vehicle_type: Option<String>,
}

impl Track {
    pub fn is_active(&self) -> bool {
        matches!(self.state, TrackState::Tentative | TrackState::Confirmed)
    }

    pub fn was_confirmed(&self) -> bool {
        self.track_id.is_some()
    }

    pub fn last(&self) -> &TrackRecord {
        self.history.last().expect("tracks are created with one record")
    }

    /// Box expected at `frame`, linearly extrapolated from the last two records.
    pub fn predicted_box(&self, frame: usize, extrapolate: bool) -> [f64; 4] {
        let last = self.last();
        let n = self.history.len();
        if !extrapolate || n < 2 {
            return last.bounding_box;
        }
        let prev = &self.history[n - 2];
        let span = (last.frame - prev.frame) as f64;
        let ahead = frame.saturating_sub(last.frame) as f64;
        let mut b = last.bounding_box;
        for (i, v) in b.iter_mut().enumerate() {
            *v += (last.bounding_box[i] - prev.bounding_box[i]) / span * ahead;
        }
        b
    }
}

/// Intersection over union of two `[u_min, v_min, u_max, v_max]` boxes.
/// Defined as 0 when both boxes have zero area.
pub fn iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let area = |r: &[f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// One-to-one assignment of tracks (rows) to detections (columns).
pub trait Matcher {
    fn assign(&self, scores: &[Vec<f64>], threshold: f64) -> Vec<(usize, usize)>;
}

/// Greedy by descending score; ties go to the lower row, then the lower column.
#[derive(Debug, Clone, Copy, Default)]
pub struct GreedyMatcher;

impl Matcher for GreedyMatcher {
    fn assign(&self, scores: &[Vec<f64>], threshold: f64) -> Vec<(usize, usize)> {
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (t, row) in scores.iter().enumerate() {
            for (d, &s) in row.iter().enumerate() {
                if s > threshold {
                    pairs.push((s, t, d));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let rows = scores.len();
        let cols = scores.first().map_or(0, Vec::len);
        let (mut used_t, mut used_d) = (vec![false; rows], vec![false; cols]);
        let mut out = Vec::new();
        for (_, t, d) in pairs {
            if !used_t[t] && !used_d[d] {
                used_t[t] = true;
                used_d[d] = true;
                out.push((t, d));
            }
        }
        out.sort_unstable();
        out
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Association {
    /// (index into the track slice, index into the detection slice).
    pub matches: Vec<(usize, usize)>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_tracks: Vec<usize>,
}

/// Matches active tracks (ordered by key) to the boxes of one frame.
pub fn associate(
    tracks: &[&Track],
    frame: usize,
    boxes: &[[f64; 4]],
    cfg: &AssociationConfig,
    matcher: &dyn Matcher,
) -> Association {
    let scores: Vec<Vec<f64>> = tracks
        .iter()
        .map(|t| {
            let p = t.predicted_box(frame, cfg.extrapolate_boxes);
            boxes.iter().map(|b| iou(&p, b)).collect()
        })
        .collect();
    let matches = matcher.assign(&scores, cfg.iou_threshold);
    let mut det_used = vec![false; boxes.len()];
    let mut trk_used = vec![false; tracks.len()];
    for &(t, d) in &matches {
        trk_used[t] = true;
        det_used[d] = true;
    }
    Association {
        unmatched_detections: (0..boxes.len()).filter(|&d| !det_used[d]).collect(),
        unmatched_tracks: (0..tracks.len()).filter(|&t| !trk_used[t]).collect(),
        matches,
    }
}

/// Map and camera used to reject detections off the traversable area.
#[derive(Debug, Clone, Copy)]
pub struct Gate<'a> {
    pub map: &'a SemanticMap,
    pub camera: &'a CameraModel,
}

impl Gate<'_> {
    pub fn admits(&self, d: &KeypointDetection) -> bool {
        self.ground_position(d).is_some_and(|g| self.map.is_traversable(&g))
    }

    pub fn ground_position(&self, d: &KeypointDetection) -> Option<Vector2<f64>> {
        self.camera.back_project_to_ground(&d.bbox_center()).ok()
    }
}

/// What one call to [`Tracker::step`] did, in terms of track keys and
/// indices into the frame's detection list.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepReport {
    pub frame: usize,
    pub matched: Vec<(u64, usize)>,
    pub spawned: Vec<(u64, usize)>,
    pub gated: Vec<usize>,
    pub confirmed: Vec<u64>,
    pub lost: Vec<u64>,
    pub dropped: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct Tracker {
    pub config: AssociationConfig,
    tracks: Vec<Track>,
    next_key: u64,
    next_id: u64,
    last_frame: Option<usize>,
}

impl Tracker {
    pub fn new(config: AssociationConfig) -> Self {
        Self {
            config,
            tracks: Vec::new(),
            next_key: 0,
            next_id: 1,
            last_frame: None,
        }
    }

    pub fn tracks(&self) -> &[Track] {
        &self.tracks
    }

    pub fn track(&self, key: u64) -> Option<&Track> {
        self.tracks.iter().find(|t| t.key == key)
    }

    pub fn track_mut(&mut self, key: u64) -> Option<&mut Track> {
        self.tracks.iter_mut().find(|t| t.key == key)
    }

    /// Processes one frame; frames must be supplied in increasing order,
    /// including frames without detections.
    pub fn step(&mut self, frame: &FrameDetections, gate: Option<Gate<'_>>) -> StepReport {
        self.step_with(frame, gate, &GreedyMatcher)
    }

    pub fn step_with(&mut self, frame: &FrameDetections, gate: Option<Gate<'_>>, matcher: &dyn Matcher) -> StepReport {
        let f = frame.frame_index;
        assert!(self.last_frame.is_none_or(|l| f > l), "frames must be stepped in increasing order");
        self.last_frame = Some(f);
        let mut report = StepReport { frame: f, ..StepReport::default() };

        let mut candidates = Vec::new();
        for (i, d) in frame.detections.iter().enumerate() {
            match gate {
                Some(g) if self.config.map_gate && !g.admits(d) => report.gated.push(i),
                _ => candidates.push(i),
            }
        }
        let boxes: Vec<[f64; 4]> = candidates.iter().map(|&i| frame.detections[i].bounding_box).collect();

        let active: Vec<usize> = (0..self.tracks.len()).filter(|&i| self.tracks[i].is_active()).collect();
        let refs: Vec<&Track> = active.iter().map(|&i| &self.tracks[i]).collect();
        let assoc = associate(&refs, f, &boxes, &self.config, matcher);

        for &(t, d) in &assoc.matches {
            let det = &frame.detections[candidates[d]];
            let track = &mut self.tracks[active[t]];
            track.history.push(TrackRecord {
                frame: f,
                detection_id: det.detection_id,
                bounding_box: det.bounding_box,
                fit: None,
                state: None,
            });
            track.hits += 1;
            track.misses = 0;
            report.matched.push((track.key, candidates[d]));
            if track.state == TrackState::Tentative && track.hits >= CONFIRM_HITS {
                track.state = TrackState::Confirmed;
                track.track_id = Some(self.next_id);
                self.next_id += 1;
                report.confirmed.push(track.key);
            }
        }

        let mut drop = Vec::new();
        for &t in &assoc.unmatched_tracks {
            let track = &mut self.tracks[active[t]];
            track.hits = 0;
            track.misses += 1;
            match track.state {
                TrackState::Tentative => drop.push(track.key),
                TrackState::Confirmed if track.misses >= self.config.max_misses => {
                    track.state = TrackState::Lost;
                    report.lost.push(track.key);
                }
                _ => {}
            }
        }
        self.tracks.retain(|t| !drop.contains(&t.key));
        report.dropped = drop;

        for &d in &assoc.unmatched_detections {
            let det = &frame.detections[candidates[d]];
            let key = self.next_key;
            self.next_key += 1;
            self.tracks.push(Track {
                key,
                track_id: None,
                state: TrackState::Tentative,
                history: vec![TrackRecord {
                    frame: f,
                    detection_id: det.detection_id,
                    bounding_box: det.bounding_box,
                    fit: None,
                    state: None,
                }],
                hits: 1,
                misses: 0,
                filter: None,
                shape: None,
                vehicle_type: None,
            });
            report.spawned.push((key, candidates[d]));
        }
        report.matched.sort_unstable();
        report
    }

    /// Ends the sequence: confirmed and lost tracks finish, tentative ones are dropped.
    pub fn finish(&mut self) {
        self.tracks.retain(|t| t.state != TrackState::Tentative);
        for t in &mut self.tracks {
            t.state = TrackState::Finished;
        }
    }

    /// Tracks that were ever confirmed, ordered by public id.
    pub fn confirmed_tracks(&self) -> Vec<&Track> {
        let mut v: Vec<&Track> = self.tracks.iter().filter(|t| t.was_confirmed()).collect();
        v.sort_by_key(|t| t.track_id);
        v
    }
}
