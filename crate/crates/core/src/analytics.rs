//! Traffic analytics over reconstructed trajectory datasets: pattern counts,
//! lane speed statistics, time-to-collision, post-encroachment time and
//! rule-based incident detection.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Rotation2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::angle::{angle_diff, wrap_half_open};
use crate::error::{Error, Result};
use crate::io;
use crate::semantic_map::{point_in_polygon, traverse_sequence, MapSegment, SegmentType, SemanticMap};
use crate::state_estimation::TrajectoryRecord;

/// Resolution of entry and exit times found by bisection, in seconds.
pub const OCCUPANCY_RESOLUTION: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error("unknown segment id {0:?}")]
    UnknownSegment(String),
    #[error("invalid count query: {0}")]
    InvalidQuery(String),
    #[error("invalid incident rule: {0}")]
    InvalidRule(String),
    #[error("trajectory {track_id}: {message}")]
    InvalidTrajectory { track_id: u64, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
}

impl Sample {
    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn direction(&self) -> Vector2<f64> {
        Vector2::new(self.heading.cos(), self.heading.sin())
    }

    /// Corners of the oriented ground rectangle, counter-clockwise.
    pub fn footprint(&self) -> [Vector2<f64>; 4] {
        let r = Rotation2::new(self.heading);
        let (hl, hw) = (0.5 * self.length, 0.5 * self.width);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(a, b)| self.position() + r * Vector2::new(a, b))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub track_id: u64,
    pub vehicle_type: String,
    pub samples: Vec<Sample>,
}

impl Trajectory {
    pub fn new(track_id: u64, vehicle_type: impl Into<String>, samples: Vec<Sample>) -> Result<Self, AnalyticsError> {
        let t = Self {
            track_id,
            vehicle_type: vehicle_type.into(),
            samples,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), AnalyticsError> {
        let bad = |message: String| AnalyticsError::InvalidTrajectory {
            track_id: self.track_id,
            message,
        };
        if self.samples.is_empty() {
            return Err(bad("no samples".into()));
        }
        for (i, s) in self.samples.iter().enumerate() {
            let vals = [s.t, s.x, s.y, s.heading, s.speed, s.length, s.width, s.height];
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("non-finite value at sample {i}")));
            }
            if s.speed < 0.0 {
                return Err(bad(format!("negative speed at sample {i}")));
            }
            if i > 0 && s.t <= self.samples[i - 1].t {
                return Err(bad(format!("timestamps not increasing at sample {i}")));
            }
        }
        Ok(())
    }

    pub fn start(&self) -> f64 {
        self.samples[0].t
    }

    pub fn end(&self) -> f64 {
        self.samples[self.samples.len() - 1].t
    }

    /// Linear interpolation in position, speed and dimensions; heading along
    /// the shorter arc. `None` outside the sampled time span.
    pub fn state_at(&self, t: f64) -> Option<Sample> {
        if !(t >= self.start() && t <= self.end()) {
            return None;
        }
        let i = self.samples.partition_point(|s| s.t <= t);
        if i == self.samples.len() {
            return Some(self.samples[i - 1]);
        }
        let (a, b) = (&self.samples[i - 1], &self.samples[i]);
        let w = (t - a.t) / (b.t - a.t);
        let lerp = |p: f64, q: f64| p + (q - p) * w;
        Some(Sample {
            t,
            x: lerp(a.x, b.x),
            y: lerp(a.y, b.y),
            heading: wrap_half_open(a.heading + angle_diff(b.heading, a.heading) * w),
            speed: lerp(a.speed, b.speed),
            length: lerp(a.length, b.length),
            width: lerp(a.width, b.width),
            height: lerp(a.height, b.height),
        })
    }

    pub fn timed_positions(&self) -> Vec<(f64, Vector2<f64>)> {
        self.samples.iter().map(|s| (s.t, s.position())).collect()
    }
}

/// Groups exported records by track id, ordered by id then timestamp.
pub fn trajectories_from_records(records: &[TrajectoryRecord]) -> Result<Vec<Trajectory>, AnalyticsError> {
    let mut groups: BTreeMap<u64, (String, Vec<Sample>)> = BTreeMap::new();
    for r in records {
        let entry = groups.entry(r.track_id).or_insert_with(|| (r.vehicle_type.clone(), Vec::new()));
        entry.1.push(Sample {
            t: r.timestamp,
            x: r.x,
            y: r.y,
            heading: r.heading,
            speed: r.speed,
            length: r.length,
            width: r.width,
            height: r.height,
        });
    }
    groups
        .into_iter()
        .map(|(id, (ty, mut samples))| {
            samples.sort_by(|a, b| a.t.total_cmp(&b.t));
            Trajectory::new(id, ty, samples)
        })
        .collect()
}

pub fn load_dataset(path: &Path) -> Result<Vec<Trajectory>> {
    let records = crate::state_estimation::load_trajectories(path)?;
    Ok(trajectories_from_records(&records)?)
}

// ---------------------------------------------------------------------------
// Counting

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentPredicate {
    Id(String),
    AnyOf(Vec<String>),
}

impl SegmentPredicate {
    pub fn matches(&self, id: &str) -> bool {
        match self {
            Self::Id(s) => s == id,
            Self::AnyOf(v) => v.iter().any(|s| s == id),
        }
    }

    fn ids(&self) -> Vec<&str> {
        match self {
            Self::Id(s) => vec![s],
            Self::AnyOf(v) => v.iter().map(String::as_str).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupKey {
    /// Segment matched by the first pattern element.
    EntryLane,
    /// Segment matched by the last pattern element.
    ExitLane,
    VehicleType,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountQuery {
    #[serde(default)]
    pub name: String,
    pub pattern: Vec<SegmentPredicate>,
    #[serde(default)]
    pub group_by: Vec<GroupKey>,
}

impl CountQuery {
    pub fn validate(&self, map: &SemanticMap) -> Result<(), AnalyticsError> {
        if self.pattern.is_empty() {
            return Err(AnalyticsError::InvalidQuery("empty pattern".into()));
        }
        for p in &self.pattern {
            let ids = p.ids();
            if ids.is_empty() {
                return Err(AnalyticsError::InvalidQuery("empty any_of predicate".into()));
            }
            if let Some(id) = ids.iter().find(|id| map.segment(id).is_none()) {
                return Err(AnalyticsError::UnknownSegment(id.to_string()));
            }
        }
        Ok(())
    }
}

/// Leftmost subsequence match of `pattern` in `sequence`; returns the
/// matched positions.
pub fn match_subsequence(sequence: &[Option<String>], pattern: &[SegmentPredicate]) -> Option<Vec<usize>> {
    let mut out = Vec::with_capacity(pattern.len());
    let mut i = 0;
    for p in pattern {
        while i < sequence.len() && !sequence[i].as_deref().is_some_and(|id| p.matches(id)) {
            i += 1;
        }
        if i == sequence.len() {
            return None;
        }
        out.push(i);
        i += 1;
    }
    Some(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRow {
    pub group: Vec<String>,
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountResult {
    pub name: String,
    pub trajectories: usize,
    pub matched: usize,
    pub rows: Vec<CountRow>,
}

pub fn count_patterns(dataset: &[Trajectory], map: &SemanticMap, query: &CountQuery) -> Result<CountResult> {
    query.validate(map)?;
    let mut tally: BTreeMap<Vec<String>, usize> = BTreeMap::new();
    let mut matched = 0;
    for t in dataset {
        let seq = traverse_sequence(map, &t.timed_positions())?;
        let Some(pos) = match_subsequence(&seq, &query.pattern) else {
            continue;
        };
        matched += 1;
        let seg = |i: usize| seq[pos[i]].clone().unwrap_or_default();
        let key = query
            .group_by
            .iter()
            .map(|k| match k {
                GroupKey::EntryLane => seg(0),
                GroupKey::ExitLane => seg(pos.len() - 1),
                GroupKey::VehicleType => t.vehicle_type.clone(),
            })
            .collect();
        *tally.entry(key).or_default() += 1;
    }
    let rows = tally
        .into_iter()
        .map(|(group, count)| CountRow {
            group,
            count,
            percent: 100.0 * count as f64 / matched as f64,
        })
        .collect();
    Ok(CountResult {
        name: query.name.clone(),
        trajectories: dataset.len(),
        matched,
        rows,
    })
}

// ---------------------------------------------------------------------------
// Speed statistics

pub const PERCENTILES: [f64; 5] = [5.0, 25.0, 50.0, 75.0, 95.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedSummary {
    pub segment: String,
    pub vehicles: usize,
    pub mean: Option<f64>,
    /// Nearest-rank values at [`PERCENTILES`].
    pub percentiles: Vec<(f64, f64)>,
    pub speed_limit: Option<f64>,
    /// Share of vehicles whose mean in-segment speed exceeds the limit.
    pub percent_above_limit: Option<f64>,
}

/// Nearest-rank percentile of sorted values.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

pub fn speed_stats(dataset: &[Trajectory], map: &SemanticMap, segment_ids: &[String]) -> Result<Vec<SpeedSummary>, AnalyticsError> {
    segment_ids
        .iter()
        .map(|id| {
            let seg = map.segment(id).ok_or_else(|| AnalyticsError::UnknownSegment(id.clone()))?;
            let mut speeds: Vec<f64> = dataset
                .iter()
                .filter_map(|t| {
                    let inside: Vec<f64> = t
                        .samples
                        .iter()
                        .filter(|s| map.locate_id(&s.position()) == Some(id.as_str()))
                        .map(|s| s.speed)
                        .collect();
                    (!inside.is_empty()).then(|| inside.iter().sum::<f64>() / inside.len() as f64)
                })
                .collect();
            speeds.sort_by(f64::total_cmp);
            let n = speeds.len();
            let limit = seg.lane.speed_limit;
            Ok(SpeedSummary {
                segment: id.clone(),
                vehicles: n,
                mean: (n > 0).then(|| speeds.iter().sum::<f64>() / n as f64),
                percentiles: if n > 0 { PERCENTILES.iter().map(|&p| (p, percentile(&speeds, p))).collect() } else { Vec::new() },
                speed_limit: limit,
                percent_above_limit: match limit {
                    Some(l) if n > 0 => Some(100.0 * speeds.iter().filter(|&&v| v > l).count() as f64 / n as f64),
                    _ => None,
                },
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Time to collision

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ttc {
    /// Seconds; `0` on collision.
    pub ttc: f64,
    pub gap: f64,
    pub closing_speed: f64,
    pub collision: bool,
}

/// Time to collision from a bumper gap and the two speeds.
pub fn ttc_from_gap(gap: f64, v_follow: f64, v_lead: f64) -> Option<Ttc> {
    let closing_speed = v_follow - v_lead;
    if gap <= 0.0 {
        return Some(Ttc { ttc: 0.0, gap, closing_speed, collision: true });
    }
    (closing_speed > 0.0).then(|| Ttc {
        ttc: gap / closing_speed,
        gap,
        closing_speed,
        collision: false,
    })
}

/// Bumper gap along `direction` (unit) between a follower and its leader.
pub fn bumper_gap(lead: &Sample, follow: &Sample, direction: &Vector2<f64>) -> f64 {
    (lead.position() - follow.position()).dot(direction) - 0.5 * (lead.length + follow.length)
}

/// TTC at `t` measured along `direction`, or along the follower's heading.
pub fn ttc(lead: &Trajectory, follow: &Trajectory, t: f64, direction: Option<Vector2<f64>>) -> Option<Ttc> {
    let (l, f) = (lead.state_at(t)?, follow.state_at(t)?);
    let d = direction.map(|d| d.normalize()).unwrap_or_else(|| f.direction());
    ttc_from_gap(bumper_gap(&l, &f, &d), f.speed, l.speed)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TtcConfig {
    /// Largest centre separation along the lane for a leader, metres.
    pub horizon: f64,
}

impl Default for TtcConfig {
    fn default() -> Self {
        Self { horizon: 100.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtcSample {
    pub t: f64,
    pub follower: u64,
    pub leader: u64,
    #[serde(flatten)]
    pub value: Ttc,
}

fn lane_direction(seg: &MapSegment, fallback: Vector2<f64>) -> Vector2<f64> {
    seg.lane
        .direction
        .map(|[a, b]| Vector2::new(a, b).normalize())
        .unwrap_or(fallback)
}

/// TTC series for every follower sample: the leader is the nearest vehicle
/// ahead within the horizon whose centre lies in the same lane segment.
pub fn ttc_series(dataset: &[Trajectory], map: &SemanticMap, cfg: &TtcConfig) -> Vec<TtcSample> {
    let mut out = Vec::new();
    for f in dataset {
        for fs in &f.samples {
            let Some(seg) = map.locate(&fs.position()) else { continue };
            if seg.segment_type != SegmentType::DrivingLane {
                continue;
            }
            let dir = lane_direction(seg, fs.direction());
            let mut best: Option<(f64, u64, Sample)> = None;
            for l in dataset {
                if l.track_id == f.track_id {
                    continue;
                }
                let Some(ls) = l.state_at(fs.t) else { continue };
                if map.locate_id(&ls.position()) != Some(seg.id.as_str()) {
                    continue;
                }
                let ahead = (ls.position() - fs.position()).dot(&dir);
                if ahead > 0.0 && ahead <= cfg.horizon && best.as_ref().is_none_or(|b| ahead < b.0) {
                    best = Some((ahead, l.track_id, ls));
                }
            }
            if let Some((_, leader, ls)) = best {
                if let Some(value) = ttc_from_gap(bumper_gap(&ls, fs, &dir), fs.speed, ls.speed) {
                    out.push(TtcSample { t: fs.t, follower: f.track_id, leader, value });
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Post encroachment time

/// Closed time interval during which a footprint overlaps a zone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub enter: f64,
    pub exit: f64,
}

fn segments_cross(a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>, d: &Vector2<f64>) -> bool {
    let orient = |p: &Vector2<f64>, q: &Vector2<f64>, r: &Vector2<f64>| (q - p).perp(&(r - p));
    let on = |p: &Vector2<f64>, q: &Vector2<f64>, r: &Vector2<f64>| {
        r.x >= p.x.min(q.x) && r.x <= p.x.max(q.x) && r.y >= p.y.min(q.y) && r.y <= p.y.max(q.y)
    };
    let (d1, d2) = (orient(c, d, a), orient(c, d, b));
    let (d3, d4) = (orient(a, b, c), orient(a, b, d));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on(c, d, a)) || (d2 == 0.0 && on(c, d, b)) || (d3 == 0.0 && on(a, b, c)) || (d4 == 0.0 && on(a, b, d))
}

/// Whether two simple polygons share at least one point.
pub fn polygons_intersect(p: &[Vector2<f64>], q: &[Vector2<f64>]) -> bool {
    if p.iter().any(|v| point_in_polygon(q, v)) || q.iter().any(|v| point_in_polygon(p, v)) {
        return true;
    }
    let edges = |poly: &[Vector2<f64>]| (0..poly.len()).map(|i| (poly[i], poly[(i + 1) % poly.len()])).collect::<Vec<_>>();
    let qe = edges(q);
    edges(p).iter().any(|(a, b)| qe.iter().any(|(c, d)| segments_cross(a, b, c, d)))
}

fn occupies(t: &Trajectory, zone: &MapSegment, time: f64) -> bool {
    t.state_at(time).is_some_and(|s| polygons_intersect(&s.footprint(), &zone.polygon))
}

/// Bisects a state change between `lo` and `hi` down to the resolution.
fn refine(t: &Trajectory, zone: &MapSegment, mut lo: f64, mut hi: f64) -> f64 {
    let at_lo = occupies(t, zone, lo);
    while hi - lo > OCCUPANCY_RESOLUTION {
        let mid = 0.5 * (lo + hi);
        if occupies(t, zone, mid) == at_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Intervals in which the vehicle footprint overlaps the zone.
pub fn occupancy(t: &Trajectory, zone: &MapSegment) -> Vec<Interval> {
    let mut out = Vec::new();
    let mut open: Option<f64> = None;
    let mut prev: Option<(f64, bool)> = None;
    for s in &t.samples {
        let inside = polygons_intersect(&s.footprint(), &zone.polygon);
        match prev {
            None if inside => open = Some(s.t),
            Some((pt, was)) if was != inside => {
                let edge = refine(t, zone, pt, s.t);
                if inside {
                    open = Some(edge);
                } else if let Some(enter) = open.take() {
                    out.push(Interval { enter, exit: edge });
                }
            }
            _ => {}
        }
        prev = Some((s.t, inside));
    }
    if let Some(enter) = open {
        out.push(Interval { enter, exit: t.end() });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PetOutcome {
    pub pet: Option<f64>,
    /// Occupancy intervals overlap.
    pub conflict: bool,
    pub first_exit: Option<f64>,
    pub second_entry: Option<f64>,
}

/// PET from occupancy intervals: the second's first entry minus the
/// first's last exit, when the second arrives after the first has left.
pub fn pet_from_intervals(first: &[Interval], second: &[Interval]) -> PetOutcome {
    let first_exit = first.iter().map(|i| i.exit).reduce(f64::max);
    let second_entry = second.iter().map(|i| i.enter).reduce(f64::min);
    let conflict = first
        .iter()
        .any(|a| second.iter().any(|b| a.enter <= b.exit && b.enter <= a.exit));
    let pet = match (first_exit, second_entry) {
        (Some(x), Some(e)) if !conflict && e >= x => Some(e - x),
        _ => None,
    };
    PetOutcome { pet, conflict, first_exit, second_entry }
}

/// Occupancy of a vehicle that is still inside the zone at the end of its
/// record has no exit, so it can only play the second role.
pub fn pet(first: &Trajectory, second: &Trajectory, zone: &MapSegment) -> PetOutcome {
    let a = occupancy(first, zone);
    let b = occupancy(second, zone);
    let mut out = pet_from_intervals(&a, &b);
    if a.last().is_some_and(|i| i.exit == first.end() && occupies(first, zone, first.end())) {
        out.pet = None;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PetRecord {
    pub zone: String,
    pub first: u64,
    pub second: u64,
    pub pet: Option<f64>,
    pub conflict: bool,
}

/// PET for every pair of vehicles that both occupy the zone, in the order
/// that yields a value; conflicting pairs are reported once without one.
pub fn pet_pairs(dataset: &[Trajectory], zone: &MapSegment) -> Vec<PetRecord> {
    let occ: Vec<Vec<Interval>> = dataset.iter().map(|t| occupancy(t, zone)).collect();
    let mut out = Vec::new();
    for i in 0..dataset.len() {
        for j in i + 1..dataset.len() {
            if occ[i].is_empty() || occ[j].is_empty() {
                continue;
            }
            let (a, b) = if occ[i][0].enter <= occ[j][0].enter { (i, j) } else { (j, i) };
            let o = pet(&dataset[a], &dataset[b], zone);
            if o.pet.is_some() || o.conflict {
                out.push(PetRecord {
                    zone: zone.id.clone(),
                    first: dataset[a].track_id,
                    second: dataset[b].track_id,
                    pet: o.pet,
                    conflict: o.conflict,
                });
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Incidents

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IncidentRule {
    /// Vehicle centre inside a forbidden zone.
    AreaViolation { zone: String },
    /// PET below `threshold` seconds in a zone.
    PetBelow { zone: String, threshold: f64 },
    /// |acceleration| above `threshold` m/s², from central differences of
    /// speed smoothed over `window` samples.
    AccelerationAbove {
        threshold: f64,
        #[serde(default = "default_window")]
        window: usize,
    },
    /// Speed above `limit`, or above the lane's own limit when absent,
    /// optionally restricted to one zone.
    SpeedAboveLimit {
        #[serde(default)]
        zone: Option<String>,
        #[serde(default)]
        limit: Option<f64>,
    },
}

fn default_window() -> usize {
    5
}

impl IncidentRule {
    pub fn name(&self) -> &'static str {
        match self {
            Self::AreaViolation { .. } => "area_violation",
            Self::PetBelow { .. } => "pet_below",
            Self::AccelerationAbove { .. } => "acceleration_above",
            Self::SpeedAboveLimit { .. } => "speed_above_limit",
        }
    }

    pub fn validate(&self, map: &SemanticMap) -> Result<(), AnalyticsError> {
        let zone_ok = |z: &str| map.segment(z).map(|_| ()).ok_or_else(|| AnalyticsError::UnknownSegment(z.into()));
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(AnalyticsError::InvalidRule(format!("{name} must be positive, got {v}")))
            }
        };
        match self {
            Self::AreaViolation { zone } => zone_ok(zone),
            Self::PetBelow { zone, threshold } => {
                zone_ok(zone)?;
                positive("threshold", *threshold)
            }
            Self::AccelerationAbove { threshold, window } => {
                if *window == 0 {
                    return Err(AnalyticsError::InvalidRule("window must be at least 1".into()));
                }
                positive("threshold", *threshold)
            }
            Self::SpeedAboveLimit { zone, limit } => {
                if let Some(z) = zone {
                    zone_ok(z)?;
                }
                match limit {
                    Some(l) => positive("limit", *l),
                    None => Ok(()),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Incident {
    pub rule: usize,
    pub kind: String,
    pub track_id: u64,
    pub other_track: Option<u64>,
    pub start: f64,
    pub end: f64,
    /// Largest magnitude of the rule's quantity within the episode; for area
    /// violations the time spent inside.
    pub peak: f64,
}

/// Centred moving average over `window` samples, shrinking at the ends.
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let h = window / 2;
    (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h + 1).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Accelerations by central differences, one-sided at the ends.
pub fn accelerations(t: &Trajectory, window: usize) -> Vec<f64> {
    let v = smooth(&t.samples.iter().map(|s| s.speed).collect::<Vec<_>>(), window);
    let ts: Vec<f64> = t.samples.iter().map(|s| s.t).collect();
    let n = v.len();
    if n < 2 {
        return vec![0.0; n];
    }
    (0..n)
        .map(|i| {
            let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
            (v[b] - v[a]) / (ts[b] - ts[a])
        })
        .collect()
}

/// Maximal runs of samples where `value` is `Some`, as incidents.
fn episodes(t: &Trajectory, rule: usize, kind: &str, values: &[Option<f64>], area: bool) -> Vec<Incident> {
    let mut out: Vec<Incident> = Vec::new();
    let mut current: Option<Incident> = None;
    for (s, v) in t.samples.iter().zip(values) {
        match (v, current.as_mut()) {
            (Some(v), Some(c)) => {
                c.end = s.t;
                c.peak = if area { c.end - c.start } else { c.peak.max(v.abs()) };
            }
            (Some(v), None) => {
                current = Some(Incident {
                    rule,
                    kind: kind.into(),
                    track_id: t.track_id,
                    other_track: None,
                    start: s.t,
                    end: s.t,
                    peak: if area { 0.0 } else { v.abs() },
                });
            }
            (None, _) => out.extend(current.take()),
        }
    }
    out.extend(current);
    out
}

pub fn detect_incidents(dataset: &[Trajectory], map: &SemanticMap, rules: &[IncidentRule]) -> Result<Vec<Incident>, AnalyticsError> {
    for r in rules {
        r.validate(map)?;
    }
    let mut out = Vec::new();
    for (ri, rule) in rules.iter().enumerate() {
        let kind = rule.name();
        match rule {
            IncidentRule::AreaViolation { zone } => {
                let z = map.segment(zone).expect("validated");
                for t in dataset {
                    let vals: Vec<Option<f64>> = t.samples.iter().map(|s| z.contains(&s.position()).then_some(0.0)).collect();
                    out.extend(episodes(t, ri, kind, &vals, true));
                }
            }
            IncidentRule::PetBelow { zone, threshold } => {
                let z = map.segment(zone).expect("validated");
                for p in pet_pairs(dataset, z) {
                    if let Some(v) = p.pet.filter(|v| v < threshold) {
                        let first = dataset.iter().find(|t| t.track_id == p.first).expect("pair from dataset");
                        let exit = occupancy(first, z).last().map_or(0.0, |i| i.exit);
                        out.push(Incident {
                            rule: ri,
                            kind: kind.into(),
                            track_id: p.second,
                            other_track: Some(p.first),
                            start: exit,
                            end: exit + v,
                            peak: v,
                        });
                    }
                }
            }
            IncidentRule::AccelerationAbove { threshold, window } => {
                for t in dataset {
                    let vals: Vec<Option<f64>> = accelerations(t, *window).into_iter().map(|a| (a.abs() > *threshold).then_some(a)).collect();
                    out.extend(episodes(t, ri, kind, &vals, false));
                }
            }
            IncidentRule::SpeedAboveLimit { zone, limit } => {
                for t in dataset {
                    let vals: Vec<Option<f64>> = t
                        .samples
                        .iter()
                        .map(|s| {
                            let p = s.position();
                            if let Some(z) = zone {
                                if !map.segment(z).expect("validated").contains(&p) {
                                    return None;
                                }
                            }
                            let lim = limit.or_else(|| map.locate(&p).and_then(|seg| seg.lane.speed_limit))?;
                            (s.speed > lim).then_some(s.speed)
                        })
                        .collect();
                    out.extend(episodes(t, ri, kind, &vals, false));
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Fixed-width bins covering `[0, max)`; values outside are ignored.
pub fn histogram(values: &[f64], width: f64, max: f64) -> Vec<Bin> {
    let n = (max / width).ceil() as usize;
    let mut bins: Vec<Bin> = (0..n)
        .map(|k| Bin { lo: k as f64 * width, hi: ((k + 1) as f64 * width).min(max), count: 0 })
        .collect();
    for &v in values.iter().filter(|v| (0.0..max).contains(*v)) {
        let k = ((v / width).floor() as usize).min(n - 1);
        bins[k].count += 1;
    }
    bins
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyticsConfig {
    pub counts: Vec<CountQuery>,
    pub speed_segments: Vec<String>,
    pub pet_zones: Vec<String>,
    pub rules: Vec<IncidentRule>,
    pub ttc: TtcConfig,
    /// Bin width of the TTC and PET histograms, seconds.
    pub histogram_bin: f64,
    /// Upper edge of the histograms, seconds.
    pub histogram_max: f64,
}

impl Default for AnalyticsConfig {
    fn default() -> Self {
        Self {
            counts: Vec::new(),
            speed_segments: Vec::new(),
            pet_zones: Vec::new(),
            rules: Vec::new(),
            ttc: TtcConfig::default(),
            histogram_bin: 0.5,
            histogram_max: 10.0,
        }
    }
}

impl AnalyticsConfig {
    pub fn validate(&self, map: &SemanticMap) -> Result<(), AnalyticsError> {
        if !(self.histogram_bin > 0.0) {
            return Err(AnalyticsError::InvalidRule("histogram_bin must be positive".into()));
        }
        if !(self.histogram_max >= self.histogram_bin) || self.histogram_max / self.histogram_bin > 1e6 {
            return Err(AnalyticsError::InvalidRule("histogram_max must be at least one bin and at most 1e6 bins".into()));
        }
        if !(self.ttc.horizon > 0.0) {
            return Err(AnalyticsError::InvalidRule("ttc horizon must be positive".into()));
        }
        for q in &self.counts {
            q.validate(map)?;
        }
        for id in self.speed_segments.iter().chain(&self.pet_zones) {
            if map.segment(id).is_none() {
                return Err(AnalyticsError::UnknownSegment(id.clone()));
            }
        }
        for r in &self.rules {
            r.validate(map)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyticsReport {
    pub trajectories: usize,
    pub counts: Vec<CountResult>,
    pub speeds: Vec<SpeedSummary>,
    pub ttc: Vec<TtcSample>,
    pub ttc_histogram: Vec<Bin>,
    pub pet: Vec<PetRecord>,
    pub pet_histogram: Vec<Bin>,
    pub incidents: Vec<Incident>,
}

pub fn analyze(dataset: &[Trajectory], map: &SemanticMap, cfg: &AnalyticsConfig) -> Result<AnalyticsReport> {
    cfg.validate(map)?;
    let counts = cfg.counts.iter().map(|q| count_patterns(dataset, map, q)).collect::<Result<Vec<_>>>()?;
    let ttc = ttc_series(dataset, map, &cfg.ttc);
    let pet: Vec<PetRecord> = cfg
        .pet_zones
        .iter()
        .flat_map(|z| pet_pairs(dataset, map.segment(z).expect("validated")))
        .collect();
    Ok(AnalyticsReport {
        trajectories: dataset.len(),
        counts,
        speeds: speed_stats(dataset, map, &cfg.speed_segments)?,
        ttc_histogram: histogram(&ttc.iter().filter(|s| !s.value.collision).map(|s| s.value.ttc).collect::<Vec<_>>(), cfg.histogram_bin, cfg.histogram_max),
        pet_histogram: histogram(&pet.iter().filter_map(|p| p.pet).collect::<Vec<_>>(), cfg.histogram_bin, cfg.histogram_max),
        ttc,
        pet,
        incidents: detect_incidents(dataset, map, &cfg.rules)?,
    })
}

fn csv_bytes<F>(header: &[&str], fill: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut csv::Writer<Vec<u8>>) -> csv::Result<()>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)
        .and_then(|_| fill(&mut w))
        .map_err(|e| Error::Config(format!("csv: {e}")))?;
    w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))
}

fn opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

impl AnalyticsReport {
    /// File name and contents of every table and series in the report.
    pub fn files(&self) -> Result<Vec<(&'static str, Vec<u8>)>> {
        let counts = csv_bytes(&["query", "group", "count", "percent", "matched", "trajectories"], |w| {
            for c in &self.counts {
                for r in &c.rows {
                    w.write_record([c.name.clone(), r.group.join("|"), r.count.to_string(), r.percent.to_string(), c.matched.to_string(), c.trajectories.to_string()])?;
                }
            }
            Ok(())
        })?;
        let mut speed_header = vec!["segment".to_string(), "vehicles".into(), "mean".into()];
        speed_header.extend(PERCENTILES.iter().map(|p| format!("p{p}")));
        speed_header.extend(["speed_limit".into(), "percent_above_limit".into()]);
        let speed_header: Vec<&str> = speed_header.iter().map(String::as_str).collect();
        let speeds = csv_bytes(&speed_header, |w| {
            for s in &self.speeds {
                let mut row = vec![s.segment.clone(), s.vehicles.to_string(), opt(s.mean)];
                row.extend((0..PERCENTILES.len()).map(|i| opt(s.percentiles.get(i).map(|p| p.1))));
                row.extend([opt(s.speed_limit), opt(s.percent_above_limit)]);
                w.write_record(row)?;
            }
            Ok(())
        })?;
        let ttc = csv_bytes(&["t", "follower", "leader", "ttc", "gap", "closing_speed", "collision"], |w| {
            for s in &self.ttc {
                w.write_record([s.t.to_string(), s.follower.to_string(), s.leader.to_string(), s.value.ttc.to_string(), s.value.gap.to_string(), s.value.closing_speed.to_string(), s.value.collision.to_string()])?;
            }
            Ok(())
        })?;
        let pet = csv_bytes(&["zone", "first", "second", "pet", "conflict"], |w| {
            for p in &self.pet {
                w.write_record([p.zone.clone(), p.first.to_string(), p.second.to_string(), opt(p.pet), p.conflict.to_string()])?;
            }
            Ok(())
        })?;
        let hist = |bins: &[Bin]| {
            csv_bytes(&["lo", "hi", "count"], |w| {
                for b in bins {
                    w.write_record([b.lo.to_string(), b.hi.to_string(), b.count.to_string()])?;
                }
                Ok(())
            })
        };
        let incidents = csv_bytes(&["rule", "kind", "track_id", "other_track", "start", "end", "peak"], |w| {
            for i in &self.incidents {
                w.write_record([i.rule.to_string(), i.kind.clone(), i.track_id.to_string(), i.other_track.map(|v| v.to_string()).unwrap_or_default(), i.start.to_string(), i.end.to_string(), i.peak.to_string()])?;
            }
            Ok(())
        })?;
        Ok(vec![
            ("report.json", io::to_json_bytes(self)?),
            ("counts.csv", counts),
            ("speeds.csv", speeds),
            ("ttc_series.csv", ttc),
            ("ttc_histogram.csv", hist(&self.ttc_histogram)?),
            ("pet.csv", pet),
            ("pet_histogram.csv", hist(&self.pet_histogram)?),
            ("incidents.csv", incidents),
        ])
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, bytes) in self.files()? {
            io::write_atomic(&dir.join(name), &bytes)?;
        }
        Ok(())
    }
}
