//! Lane-level semantic map: typed ground polygons and point queries.
//!
//! Files are GeoJSON feature collections in a local metric frame. Each
//! feature is a polygon whose `properties` carry `segment_type` and the
//! optional lane attributes; the collection carries `scale` (meters per map
//! unit) and, optionally, the list of traversable segment types.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MapError {
    #[error("map scale must be positive, got {0}")]
    InvalidScale(f64),
    #[error("duplicate segment id {0:?}")]
    DuplicateId(String),
    #[error("segment {id:?}: {message}")]
    InvalidSegment { id: String, message: String },
    #[error("unsupported map file: {0}")]
    Format(String),
    #[error("timestamps must increase (sample {0})")]
    NonIncreasingTime(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentType {
    DrivingLane,
    CurbArea,
    Sidewalk,
    Crosswalk,
    BufferArea,
    NonTraversable,
    EncroachmentZone,
}

impl SegmentType {
    pub const ALL: [SegmentType; 7] = [
        SegmentType::DrivingLane,
        SegmentType::CurbArea,
        SegmentType::Sidewalk,
        SegmentType::Crosswalk,
        SegmentType::BufferArea,
        SegmentType::NonTraversable,
        SegmentType::EncroachmentZone,
    ];

    /// Types where vehicles may be tracked unless the map says otherwise.
    pub fn default_traversable() -> BTreeSet<SegmentType> {
        [
            SegmentType::DrivingLane,
            SegmentType::CurbArea,
            SegmentType::Crosswalk,
            SegmentType::BufferArea,
            SegmentType::EncroachmentZone,
        ]
        .into_iter()
        .collect()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LaneAttributes {
    /// Unit travel direction on the ground plane.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<[f64; 2]>,
    /// m/s.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed_limit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapSegment {
    pub id: String,
    /// Open ring in meters (the closing vertex is not repeated).
    pub polygon: Vec<Vector2<f64>>,
    pub segment_type: SegmentType,
    pub lane: LaneAttributes,
    area: f64,
    bounds: [f64; 4],
}

impl MapSegment {
    pub fn new(
        id: impl Into<String>,
        polygon: Vec<Vector2<f64>>,
        segment_type: SegmentType,
        lane: LaneAttributes,
    ) -> Result<Self, MapError> {
        let id = id.into();
        let bad = |m: &str| MapError::InvalidSegment { id: id.clone(), message: m.to_string() };
        let mut polygon = polygon;
        if polygon.len() >= 2 && polygon.first() == polygon.last() {
            polygon.pop();
        }
        if polygon.len() < 3 {
            return Err(bad("polygon needs at least 3 vertices"));
        }
        if !polygon.iter().all(|p| p.x.is_finite() && p.y.is_finite()) {
            return Err(bad("non-finite vertex"));
        }
        if !is_simple(&polygon) {
            return Err(bad("polygon is self-intersecting"));
        }
        let area = shoelace(&polygon).abs();
        if area <= 0.0 {
            return Err(bad("polygon has zero area"));
        }
        let mut bounds = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for p in &polygon {
            bounds = [bounds[0].min(p.x), bounds[1].min(p.y), bounds[2].max(p.x), bounds[3].max(p.y)];
        }
        Ok(Self { id, polygon, segment_type, lane, area, bounds })
    }

    pub fn rect(id: &str, x0: f64, y0: f64, x1: f64, y1: f64, t: SegmentType, lane: LaneAttributes) -> Result<Self, MapError> {
        let v = |x, y| Vector2::new(x, y);
        Self::new(id, vec![v(x0, y0), v(x1, y0), v(x1, y1), v(x0, y1)], t, lane)
    }

    pub fn area(&self) -> f64 {
        self.area
    }

    pub fn centroid(&self) -> Vector2<f64> {
        let n = self.polygon.len();
        let mut c = Vector2::zeros();
        let mut a2 = 0.0;
        for i in 0..n {
            let (p, q) = (self.polygon[i], self.polygon[(i + 1) % n]);
            let cross = p.x * q.y - q.x * p.y;
            a2 += cross;
            c += (p + q) * cross;
        }
        c / (3.0 * a2)
    }

    /// Closed containment: boundary points are inside.
    pub fn contains(&self, p: &Vector2<f64>) -> bool {
        let [x0, y0, x1, y1] = self.bounds;
        if p.x < x0 || p.x > x1 || p.y < y0 || p.y > y1 {
            return false;
        }
        point_in_polygon(&self.polygon, p)
    }
}

fn shoelace(poly: &[Vector2<f64>]) -> f64 {
    let n = poly.len();
    0.5 * (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p.x * q.y - q.x * p.y
        })
        .sum::<f64>()
}

fn cross(o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn on_segment(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> bool {
    let scale = (b - a).norm().max(1e-300);
    cross(a, b, p).abs() <= 1e-12 * scale * scale.max(1.0)
        && p.x >= a.x.min(b.x) - 1e-12
        && p.x <= a.x.max(b.x) + 1e-12
        && p.y >= a.y.min(b.y) - 1e-12
        && p.y <= a.y.max(b.y) + 1e-12
}

/// Even-odd rule with boundary points counted as inside.
pub fn point_in_polygon(poly: &[Vector2<f64>], p: &Vector2<f64>) -> bool {
    let n = poly.len();
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if on_segment(p, &a, &b) {
            return true;
        }
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    inside
}

fn segments_intersect(a: &Vector2<f64>, b: &Vector2<f64>, c: &Vector2<f64>, d: &Vector2<f64>) -> bool {
    let (d1, d2) = (cross(c, d, a), cross(c, d, b));
    let (d3, d4) = (cross(a, b, c), cross(a, b, d));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    on_segment(a, c, d) || on_segment(b, c, d) || on_segment(c, a, b) || on_segment(d, a, b)
}

fn is_simple(poly: &[Vector2<f64>]) -> bool {
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if a == b {
            return false;
        }
        for j in i + 1..n {
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                continue;
            }
            let (c, d) = (poly[j], poly[(j + 1) % n]);
            if segments_intersect(&a, &b, &c, &d) {
                return false;
            }
        }
    }
    true
}

#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    pub scale: f64,
    pub frame: String,
    pub segments: Vec<MapSegment>,
    pub traversable: BTreeSet<SegmentType>,
    index: BTreeMap<String, usize>,
}

impl SemanticMap {
    pub fn new(scale: f64, segments: Vec<MapSegment>, traversable: Option<BTreeSet<SegmentType>>) -> Result<Self, MapError> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(MapError::InvalidScale(scale));
        }
        let mut index = BTreeMap::new();
        for (i, s) in segments.iter().enumerate() {
            if index.insert(s.id.clone(), i).is_some() {
                return Err(MapError::DuplicateId(s.id.clone()));
            }
        }
        Ok(Self {
            scale,
            frame: "local".into(),
            segments,
            traversable: traversable.unwrap_or_else(SegmentType::default_traversable),
            index,
        })
    }

    pub fn segment(&self, id: &str) -> Option<&MapSegment> {
        self.index.get(id).map(|&i| &self.segments[i])
    }

    /// Containing segment; overlaps go to the smallest area, then the smaller id.
    pub fn locate(&self, p: &Vector2<f64>) -> Option<&MapSegment> {
        self.segments
            .iter()
            .filter(|s| s.contains(p))
            .min_by(|a, b| a.area.total_cmp(&b.area).then_with(|| a.id.cmp(&b.id)))
    }

    pub fn locate_id(&self, p: &Vector2<f64>) -> Option<&str> {
        self.locate(p).map(|s| s.id.as_str())
    }

    pub fn is_traversable(&self, p: &Vector2<f64>) -> bool {
        self.locate(p).is_some_and(|s| self.traversable.contains(&s.segment_type))
    }

    pub fn from_geojson_str(text: &str) -> Result<Self> {
        let fc: FeatureCollection = serde_json::from_str(text).map_err(|e| Error::json("semantic map", e))?;
        if fc.kind != "FeatureCollection" {
            return Err(MapError::Format(format!("expected FeatureCollection, got {}", fc.kind)).into());
        }
        let mut segments = Vec::with_capacity(fc.features.len());
        for f in fc.features {
            if f.geometry.kind != "Polygon" {
                return Err(MapError::Format(format!("feature {:?}: only Polygon geometry is supported", f.id)).into());
            }
            if f.geometry.coordinates.len() != 1 {
                return Err(MapError::InvalidSegment { id: f.id, message: "polygons with holes are not supported".into() }.into());
            }
            let ring = f.geometry.coordinates[0]
                .iter()
                .map(|c| Vector2::new(c[0] * fc.scale, c[1] * fc.scale))
                .collect();
            segments.push(MapSegment::new(f.id, ring, f.properties.segment_type, f.properties.lane)?);
        }
        let mut map = Self::new(fc.scale, segments, fc.traversable)?;
        map.frame = fc.frame;
        Ok(map)
    }

    pub fn to_geojson_bytes(&self) -> Result<Vec<u8>> {
        let features = self
            .segments
            .iter()
            .map(|s| {
                let mut ring: Vec<[f64; 2]> = s.polygon.iter().map(|p| [p.x / self.scale, p.y / self.scale]).collect();
                ring.push(ring[0]);
                Feature {
                    kind: "Feature".into(),
                    id: s.id.clone(),
                    properties: Properties { segment_type: s.segment_type, lane: s.lane },
                    geometry: Geometry { kind: "Polygon".into(), coordinates: vec![ring] },
                }
            })
            .collect();
        io::to_json_bytes(&FeatureCollection {
            kind: "FeatureCollection".into(),
            scale: self.scale,
            frame: self.frame.clone(),
            traversable: Some(self.traversable.clone()),
            features,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_geojson_str(&io::read_text(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_atomic(path, &self.to_geojson_bytes()?)
    }
}

/// Segment at each timestamped sample, consecutive repeats collapsed;
/// samples outside every segment appear as `None`.
pub fn traverse_sequence(map: &SemanticMap, samples: &[(f64, Vector2<f64>)]) -> Result<Vec<Option<String>>, MapError> {
    let mut out: Vec<Option<String>> = Vec::new();
    for (i, (t, p)) in samples.iter().enumerate() {
        if i > 0 && !(*t > samples[i - 1].0) {
            return Err(MapError::NonIncreasingTime(i));
        }
        let id = map.locate_id(p).map(str::to_string);
        if out.last() != Some(&id) {
            out.push(id);
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureCollection {
    #[serde(rename = "type")]
    kind: String,
    scale: f64,
    #[serde(default = "default_frame")]
    frame: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    traversable: Option<BTreeSet<SegmentType>>,
    features: Vec<Feature>,
}

fn default_frame() -> String {
    "local".into()
}

#[derive(Debug, Serialize, Deserialize)]
struct Feature {
    #[serde(rename = "type")]
    kind: String,
    id: String,
    properties: Properties,
    geometry: Geometry,
}

#[derive(Debug, Serialize, Deserialize)]
struct Properties {
    segment_type: SegmentType,
    #[serde(flatten)]
    lane: LaneAttributes,
}

#[derive(Debug, Serialize, Deserialize)]
struct Geometry {
    #[serde(rename = "type")]
    kind: String,
    coordinates: Vec<Vec<[f64; 2]>>,
}

/// Generators for the fixture maps shipped under `fixtures/maps`.
pub mod fixtures {
    use super::*;

    pub const LANE_WIDTH: f64 = 3.5;
    pub const LANES_PER_DIRECTION: usize = 3;
    pub const HALF_ROAD: f64 = LANE_WIDTH * LANES_PER_DIRECTION as f64;
    pub const CROSSWALK_WIDTH: f64 = 4.0;
    pub const SIDEWALK_WIDTH: f64 = 3.0;
    pub const ARM_LENGTH: f64 = 60.0;
    pub const SPEED_LIMIT: f64 = 13.9;

    fn lane(dx: f64, dy: f64) -> LaneAttributes {
        LaneAttributes { direction: Some([dx, dy]), speed_limit: Some(SPEED_LIMIT) }
    }

    /// Rotates a segment built for the east arm by `quarter` quarter turns.
    fn rotated(s: &MapSegment, quarter: usize, id: String) -> MapSegment {
        let rot = |p: Vector2<f64>| match quarter % 4 {
            0 => p,
            1 => Vector2::new(-p.y, p.x),
            2 => -p,
            _ => Vector2::new(p.y, -p.x),
        };
        let lane = LaneAttributes {
            direction: s.lane.direction.map(|d| {
                let r = rot(Vector2::new(d[0], d[1]));
                [r.x, r.y]
            }),
            ..s.lane
        };
        MapSegment::new(id, s.polygon.iter().map(|p| rot(*p)).collect(), s.segment_type, lane).expect("rotated fixture segment")
    }

    /// Four-way intersection of two 3+3 lane roads, right-hand traffic.
    ///
    /// Lane `1` of each group is nearest the center line. On every arm,
    /// `out` lanes lead away from the intersection and `in` lanes toward it.
    pub fn four_way_intersection() -> SemanticMap {
        let (h, c, w, far) = (HALF_ROAD, CROSSWALK_WIDTH, SIDEWALK_WIDTH, ARM_LENGTH);
        let x0 = h + c;
        let mut east = Vec::new();
        for i in 0..LANES_PER_DIRECTION {
            let (y0, y1) = (i as f64 * LANE_WIDTH, (i + 1) as f64 * LANE_WIDTH);
            east.push(MapSegment::rect(&format!("out_{}", i + 1), x0, -y1, far, -y0, SegmentType::DrivingLane, lane(1.0, 0.0)).unwrap());
            east.push(MapSegment::rect(&format!("in_{}", i + 1), x0, y0, far, y1, SegmentType::DrivingLane, lane(-1.0, 0.0)).unwrap());
        }
        east.push(MapSegment::rect("crosswalk", h, -h, x0, h, SegmentType::Crosswalk, LaneAttributes::default()).unwrap());
        east.push(MapSegment::rect("sidewalk_left", h, h, far, h + w, SegmentType::Sidewalk, LaneAttributes::default()).unwrap());
        east.push(MapSegment::rect("sidewalk_right", h + w, -h - w, far, -h, SegmentType::Sidewalk, LaneAttributes::default()).unwrap());
        east.push(MapSegment::rect("block", h + w, h + w, far, far, SegmentType::NonTraversable, LaneAttributes::default()).unwrap());

        let arms = ["E", "N", "W", "S"];
        let mut segments = vec![MapSegment::rect("box", -h, -h, h, h, SegmentType::DrivingLane, LaneAttributes::default()).unwrap()];
        for (q, arm) in arms.iter().enumerate() {
            for s in &east {
                segments.push(rotated(s, q, format!("{arm}_{}", s.id)));
            }
        }
        SemanticMap::new(1.0, segments, None).unwrap()
    }

    /// Three-lane carriageway with an on-ramp, acceleration lane and gore.
    pub fn highway_with_ramp() -> SemanticMap {
        let v = Vector2::new;
        let none = LaneAttributes::default();
        let mut segments = Vec::new();
        for i in 0..3 {
            let (y0, y1) = (i as f64 * LANE_WIDTH, (i + 1) as f64 * LANE_WIDTH);
            segments.push(MapSegment::rect(&format!("main_{}", i + 1), 0.0, y0, 200.0, y1, SegmentType::DrivingLane, lane(1.0, 0.0)).unwrap());
        }
        segments.push(MapSegment::rect("shoulder_west", 0.0, -3.0, 60.0, 0.0, SegmentType::CurbArea, none).unwrap());
        segments.push(MapSegment::rect("median", 0.0, 10.5, 200.0, 12.0, SegmentType::NonTraversable, none).unwrap());
        let d = Vector2::new(60.0, 27.5).normalize();
        segments.push(
            MapSegment::new("ramp", vec![v(40.0, -31.0), v(100.0, -3.5), v(100.0, 0.0), v(40.0, -27.5)], SegmentType::DrivingLane, lane(d.x, d.y))
                .unwrap(),
        );
        let gore_low = -27.5 + 27.5 / 60.0 * 20.0;
        segments.push(MapSegment::new("gore", vec![v(60.0, gore_low), v(100.0, 0.0), v(60.0, 0.0)], SegmentType::BufferArea, none).unwrap());
        segments.push(MapSegment::rect("accel", 100.0, -3.5, 160.0, 0.0, SegmentType::DrivingLane, lane(1.0, 0.0)).unwrap());
        segments.push(MapSegment::new("taper", vec![v(160.0, -3.5), v(200.0, 0.0), v(160.0, 0.0)], SegmentType::DrivingLane, lane(1.0, 0.0)).unwrap());
        segments.push(MapSegment::new("shoulder_east", vec![v(160.0, -3.5), v(200.0, -3.5), v(200.0, 0.0)], SegmentType::CurbArea, none).unwrap());
        SemanticMap::new(0.5, segments, None).unwrap()
    }

    /// Single-lane roundabout with four two-lane approach arms.
    pub fn roundabout() -> SemanticMap {
        let (r_in, r_out, n) = (8.0, 15.0, 24usize);
        let arc = |r: f64, a0: f64, a1: f64, m: usize| -> Vec<Vector2<f64>> {
            (0..=m)
                .map(|i| {
                    let a = a0 + (a1 - a0) * i as f64 / m as f64;
                    Vector2::new(r * a.cos(), r * a.sin())
                })
                .collect()
        };
        let island = arc(r_in, 0.0, std::f64::consts::TAU, n)[..n].to_vec();
        let mut segments = vec![MapSegment::new("island", island, SegmentType::NonTraversable, LaneAttributes::default()).unwrap()];
        let names = ["ring_NE", "ring_NW", "ring_SW", "ring_SE"];
        for (q, name) in names.iter().enumerate() {
            let a0 = q as f64 * std::f64::consts::FRAC_PI_2;
            let a1 = a0 + std::f64::consts::FRAC_PI_2;
            let mut ring = arc(r_out, a0, a1, 6);
            ring.extend(arc(r_in, a1, a0, 6));
            segments.push(MapSegment::new(*name, ring, SegmentType::DrivingLane, LaneAttributes::default()).unwrap());
        }
        let x0 = (r_out * r_out - LANE_WIDTH * LANE_WIDTH).sqrt();
        let east_in = MapSegment::rect("in", x0, 0.0, 60.0, LANE_WIDTH, SegmentType::DrivingLane, lane(-1.0, 0.0)).unwrap();
        let east_out = MapSegment::rect("out", x0, -LANE_WIDTH, 60.0, 0.0, SegmentType::DrivingLane, lane(1.0, 0.0)).unwrap();
        for (q, arm) in ["E", "N", "W", "S"].iter().enumerate() {
            segments.push(rotated(&east_in, q, format!("{arm}_in")));
            segments.push(rotated(&east_out, q, format!("{arm}_out")));
        }
        SemanticMap::new(1.0, segments, None).unwrap()
    }

    pub fn all() -> Vec<(&'static str, SemanticMap)> {
        vec![
            ("four_way_intersection", four_way_intersection()),
            ("highway_with_ramp", highway_with_ramp()),
            ("roundabout", roundabout()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn fixture_dir() -> std::path::PathBuf {
        Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures/maps")
    }

    /// Winding number by summed signed angles; nonzero means inside.
    fn winding_inside(poly: &[Vector2<f64>], p: &Vector2<f64>) -> bool {
        let n = poly.len();
        let mut total = 0.0;
        for i in 0..n {
            let a = poly[i] - p;
            let b = poly[(i + 1) % n] - p;
            total += (a.x * b.y - a.y * b.x).atan2(a.dot(&b));
        }
        (total / std::f64::consts::TAU).round() != 0.0
    }

    fn brute_force(map: &SemanticMap, p: &Vector2<f64>) -> Option<String> {
        let mut hits: Vec<(f64, &str)> = map
            .segments
            .iter()
            .filter(|s| winding_inside(&s.polygon, p))
            .map(|s| (s.area(), s.id.as_str()))
            .collect();
        hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(b.1)));
        hits.first().map(|h| h.1.to_string())
    }

    #[test]
    fn centroid_and_miss() {
        let map = four_way_intersection();
        let lane = map.segment("E_in_2").unwrap();
        assert_eq!(map.locate_id(&lane.centroid()), Some("E_in_2"));
        assert_eq!(map.locate_id(&Vector2::new(500.0, 0.0)), None);
    }

    #[test]
    fn boundary_counts_as_inside() {
        let map = four_way_intersection();
        let corner = Vector2::new(HALF_ROAD, HALF_ROAD);
        assert!(map.locate(&corner).is_some());
        let edge = Vector2::new(59.0, -HALF_ROAD);
        assert!(map.segment("E_out_3").unwrap().contains(&edge));
    }

    #[test]
    fn overlap_resolves_to_smallest() {
        let none = LaneAttributes::default();
        let big = MapSegment::rect("a_big", 0.0, 0.0, 10.0, 10.0, SegmentType::DrivingLane, none).unwrap();
        let small = MapSegment::rect("z_small", 2.0, 2.0, 4.0, 4.0, SegmentType::Crosswalk, none).unwrap();
        let twin = MapSegment::rect("b_twin", 2.0, 2.0, 4.0, 4.0, SegmentType::Crosswalk, none).unwrap();
        let map = SemanticMap::new(1.0, vec![big, small, twin], None).unwrap();
        assert_eq!(map.locate_id(&Vector2::new(3.0, 3.0)), Some("b_twin"));
        assert_eq!(map.locate_id(&Vector2::new(8.0, 8.0)), Some("a_big"));
    }

    #[test]
    fn locate_matches_brute_force_on_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for (_, map) in all() {
            let [mut x0, mut y0, mut x1, mut y1] = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
            for s in &map.segments {
                x0 = x0.min(s.bounds[0]);
                y0 = y0.min(s.bounds[1]);
                x1 = x1.max(s.bounds[2]);
                y1 = y1.max(s.bounds[3]);
            }
            for _ in 0..10_000 {
                let p = Vector2::new(rng.random_range(x0 - 5.0..x1 + 5.0), rng.random_range(y0 - 5.0..y1 + 5.0));
                assert_eq!(map.locate_id(&p).map(str::to_string), brute_force(&map, &p), "{p:?}");
            }
        }
    }

    #[test]
    fn rejects_invalid_maps() {
        let none = LaneAttributes::default();
        let v = Vector2::new;
        let bow = MapSegment::new("bow", vec![v(0.0, 0.0), v(1.0, 1.0), v(1.0, 0.0), v(0.0, 1.0)], SegmentType::DrivingLane, none);
        assert!(matches!(bow, Err(MapError::InvalidSegment { .. })));
        let two = MapSegment::new("two", vec![v(0.0, 0.0), v(1.0, 1.0)], SegmentType::DrivingLane, none);
        assert!(two.is_err());
        let a = MapSegment::rect("a", 0.0, 0.0, 1.0, 1.0, SegmentType::DrivingLane, none).unwrap();
        assert_eq!(SemanticMap::new(1.0, vec![a.clone(), a.clone()], None).unwrap_err(), MapError::DuplicateId("a".into()));
        assert_eq!(SemanticMap::new(0.0, vec![a], None).unwrap_err(), MapError::InvalidScale(0.0));
    }

    #[test]
    fn single_lane_and_crossing_sequences() {
        let map = four_way_intersection();
        let inside: Vec<_> = (0..20).map(|i| (i as f64, Vector2::new(20.0 + i as f64, 1.75))).collect();
        assert_eq!(traverse_sequence(&map, &inside).unwrap(), vec![Some("E_in_1".to_string())]);

        // Northbound across the east arm: out lanes, then in lanes, then the sidewalk.
        let walk: Vec<_> = (0..40).map(|i| (i as f64, Vector2::new(30.0, -HALF_ROAD + 0.3 + i as f64 * 0.6))).collect();
        let ids: Vec<_> = traverse_sequence(&map, &walk).unwrap().into_iter().map(Option::unwrap).collect();
        assert_eq!(ids, ["E_out_3", "E_out_2", "E_out_1", "E_in_1", "E_in_2", "E_in_3", "E_sidewalk_left"]);
    }

    #[test]
    fn lane_crosswalk_lane() {
        let none = LaneAttributes::default();
        let map = SemanticMap::new(
            1.0,
            vec![
                MapSegment::rect("A", 0.0, 0.0, 10.0, 3.0, SegmentType::DrivingLane, none).unwrap(),
                MapSegment::rect("C", 10.0, 0.0, 14.0, 3.0, SegmentType::Crosswalk, none).unwrap(),
                MapSegment::rect("B", 14.0, 0.0, 30.0, 3.0, SegmentType::DrivingLane, none).unwrap(),
            ],
            None,
        )
        .unwrap();
        let path: Vec<_> = (0..29).map(|i| (i as f64, Vector2::new(0.5 + i as f64, 1.5))).collect();
        let seq = traverse_sequence(&map, &path).unwrap();
        assert_eq!(seq, vec![Some("A".into()), Some("C".into()), Some("B".into())]);
        let mut out = path.clone();
        out.push((100.0, Vector2::new(50.0, 1.5)));
        assert_eq!(traverse_sequence(&map, &out).unwrap().last(), Some(&None));
        let mut bad = path;
        bad[3].0 = 1.0;
        assert_eq!(traverse_sequence(&map, &bad).unwrap_err(), MapError::NonIncreasingTime(3));
    }

    #[test]
    fn left_turn_through_intersection() {
        let map = four_way_intersection();
        // Eastbound approach on the west arm (W_in_1), left turn, leave north on N_out_1.
        let mut path = Vec::new();
        let mut t = 0.0;
        let mut push = |p: Vector2<f64>| {
            path.push((t, p));
            t += 0.1;
        };
        for i in 0..60 {
            push(Vector2::new(-40.0 + i as f64 * 0.5, -1.75));
        }
        // Quarter circle of radius 12.25 centered at (-10.5, 10.5).
        let r = 12.25;
        for i in 0..=40 {
            let a = -std::f64::consts::FRAC_PI_2 * (1.0 - i as f64 / 40.0);
            push(Vector2::new(-10.5 + r * a.cos(), 10.5 + r * a.sin()));
        }
        for i in 1..60 {
            push(Vector2::new(1.75, 10.5 + i as f64 * 0.5));
        }
        let seq: Vec<_> = traverse_sequence(&map, &path).unwrap().into_iter().map(Option::unwrap).collect();
        assert_eq!(seq, ["W_in_1", "W_crosswalk", "box", "N_crosswalk", "N_out_1"]);
    }

    #[test]
    fn fixture_files_match_generators() {
        for (name, map) in all() {
            let path = fixture_dir().join(format!("{name}.geojson"));
            let loaded = SemanticMap::load(&path).unwrap();
            assert_eq!(loaded, map, "{name}");
            assert_eq!(std::fs::read(&path).unwrap(), map.to_geojson_bytes().unwrap(), "{name}");
        }
    }

    #[test]
    #[ignore = "rewrites the shipped fixture maps"]
    fn regenerate_fixture_maps() {
        for (name, map) in all() {
            map.save(&fixture_dir().join(format!("{name}.geojson"))).unwrap();
        }
    }

    proptest! {
        #[test]
        fn upsampling_keeps_sequence(y in -9.0f64..9.0, x0 in -58.0f64..-30.0, step in 0.05f64..0.4, factor in 2usize..5) {
            let map = four_way_intersection();
            let base: Vec<_> = (0..((100.0 / step) as usize)).map(|i| (i as f64, Vector2::new(x0 + i as f64 * step, y))).collect();
            let mut fine = Vec::new();
            for w in base.windows(2) {
                for k in 0..factor {
                    let f = k as f64 / factor as f64;
                    fine.push((w[0].0 + f, w[0].1 * (1.0 - f) + w[1].1 * f));
                }
            }
            fine.push(*base.last().unwrap());
            prop_assert_eq!(traverse_sequence(&map, &base).unwrap(), traverse_sequence(&map, &fine).unwrap());
        }
    }
}
