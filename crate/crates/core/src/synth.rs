//! Synthetic scenes with exact ground truth: scripted bicycle-model motion,
//! a drifting drone camera, self-occlusion by surface normals and Gaussian
//! pixel noise.

use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::{Vector2, Vector3, Vector5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::angle::wrap_half_open;
use crate::camera::{
    reference_tracks_to_bytes, AnchorCorrespondence, CalibrationConfig, CameraIntrinsics, CameraModel, CameraPose,
    RecalibrationConfig, TrackedPoint,
};
use crate::error::{Error, Result};
use crate::io;
use crate::keypoints::{detections_to_bytes, is_detectable, CategoryHint, FrameDetections, Keypoint, KeypointDetection, NUM_KEYPOINTS};
use crate::model_fitting::GroundPose;
use crate::semantic_map::{fixtures, SemanticMap};
use crate::shape_prior::fleet::{FleetConfig, DEFAULT_FLEET};
use crate::shape_prior::{build_prior, ShapeParams, ShapePrior, ShapeVector, DEFAULT_BASIS_SIZE};
use crate::state_estimation::bicycle_derivative;

/// Rear axle position as a fraction of the wheelbase, shared with the filter default.
pub const REAR_AXLE_RATIO: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftSpec {
    /// Horizontal sway radius of the camera centre, metres.
    pub amplitude: f64,
    /// Yaw oscillation amplitude, radians.
    pub yaw_amplitude: f64,
    /// Seconds per sway cycle.
    pub period: f64,
}

impl Default for DriftSpec {
    fn default() -> Self {
        Self { amplitude: 0.0, yaw_amplitude: 0.0, period: 20.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraSpec {
    pub center: [f64; 2],
    pub altitude: f64,
    pub yaw: f64,
    /// Radians away from nadir.
    pub tilt: f64,
    pub intrinsics: CameraIntrinsics,
    pub drift: DriftSpec,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            center: [0.0, 0.0],
            altitude: 120.0,
            yaw: 0.0,
            tilt: 0.0,
            intrinsics: CameraIntrinsics::default_survey(),
            drift: DriftSpec::default(),
        }
    }
}

impl CameraSpec {
    pub fn pose_at(&self, t: f64) -> CameraPose {
        let d = &self.drift;
        let phase = TAU * t / d.period;
        let center = Vector3::new(
            self.center[0] + d.amplitude * phase.sin(),
            self.center[1] + d.amplitude * (1.0 - phase.cos()),
            self.altitude,
        );
        CameraPose::from_center_yaw_tilt(center, self.yaw + d.yaw_amplitude * phase.sin(), self.tilt)
    }

    pub fn model_at(&self, t: f64) -> CameraModel {
        CameraModel { intrinsics: self.intrinsics, pose: self.pose_at(t) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Setpoint {
    pub time: f64,
    pub speed: f64,
    pub steering: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleSpec {
    pub category: String,
    /// Shape parameters; the category template when absent.
    #[serde(default)]
    pub b: Option<ShapeParams>,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    /// Speed and steering are interpolated linearly between setpoints and
    /// held constant outside them.
    pub script: Vec<Setpoint>,
}

impl VehicleSpec {
    pub fn controls_at(&self, t: f64) -> (f64, f64) {
        let s = &self.script;
        let i = s.partition_point(|p| p.time <= t);
        if i == 0 {
            return (s[0].speed, s[0].steering);
        }
        if i == s.len() {
            return (s[i - 1].speed, s[i - 1].steering);
        }
        let (a, b) = (&s[i - 1], &s[i]);
        let w = (t - a.time) / (b.time - a.time);
        (a.speed + (b.speed - a.speed) * w, a.steering + (b.steering - a.steering) * w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Keypoint pixel noise standard deviation.
    pub pixel_sigma: f64,
    /// Reference point tracking noise standard deviation, pixels.
    pub reference_sigma: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { pixel_sigma: 0.0, reference_sigma: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisibilitySpec {
    /// A keypoint is visible when its outward normal is within this many
    /// degrees of the direction to the camera.
    pub max_angle_deg: f64,
}

impl Default for VisibilitySpec {
    fn default() -> Self {
        Self { max_angle_deg: 100.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    pub fleet: FleetConfig,
    pub k: usize,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { fleet: DEFAULT_FLEET, k: DEFAULT_BASIS_SIZE }
    }
}

impl PriorSpec {
    pub fn build(&self) -> Result<ShapePrior> {
        Ok(build_prior(&crate::shape_prior::fleet::generate_fleet(&self.fleet), self.k)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub duration: f64,
    pub frame_rate: f64,
    /// Name of a built-in map: `four_way_intersection`, `highway_with_ramp`
    /// or `roundabout`.
    pub map: String,
    #[serde(default)]
    pub camera: CameraSpec,
    pub vehicles: Vec<VehicleSpec>,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default)]
    pub visibility: VisibilitySpec,
    #[serde(default = "default_reference_points")]
    pub reference_points: usize,
    #[serde(default)]
    pub prior: PriorSpec,
    /// Attach the true category to each detection.
    #[serde(default = "default_true")]
    pub category_hints: bool,
    /// Integration steps per frame for the ground truth.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

fn default_reference_points() -> usize {
    12
}

fn default_true() -> bool {
    true
}

fn default_substeps() -> usize {
    20
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("scenario {:?}: {m}", self.name)));
        if !(self.frame_rate > 0.0 && self.frame_rate.is_finite()) {
            return bad(format!("frame_rate must be positive, got {}", self.frame_rate));
        }
        if !(self.duration >= 0.0 && self.duration.is_finite()) {
            return bad(format!("duration must be non-negative, got {}", self.duration));
        }
        if !(self.camera.altitude > 0.0) {
            return bad(format!("camera altitude must be positive, got {}", self.camera.altitude));
        }
        if !(self.noise.pixel_sigma >= 0.0 && self.noise.reference_sigma >= 0.0) {
            return bad("noise standard deviations must be non-negative".into());
        }
        if !(self.camera.drift.period > 0.0) {
            return bad("drift period must be positive".into());
        }
        if self.substeps == 0 {
            return bad("substeps must be at least 1".into());
        }
        if self.reference_points < 4 {
            return bad("at least 4 reference points are needed".into());
        }
        self.camera.intrinsics.validate()?;
        builtin_map(&self.map)?;
        for (i, v) in self.vehicles.iter().enumerate() {
            if v.script.is_empty() {
                return bad(format!("vehicle {i} has an empty script"));
            }
            if v.script.windows(2).any(|w| !(w[1].time > w[0].time)) {
                return bad(format!("vehicle {i} script times must increase"));
            }
            if let Some(b) = &v.b {
                if b.len() != self.prior.k {
                    return bad(format!("vehicle {i} has {} shape parameters, prior has {}", b.len(), self.prior.k));
                }
            }
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.frame_rate).round() as usize + 1
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s: Self = io::read_json(path)?;
        s.validate()?;
        Ok(s)
    }
}

pub fn builtin_map(name: &str) -> Result<SemanticMap> {
    fixtures::all()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, m)| m)
        .ok_or_else(|| Error::Config(format!("unknown built-in map {name:?}")))
}

/// Outward surface normal of each keypoint slot in the body frame.
pub fn slot_normal(slot: usize) -> Vector3<f64> {
    // Four-point groups: rear-left, rear-right, front-left, front-right.
    let corner = |i: usize| {
        let fx = if i % 4 < 2 { -1.0 } else { 1.0 };
        let sy = if i.is_multiple_of(2) { 1.0 } else { -1.0 };
        (fx, sy)
    };
    let n = match slot {
        0..=3 => {
            let (fx, sy) = corner(slot);
            Vector3::new(0.4 * fx, 0.4 * sy, 1.0)
        }
        4..=7 => {
            let (fx, sy) = corner(slot);
            Vector3::new(fx, 0.3 * sy, 1.0)
        }
        8..=11 => {
            let (fx, sy) = corner(slot);
            Vector3::new(fx, 0.3 * sy, 0.0)
        }
        12..=15 => {
            let (fx, sy) = corner(slot);
            Vector3::new(fx, 0.5 * sy, -0.2)
        }
        16..=19 | 28..=31 => {
            let (_, sy) = corner(slot);
            Vector3::new(0.0, sy, 0.0)
        }
        20..=23 => Vector3::new(0.0, 0.0, -1.0),
        24 | 26 => Vector3::new(0.0, 1.0, 0.3),
        25 | 27 => Vector3::new(0.0, -1.0, 0.3),
        _ => Vector3::new(1.0, 0.0, 0.2),
    };
    n.normalize()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleInfo {
    pub id: u64,
    pub category: String,
    pub b: ShapeParams,
    /// Length, width, height.
    pub dimensions: [f64; 3],
    pub wheelbase: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleTruth {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub steering: f64,
    /// A detection was emitted for this vehicle in this frame.
    pub in_view: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthFrame {
    pub frame: usize,
    pub t: f64,
    pub camera: CameraPose,
    pub vehicles: Vec<VehicleTruth>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub frame_rate: f64,
    pub vehicles: Vec<VehicleInfo>,
    pub frames: Vec<TruthFrame>,
}

impl GroundTruth {
    pub fn vehicle(&self, id: u64) -> Option<&VehicleInfo> {
        self.vehicles.iter().find(|v| v.id == id)
    }

    pub fn load(path: &Path) -> Result<Self> {
        io::read_json(path)
    }
}

/// Everything a scenario produces, in memory.
#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: ScenarioSpec,
    pub seed: u64,
    pub detections: Vec<FrameDetections>,
    pub reference_tracks: Vec<Vec<TrackedPoint>>,
    pub calibration: CalibrationConfig,
    pub map: SemanticMap,
    pub prior: ShapePrior,
    pub truth: GroundTruth,
}

pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const REFERENCE_TRACKS_FILE: &str = "reference_tracks.jsonl";
pub const CALIBRATION_FILE: &str = "calibration.json";
pub const MAP_FILE: &str = "map.geojson";
pub const PRIOR_FILE: &str = "prior.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";
pub const SCENARIO_FILE: &str = "scenario.json";

impl Scene {
    pub fn files(&self) -> Result<Vec<(&'static str, Vec<u8>)>> {
        Ok(vec![
            (DETECTIONS_FILE, detections_to_bytes(&self.detections)?),
            (REFERENCE_TRACKS_FILE, reference_tracks_to_bytes(&self.reference_tracks)?),
            (CALIBRATION_FILE, io::to_json_bytes(&self.calibration)?),
            (MAP_FILE, self.map.to_geojson_bytes()?),
            (PRIOR_FILE, io::to_json_bytes(&self.prior.to_archive())?),
            (GROUND_TRUTH_FILE, io::to_json_bytes(&self.truth)?),
            (SCENARIO_FILE, io::to_json_bytes(&self.spec)?),
        ])
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for (name, bytes) in self.files()? {
            io::write_atomic(&dir.join(name), &bytes)?;
        }
        Ok(())
    }
}

/// Integrates one vehicle's script with RK4, `substeps` per frame, and
/// returns the (x, y, ψ, v, δ) state at every frame time.
pub fn integrate_script(v: &VehicleSpec, wheelbase: f64, frame_rate: f64, frames: usize, substeps: usize) -> Vec<Vector5<f64>> {
    let h = 1.0 / (frame_rate * substeps as f64);
    let full = |p: &Vector3<f64>, t: f64| {
        let (speed, steering) = v.controls_at(t);
        Vector5::new(p.x, p.y, p.z, speed, steering)
    };
    let f = |p: &Vector3<f64>, t: f64| {
        let d = bicycle_derivative(&full(p, t), wheelbase, REAR_AXLE_RATIO);
        Vector3::new(d[0], d[1], d[2])
    };
    let mut p = Vector3::new(v.x, v.y, v.heading);
    let mut out = Vec::with_capacity(frames);
    for frame in 0..frames {
        let t0 = frame as f64 / frame_rate;
        let mut s = full(&p, t0);
        s[2] = wrap_half_open(s[2]);
        out.push(s);
        if frame + 1 == frames {
            break;
        }
        for i in 0..substeps {
            let t = t0 + i as f64 * h;
            let k1 = f(&p, t);
            let k2 = f(&(p + k1 * (0.5 * h)), t + 0.5 * h);
            let k3 = f(&(p + k2 * (0.5 * h)), t + 0.5 * h);
            let k4 = f(&(p + k3 * h), t + h);
            p += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
    }
    out
}

pub fn generate(spec: &ScenarioSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let prior = spec.prior.build()?;
    generate_with_prior(spec, seed, prior)
}

/// Like [`generate`] with a prebuilt prior matching `spec.prior`.
pub fn generate_with_prior(spec: &ScenarioSpec, seed: u64, prior: ShapePrior) -> Result<Scene> {
    spec.validate()?;
    let map = builtin_map(&spec.map)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = spec.frame_count();
    let k = spec.camera.intrinsics;
    let cos_limit = spec.visibility.max_angle_deg.to_radians().cos();

    let mut infos = Vec::new();
    let mut shapes: Vec<ShapeVector> = Vec::new();
    let mut states = Vec::new();
    for (i, v) in spec.vehicles.iter().enumerate() {
        let b = match &v.b {
            Some(b) => b.clone(),
            None => prior.template(&v.category)?.clone(),
        };
        let shape = prior.generate(&b)?;
        let wheelbase = shape.wheelbase();
        states.push(integrate_script(v, wheelbase, spec.frame_rate, frames, spec.substeps));
        infos.push(VehicleInfo {
            id: i as u64 + 1,
            category: v.category.clone(),
            b,
            dimensions: shape.dimensions(),
            wheelbase,
        });
        shapes.push(shape);
    }

    let pixel_noise = Normal::new(0.0, spec.noise.pixel_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let ref_noise = Normal::new(0.0, spec.noise.reference_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let jitter = |rng: &mut ChaCha8Rng, sigma: f64, n: &Normal<f64>| if sigma > 0.0 { n.sample(rng) } else { 0.0 };

    // Reference points spread over the central 80% of the first frame's ground footprint.
    let cam0 = spec.camera.model_at(0.0);
    let corners: Vec<Vector2<f64>> = [(0.1, 0.1), (0.9, 0.1), (0.9, 0.9), (0.1, 0.9)]
        .iter()
        .map(|(a, b)| cam0.back_project_to_ground(&Vector2::new(a * k.image_size[0] as f64, b * k.image_size[1] as f64)))
        .collect::<std::result::Result<_, _>>()?;
    let (lo, hi) = corners.iter().fold(
        (Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY)),
        |(lo, hi), c| (lo.inf(c), hi.sup(c)),
    );
    let world_refs: Vec<Vector3<f64>> = (0..spec.reference_points)
        .map(|_| Vector3::new(rng.random_range(lo.x..hi.x), rng.random_range(lo.y..hi.y), 0.0))
        .collect();

    let mut detections = Vec::with_capacity(frames);
    let mut reference_tracks = Vec::with_capacity(frames);
    let mut truth_frames = Vec::with_capacity(frames);
    let mut next_detection = 0u64;
    #[allow(clippy::needless_range_loop)]
    for frame in 0..frames {
        let t = frame as f64 / spec.frame_rate;
        let camera = spec.camera.model_at(t);
        let center = camera.pose.center();

        let mut refs = Vec::with_capacity(world_refs.len());
        for (id, w) in world_refs.iter().enumerate() {
            let px = camera.project(w).ok().filter(|p| k.contains(p, 0.0));
            let (u, v, valid) = match px {
                Some(p) => (
                    p.x + jitter(&mut rng, spec.noise.reference_sigma, &ref_noise),
                    p.y + jitter(&mut rng, spec.noise.reference_sigma, &ref_noise),
                    true,
                ),
                None => (0.0, 0.0, false),
            };
            refs.push(TrackedPoint { id, u, v, valid });
        }
        reference_tracks.push(refs);

        let mut dets = Vec::new();
        let mut truths = Vec::new();
        for (vi, v) in spec.vehicles.iter().enumerate() {
            let s = states[vi][frame];
            let pose = GroundPose::new(s[0], s[1], s[2]);
            let world: Vec<Vector3<f64>> = shapes[vi].points().iter().map(|p| pose.to_world(p)).collect();
            let pixels: Option<Vec<Vector2<f64>>> = world
                .iter()
                .map(|w| camera.project(w).ok().filter(|p| k.contains(p, 0.0)))
                .collect();
            let in_view = pixels.is_some();
            if let Some(pixels) = pixels {
                let (mut bmin, mut bmax) = (pixels[0], pixels[0]);
                for p in &pixels {
                    bmin = bmin.inf(p);
                    bmax = bmax.sup(p);
                }
                let rot = nalgebra::Rotation3::from_axis_angle(&Vector3::z_axis(), pose.heading);
                let mut keypoints = vec![Keypoint::HIDDEN; NUM_KEYPOINTS];
                for slot in 0..NUM_KEYPOINTS {
                    if !is_detectable(slot) {
                        continue;
                    }
                    let n = rot * slot_normal(slot);
                    let to_cam = (center - world[slot]).normalize();
                    if n.dot(&to_cam) < cos_limit {
                        continue;
                    }
                    keypoints[slot] = Keypoint {
                        u: pixels[slot].x + jitter(&mut rng, spec.noise.pixel_sigma, &pixel_noise),
                        v: pixels[slot].y + jitter(&mut rng, spec.noise.pixel_sigma, &pixel_noise),
                        visible: true,
                    };
                }
                dets.push(KeypointDetection {
                    frame_index: frame,
                    detection_id: next_detection,
                    bounding_box: [bmin.x, bmin.y, bmax.x, bmax.y],
                    category: spec.category_hints.then(|| CategoryHint { label: v.category.clone(), confidence: 1.0 }),
                    keypoints,
                    score: 1.0,
                });
                next_detection += 1;
            }
            truths.push(VehicleTruth {
                id: infos[vi].id,
                x: s[0],
                y: s[1],
                heading: s[2],
                speed: s[3],
                steering: s[4],
                in_view,
            });
        }
        detections.push(FrameDetections { frame_index: frame, timestamp: Some(t), detections: dets });
        truth_frames.push(TruthFrame { frame, t, camera: camera.pose, vehicles: truths });
    }

    let calibration = CalibrationConfig {
        intrinsics: k,
        map_scale: map.scale,
        correspondences: reference_tracks
            .first()
            .map(|pts| {
                pts.iter()
                    .filter(|p| p.valid)
                    .map(|p| AnchorCorrespondence {
                        id: p.id,
                        map: [world_refs[p.id].x / map.scale, world_refs[p.id].y / map.scale],
                        image: [p.u, p.v],
                    })
                    .collect()
            })
            .unwrap_or_default(),
        recalibration: RecalibrationConfig::default(),
    };

    Ok(Scene {
        spec: spec.clone(),
        seed,
        detections,
        reference_tracks,
        calibration,
        map,
        prior,
        truth: GroundTruth { frame_rate: spec.frame_rate, vehicles: infos, frames: truth_frames },
    })
}

/// Built-in scenarios.
pub mod presets {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn cruise(speed: f64) -> Vec<Setpoint> {
        vec![Setpoint { time: 0.0, speed, steering: 0.0 }]
    }

    fn vehicle(category: &str, x: f64, y: f64, heading: f64, script: Vec<Setpoint>) -> VehicleSpec {
        VehicleSpec { category: category.into(), b: None, x, y, heading, script }
    }

    /// Steering angle whose steady-state centre path has radius `r`.
    pub fn steering_for_radius(r: f64, wheelbase: f64) -> f64 {
        let l = wheelbase;
        (l / (r * r - (REAR_AXLE_RATIO * l).powi(2)).sqrt()).atan()
    }

    /// Ten vehicles around the four-way intersection over ten seconds:
    /// through traffic both ways, one braking, one left turn and three
    /// vehicles waiting or creeping on the cross street.
    pub fn intersection(pixel_sigma: f64) -> ScenarioSpec {
        let turn = steering_for_radius(12.25, 2.7);
        let vehicles = vec![
            vehicle("sedan", -20.0, -1.75, 0.0, cruise(7.0)),
            vehicle("suv", -60.0, -5.25, 0.0, cruise(11.0)),
            vehicle(
                "hatchback",
                -55.0,
                -8.75,
                0.0,
                vec![
                    Setpoint { time: 0.0, speed: 9.0, steering: 0.0 },
                    Setpoint { time: 3.0, speed: 9.0, steering: 0.0 },
                    Setpoint { time: 4.0, speed: 4.0, steering: 0.0 },
                ],
            ),
            vehicle("van", 20.0, 1.75, PI, cruise(7.0)),
            vehicle("pickup", 58.0, 5.25, PI, cruise(5.0)),
            vehicle("sedan", 35.0, 8.75, PI, cruise(9.0)),
            vehicle(
                "sedan",
                -40.0,
                -1.75,
                0.0,
                vec![
                    Setpoint { time: 0.0, speed: 6.0, steering: 0.0 },
                    Setpoint { time: 4.8, speed: 6.0, steering: 0.0 },
                    Setpoint { time: 5.1, speed: 6.0, steering: turn },
                    Setpoint { time: 7.9, speed: 6.0, steering: turn },
                    Setpoint { time: 8.2, speed: 6.0, steering: 0.0 },
                ],
            ),
            vehicle("suv", 5.25, -25.0, FRAC_PI_2, cruise(0.0)),
            vehicle("hatchback", -5.25, 25.0, -FRAC_PI_2, cruise(0.0)),
            vehicle(
                "van",
                1.75,
                -32.0,
                FRAC_PI_2,
                vec![
                    Setpoint { time: 0.0, speed: 2.0, steering: 0.0 },
                    Setpoint { time: 7.0, speed: 2.0, steering: 0.0 },
                    Setpoint { time: 8.0, speed: 0.0, steering: 0.0 },
                ],
            ),
        ];
        ScenarioSpec {
            name: format!("intersection_sigma{pixel_sigma}"),
            duration: 10.0,
            frame_rate: 30.0,
            map: "four_way_intersection".into(),
            camera: CameraSpec {
                drift: DriftSpec { amplitude: 0.5, yaw_amplitude: 0.002, period: 20.0 },
                ..CameraSpec::default()
            },
            vehicles,
            noise: NoiseSpec { pixel_sigma, reference_sigma: 0.0 },
            visibility: VisibilitySpec::default(),
            reference_points: 12,
            prior: PriorSpec::default(),
            category_hints: true,
            substeps: 20,
        }
    }

    /// Four vehicles on the carriageway and one merging from the ramp.
    pub fn highway(pixel_sigma: f64) -> ScenarioSpec {
        let ramp_heading = 27.5f64.atan2(60.0);
        let vehicles = vec![
            vehicle("sedan", 45.0, 1.75, 0.0, cruise(25.0)),
            vehicle("suv", 60.0, 5.25, 0.0, cruise(28.0)),
            vehicle("van", 80.0, 8.75, 0.0, cruise(22.0)),
            vehicle("pickup", 40.0, 8.75, 0.0, cruise(27.0)),
            vehicle("hatchback", 50.0, -24.67, ramp_heading, cruise(14.0)),
        ];
        ScenarioSpec {
            name: format!("highway_sigma{pixel_sigma}"),
            duration: 3.0,
            frame_rate: 30.0,
            map: "highway_with_ramp".into(),
            camera: CameraSpec { center: [100.0, 0.0], ..CameraSpec::default() },
            vehicles,
            noise: NoiseSpec { pixel_sigma, reference_sigma: 0.0 },
            visibility: VisibilitySpec::default(),
            reference_points: 12,
            prior: PriorSpec::default(),
            category_hints: true,
            substeps: 20,
        }
    }

    /// A single parked vehicle seen by a still camera.
    pub fn stationary(pixel_sigma: f64) -> ScenarioSpec {
        ScenarioSpec {
            name: format!("stationary_sigma{pixel_sigma}"),
            duration: 2.0,
            frame_rate: 30.0,
            map: "four_way_intersection".into(),
            camera: CameraSpec::default(),
            vehicles: vec![vehicle("sedan", 0.0, -1.75, 0.0, cruise(0.0))],
            noise: NoiseSpec { pixel_sigma, reference_sigma: 0.0 },
            visibility: VisibilitySpec::default(),
            reference_points: 12,
            prior: PriorSpec::default(),
            category_hints: true,
            substeps: 20,
        }
    }

    /// The three noiseless scenarios.
    pub fn noiseless_suite() -> Vec<ScenarioSpec> {
        vec![intersection(0.0), highway(0.0), stationary(0.0)]
    }
}
