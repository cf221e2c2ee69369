//! Procedural vehicle fleet: boxes with a cabin at randomized dimensions.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ShapeVector;
use crate::keypoints::NUM_KEYPOINTS;

pub const CATEGORIES: [&str; 5] = ["sedan", "suv", "hatchback", "pickup", "van"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Archetype {
    pub name: &'static str,
    pub length: (f64, f64),
    pub width: (f64, f64),
    pub height: (f64, f64),
    /// Roof length as a fraction of overall length.
    pub roof_fraction: f64,
    /// Roof center offset along x as a fraction of length (positive forward).
    pub roof_offset: f64,
    /// Belt line height as a fraction of overall height.
    pub belt_fraction: f64,
    pub wheelbase_fraction: f64,
    pub wheel_radius: f64,
}

pub const ARCHETYPES: [Archetype; 5] = [
    Archetype { name: "sedan", length: (4.5, 5.0), width: (1.75, 1.9), height: (1.40, 1.50), roof_fraction: 0.38, roof_offset: -0.04, belt_fraction: 0.62, wheelbase_fraction: 0.58, wheel_radius: 0.32 },
    Archetype { name: "suv", length: (4.5, 5.0), width: (1.85, 2.0), height: (1.65, 1.85), roof_fraction: 0.50, roof_offset: -0.08, belt_fraction: 0.58, wheelbase_fraction: 0.60, wheel_radius: 0.37 },
    Archetype { name: "hatchback", length: (3.9, 4.3), width: (1.7, 1.8), height: (1.42, 1.52), roof_fraction: 0.45, roof_offset: -0.10, belt_fraction: 0.60, wheelbase_fraction: 0.63, wheel_radius: 0.30 },
    Archetype { name: "pickup", length: (5.3, 5.9), width: (1.95, 2.05), height: (1.8, 1.95), roof_fraction: 0.25, roof_offset: 0.08, belt_fraction: 0.55, wheelbase_fraction: 0.62, wheel_radius: 0.40 },
    Archetype { name: "van", length: (4.9, 5.3), width: (1.9, 2.0), height: (1.75, 1.95), roof_fraction: 0.70, roof_offset: -0.05, belt_fraction: 0.50, wheelbase_fraction: 0.57, wheel_radius: 0.33 },
];

pub fn archetype(name: &str) -> Option<&'static Archetype> {
    ARCHETYPES.iter().find(|a| a.name == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FleetConfig {
    pub count: usize,
    pub seed: u64,
}

/// Fleet used for the shipped default prior and λ calibration.
pub const DEFAULT_FLEET: FleetConfig = FleetConfig { count: 200, seed: 7 };

/// Overall dimensions plus a few secondary proportions of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleDims {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub wheelbase: f64,
    pub wheel_radius: f64,
    pub roof_length: f64,
    pub roof_center: f64,
    pub belt_height: f64,
    pub light_height: f64,
    pub axle_offset: f64,
}

impl VehicleDims {
    pub fn sample<R: Rng + ?Sized>(a: &Archetype, rng: &mut R) -> Self {
        let length = rng.random_range(a.length.0..a.length.1);
        let width = rng.random_range(a.width.0..a.width.1);
        let height = rng.random_range(a.height.0..a.height.1);
        let jitter = |rng: &mut R, s: f64| 1.0 + rng.random_range(-s..s);
        Self {
            length,
            width,
            height,
            wheelbase: a.wheelbase_fraction * length * jitter(rng, 0.03),
            wheel_radius: a.wheel_radius * jitter(rng, 0.05),
            roof_length: a.roof_fraction * length * jitter(rng, 0.06),
            roof_center: a.roof_offset * length + rng.random_range(-0.05..0.05),
            belt_height: a.belt_fraction * height * jitter(rng, 0.03),
            light_height: 0.55 * height * jitter(rng, 0.04),
            axle_offset: rng.random_range(-0.06..0.06),
        }
    }
}

/// Keypoints of one vehicle; extents along x, y, z equal length, width, height.
pub fn vehicle_shape(d: &VehicleDims, category: &str) -> ShapeVector {
    let (hl, hw) = (0.5 * d.length, 0.5 * d.width);
    let body = hw - 0.12;
    let mut p = vec![Vector3::zeros(); NUM_KEYPOINTS];
    let mut quad = |first: usize, x_rear: f64, x_front: f64, y: f64, z: f64| {
        p[first] = Vector3::new(x_rear, y, z);
        p[first + 1] = Vector3::new(x_rear, -y, z);
        p[first + 2] = Vector3::new(x_front, y, z);
        p[first + 3] = Vector3::new(x_front, -y, z);
    };
    let roof_rear = d.roof_center - 0.5 * d.roof_length;
    let roof_front = d.roof_center + 0.5 * d.roof_length;
    let ws_rear = (roof_rear - 0.35 * (roof_rear + hl)).max(-hl + 0.1);
    let ws_front = roof_front + 0.45 * (hl - roof_front);
    let axle_rear = d.axle_offset - 0.5 * d.wheelbase;
    let axle_front = d.axle_offset + 0.5 * d.wheelbase;
    let track = 0.5 * (d.width - 0.25);

    quad(0, roof_rear, roof_front, 0.41 * d.width, d.height);
    quad(4, ws_rear, ws_front, 0.43 * d.width, d.belt_height);
    quad(8, -hl + 0.04, hl - 0.04, 0.37 * d.width, d.light_height);
    quad(12, -hl, hl, body - 0.05, 0.45);
    quad(16, axle_rear, axle_front, track, d.wheel_radius);
    quad(20, -hl + 0.3, hl - 0.3, body, 0.18);
    quad(28, axle_rear, axle_front, track, 0.0);
    let mirror_x = ws_front - 0.1;
    p[24] = Vector3::new(mirror_x, hw, d.belt_height + 0.05);
    p[25] = Vector3::new(mirror_x, -hw, d.belt_height + 0.05);
    let door_x = ws_front - 0.55;
    p[26] = Vector3::new(door_x, body, d.belt_height + 0.3);
    p[27] = Vector3::new(door_x, -body, d.belt_height + 0.3);
    p[32] = Vector3::new(hl, 0.0, d.light_height);
    ShapeVector::from_points(&p, category)
}

/// Categories cycle in `CATEGORIES` order so every class is populated.
pub fn generate_fleet(cfg: &FleetConfig) -> Vec<ShapeVector> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    (0..cfg.count)
        .map(|i| {
            let a = &ARCHETYPES[i % ARCHETYPES.len()];
            vehicle_shape(&VehicleDims::sample(a, &mut rng), a.name)
        })
        .collect()
}
