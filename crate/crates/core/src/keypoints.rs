//! The 33-slot vehicle keypoint schema and per-frame detection records.
//!
//! Slots come in groups. Four-point groups are ordered rear-left, rear-right,
//! front-left, front-right; two-point groups left, right. Left is body +y.
//!
//! | ids     | detectable | meaning                                |
//! |---------|------------|----------------------------------------|
//! | 0–3     | yes        | roof top corners                       |
//! | 4–7     | yes        | rear / front windshield lower corners  |
//! | 8–11    | yes        | rear / front light centers             |
//! | 12–15   | no         | bumper corners                         |
//! | 16–19   | no         | wheel centers                          |
//! | 20–23   | no         | chassis bottom corners                 |
//! | 24–25   | yes        | side mirror outer corners              |
//! | 26–27   | no         | front door window corners              |
//! | 28–31   | yes        | wheel–ground contact points            |
//! | 32      | yes        | front brand logo                       |

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io;

pub const NUM_KEYPOINTS: usize = 33;
pub const NUM_DETECTABLE: usize = 19;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeypointGroup {
    pub name: &'static str,
    pub first: usize,
    pub len: usize,
    pub detectable: bool,
}

pub const GROUPS: [KeypointGroup; 10] = [
    KeypointGroup { name: "roof_top_corners", first: 0, len: 4, detectable: true },
    KeypointGroup { name: "windshield_corners", first: 4, len: 4, detectable: true },
    KeypointGroup { name: "light_centers", first: 8, len: 4, detectable: true },
    KeypointGroup { name: "bumper_corners", first: 12, len: 4, detectable: false },
    KeypointGroup { name: "wheel_centers", first: 16, len: 4, detectable: false },
    KeypointGroup { name: "chassis_bottom_corners", first: 20, len: 4, detectable: false },
    KeypointGroup { name: "side_mirrors", first: 24, len: 2, detectable: true },
    KeypointGroup { name: "front_door_windows", first: 26, len: 2, detectable: false },
    KeypointGroup { name: "wheel_ground_contacts", first: 28, len: 4, detectable: true },
    KeypointGroup { name: "front_logo", first: 32, len: 1, detectable: true },
];

/// Rear → front pairs of detectable points at equal height.
pub const FORWARD_PAIRS: [(usize, usize); 8] =
    [(0, 2), (1, 3), (4, 6), (5, 7), (8, 10), (9, 11), (28, 30), (29, 31)];

pub const WHEEL_CENTERS: [usize; 4] = [16, 17, 18, 19];
pub const WHEEL_CONTACTS: [usize; 4] = [28, 29, 30, 31];

pub fn group_of(slot: usize) -> Option<&'static KeypointGroup> {
    GROUPS.iter().find(|g| slot >= g.first && slot < g.first + g.len)
}

pub fn is_detectable(slot: usize) -> bool {
    group_of(slot).is_some_and(|g| g.detectable)
}

/// Left/right mirror pairs (left first).
pub fn symmetric_pairs() -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for g in &GROUPS {
        if g.len >= 2 {
            for i in (0..g.len).step_by(2) {
                out.push((g.first + i, g.first + i + 1));
            }
        }
    }
    out
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KeypointError {
    #[error("line {line}: malformed frame record: {message}")]
    Parse { line: usize, message: String },
    #[error("frame {frame}, detection {detection}: {message}")]
    Invalid {
        frame: usize,
        detection: u64,
        message: String,
    },
    #[error("frame {frame}: {message}")]
    InvalidFrame { frame: usize, message: String },
    #[error("{0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub u: f64,
    pub v: f64,
    /// Binary visibility reported by the detector.
    pub visible: bool,
}

impl Keypoint {
    pub const HIDDEN: Keypoint = Keypoint {
        u: 0.0,
        v: 0.0,
        visible: false,
    };

    pub fn pixel(&self) -> Vector2<f64> {
        Vector2::new(self.u, self.v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryHint {
    pub label: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointDetection {
    pub frame_index: usize,
    pub detection_id: u64,
    /// `[u_min, v_min, u_max, v_max]` in pixels.
    pub bounding_box: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<CategoryHint>,
    pub keypoints: Vec<Keypoint>,
    pub score: f64,
}

impl KeypointDetection {
    pub fn visible_count(&self) -> usize {
        self.keypoints.iter().filter(|k| k.visible).count()
    }

    pub fn bbox_center(&self) -> Vector2<f64> {
        let b = &self.bounding_box;
        Vector2::new(0.5 * (b[0] + b[2]), 0.5 * (b[1] + b[3]))
    }

    /// Checks the record against the schema and image bounds (`image_size` in px).
    pub fn validate(&self, image_size: [u32; 2]) -> Result<(), KeypointError> {
        let bad = |message: String| KeypointError::Invalid {
            frame: self.frame_index,
            detection: self.detection_id,
            message,
        };
        if self.keypoints.len() != NUM_KEYPOINTS {
            return Err(bad(format!(
                "expected {NUM_KEYPOINTS} keypoints, got {}",
                self.keypoints.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(bad(format!("score {} outside [0, 1]", self.score)));
        }
        let b = &self.bounding_box;
        if !b.iter().all(|v| v.is_finite()) || b[2] < b[0] || b[3] < b[1] {
            return Err(bad("bounding box has negative extent".into()));
        }
        let (w, h) = (image_size[0] as f64, image_size[1] as f64);
        for (slot, kp) in self.keypoints.iter().enumerate() {
            if !kp.visible {
                continue;
            }
            if !is_detectable(slot) {
                return Err(bad(format!("visibility set on non-detectable slot {slot}")));
            }
            let inside = kp.u >= -0.1 * w
                && kp.u <= 1.1 * w
                && kp.v >= -0.1 * h
                && kp.v <= 1.1 * h;
            if !inside {
                return Err(bad(format!("keypoint {slot} at ({}, {}) outside image", kp.u, kp.v)));
            }
        }
        if let Some(c) = &self.category {
            if !(0.0..=1.0).contains(&c.confidence) {
                return Err(bad("category confidence outside [0, 1]".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame_index: usize,
    /// Seconds; derived from the frame rate when absent in the file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<f64>,
    pub detections: Vec<KeypointDetection>,
}

impl FrameDetections {
    pub fn time(&self, frame_rate: f64) -> f64 {
        self.timestamp
            .unwrap_or(self.frame_index as f64 / frame_rate)
    }
}

/// What the loader needs to validate records that the file itself does not carry.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionLimits {
    pub image_size: [u32; 2],
    pub frame_rate: f64,
}

/// Direction between the endpoints of one visible forward pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardVector {
    pub pair: (usize, usize),
    pub rear: Vector2<f64>,
    pub front: Vector2<f64>,
}

impl ForwardVector {
    pub fn vector(&self) -> Vector2<f64> {
        self.front - self.rear
    }
}

pub fn forward_direction_vectors(d: &KeypointDetection) -> Vec<ForwardVector> {
    FORWARD_PAIRS
        .iter()
        .filter_map(|&(rear, front)| {
            let a = d.keypoints.get(rear)?;
            let b = d.keypoints.get(front)?;
            (a.visible && b.visible).then(|| ForwardVector {
                pair: (rear, front),
                rear: a.pixel(),
                front: b.pixel(),
            })
        })
        .collect()
}

pub fn parse_detections(text: &str, limits: &DetectionLimits) -> Result<Vec<FrameDetections>, KeypointError> {
    let mut frames = Vec::new();
    for (line, raw) in io::jsonl_lines(text) {
        let frame: FrameDetections = serde_json::from_str(raw).map_err(|e| KeypointError::Parse {
            line,
            message: e.to_string(),
        })?;
        let mut ids = BTreeSet::new();
        for d in &frame.detections {
            if d.frame_index != frame.frame_index {
                return Err(KeypointError::Invalid {
                    frame: frame.frame_index,
                    detection: d.detection_id,
                    message: format!("record claims frame {}", d.frame_index),
                });
            }
            if !ids.insert(d.detection_id) {
                return Err(KeypointError::Invalid {
                    frame: frame.frame_index,
                    detection: d.detection_id,
                    message: "duplicate detection id".into(),
                });
            }
            d.validate(limits.image_size)?;
        }
        frames.push(frame);
    }
    frames.sort_by_key(|f| f.frame_index);
    for w in frames.windows(2) {
        if w[0].frame_index == w[1].frame_index {
            return Err(KeypointError::InvalidFrame {
                frame: w[1].frame_index,
                message: "frame appears twice".into(),
            });
        }
        if w[1].time(limits.frame_rate) <= w[0].time(limits.frame_rate) {
            return Err(KeypointError::InvalidFrame {
                frame: w[1].frame_index,
                message: "timestamps must increase strictly".into(),
            });
        }
    }
    Ok(frames)
}

pub fn load_detections(path: &Path, limits: &DetectionLimits) -> Result<Vec<FrameDetections>, KeypointError> {
    let text = io::read_text(path).map_err(|e| KeypointError::Io(e.to_string()))?;
    parse_detections(&text, limits)
}

pub fn detections_to_bytes(frames: &[FrameDetections]) -> crate::Result<Vec<u8>> {
    io::to_jsonl_bytes(frames)
}

pub fn save_detections(path: &Path, frames: &[FrameDetections]) -> crate::Result<()> {
    io::write_atomic(path, &detections_to_bytes(frames)?)
}
