//! Per-track EKF over a simplified kinematic bicycle, and running shape estimates.
//!
//! Free states are (x, y, ψ, v, δ); the slip angle β = atan(tan δ · l_r / l)
//! is carried as a sixth, functionally dependent component of the reported
//! covariance. Fitted (x, y, ψ) are the measurements.

use std::path::Path;

use nalgebra::{Matrix3, Matrix3x5, Matrix5, Matrix5x3, Matrix6, SMatrix, Vector3, Vector5};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::angle::{wrap_half_open, wrap_innovation};
use crate::error::{Error, Result};
use crate::io;
use crate::model_fitting::VehicleFit;
use crate::shape_prior::{ShapeParams, ShapePrior};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EkfError {
    #[error("time step must be positive and finite, got {0}")]
    InvalidTimeStep(f64),
    #[error("covariance is not symmetric positive semi-definite")]
    NotPsd,
    #[error("non-finite measurement")]
    InvalidMeasurement,
    #[error("wheelbase must be positive, got {0}")]
    InvalidWheelbase(f64),
    #[error("line {line}: malformed trajectory record: {message}")]
    Parse { line: usize, message: String },
}

pub const IX: usize = 0;
pub const IY: usize = 1;
pub const IPSI: usize = 2;
pub const IV: usize = 3;
pub const IDELTA: usize = 4;

/// Continuous-time process noise spectral densities, per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EkfConfig {
    /// m²/s for x and y.
    pub q_position: f64,
    /// rad²/s.
    pub q_heading: f64,
    /// (m/s)²/s.
    pub q_speed: f64,
    /// rad²/s.
    pub q_steering: f64,
    /// Measurement standard deviations.
    pub r_position: f64,
    pub r_heading: f64,
    /// Prior standard deviations of the hidden states at track start.
    pub initial_speed_std: f64,
    pub initial_steering_std: f64,
    /// Rear axle distance from the center of mass over wheelbase.
    pub rear_axle_ratio: f64,
    /// |δ| is clamped to this after every update.
    pub max_steering: f64,
}

impl Default for EkfConfig {
    fn default() -> Self {
        Self {
            q_position: 1e-4,
            q_heading: 1e-4,
            q_speed: 0.5,
            q_steering: 0.01,
            r_position: 0.1,
            r_heading: 0.02,
            initial_speed_std: 15.0,
            initial_steering_std: 0.2,
            rear_axle_ratio: 0.5,
            max_steering: 0.7,
        }
    }
}

impl EkfConfig {
    pub fn validate(&self) -> Result<(), String> {
        let all_pos = [
            self.r_position,
            self.r_heading,
            self.initial_speed_std,
            self.initial_steering_std,
            self.max_steering,
        ]
        .iter()
        .all(|v| *v > 0.0 && v.is_finite());
        let all_nonneg = [self.q_position, self.q_heading, self.q_speed, self.q_steering]
            .iter()
            .all(|v| *v >= 0.0 && v.is_finite());
        if !all_pos || !all_nonneg {
            return Err("noise parameters must be finite; standard deviations > 0".into());
        }
        if !(self.rear_axle_ratio > 0.0 && self.rear_axle_ratio < 1.0) {
            return Err("rear_axle_ratio must be in (0, 1)".into());
        }
        if self.max_steering >= std::f64::consts::FRAC_PI_2 {
            return Err("max_steering must be below π/2".into());
        }
        Ok(())
    }

    fn measurement_covariance(&self) -> Matrix3<f64> {
        let (p, h) = (self.r_position.powi(2), self.r_heading.powi(2));
        Matrix3::from_diagonal(&Vector3::new(p, p, h))
    }

    fn process_covariance(&self, dt: f64) -> Matrix5<f64> {
        Matrix5::from_diagonal(&Vector5::new(
            self.q_position,
            self.q_position,
            self.q_heading,
            self.q_speed,
            self.q_steering,
        )) * dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EkfState {
    /// (x, y, ψ, v, δ).
    pub mean: Vector5<f64>,
    /// Covariance of the free states.
    pub p: Matrix5<f64>,
    pub wheelbase: f64,
    pub rear_axle_ratio: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateOutcome {
    pub state: EkfState,
    /// True when the innovation covariance was singular and the update skipped.
    pub skipped: bool,
}

fn slip(delta: f64, ratio: f64) -> f64 {
    (delta.tan() * ratio).atan()
}

fn slip_derivative(delta: f64, ratio: f64) -> f64 {
    let t = delta.tan();
    ratio * (1.0 + t * t) / (1.0 + ratio * ratio * t * t)
}

/// Time derivative of (x, y, ψ, v, δ) under the bicycle rules.
pub fn bicycle_derivative(s: &Vector5<f64>, wheelbase: f64, ratio: f64) -> Vector5<f64> {
    let (psi, v, delta) = (s[IPSI], s[IV], s[IDELTA]);
    let beta = slip(delta, ratio);
    Vector5::new(
        v * (psi + beta).cos(),
        v * (psi + beta).sin(),
        v / wheelbase * beta.cos() * delta.tan(),
        0.0,
        0.0,
    )
}

/// Classical Runge–Kutta integration over `dt` in `substeps` equal steps.
pub fn integrate_rk4(s: &Vector5<f64>, wheelbase: f64, ratio: f64, dt: f64, substeps: usize) -> Vector5<f64> {
    let h = dt / substeps as f64;
    let f = |x: &Vector5<f64>| bicycle_derivative(x, wheelbase, ratio);
    let mut x = *s;
    for _ in 0..substeps {
        let k1 = f(&x);
        let k2 = f(&(x + k1 * (h / 2.0)));
        let k3 = f(&(x + k2 * (h / 2.0)));
        let k4 = f(&(x + k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
    }
    x
}

fn is_psd(p: &Matrix5<f64>) -> bool {
    if !p.iter().all(|v| v.is_finite()) {
        return false;
    }
    let scale = p.amax().max(1e-300);
    if (p - p.transpose()).amax() > 1e-9 * scale {
        return false;
    }
    p.symmetric_eigenvalues().min() >= -1e-9 * scale
}

impl EkfState {
    /// Starts a filter at a fitted pose with zero speed and steering.
    pub fn from_fit(fit: &VehicleFit, wheelbase: f64, cfg: &EkfConfig) -> Result<Self, EkfError> {
        if !(wheelbase > 0.0 && wheelbase.is_finite()) {
            return Err(EkfError::InvalidWheelbase(wheelbase));
        }
        let mean = Vector5::new(fit.pose.x, fit.pose.y, fit.pose.heading, 0.0, 0.0);
        if !mean.iter().all(|v| v.is_finite()) {
            return Err(EkfError::InvalidMeasurement);
        }
        let (rp, rh) = (cfg.r_position.powi(2), cfg.r_heading.powi(2));
        let p = Matrix5::from_diagonal(&Vector5::new(
            rp,
            rp,
            rh,
            cfg.initial_speed_std.powi(2),
            cfg.initial_steering_std.powi(2),
        ));
        Ok(Self {
            mean,
            p,
            wheelbase,
            rear_axle_ratio: cfg.rear_axle_ratio,
        })
    }

    pub fn x(&self) -> f64 {
        self.mean[IX]
    }

    pub fn y(&self) -> f64 {
        self.mean[IY]
    }

    pub fn heading(&self) -> f64 {
        self.mean[IPSI]
    }

    pub fn speed(&self) -> f64 {
        self.mean[IV]
    }

    pub fn steering(&self) -> f64 {
        self.mean[IDELTA]
    }

    pub fn slip(&self) -> f64 {
        slip(self.mean[IDELTA], self.rear_axle_ratio)
    }

    /// Covariance over (x, y, ψ, v, δ, β) with β's row and column carried
    /// through the linearized constraint β = β(δ).
    pub fn covariance(&self) -> Matrix6<f64> {
        let mut t = SMatrix::<f64, 6, 5>::zeros();
        for i in 0..5 {
            t[(i, i)] = 1.0;
        }
        t[(5, IDELTA)] = slip_derivative(self.mean[IDELTA], self.rear_axle_ratio);
        t * self.p * t.transpose()
    }

    /// Jacobian of the one-step Euler prediction with respect to the free states.
    pub fn transition_jacobian(&self, dt: f64) -> Matrix5<f64> {
        let (psi, v, delta) = (self.mean[IPSI], self.mean[IV], self.mean[IDELTA]);
        let l = self.wheelbase;
        let beta = self.slip();
        let db = slip_derivative(delta, self.rear_axle_ratio);
        let (s, c) = (psi + beta).sin_cos();
        let t = delta.tan();
        let mut f = Matrix5::identity();
        f[(IX, IPSI)] = -v * s * dt;
        f[(IX, IV)] = c * dt;
        f[(IX, IDELTA)] = -v * s * db * dt;
        f[(IY, IPSI)] = v * c * dt;
        f[(IY, IV)] = s * dt;
        f[(IY, IDELTA)] = v * c * db * dt;
        f[(IPSI, IV)] = beta.cos() * t / l * dt;
        f[(IPSI, IDELTA)] = v / l * (-beta.sin() * db * t + beta.cos() * (1.0 + t * t)) * dt;
        f
    }

    pub fn predict(&self, dt: f64, cfg: &EkfConfig) -> Result<Self, EkfError> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(EkfError::InvalidTimeStep(dt));
        }
        if !is_psd(&self.p) {
            return Err(EkfError::NotPsd);
        }
        let f = self.transition_jacobian(dt);
        let mut mean = self.mean + bicycle_derivative(&self.mean, self.wheelbase, self.rear_axle_ratio) * dt;
        mean[IPSI] = wrap_half_open(mean[IPSI]);
        let p = f * self.p * f.transpose() + cfg.process_covariance(dt);
        Ok(Self {
            mean,
            p: 0.5 * (p + p.transpose()),
            ..*self
        })
    }

    /// Linear update with z = (x, y, ψ); the heading innovation is wrapped.
    pub fn update(&self, z: &Vector3<f64>, cfg: &EkfConfig) -> Result<UpdateOutcome, EkfError> {
        if !z.iter().all(|v| v.is_finite()) {
            return Err(EkfError::InvalidMeasurement);
        }
        if !is_psd(&self.p) {
            return Err(EkfError::NotPsd);
        }
        let h = Matrix3x5::<f64>::new(
            1.0, 0.0, 0.0, 0.0, 0.0, //
            0.0, 1.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 1.0, 0.0, 0.0,
        );
        let r = cfg.measurement_covariance();
        let mut innovation = z - h * self.mean;
        innovation[2] = wrap_innovation(innovation[2]);
        let s = h * self.p * h.transpose() + r;
        let Some(chol) = s.cholesky() else {
            return Ok(UpdateOutcome { state: *self, skipped: true });
        };
        let pht: Matrix5x3<f64> = self.p * h.transpose();
        let k = chol.solve(&pht.transpose()).transpose();
        let mut mean = self.mean + k * innovation;
        mean[IPSI] = wrap_half_open(mean[IPSI]);
        mean[IDELTA] = mean[IDELTA].clamp(-cfg.max_steering, cfg.max_steering);
        let a = Matrix5::identity() - k * h;
        let p = a * self.p * a.transpose() + k * r * k.transpose();
        Ok(UpdateOutcome {
            state: Self {
                mean,
                p: 0.5 * (p + p.transpose()),
                ..*self
            },
            skipped: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeEstimate {
    pub b: ShapeParams,
    /// Sum of the inverse-residual weights folded in so far.
    pub weight: f64,
    /// Length, width, height of the shape generated by `b`, meters.
    pub dimensions: [f64; 3],
    pub wheelbase: f64,
    pub updates: usize,
}

/// Fit residuals below this floor get the same weight.
pub const RESIDUAL_FLOOR_PX: f64 = 1e-6;

impl ShapeEstimate {
    pub fn from_fit(fit: &VehicleFit, prior: &ShapePrior) -> Result<Self> {
        Self::from_weighted(fit.b.clone(), 1.0 / fit.residual.max(RESIDUAL_FLOOR_PX), 1, prior)
    }

    fn from_weighted(b: ShapeParams, weight: f64, updates: usize, prior: &ShapePrior) -> Result<Self> {
        let shape = prior.generate(&b)?;
        Ok(Self {
            dimensions: shape.dimensions(),
            wheelbase: shape.wheelbase(),
            b,
            weight,
            updates,
        })
    }
}

/// Folds a converged fit into the running shape estimate (weight 1/residual).
pub fn update_shape(e: Option<&ShapeEstimate>, fit: &VehicleFit, prior: &ShapePrior) -> Result<ShapeEstimate> {
    let Some(e) = e else {
        return ShapeEstimate::from_fit(fit, prior);
    };
    let w = 1.0 / fit.residual.max(RESIDUAL_FLOOR_PX);
    let total = e.weight + w;
    let b = (e.b.as_vector() * e.weight + fit.b.as_vector() * w) / total;
    ShapeEstimate::from_weighted(ShapeParams::from(b), total, e.updates + 1, prior)
}

pub const TRAJECTORY_FORMAT: &str = "skytrack-trajectory";
pub const TRAJECTORY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryHeader {
    pub format: String,
    pub version: u32,
    pub units: String,
    pub frame: String,
}

impl Default for TrajectoryHeader {
    fn default() -> Self {
        Self {
            format: TRAJECTORY_FORMAT.into(),
            version: TRAJECTORY_VERSION,
            units: "time s, position m, heading rad, speed m/s, dimensions m".into(),
            frame: "map ground plane, z up, heading counter-clockwise from +x".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub track_id: u64,
    pub frame: usize,
    pub timestamp: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub vehicle_type: String,
}

/// One state per frame of a confirmed track.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackStates<'a> {
    pub track_id: u64,
    pub states: &'a [(usize, f64, EkfState)],
    pub shape: &'a ShapeEstimate,
    pub vehicle_type: &'a str,
}

/// Per-frame records with the final dimensions and type; speed is clamped at 0.
pub fn export_trajectory(t: &TrackStates<'_>) -> Vec<TrajectoryRecord> {
    let [length, width, height] = t.shape.dimensions;
    t.states
        .iter()
        .map(|(frame, timestamp, s)| TrajectoryRecord {
            track_id: t.track_id,
            frame: *frame,
            timestamp: *timestamp,
            x: s.x(),
            y: s.y(),
            heading: s.heading(),
            speed: s.speed().max(0.0),
            length,
            width,
            height,
            vehicle_type: t.vehicle_type.to_string(),
        })
        .collect()
}

pub fn trajectories_to_bytes(records: &[TrajectoryRecord]) -> Result<Vec<u8>> {
    let mut out = io::to_jsonl_bytes([&TrajectoryHeader::default()])?;
    out.extend(io::to_jsonl_bytes(records)?);
    Ok(out)
}

pub fn parse_trajectories(text: &str) -> Result<Vec<TrajectoryRecord>> {
    let mut lines = io::jsonl_lines(text);
    let Some((line, raw)) = lines.next() else {
        return Ok(Vec::new());
    };
    let header: TrajectoryHeader = serde_json::from_str(raw).map_err(|e| Error::json(format!("trajectory header line {line}"), e))?;
    if header.format != TRAJECTORY_FORMAT || header.version != TRAJECTORY_VERSION {
        return Err(EkfError::Parse {
            line,
            message: format!("unsupported trajectory format {} v{}", header.format, header.version),
        }
        .into());
    }
    lines
        .map(|(line, raw)| {
            serde_json::from_str(raw).map_err(|e| {
                EkfError::Parse { line, message: e.to_string() }.into()
            })
        })
        .collect()
}

pub fn load_trajectories(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    parse_trajectories(&io::read_text(path)?)
}
