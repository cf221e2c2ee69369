//! Per-detection vehicle fit: ground pose (x, y, ψ) and shape parameters b.
//!
//! Minimizes Σ_j ‖p_j − Π(R_ψ (W_j b + s_m,j) + t)‖² + λ‖b − b_t‖² over the
//! visible keypoints with Levenberg–Marquardt. Heading is initialized from
//! forward-direction pairs lifted to the ground and filtered by RANSAC.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::angle::{angle_diff, wrap_half_open};
use crate::camera::{CameraError, CameraModel};
use crate::keypoints::{forward_direction_vectors, KeypointDetection, NUM_DETECTABLE};
use crate::lm::{self, LeastSquaresProblem, LmConfig};
use crate::shape_prior::{ShapeParams, ShapePrior};

pub const MIN_VISIBLE_KEYPOINTS: usize = 4;

/// Regularizer weight for the default fleet at 2 px noise; see [`calibrate_lambda`].
pub const DEFAULT_LAMBDA: f64 = 8.90668630214901;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("{visible} visible keypoints, at least {required} needed")]
    UnderConstrained { visible: usize, required: usize },
    #[error("no visible forward-direction pair")]
    InitializationUnavailable,
    #[error("invalid fit configuration: {0}")]
    InvalidConfig(String),
    #[error("shape parameter vector has {got} entries, prior has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error(transparent)]
    Camera(#[from] CameraError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundPose {
    pub x: f64,
    pub y: f64,
    /// Radians in [−π, π).
    pub heading: f64,
}

impl GroundPose {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self { x, y, heading }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    /// Maps a body-frame point to the world.
    pub fn to_world(&self, body: &Vector3<f64>) -> Vector3<f64> {
        let (s, c) = self.heading.sin_cos();
        Vector3::new(
            c * body.x - s * body.y + self.x,
            s * body.x + c * body.y + self.y,
            body.z,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub lambda: f64,
    pub max_iterations: usize,
    pub step_tolerance: f64,
    pub ransac_iterations: usize,
    /// Radians.
    pub inlier_angle_threshold: f64,
    /// Huber reweighting of per-keypoint errors.
    pub robust_loss: bool,
    /// Huber threshold in pixels.
    pub huber_delta: f64,
    pub min_visible: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            max_iterations: 50,
            step_tolerance: 1e-10,
            ransac_iterations: 64,
            inlier_angle_threshold: 10f64.to_radians(),
            robust_loss: false,
            huber_delta: 4.0,
            min_visible: MIN_VISIBLE_KEYPOINTS,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: &str| Err(FitError::InvalidConfig(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and ≥ 0");
        }
        if self.max_iterations == 0 || self.ransac_iterations == 0 {
            return bad("iteration counts must be > 0");
        }
        if !(self.step_tolerance > 0.0 && self.inlier_angle_threshold > 0.0 && self.huber_delta > 0.0) {
            return bad("thresholds must be > 0");
        }
        if self.min_visible < MIN_VISIBLE_KEYPOINTS {
            return bad("min_visible must be at least 4");
        }
        Ok(())
    }

    fn lm(&self) -> LmConfig {
        LmConfig {
            max_iterations: self.max_iterations,
            step_tolerance: self.step_tolerance,
            ..LmConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleFit {
    pub pose: GroundPose,
    pub b: ShapeParams,
    /// Mean reprojection error over visible keypoints, pixels.
    pub residual: f64,
    pub converged: bool,
    pub iterations: usize,
    pub visible: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FitInit {
    /// Position from the bounding box, heading from forward pairs (or the
    /// four-way fallback around `previous_heading`).
    Auto { previous_heading: Option<f64> },
    Pose(GroundPose),
}

/// Fit unknowns in solver order: x, y, ψ, b.
#[derive(Debug, Clone, PartialEq)]
pub struct FitState {
    pub pose: GroundPose,
    pub b: DVector<f64>,
}

impl FitState {
    fn to_vector(&self) -> DVector<f64> {
        let k = self.b.len();
        let mut v = DVector::zeros(3 + k);
        v[0] = self.pose.x;
        v[1] = self.pose.y;
        v[2] = self.pose.heading;
        v.rows_mut(3, k).copy_from(&self.b);
        v
    }

    fn from_vector(v: &DVector<f64>) -> Self {
        Self {
            pose: GroundPose::new(v[0], v[1], v[2]),
            b: v.rows(3, v.len() - 3).into_owned(),
        }
    }
}

/// Heading from the visible forward pairs, lifted to the ground plane.
///
/// RANSAC scores each hypothesis by the number of ground vectors within
/// `inlier_angle_threshold`; ties go to the smaller summed deviation, then
/// to the earlier hypothesis. The answer is the angle of the mean of the
/// normalized inlier directions.
pub fn initial_heading(d: &KeypointDetection, camera: &CameraModel, cfg: &FitConfig) -> Result<f64, FitError> {
    let mut dirs = Vec::new();
    for fv in forward_direction_vectors(d) {
        let a = camera.back_project_to_ground(&fv.rear)?;
        let b = camera.back_project_to_ground(&fv.front)?;
        let g = b - a;
        if g.norm() > 1e-9 {
            dirs.push(g.normalize());
        }
    }
    heading_consensus(&dirs, cfg)
}

/// RANSAC over unit ground directions.
pub fn heading_consensus(dirs: &[Vector2<f64>], cfg: &FitConfig) -> Result<f64, FitError> {
    if dirs.is_empty() {
        return Err(FitError::InitializationUnavailable);
    }
    let angles: Vec<f64> = dirs.iter().map(|d| d.y.atan2(d.x)).collect();
    let score = |h: usize| {
        let mut count = 0;
        let mut dev = 0.0;
        for &a in &angles {
            let e = angle_diff(a, angles[h]).abs();
            if e <= cfg.inlier_angle_threshold {
                count += 1;
                dev += e;
            }
        }
        (count, dev)
    };
    let hypotheses: Vec<usize> = if dirs.len() <= cfg.ransac_iterations {
        (0..dirs.len()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        (0..cfg.ransac_iterations).map(|_| rng.random_range(0..dirs.len())).collect()
    };
    let mut best = hypotheses[0];
    let mut best_score = score(best);
    for &h in &hypotheses[1..] {
        let s = score(h);
        if s.0 > best_score.0 || (s.0 == best_score.0 && s.1 < best_score.1) {
            best = h;
            best_score = s;
        }
    }
    let mut sum = Vector2::zeros();
    for (d, &a) in dirs.iter().zip(&angles) {
        if angle_diff(a, angles[best]).abs() <= cfg.inlier_angle_threshold {
            sum += d;
        }
    }
    Ok(wrap_half_open(sum.y.atan2(sum.x)))
}

struct FitProblem<'a> {
    points: Vec<(usize, Vector2<f64>)>,
    weights: Vec<f64>,
    prior: &'a ShapePrior,
    camera: &'a CameraModel,
    b_t: DVector<f64>,
    lambda: f64,
}

impl FitProblem<'_> {
    fn rows(&self) -> usize {
        2 * self.points.len() + if self.lambda > 0.0 { self.b_t.len() } else { 0 }
    }

    fn eval(&self, v: &DVector<f64>, want_jacobian: bool) -> (DVector<f64>, DMatrix<f64>) {
        let k = self.b_t.len();
        let state = FitState::from_vector(v);
        let (s, c) = state.pose.heading.sin_cos();
        let mut r = DVector::zeros(self.rows());
        let mut jac = if want_jacobian {
            DMatrix::zeros(self.rows(), 3 + k)
        } else {
            DMatrix::zeros(0, 0)
        };
        for (i, ((slot, obs), w)) in self.points.iter().zip(&self.weights).enumerate() {
            let body = self.prior.point(*slot, &state.b);
            let world = state.pose.to_world(&body);
            let sw = w.sqrt();
            match self.camera.project_with_jacobian(&world) {
                Ok((px, dpx)) => {
                    r.fixed_rows_mut::<2>(2 * i).copy_from(&((px - obs) * sw));
                    if want_jacobian {
                        let dpsi = Vector3::new(-s * body.x - c * body.y, c * body.x - s * body.y, 0.0);
                        let w3 = self.prior.basis.rows(3 * slot, 3);
                        let mut rot_w = w3.clone_owned();
                        for col in 0..k {
                            let (bx, by) = (w3[(0, col)], w3[(1, col)]);
                            rot_w[(0, col)] = c * bx - s * by;
                            rot_w[(1, col)] = s * bx + c * by;
                        }
                        let mut block = jac.view_mut((2 * i, 0), (2, 3 + k));
                        block.column_mut(0).copy_from(&(dpx.column(0) * sw));
                        block.column_mut(1).copy_from(&(dpx.column(1) * sw));
                        block.column_mut(2).copy_from(&(dpx * dpsi * sw));
                        block.columns_mut(3, k).copy_from(&(dpx * rot_w * sw));
                    }
                }
                Err(_) => {
                    r[2 * i] = f64::NAN;
                    r[2 * i + 1] = f64::NAN;
                }
            }
        }
        if self.lambda > 0.0 {
            let sl = self.lambda.sqrt();
            let base = 2 * self.points.len();
            r.rows_mut(base, k).copy_from(&((&state.b - &self.b_t) * sl));
            if want_jacobian {
                for j in 0..k {
                    jac[(base + j, 3 + j)] = sl;
                }
            }
        }
        (r, jac)
    }

    fn pixel_errors(&self, v: &DVector<f64>) -> Vec<f64> {
        let state = FitState::from_vector(v);
        self.points
            .iter()
            .map(|(slot, obs)| {
                let world = state.pose.to_world(&self.prior.point(*slot, &state.b));
                self.camera.project(&world).map_or(f64::INFINITY, |px| (px - obs).norm())
            })
            .collect()
    }
}

impl LeastSquaresProblem for FitProblem<'_> {
    type Params = DVector<f64>;

    fn evaluate(&self, params: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        self.eval(params, true)
    }

    fn residuals(&self, params: &DVector<f64>) -> DVector<f64> {
        self.eval(params, false).0
    }

    fn retract(&self, params: &DVector<f64>, step: &DVector<f64>) -> DVector<f64> {
        params + step
    }
}

fn visible_points(d: &KeypointDetection) -> Vec<(usize, Vector2<f64>)> {
    d.keypoints
        .iter()
        .enumerate()
        .filter(|(_, k)| k.visible)
        .map(|(i, k)| (i, k.pixel()))
        .collect()
}

fn problem<'a>(
    d: &KeypointDetection,
    prior: &'a ShapePrior,
    camera: &'a CameraModel,
    b_t: &ShapeParams,
    lambda: f64,
) -> Result<FitProblem<'a>, FitError> {
    if b_t.len() != prior.k() {
        return Err(FitError::Dimension { expected: prior.k(), got: b_t.len() });
    }
    let points = visible_points(d);
    Ok(FitProblem {
        weights: vec![1.0; points.len()],
        points,
        prior,
        camera,
        b_t: b_t.as_vector(),
        lambda,
    })
}

/// Stacked residuals (2 per visible keypoint, then k regularizer rows when
/// λ > 0) and their analytic Jacobian with respect to (x, y, ψ, b).
pub fn residuals_and_jacobian(
    state: &FitState,
    d: &KeypointDetection,
    prior: &ShapePrior,
    camera: &CameraModel,
    b_t: &ShapeParams,
    lambda: f64,
) -> Result<(DVector<f64>, DMatrix<f64>), FitError> {
    if state.b.len() != prior.k() {
        return Err(FitError::Dimension { expected: prior.k(), got: state.b.len() });
    }
    let p = problem(d, prior, camera, b_t, lambda)?;
    for (slot, _) in &p.points {
        camera.project(&state.pose.to_world(&prior.point(*slot, &state.b)))?;
    }
    Ok(p.eval(&state.to_vector(), true))
}

pub fn fit_vehicle(
    d: &KeypointDetection,
    prior: &ShapePrior,
    camera: &CameraModel,
    b_t: &ShapeParams,
    cfg: &FitConfig,
    init: FitInit,
) -> Result<VehicleFit, FitError> {
    cfg.validate()?;
    let visible = d.visible_count();
    if visible < cfg.min_visible {
        return Err(FitError::UnderConstrained { visible, required: cfg.min_visible });
    }
    let mut p = problem(d, prior, camera, b_t, cfg.lambda)?;

    let starts: Vec<GroundPose> = match init {
        FitInit::Pose(pose) => vec![pose],
        FitInit::Auto { previous_heading } => {
            let c = camera.back_project_to_ground(&d.bbox_center())?;
            match initial_heading(d, camera, cfg) {
                Ok(h) => vec![GroundPose::new(c.x, c.y, h)],
                Err(FitError::InitializationUnavailable) => {
                    let h0 = previous_heading.unwrap_or(0.0);
                    (0..4)
                        .map(|i| GroundPose::new(c.x, c.y, wrap_half_open(h0 + i as f64 * std::f64::consts::FRAC_PI_2)))
                        .collect()
                }
                Err(e) => return Err(e),
            }
        }
    };

    let mut best: Option<VehicleFit> = None;
    for start in starts {
        let fit = solve_from(&mut p, start, b_t, cfg);
        let better = match &best {
            None => true,
            Some(b) => fit.residual < b.residual,
        };
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one start"))
}

fn solve_from(p: &mut FitProblem<'_>, start: GroundPose, b_t: &ShapeParams, cfg: &FitConfig) -> VehicleFit {
    let x0 = FitState { pose: start, b: b_t.as_vector() }.to_vector();
    p.weights.iter_mut().for_each(|w| *w = 1.0);
    let mut report = lm::solve(&*p, x0, &cfg.lm());
    let mut iterations = report.iterations;
    if cfg.robust_loss {
        // Iteratively reweighted: Huber weights are frozen within each solve.
        for _ in 0..3 {
            let errs = p.pixel_errors(&report.params);
            for (w, e) in p.weights.iter_mut().zip(errs) {
                *w = if e <= cfg.huber_delta { 1.0 } else { cfg.huber_delta / e };
            }
            report = lm::solve(&*p, report.params.clone(), &cfg.lm());
            iterations += report.iterations;
        }
    }
    let errs = p.pixel_errors(&report.params);
    let residual = errs.iter().sum::<f64>() / errs.len() as f64;
    let mut state = FitState::from_vector(&report.params);
    state.pose.heading = wrap_half_open(state.pose.heading);
    VehicleFit {
        pose: state.pose,
        b: ShapeParams::from(state.b),
        residual,
        converged: report.converged && residual.is_finite(),
        iterations,
        visible: p.points.len(),
    }
}

/// Regularizer weight giving λ‖b − b_t‖² ≈ 1% of the expected data term
/// σ²·(2N − (3 + k)) for N visible keypoints, with ‖b − b_t‖² averaged over
/// the training set against each model's category template.
pub fn calibrate_lambda(prior: &ShapePrior, sigma_px: f64, visible: usize) -> f64 {
    let k = prior.k();
    let dof = (2 * visible).saturating_sub(3 + k) as f64;
    let mut spread = 0.0;
    for (b, label) in prior.params.iter().zip(&prior.labels) {
        let t = &prior.templates[label];
        spread += (b.as_vector() - t.as_vector()).norm_squared();
    }
    spread /= prior.params.len() as f64;
    0.01 * sigma_px * sigma_px * dof / spread
}

/// Visible-keypoint count assumed by the default λ calibration.
pub const CALIBRATION_VISIBLE: usize = NUM_DETECTABLE;
