//! Pinhole camera model, planar PnP and per-frame recalibration.
//!
//! World frame: x/y on the flat ground plane, z up, meters. A [`CameraPose`]
//! maps world points into the camera frame as `p_c = R p_w + t`, with the
//! camera looking along its +z axis and image v growing along camera +y.
//! No lens distortion is modelled.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Matrix2x3, Matrix3, Rotation3, SymmetricEigen, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::io;
use crate::lm::{self, LeastSquaresProblem, LmConfig};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CameraError {
    #[error("point is behind the camera (depth {depth:.3e})")]
    BehindCamera { depth: f64 },
    #[error("viewing ray does not reach the ground plane in front of the camera")]
    NoGroundIntersection,
    #[error("need at least {required} correspondences, got {got}")]
    TooFewCorrespondences { required: usize, got: usize },
    #[error("degenerate correspondence configuration (collinear or coincident points)")]
    RankDeficient,
    #[error("pose refinement did not converge after {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("invalid camera pose: {0}")]
    InvalidPose(String),
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("frame {frame}: only {valid} valid reference points and no earlier pose to fall back on")]
    NoFallback { frame: usize, valid: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub focal_length_x: f64,
    pub focal_length_y: f64,
    pub principal_point: [f64; 2],
    /// Width and height in pixels.
    pub image_size: [u32; 2],
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, CameraError> {
        let k = Self {
            focal_length_x: fx,
            focal_length_y: fy,
            principal_point: [cx, cy],
            image_size: [width, height],
        };
        k.validate()?;
        Ok(k)
    }

    /// 4K sensor at 120 m with a ground sampling distance of 3.5 cm/px.
    pub fn default_survey() -> Self {
        let f = 120.0 / 0.035;
        Self {
            focal_length_x: f,
            focal_length_y: f,
            principal_point: [1920.0, 1080.0],
            image_size: [3840, 2160],
        }
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        if !(self.focal_length_x > 0.0 && self.focal_length_y > 0.0) {
            return Err(CameraError::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        let [cx, cy] = self.principal_point;
        let [w, h] = self.image_size;
        if !(cx >= 0.0 && cy >= 0.0 && cx <= w as f64 && cy <= h as f64) {
            return Err(CameraError::InvalidIntrinsics(
                "principal point outside the image".into(),
            ));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            self.focal_length_x,
            0.0,
            self.principal_point[0],
            0.0,
            self.focal_length_y,
            self.principal_point[1],
            0.0,
            0.0,
            1.0,
        )
    }

    /// Ground meters per pixel for a nadir view from `altitude`.
    pub fn ground_sampling_distance(&self, altitude: f64) -> f64 {
        altitude / self.focal_length_x
    }

    /// Whether a pixel lies inside the image grown by `margin` of its size on each side.
    pub fn contains(&self, px: &Vector2<f64>, margin: f64) -> bool {
        let w = self.image_size[0] as f64;
        let h = self.image_size[1] as f64;
        px.x >= -margin * w && px.x <= w * (1.0 + margin) && px.y >= -margin * h && px.y <= h * (1.0 + margin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// World → camera rotation.
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, CameraError> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    /// Camera placed at `center`, yawed about world z by `yaw` and tilted away
    /// from nadir by `tilt` (towards the yawed +y direction).
    pub fn from_center_yaw_tilt(center: Vector3<f64>, yaw: f64, tilt: f64) -> Self {
        let nadir = Matrix3::new(1.0, 0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, -1.0);
        let cam_to_world = Rotation3::from_axis_angle(&Vector3::z_axis(), yaw).into_inner()
            * nadir
            * Rotation3::from_axis_angle(&Vector3::x_axis(), tilt).into_inner();
        let rotation = cam_to_world.transpose();
        Self {
            rotation,
            translation: -(rotation * center),
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn transform(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    pub fn validate(&self) -> Result<(), CameraError> {
        let r = &self.rotation;
        if !r.iter().chain(self.translation.iter()).all(|v| v.is_finite()) {
            return Err(CameraError::InvalidPose("non-finite entries".into()));
        }
        let ortho = (r.transpose() * r - Matrix3::identity()).norm();
        if ortho > 1e-9 {
            return Err(CameraError::InvalidPose(format!("rotation not orthonormal ({ortho:.2e})")));
        }
        if (r.determinant() - 1.0).abs() > 1e-9 {
            return Err(CameraError::InvalidPose("rotation determinant is not +1".into()));
        }
        if self.center().z <= 0.0 {
            return Err(CameraError::InvalidPose("camera center is not above the ground".into()));
        }
        Ok(())
    }
}

/// Intrinsics and pose bundled for the per-frame consumers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
}

impl CameraModel {
    pub fn project(&self, world: &Vector3<f64>) -> Result<Vector2<f64>, CameraError> {
        project(&self.pose, &self.intrinsics, world)
    }

    pub fn back_project_to_ground(&self, pixel: &Vector2<f64>) -> Result<Vector2<f64>, CameraError> {
        back_project_to_ground(&self.pose, &self.intrinsics, pixel)
    }

    /// Pixel of `world` and the 2×3 Jacobian of the pixel with respect to `world`.
    pub fn project_with_jacobian(
        &self,
        world: &Vector3<f64>,
    ) -> Result<(Vector2<f64>, Matrix2x3<f64>), CameraError> {
        let pc = self.pose.transform(world);
        let (px, dpc) = pixel_and_jacobian(&self.intrinsics, &pc)?;
        Ok((px, dpc * self.pose.rotation))
    }
}

fn pixel_and_jacobian(
    k: &CameraIntrinsics,
    pc: &Vector3<f64>,
) -> Result<(Vector2<f64>, Matrix2x3<f64>), CameraError> {
    if pc.z <= 0.0 {
        return Err(CameraError::BehindCamera { depth: pc.z });
    }
    let iz = 1.0 / pc.z;
    let (fx, fy) = (k.focal_length_x, k.focal_length_y);
    let px = Vector2::new(
        fx * pc.x * iz + k.principal_point[0],
        fy * pc.y * iz + k.principal_point[1],
    );
    let jac = Matrix2x3::new(
        fx * iz,
        0.0,
        -fx * pc.x * iz * iz,
        0.0,
        fy * iz,
        -fy * pc.y * iz * iz,
    );
    Ok((px, jac))
}

pub fn project(
    pose: &CameraPose,
    intrinsics: &CameraIntrinsics,
    world: &Vector3<f64>,
) -> Result<Vector2<f64>, CameraError> {
    let pc = pose.transform(world);
    if pc.z <= 0.0 {
        return Err(CameraError::BehindCamera { depth: pc.z });
    }
    Ok(Vector2::new(
        intrinsics.focal_length_x * pc.x / pc.z + intrinsics.principal_point[0],
        intrinsics.focal_length_y * pc.y / pc.z + intrinsics.principal_point[1],
    ))
}

/// Intersects the viewing ray of `pixel` with the z = 0 plane.
pub fn back_project_to_ground(
    pose: &CameraPose,
    intrinsics: &CameraIntrinsics,
    pixel: &Vector2<f64>,
) -> Result<Vector2<f64>, CameraError> {
    let ray_cam = Vector3::new(
        (pixel.x - intrinsics.principal_point[0]) / intrinsics.focal_length_x,
        (pixel.y - intrinsics.principal_point[1]) / intrinsics.focal_length_y,
        1.0,
    );
    let dir = pose.rotation.transpose() * ray_cam;
    let center = pose.center();
    if dir.z.abs() < 1e-12 {
        return Err(CameraError::NoGroundIntersection);
    }
    let s = -center.z / dir.z;
    if s <= 0.0 {
        return Err(CameraError::NoGroundIntersection);
    }
    Ok(Vector2::new(center.x + s * dir.x, center.y + s * dir.y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundCorrespondence {
    /// Ground point in meters; z is always 0.
    pub map_point: Vector3<f64>,
    pub image_point: Vector2<f64>,
}

impl GroundCorrespondence {
    pub fn new(x: f64, y: f64, image_point: Vector2<f64>) -> Self {
        Self {
            map_point: Vector3::new(x, y, 0.0),
            image_point,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PnpSolution {
    pub pose: CameraPose,
    /// Root-mean-square reprojection error in pixels.
    pub rms: f64,
    pub iterations: usize,
}

pub const MIN_PNP_POINTS: usize = 4;

pub fn solve_pnp(
    correspondences: &[GroundCorrespondence],
    intrinsics: &CameraIntrinsics,
) -> Result<PnpSolution, CameraError> {
    solve_pnp_with(correspondences, intrinsics, &pnp_lm_config())
}

fn pnp_lm_config() -> LmConfig {
    LmConfig {
        max_iterations: 200,
        step_tolerance: 1e-12,
        gradient_tolerance: 1e-16,
        initial_damping: 1e-6,
    }
}

pub fn solve_pnp_with(
    correspondences: &[GroundCorrespondence],
    intrinsics: &CameraIntrinsics,
    config: &LmConfig,
) -> Result<PnpSolution, CameraError> {
    if correspondences.len() < MIN_PNP_POINTS {
        return Err(CameraError::TooFewCorrespondences {
            required: MIN_PNP_POINTS,
            got: correspondences.len(),
        });
    }
    intrinsics.validate()?;
    check_spread(correspondences)?;

    let initial = homography_pose(correspondences, intrinsics)?;
    let problem = PnpProblem {
        correspondences,
        intrinsics,
    };
    let report = lm::solve(&problem, (initial.rotation, initial.translation), config);
    if !report.converged {
        return Err(CameraError::NoConvergence {
            iterations: report.iterations,
        });
    }
    let (rotation, translation) = report.params;
    let pose = CameraPose::new(renormalize(&rotation), translation)?;
    Ok(PnpSolution {
        pose,
        rms: (report.cost / correspondences.len() as f64).sqrt(),
        iterations: report.iterations,
    })
}

/// RMS reprojection error of `pose` over `correspondences`.
pub fn reprojection_rms(
    pose: &CameraPose,
    intrinsics: &CameraIntrinsics,
    correspondences: &[GroundCorrespondence],
) -> Result<f64, CameraError> {
    let mut sum = 0.0;
    for c in correspondences {
        sum += (project(pose, intrinsics, &c.map_point)? - c.image_point).norm_squared();
    }
    Ok((sum / correspondences.len().max(1) as f64).sqrt())
}

fn check_spread(correspondences: &[GroundCorrespondence]) -> Result<(), CameraError> {
    let n = correspondences.len() as f64;
    let mean = correspondences
        .iter()
        .fold(Vector2::zeros(), |acc, c| acc + c.map_point.xy())
        / n;
    let mut cov = nalgebra::Matrix2::zeros();
    for c in correspondences {
        let d = c.map_point.xy() - mean;
        cov += d * d.transpose();
    }
    let eig = cov.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if hi <= 0.0 || lo <= 1e-10 * hi {
        return Err(CameraError::RankDeficient);
    }
    Ok(())
}

fn normalization(points: &[Vector2<f64>]) -> Matrix3<f64> {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vector2::zeros(), |a, p| a + p) / n;
    let spread = points.iter().map(|p| (p - mean).norm()).sum::<f64>() / n;
    let s = if spread > 0.0 { std::f64::consts::SQRT_2 / spread } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mean.x, 0.0, s, -s * mean.y, 0.0, 0.0, 1.0)
}

fn apply_h(h: &Matrix3<f64>, p: &Vector2<f64>) -> Vector2<f64> {
    let q = h * Vector3::new(p.x, p.y, 1.0);
    Vector2::new(q.x / q.z, q.y / q.z)
}

/// Ground → image homography by the normalised direct linear transform.
fn ground_homography(correspondences: &[GroundCorrespondence]) -> Result<Matrix3<f64>, CameraError> {
    let ground: Vec<_> = correspondences.iter().map(|c| c.map_point.xy()).collect();
    let image: Vec<_> = correspondences.iter().map(|c| c.image_point).collect();
    let tg = normalization(&ground);
    let ti = normalization(&image);

    let mut a = DMatrix::<f64>::zeros(2 * ground.len(), 9);
    for (i, (g, p)) in ground.iter().zip(&image).enumerate() {
        let g = apply_h(&tg, g);
        let p = apply_h(&ti, p);
        let row = [g.x, g.y, 1.0];
        for j in 0..3 {
            a[(2 * i, j)] = row[j];
            a[(2 * i, 6 + j)] = -p.x * row[j];
            a[(2 * i + 1, 3 + j)] = row[j];
            a[(2 * i + 1, 6 + j)] = -p.y * row[j];
        }
    }
    let ata = a.tr_mul(&a);
    let eig = SymmetricEigen::new(ata);
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let smallest = eig.eigenvalues[order[0]].abs();
    let second = eig.eigenvalues[order[1]].abs();
    let largest = eig.eigenvalues[order[8]].abs();
    if second <= 1e-14 * largest && second <= smallest * 10.0 + 1e-300 {
        return Err(CameraError::RankDeficient);
    }
    let h = eig.eigenvectors.column(order[0]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let ti_inv = ti.try_inverse().ok_or(CameraError::RankDeficient)?;
    Ok(ti_inv * hn * tg)
}

fn homography_pose(
    correspondences: &[GroundCorrespondence],
    intrinsics: &CameraIntrinsics,
) -> Result<CameraPose, CameraError> {
    let h = ground_homography(correspondences)?;
    let k_inv = intrinsics
        .matrix()
        .try_inverse()
        .ok_or_else(|| CameraError::InvalidIntrinsics("singular K".into()))?;
    let m = k_inv * h;
    let (m1, m2, m3) = (m.column(0).into_owned(), m.column(1).into_owned(), m.column(2).into_owned());
    let norm = 0.5 * (m1.norm() + m2.norm());
    if norm <= 0.0 {
        return Err(CameraError::RankDeficient);
    }
    let mut s = 1.0 / norm;
    // The ground points must end up in front of the camera.
    let centroid = correspondences
        .iter()
        .fold(Vector3::zeros(), |acc, c| acc + c.map_point)
        / correspondences.len() as f64;
    let depth = (m1 * centroid.x + m2 * centroid.y + m3).z;
    if depth < 0.0 {
        s = -s;
    }
    let r1 = m1 * s;
    let r2 = m2 * s;
    let r3 = r1.cross(&r2);
    let approx = Matrix3::from_columns(&[r1, r2, r3]);
    Ok(CameraPose {
        rotation: nearest_rotation(&approx),
        translation: m3 * s,
    })
}

fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u2 = u;
        u2.column_mut(2).neg_mut();
        r = u2 * v_t;
    }
    r
}

fn renormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    nearest_rotation(r)
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

struct PnpProblem<'a> {
    correspondences: &'a [GroundCorrespondence],
    intrinsics: &'a CameraIntrinsics,
}

impl LeastSquaresProblem for PnpProblem<'_> {
    type Params = (Matrix3<f64>, Vector3<f64>);

    fn evaluate(&self, (r, t): &Self::Params) -> (DVector<f64>, DMatrix<f64>) {
        let n = self.correspondences.len();
        let mut res = DVector::zeros(2 * n);
        let mut jac = DMatrix::zeros(2 * n, 6);
        for (i, c) in self.correspondences.iter().enumerate() {
            let rp = r * c.map_point;
            let pc = rp + t;
            match pixel_and_jacobian(self.intrinsics, &pc) {
                Ok((px, dp)) => {
                    let e = px - c.image_point;
                    res[2 * i] = e.x;
                    res[2 * i + 1] = e.y;
                    let d_rot = dp * (-skew(&rp));
                    jac.view_mut((2 * i, 0), (2, 3)).copy_from(&d_rot);
                    jac.view_mut((2 * i, 3), (2, 3)).copy_from(&dp);
                }
                Err(_) => {
                    res[2 * i] = f64::INFINITY;
                    res[2 * i + 1] = f64::INFINITY;
                }
            }
        }
        (res, jac)
    }

    fn retract(&self, (r, t): &Self::Params, step: &DVector<f64>) -> Self::Params {
        let omega = Vector3::new(step[0], step[1], step[2]);
        let dr = Rotation3::new(omega).into_inner();
        (dr * r, t + Vector3::new(step[3], step[4], step[5]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackedPoint {
    pub id: usize,
    pub u: f64,
    pub v: f64,
    pub valid: bool,
}

/// Ground reference points: their world positions, their pixels in the
/// anchor frame and their tracked pixels in every frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePointSet {
    pub world_points: Vec<Vector3<f64>>,
    pub anchor_frame_points: Vec<Vector2<f64>>,
    /// Indexed by frame; each entry lists the tracked points of that frame.
    pub frames: Vec<Vec<TrackedPoint>>,
}

impl ReferencePointSet {
    /// Valid correspondences of `frame`; frame 0 falls back to the anchor pixels.
    pub fn correspondences_at(&self, frame: usize) -> Vec<(usize, GroundCorrespondence)> {
        match self.frames.get(frame) {
            Some(points) => points
                .iter()
                .filter(|p| p.valid && p.u.is_finite() && p.v.is_finite())
                .filter_map(|p| {
                    self.world_points.get(p.id).map(|w| {
                        (
                            p.id,
                            GroundCorrespondence {
                                map_point: *w,
                                image_point: Vector2::new(p.u, p.v),
                            },
                        )
                    })
                })
                .collect(),
            None if frame == 0 => self
                .world_points
                .iter()
                .zip(&self.anchor_frame_points)
                .enumerate()
                .map(|(id, (w, a))| {
                    (
                        id,
                        GroundCorrespondence {
                            map_point: *w,
                            image_point: *a,
                        },
                    )
                })
                .collect(),
            None => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecalibrationConfig {
    /// Points reprojecting worse than this after a first solve are dropped.
    pub reprojection_threshold_px: f64,
}

impl Default for RecalibrationConfig {
    fn default() -> Self {
        Self {
            reprojection_threshold_px: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recalibration {
    pub pose: CameraPose,
    /// Set when the pose was carried over from the previous frame.
    pub degraded: bool,
    pub rms: f64,
    pub points_used: usize,
}

pub fn recalibrate(
    reference: &ReferencePointSet,
    frame_index: usize,
    intrinsics: &CameraIntrinsics,
    previous: Option<&CameraPose>,
    config: &RecalibrationConfig,
) -> Result<Recalibration, CameraError> {
    let corr = reference.correspondences_at(frame_index);
    let fallback = |valid: usize| match previous {
        Some(p) => Ok(Recalibration {
            pose: *p,
            degraded: true,
            rms: f64::NAN,
            points_used: 0,
        }),
        None => Err(CameraError::NoFallback {
            frame: frame_index,
            valid,
        }),
    };
    if corr.len() < MIN_PNP_POINTS {
        return fallback(corr.len());
    }
    let mut points: Vec<_> = corr.iter().map(|(_, c)| *c).collect();
    // Drop the worst point above the threshold and re-solve until all agree.
    loop {
        let sol = match solve_pnp(&points, intrinsics) {
            Ok(s) => s,
            Err(e @ CameraError::InvalidIntrinsics(_)) => return Err(e),
            Err(_) => return fallback(points.len()),
        };
        let worst = points
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let e = project(&sol.pose, intrinsics, &c.map_point)
                    .map_or(f64::INFINITY, |px| (px - c.image_point).norm());
                (i, e)
            })
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .expect("non-empty");
        if worst.1 <= config.reprojection_threshold_px {
            return Ok(Recalibration {
                pose: sol.pose,
                degraded: false,
                rms: sol.rms,
                points_used: points.len(),
            });
        }
        points.remove(worst.0);
        if points.len() < MIN_PNP_POINTS {
            return fallback(points.len());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorCorrespondence {
    pub id: usize,
    /// Map coordinates in map units.
    pub map: [f64; 2],
    /// Pixel in the anchor (first) frame.
    pub image: [f64; 2],
}

/// Calibration config file contents.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub intrinsics: CameraIntrinsics,
    /// Meters per map unit.
    pub map_scale: f64,
    pub correspondences: Vec<AnchorCorrespondence>,
    #[serde(default)]
    pub recalibration: RecalibrationConfig,
}

impl CalibrationConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = io::read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if !(self.map_scale > 0.0) {
            return Err(Error::Config("map_scale must be positive".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.correspondences {
            if !seen.insert(c.id) {
                return Err(Error::Config(format!("duplicate reference point id {}", c.id)));
            }
        }
        Ok(())
    }

    /// Anchor-frame correspondences in meters.
    pub fn anchor_correspondences(&self) -> Vec<GroundCorrespondence> {
        self.correspondences
            .iter()
            .map(|c| {
                GroundCorrespondence::new(
                    c.map[0] * self.map_scale,
                    c.map[1] * self.map_scale,
                    Vector2::new(c.image[0], c.image[1]),
                )
            })
            .collect()
    }

    /// Builds the reference set from tracked frames keyed by reference id.
    pub fn reference_set(&self, frames: Vec<Vec<TrackedPoint>>) -> ReferencePointSet {
        // Ids in the files are arbitrary; re-index densely in id order.
        let index: BTreeMap<usize, usize> = self
            .correspondences
            .iter()
            .enumerate()
            .map(|(i, c)| (c.id, i))
            .collect();
        let anchors = self.anchor_correspondences();
        let frames = frames
            .into_iter()
            .map(|pts| {
                pts.into_iter()
                    .filter_map(|p| index.get(&p.id).map(|&i| TrackedPoint { id: i, ..p }))
                    .collect()
            })
            .collect();
        ReferencePointSet {
            world_points: anchors.iter().map(|c| c.map_point).collect(),
            anchor_frame_points: anchors.iter().map(|c| c.image_point).collect(),
            frames,
        }
    }
}

/// One line of the reference-point track file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFrameRecord {
    pub frame: usize,
    pub points: Vec<TrackedPoint>,
}

/// Reads a reference-point track file into per-frame lists (dense by frame index).
pub fn load_reference_tracks(path: &Path) -> Result<Vec<Vec<TrackedPoint>>> {
    let text = io::read_text(path)?;
    parse_reference_tracks(&text)
}

pub fn parse_reference_tracks(text: &str) -> Result<Vec<Vec<TrackedPoint>>> {
    let mut frames: Vec<Vec<TrackedPoint>> = Vec::new();
    for (line_no, line) in io::jsonl_lines(text) {
        let rec: ReferenceFrameRecord = serde_json::from_str(line)
            .map_err(|e| Error::json(format!("reference track line {line_no}"), e))?;
        if rec.frame >= frames.len() {
            frames.resize(rec.frame + 1, Vec::new());
        }
        frames[rec.frame] = rec.points;
    }
    Ok(frames)
}

pub fn reference_tracks_to_bytes(frames: &[Vec<TrackedPoint>]) -> Result<Vec<u8>> {
    let records: Vec<_> = frames
        .iter()
        .enumerate()
        .map(|(frame, points)| ReferenceFrameRecord {
            frame,
            points: points.clone(),
        })
        .collect();
    io::to_jsonl_bytes(&records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn nadir(h: f64) -> CameraPose {
        CameraPose::from_center_yaw_tilt(Vector3::new(0.0, 0.0, h), 0.0, 0.0)
    }

    fn k1000() -> CameraIntrinsics {
        CameraIntrinsics::new(1000.0, 1000.0, 960.0, 540.0, 1920, 1080).unwrap()
    }

    /// Homogeneous 3×4 matrix product, written independently of `project`.
    fn oracle_project(pose: &CameraPose, k: &CameraIntrinsics, w: &Vector3<f64>) -> Vector2<f64> {
        let mut p = nalgebra::Matrix3x4::zeros();
        p.fixed_view_mut::<3, 3>(0, 0).copy_from(&pose.rotation);
        p.set_column(3, &pose.translation);
        let x = k.matrix() * p * nalgebra::Vector4::new(w.x, w.y, w.z, 1.0);
        Vector2::new(x.x / x.z, x.y / x.z)
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> CameraPose {
        let center = Vector3::new(
            rng.random_range(-50.0..50.0),
            rng.random_range(-50.0..50.0),
            rng.random_range(60.0..150.0),
        );
        CameraPose::from_center_yaw_tilt(
            center,
            rng.random_range(-3.0..3.0),
            rng.random_range(0.0..0.5),
        )
    }

    #[test]
    fn optical_axis_maps_to_principal_point() {
        let k = k1000();
        let pose = CameraPose::from_center_yaw_tilt(Vector3::new(3.0, 4.0, 80.0), 0.7, 0.3);
        let axis = pose.rotation.transpose() * Vector3::z();
        for depth in [1.0, 10.0, 250.0] {
            let px = project(&pose, &k, &(pose.center() + axis * depth)).unwrap();
            assert_relative_eq!(px, Vector2::new(960.0, 540.0), epsilon = 1e-9);
        }
    }

    #[test]
    fn similar_triangles_example() {
        // Nadir camera 100 m above the origin, f = 1000 px.
        let px = project(&nadir(100.0), &k1000(), &Vector3::new(1.0, 0.0, 0.0)).unwrap();
        assert_relative_eq!(px, Vector2::new(970.0, 540.0), epsilon = 1e-12);
    }

    #[test]
    fn behind_camera_is_rejected() {
        let err = project(&nadir(100.0), &k1000(), &Vector3::new(0.0, 0.0, 150.0)).unwrap_err();
        assert!(matches!(err, CameraError::BehindCamera { .. }));
    }

    #[test]
    fn projection_matches_matrix_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = CameraIntrinsics::default_survey();
        for _ in 0..200 {
            let pose = random_pose(&mut rng);
            let c = pose.center();
            let w = Vector3::new(
                c.x + rng.random_range(-30.0..30.0),
                c.y + rng.random_range(-30.0..30.0),
                rng.random_range(0.0..3.0),
            );
            let a = project(&pose, &k, &w).unwrap();
            let b = oracle_project(&pose, &k, &w);
            assert_relative_eq!(a, b, epsilon = 1e-7);
        }
    }

    #[test]
    fn nadir_principal_point_hits_ground_below_center() {
        let pose = CameraPose::from_center_yaw_tilt(Vector3::new(12.0, -5.0, 100.0), 0.4, 0.0);
        let g = back_project_to_ground(&pose, &k1000(), &Vector2::new(960.0, 540.0)).unwrap();
        assert_relative_eq!(g, Vector2::new(12.0, -5.0), epsilon = 1e-9);
    }

    #[test]
    fn oblique_back_projection_matches_line_plane_oracle() {
        // 30° tilt, camera at (0, 0, 100), f = 1000 px, pixel (1200, 300).
        let tilt = 30f64.to_radians();
        let pose = CameraPose::from_center_yaw_tilt(Vector3::new(0.0, 0.0, 100.0), 0.0, tilt);
        let g = back_project_to_ground(&pose, &k1000(), &Vector2::new(1200.0, 300.0)).unwrap();
        // Line–plane intersection C + s·d with d the world ray of the pixel:
        // camera axes in world are x=(1,0,0), y=(0,-cos t,-sin t), z=(0,sin t,-cos t).
        let (st, ct) = tilt.sin_cos();
        let d = Vector3::new(0.24, 0.24 * ct + st, 0.24 * st - ct);
        let s = -100.0 / d.z;
        assert_relative_eq!(g, Vector2::new(s * d.x, s * d.y), epsilon = 1e-9);
        // Same configuration evaluated offline.
        assert_relative_eq!(g, Vector2::new(32.17048626, 94.88230472), epsilon = 1e-6);
    }

    #[test]
    fn ray_away_from_ground_fails() {
        let pose = CameraPose::from_center_yaw_tilt(Vector3::new(0.0, 0.0, 100.0), 0.0, 80f64.to_radians());
        // Top of the image looks above the horizon at 80° tilt.
        let err = back_project_to_ground(&pose, &k1000(), &Vector2::new(960.0, 0.0)).unwrap_err();
        assert_eq!(err, CameraError::NoGroundIntersection);
    }

    fn synthetic_correspondences(pose: &CameraPose, k: &CameraIntrinsics, n: usize, rng: &mut ChaCha8Rng) -> Vec<GroundCorrespondence> {
        let c = pose.center();
        let mut out = Vec::new();
        while out.len() < n {
            let g = Vector3::new(c.x + rng.random_range(-40.0..40.0), c.y + rng.random_range(-40.0..40.0), 0.0);
            if let Ok(px) = project(pose, k, &g) {
                if k.contains(&px, 0.0) {
                    out.push(GroundCorrespondence { map_point: g, image_point: px });
                }
            }
        }
        out
    }

    #[test]
    fn pnp_recovers_noiseless_pose() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = CameraIntrinsics::default_survey();
        for _ in 0..20 {
            let pose = random_pose(&mut rng);
            let corr = synthetic_correspondences(&pose, &k, 8, &mut rng);
            let sol = solve_pnp(&corr, &k).unwrap();
            assert!((sol.pose.rotation - pose.rotation).norm() < 1e-6);
            assert!((sol.pose.translation - pose.translation).norm() < 1e-4);
            sol.pose.validate().unwrap();
        }
    }

    #[test]
    fn pnp_noisy_rms_is_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let k = CameraIntrinsics::default_survey();
        let noise = Normal::new(0.0, 0.5).unwrap();
        for _ in 0..100 {
            let pose = random_pose(&mut rng);
            let mut corr = synthetic_correspondences(&pose, &k, 8, &mut rng);
            for c in &mut corr {
                c.image_point += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
            let sol = solve_pnp(&corr, &k).unwrap();
            assert!(sol.rms <= 1.0, "rms {}", sol.rms);
        }
    }

    #[test]
    fn pnp_needs_four_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k = CameraIntrinsics::default_survey();
        let corr = synthetic_correspondences(&nadir(120.0), &k, 3, &mut rng);
        assert_eq!(
            solve_pnp(&corr, &k).unwrap_err(),
            CameraError::TooFewCorrespondences { required: 4, got: 3 }
        );
    }

    #[test]
    fn pnp_rejects_collinear_points() {
        let k = CameraIntrinsics::default_survey();
        let pose = nadir(120.0);
        let corr: Vec<_> = (0..6)
            .map(|i| {
                let g = Vector3::new(i as f64 * 3.0, i as f64 * 1.5, 0.0);
                GroundCorrespondence { map_point: g, image_point: project(&pose, &k, &g).unwrap() }
            })
            .collect();
        assert_eq!(solve_pnp(&corr, &k).unwrap_err(), CameraError::RankDeficient);
    }

    #[test]
    fn adding_noiseless_points_does_not_raise_rms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = CameraIntrinsics::default_survey();
        let pose = random_pose(&mut rng);
        let noise = Normal::new(0.0, 0.5).unwrap();
        let mut corr = synthetic_correspondences(&pose, &k, 8, &mut rng);
        for c in &mut corr {
            c.image_point += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
        }
        let base = solve_pnp(&corr, &k).unwrap();
        // A point consistent with the refit pose leaves the optimum unchanged.
        let g = Vector3::new(pose.center().x + 5.0, pose.center().y - 7.0, 0.0);
        corr.push(GroundCorrespondence { map_point: g, image_point: project(&base.pose, &k, &g).unwrap() });
        let sum_before = base.rms.powi(2) * 8.0;
        let refit = solve_pnp(&corr, &k).unwrap();
        assert!(refit.rms.powi(2) * 9.0 <= sum_before + 1e-9);
        assert!(refit.rms <= base.rms + 1e-9);
    }

    fn reference_from(pose_per_frame: &[CameraPose], k: &CameraIntrinsics, ground: &[Vector3<f64>]) -> ReferencePointSet {
        let frames = pose_per_frame
            .iter()
            .map(|p| {
                ground
                    .iter()
                    .enumerate()
                    .map(|(id, g)| {
                        let px = project(p, k, g).unwrap();
                        TrackedPoint { id, u: px.x, v: px.y, valid: true }
                    })
                    .collect()
            })
            .collect();
        ReferencePointSet {
            world_points: ground.to_vec(),
            anchor_frame_points: ground.iter().map(|g| project(&pose_per_frame[0], k, g).unwrap()).collect(),
            frames,
        }
    }

    fn ground_grid() -> Vec<Vector3<f64>> {
        (0..12)
            .map(|i| Vector3::new(((i % 4) as f64 - 1.5) * 20.0 + (i as f64) * 0.7, ((i / 4) as f64 - 1.0) * 18.0, 0.0))
            .collect()
    }

    #[test]
    fn recalibrate_identical_tracks_returns_anchor_pose() {
        let k = CameraIntrinsics::default_survey();
        let pose = CameraPose::from_center_yaw_tilt(Vector3::new(1.0, 2.0, 120.0), 0.2, 0.1);
        let refs = reference_from(&[pose, pose], &k, &ground_grid());
        let cfg = RecalibrationConfig::default();
        let r0 = recalibrate(&refs, 0, &k, None, &cfg).unwrap();
        let r1 = recalibrate(&refs, 1, &k, Some(&r0.pose), &cfg).unwrap();
        assert!(!r1.degraded);
        assert!((r1.pose.rotation - r0.pose.rotation).norm() < 1e-9);
        assert!((r1.pose.translation - r0.pose.translation).norm() < 1e-6);
    }

    #[test]
    fn recalibrate_follows_lateral_drift() {
        let k = CameraIntrinsics::default_survey();
        let p0 = CameraPose::from_center_yaw_tilt(Vector3::new(0.0, 0.0, 120.0), 0.0, 0.05);
        let p1 = CameraPose::from_center_yaw_tilt(Vector3::new(1.0, 0.0, 120.0), 0.0, 0.05);
        let refs = reference_from(&[p0, p1], &k, &ground_grid());
        let cfg = RecalibrationConfig::default();
        let r0 = recalibrate(&refs, 0, &k, None, &cfg).unwrap();
        let r1 = recalibrate(&refs, 1, &k, Some(&r0.pose), &cfg).unwrap();
        let shift = (r1.pose.translation - r0.pose.translation).norm();
        assert!((shift - 1.0).abs() < 1e-3, "shift {shift}");
        assert!(((r1.pose.center() - r0.pose.center()) - Vector3::x()).norm() < 1e-3);
    }

    #[test]
    fn recalibrate_falls_back_when_points_invalid() {
        let k = CameraIntrinsics::default_survey();
        let pose = nadir(120.0);
        let mut refs = reference_from(&[pose, pose], &k, &ground_grid());
        for p in &mut refs.frames[1] {
            p.valid = false;
        }
        let cfg = RecalibrationConfig::default();
        let r1 = recalibrate(&refs, 1, &k, Some(&pose), &cfg).unwrap();
        assert!(r1.degraded);
        assert_eq!(r1.pose, pose);

        for p in &mut refs.frames[0] {
            p.valid = false;
        }
        assert!(matches!(
            recalibrate(&refs, 0, &k, None, &cfg),
            Err(CameraError::NoFallback { frame: 0, valid: 0 })
        ));
    }

    #[test]
    fn recalibrate_drops_badly_tracked_point() {
        let k = CameraIntrinsics::default_survey();
        let pose = CameraPose::from_center_yaw_tilt(Vector3::new(0.0, 0.0, 120.0), 0.3, 0.1);
        let mut refs = reference_from(&[pose], &k, &ground_grid());
        refs.frames[0][3].u += 40.0;
        let r = recalibrate(&refs, 0, &k, None, &RecalibrationConfig::default()).unwrap();
        assert_eq!(r.points_used, 11);
        assert!((r.pose.rotation - pose.rotation).norm() < 1e-6);
    }

    #[test]
    fn reference_track_file_round_trip() {
        let frames = vec![
            vec![TrackedPoint { id: 0, u: 1.5, v: 2.25, valid: true }],
            vec![],
            vec![TrackedPoint { id: 3, u: 0.1, v: 1e-7, valid: false }],
        ];
        let bytes = reference_tracks_to_bytes(&frames).unwrap();
        let back = parse_reference_tracks(std::str::from_utf8(&bytes).unwrap()).unwrap();
        assert_eq!(back, frames);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]
        #[test]
        fn ground_round_trip(
            cx in -100.0f64..100.0, cy in -100.0f64..100.0, h in 30.0f64..200.0,
            yaw in -3.1f64..3.1, tilt in 0.0f64..0.6, gx in -40.0f64..40.0, gy in -40.0f64..40.0,
        ) {
            let k = CameraIntrinsics::default_survey();
            let pose = CameraPose::from_center_yaw_tilt(Vector3::new(cx, cy, h), yaw, tilt);
            prop_assert!(pose.validate().is_ok());
            let g = Vector3::new(cx + gx, cy + gy, 0.0);
            let px = project(&pose, &k, &g).unwrap();
            let back = back_project_to_ground(&pose, &k, &px).unwrap();
            prop_assert!((back - g.xy()).norm() < 1e-9);
            let again = project(&pose, &k, &Vector3::new(back.x, back.y, 0.0)).unwrap();
            prop_assert!((again - px).norm() < 1e-6);
        }
    }
}
