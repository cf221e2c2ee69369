//! PCA shape prior over 33-keypoint vehicle models.
//!
//! A shape vector concatenates the body-frame `(x, y, z)` of all keypoints
//! (origin at the ground-projected chassis center, x forward, y left, z up).
//! The prior keeps the mean shape, an orthonormal basis of the top `k`
//! principal directions, the training parameters and per-category templates.

pub mod fleet;

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::{Error, Result};
use crate::io;
use crate::keypoints::{symmetric_pairs, NUM_KEYPOINTS, WHEEL_CENTERS, WHEEL_CONTACTS};

pub const SHAPE_DIM: usize = 3 * NUM_KEYPOINTS;
pub const DEFAULT_BASIS_SIZE: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("prior has no training parameters")]
    EmptyPrior,
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeVector {
    pub coords: Vec<f64>,
    pub category: String,
}

impl ShapeVector {
    pub fn from_points(points: &[Vector3<f64>], category: impl Into<String>) -> Self {
        Self {
            coords: points.iter().flat_map(|p| [p.x, p.y, p.z]).collect(),
            category: category.into(),
        }
    }

    pub fn point(&self, slot: usize) -> Vector3<f64> {
        Vector3::new(
            self.coords[3 * slot],
            self.coords[3 * slot + 1],
            self.coords[3 * slot + 2],
        )
    }

    pub fn points(&self) -> Vec<Vector3<f64>> {
        (0..NUM_KEYPOINTS).map(|i| self.point(i)).collect()
    }

    /// Extents along body x, y and z: length, width, height.
    pub fn dimensions(&self) -> [f64; 3] {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in self.points() {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]]
    }

    /// Distance between the rear and front axle centers.
    pub fn wheelbase(&self) -> f64 {
        let [rl, rr, fl, fr] = WHEEL_CENTERS.map(|i| self.point(i));
        (0.5 * (fl + fr) - 0.5 * (rl + rr)).xy().norm()
    }

    pub fn validate(&self, symmetry_tolerance: f64) -> Result<(), ShapeError> {
        if self.coords.len() != SHAPE_DIM {
            return Err(ShapeError::Dimension(format!(
                "shape vector has {} values, expected {SHAPE_DIM}",
                self.coords.len()
            )));
        }
        if !self.coords.iter().all(|v| v.is_finite()) {
            return Err(ShapeError::InvalidShape("non-finite coordinate".into()));
        }
        for slot in WHEEL_CONTACTS {
            if self.point(slot).z.abs() > 1e-6 {
                return Err(ShapeError::InvalidShape(format!(
                    "wheel contact {slot} is not on the ground"
                )));
            }
        }
        for (l, r) in symmetric_pairs() {
            let (a, b) = (self.point(l), self.point(r));
            let mirrored = Vector3::new(b.x, -b.y, b.z);
            if (a - mirrored).norm() > symmetry_tolerance {
                return Err(ShapeError::InvalidShape(format!(
                    "slots {l}/{r} are not mirror images"
                )));
            }
        }
        let [len, wid, _] = self.dimensions();
        if !(len > wid && wid > 0.0) {
            return Err(ShapeError::InvalidShape(format!(
                "length {len:.3} must exceed width {wid:.3} > 0"
            )));
        }
        Ok(())
    }
}

/// PCA coordinates of a shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ShapeParams(pub Vec<f64>);

impl ShapeParams {
    pub fn zeros(k: usize) -> Self {
        Self(vec![0.0; k])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

impl From<DVector<f64>> for ShapeParams {
    fn from(v: DVector<f64>) -> Self {
        Self(v.iter().copied().collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapePrior {
    pub mean: DVector<f64>,
    /// `SHAPE_DIM × k`, orthonormal columns in decreasing variance order.
    pub basis: DMatrix<f64>,
    pub params: Vec<ShapeParams>,
    pub labels: Vec<String>,
    pub templates: BTreeMap<String, ShapeParams>,
    pub explained_variance_ratio: Vec<f64>,
}

pub fn build_prior(shapes: &[ShapeVector], k: usize) -> Result<ShapePrior, ShapeError> {
    let n = shapes.len();
    if k == 0 || k > SHAPE_DIM || k >= n {
        return Err(ShapeError::Dimension(format!(
            "basis size {k} needs 1 ≤ k < sample count ({n}) and k ≤ {SHAPE_DIM}"
        )));
    }
    for s in shapes {
        s.validate(1e-6)?;
    }

    let mut data = DMatrix::<f64>::zeros(SHAPE_DIM, n);
    for (j, s) in shapes.iter().enumerate() {
        data.set_column(j, &DVector::from_column_slice(&s.coords));
    }
    let mean = data.column_mean();
    for mut col in data.column_iter_mut() {
        col -= &mean;
    }

    let svd = data.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]).then(a.cmp(&b)));

    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    let mut basis = DMatrix::<f64>::zeros(SHAPE_DIM, k);
    let mut ratios = Vec::with_capacity(k);
    for (c, &idx) in order.iter().take(k).enumerate() {
        basis.set_column(c, &u.column(idx));
        let s = svd.singular_values[idx];
        ratios.push(if total > 0.0 { s * s / total } else { 0.0 });
    }
    orthonormalize(&mut basis);
    fix_signs(&mut basis);

    let params: Vec<ShapeParams> = data
        .column_iter()
        .map(|c| ShapeParams::from(basis.tr_mul(&c)))
        .collect();
    let labels: Vec<String> = shapes.iter().map(|s| s.category.clone()).collect();
    let templates = category_means(&params, &labels, k);

    Ok(ShapePrior {
        mean,
        basis,
        params,
        labels,
        templates,
        explained_variance_ratio: ratios,
    })
}

fn category_means(params: &[ShapeParams], labels: &[String], k: usize) -> BTreeMap<String, ShapeParams> {
    let mut sums: BTreeMap<String, (DVector<f64>, usize)> = BTreeMap::new();
    for (b, label) in params.iter().zip(labels) {
        let e = sums
            .entry(label.clone())
            .or_insert_with(|| (DVector::zeros(k), 0));
        e.0 += b.as_vector();
        e.1 += 1;
    }
    sums.into_iter()
        .map(|(label, (sum, count))| (label, ShapeParams::from(sum / count as f64)))
        .collect()
}

/// Modified Gram–Schmidt; degenerate columns (zero variance directions) are
/// replaced by the first coordinate axis that completes the basis.
fn orthonormalize(basis: &mut DMatrix<f64>) {
    let k = basis.ncols();
    let mut axis = 0;
    for c in 0..k {
        let mut v = basis.column(c).into_owned();
        for _ in 0..2 {
            for p in 0..c {
                let q = basis.column(p).into_owned();
                v -= &q * q.dot(&v);
            }
        }
        while v.norm() < 0.5 {
            let mut e = DVector::zeros(basis.nrows());
            e[axis] = 1.0;
            axis += 1;
            for p in 0..c {
                let q = basis.column(p).into_owned();
                e -= &q * q.dot(&e);
            }
            v = e;
        }
        let n = v.norm();
        basis.set_column(c, &(v / n));
    }
}

/// Largest-magnitude entry of each column is made positive.
fn fix_signs(basis: &mut DMatrix<f64>) {
    for mut col in basis.column_iter_mut() {
        let idx = col.iamax();
        if col[idx] < 0.0 {
            col.neg_mut();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Classification {
    pub label: String,
    pub votes: BTreeMap<String, usize>,
}

impl ShapePrior {
    pub fn k(&self) -> usize {
        self.basis.ncols()
    }

    pub fn generate(&self, b: &ShapeParams) -> Result<ShapeVector, ShapeError> {
        generate_shape(self, b)
    }

    /// Body-frame position of `slot` for parameters `b` (unchecked length).
    pub fn point(&self, slot: usize, b: &DVector<f64>) -> Vector3<f64> {
        self.basis.fixed_rows::<3>(3 * slot) * b + self.mean.fixed_rows::<3>(3 * slot)
    }

    /// Projects a shape onto the basis.
    pub fn project(&self, shape: &ShapeVector) -> Result<ShapeParams, ShapeError> {
        if shape.coords.len() != SHAPE_DIM {
            return Err(ShapeError::Dimension("shape vector length".into()));
        }
        let s = DVector::from_column_slice(&shape.coords) - &self.mean;
        Ok(ShapeParams::from(self.basis.tr_mul(&s)))
    }

    /// Total squared reconstruction error of `shapes` through the basis.
    pub fn reconstruction_residual(&self, shapes: &[ShapeVector]) -> f64 {
        shapes
            .iter()
            .map(|s| {
                let d = DVector::from_column_slice(&s.coords) - &self.mean;
                let proj = &self.basis * self.basis.tr_mul(&d);
                (d - proj).norm_squared()
            })
            .sum()
    }

    pub fn template(&self, category: &str) -> Result<&ShapeParams, ShapeError> {
        self.templates
            .get(category)
            .ok_or_else(|| ShapeError::UnknownCategory(category.to_string()))
    }

    pub fn classify(&self, b: &ShapeParams, n_neighbors: usize) -> Result<Classification, ShapeError> {
        classify_type(self, b, n_neighbors)
    }

    pub fn to_archive(&self) -> PriorArchive {
        PriorArchive {
            k: self.k(),
            mean: self.mean.iter().copied().collect(),
            basis: self
                .basis
                .column_iter()
                .map(|c| c.iter().copied().collect())
                .collect(),
            params: self.params.clone(),
            labels: self.labels.clone(),
            templates: self.templates.clone(),
            explained_variance_ratio: self.explained_variance_ratio.clone(),
        }
    }

    pub fn from_archive(a: PriorArchive) -> Result<Self, ShapeError> {
        if a.mean.len() != SHAPE_DIM || a.basis.len() != a.k || a.basis.iter().any(|c| c.len() != SHAPE_DIM) {
            return Err(ShapeError::Dimension("prior archive shape mismatch".into()));
        }
        if a.params.len() != a.labels.len() || a.params.iter().any(|b| b.len() != a.k) {
            return Err(ShapeError::Dimension("prior archive parameter mismatch".into()));
        }
        let cols: Vec<DVector<f64>> = a.basis.iter().map(|c| DVector::from_column_slice(c)).collect();
        Ok(Self {
            mean: DVector::from_vec(a.mean),
            basis: DMatrix::from_columns(&cols),
            params: a.params,
            labels: a.labels,
            templates: a.templates,
            explained_variance_ratio: a.explained_variance_ratio,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, &self.to_archive())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let archive: PriorArchive = io::read_json(path)?;
        Ok(Self::from_archive(archive)?)
    }
}

pub fn generate_shape(prior: &ShapePrior, b: &ShapeParams) -> Result<ShapeVector, ShapeError> {
    if b.len() != prior.k() {
        return Err(ShapeError::Dimension(format!(
            "parameter vector has {} entries, prior has k = {}",
            b.len(),
            prior.k()
        )));
    }
    let s = &prior.basis * b.as_vector() + &prior.mean;
    Ok(ShapeVector {
        coords: s.iter().copied().collect(),
        category: String::new(),
    })
}

/// Majority label among the `n_neighbors` nearest training parameters.
///
/// Ties on vote count go to the label with the smaller mean neighbor
/// distance, then to the lexicographically smaller label.
pub fn classify_type(prior: &ShapePrior, b: &ShapeParams, n_neighbors: usize) -> Result<Classification, ShapeError> {
    if prior.params.is_empty() {
        return Err(ShapeError::EmptyPrior);
    }
    if n_neighbors == 0 || n_neighbors > prior.params.len() {
        return Err(ShapeError::Dimension(format!(
            "n_neighbors {n_neighbors} must be in 1..={}",
            prior.params.len()
        )));
    }
    if b.len() != prior.k() {
        return Err(ShapeError::Dimension("parameter vector length".into()));
    }
    let q = b.as_vector();
    let mut dists: Vec<(f64, usize)> = prior
        .params
        .iter()
        .enumerate()
        .map(|(i, p)| ((p.as_vector() - &q).norm(), i))
        .collect();
    dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut tally: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for &(d, i) in dists.iter().take(n_neighbors) {
        let e = tally.entry(prior.labels[i].clone()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += d;
    }
    let label = tally
        .iter()
        .min_by(|(la, (ca, sa)), (lb, (cb, sb))| {
            cb.cmp(ca)
                .then((sa / *ca as f64).total_cmp(&(sb / *cb as f64)))
                .then(la.cmp(lb))
        })
        .map(|(l, _)| l.clone())
        .expect("at least one neighbor");
    Ok(Classification {
        label,
        votes: tally.into_iter().map(|(l, (c, _))| (l, c)).collect(),
    })
}

/// Serialized prior: `basis` holds one column per entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorArchive {
    pub k: usize,
    pub mean: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
    pub params: Vec<ShapeParams>,
    pub labels: Vec<String>,
    pub templates: BTreeMap<String, ShapeParams>,
    pub explained_variance_ratio: Vec<f64>,
}

/// One line of an annotated-model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedModel {
    pub category: String,
    pub points: Vec<[f64; 3]>,
}

pub fn parse_annotated_models(text: &str) -> Result<Vec<ShapeVector>> {
    let mut out = Vec::new();
    for (line, raw) in io::jsonl_lines(text) {
        let m: AnnotatedModel =
            serde_json::from_str(raw).map_err(|e| Error::json(format!("annotated model line {line}"), e))?;
        if m.points.len() != NUM_KEYPOINTS {
            return Err(ShapeError::Dimension(format!(
                "line {line}: expected {NUM_KEYPOINTS} points, got {}",
                m.points.len()
            ))
            .into());
        }
        let pts: Vec<_> = m.points.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect();
        let s = ShapeVector::from_points(&pts, m.category);
        s.validate(1e-3)?;
        out.push(s);
    }
    Ok(out)
}

pub fn load_annotated_models(path: &Path) -> Result<Vec<ShapeVector>> {
    parse_annotated_models(&io::read_text(path)?)
}

pub fn annotated_models_to_bytes(shapes: &[ShapeVector]) -> Result<Vec<u8>> {
    let models: Vec<_> = shapes
        .iter()
        .map(|s| AnnotatedModel {
            category: s.category.clone(),
            points: s.points().iter().map(|p| [p.x, p.y, p.z]).collect(),
        })
        .collect();
    io::to_jsonl_bytes(&models)
}
