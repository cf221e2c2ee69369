//! Dense Levenberg–Marquardt for the small problems in this crate (6-DoF
//! camera pose, 3+k vehicle fits).
//!
//! Problems expose residuals with an analytic Jacobian and a retraction so
//! that manifold parameters (rotations) can be updated in a local chart.

use nalgebra::{DMatrix, DVector};

pub trait LeastSquaresProblem {
    type Params: Clone;

    /// Residual vector and its Jacobian with respect to the local step.
    fn evaluate(&self, params: &Self::Params) -> (DVector<f64>, DMatrix<f64>);

    /// Residual vector only; override when cheaper than `evaluate`.
    fn residuals(&self, params: &Self::Params) -> DVector<f64> {
        self.evaluate(params).0
    }

    /// Applies a local step to the parameters.
    fn retract(&self, params: &Self::Params, step: &DVector<f64>) -> Self::Params;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmConfig {
    pub max_iterations: usize,
    /// Converged once the proposed step norm drops below this.
    pub step_tolerance: f64,
    /// Converged once the gradient infinity norm drops below this.
    pub gradient_tolerance: f64,
    /// Initial damping, relative to the diagonal of JᵀJ.
    pub initial_damping: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            step_tolerance: 1e-10,
            gradient_tolerance: 1e-14,
            initial_damping: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LmReport<P> {
    pub params: P,
    /// Sum of squared residuals at `params`.
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Cost after the initial evaluation and after every accepted step.
    pub cost_history: Vec<f64>,
}

pub fn solve<P: LeastSquaresProblem>(
    problem: &P,
    initial: P::Params,
    config: &LmConfig,
) -> LmReport<P::Params> {
    let mut params = initial;
    let (mut r, mut jac) = problem.evaluate(&params);
    let mut cost = r.norm_squared();
    let mut history = vec![cost];

    if !cost.is_finite() {
        return LmReport {
            params,
            cost,
            iterations: 0,
            converged: false,
            cost_history: history,
        };
    }

    let mut jtj = jac.tr_mul(&jac);
    let mut grad = jac.tr_mul(&r);
    let mut mu = config.initial_damping;
    let mut nu = 2.0;
    let mut converged = cost == 0.0 || grad.amax() <= config.gradient_tolerance;
    let mut iterations = 0;

    while !converged && iterations < config.max_iterations {
        iterations += 1;
        let n = jtj.nrows();
        let mut damped = jtj.clone();
        for i in 0..n {
            damped[(i, i)] += mu * jtj[(i, i)].max(1e-12);
        }
        let step = match damped.cholesky() {
            Some(chol) => -chol.solve(&grad),
            None => {
                mu *= nu;
                nu *= 2.0;
                continue;
            }
        };

        if step.norm() <= config.step_tolerance {
            converged = true;
            break;
        }

        let candidate = problem.retract(&params, &step);
        let r_new = problem.residuals(&candidate);
        let cost_new = r_new.norm_squared();

        // Predicted decrease of the linearised model for the gain ratio.
        let mut scaled = step.clone();
        for i in 0..n {
            scaled[i] *= mu * jtj[(i, i)].max(1e-12);
        }
        let predicted = step.dot(&(scaled - &grad));

        if cost_new.is_finite() && cost_new < cost {
            let rho = (cost - cost_new) / predicted.max(f64::MIN_POSITIVE);
            params = candidate;
            let (r2, j2) = problem.evaluate(&params);
            r = r2;
            jac = j2;
            debug_assert!(r.norm_squared() <= cost);
            cost = r.norm_squared();
            history.push(cost);
            jtj = jac.tr_mul(&jac);
            grad = jac.tr_mul(&r);
            mu *= (1.0f64 / 3.0).max(1.0 - (2.0 * rho - 1.0).powi(3));
            nu = 2.0;
            if cost == 0.0 || grad.amax() <= config.gradient_tolerance {
                converged = true;
            }
        } else {
            mu *= nu;
            nu *= 2.0;
            if !mu.is_finite() {
                break;
            }
        }
    }

    LmReport {
        params,
        cost,
        iterations,
        converged,
        cost_history: history,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Rosenbrock as a least-squares problem.
    struct Rosenbrock;

    impl LeastSquaresProblem for Rosenbrock {
        type Params = DVector<f64>;

        fn evaluate(&self, p: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
            let r = DVector::from_vec(vec![10.0 * (p[1] - p[0] * p[0]), 1.0 - p[0]]);
            let j = DMatrix::from_row_slice(2, 2, &[-20.0 * p[0], 10.0, -1.0, 0.0]);
            (r, j)
        }

        fn retract(&self, p: &DVector<f64>, step: &DVector<f64>) -> DVector<f64> {
            p + step
        }
    }

    #[test]
    fn solves_rosenbrock() {
        let report = solve(
            &Rosenbrock,
            DVector::from_vec(vec![-1.2, 1.0]),
            &LmConfig::default(),
        );
        assert!(report.converged);
        assert!((report.params[0] - 1.0).abs() < 1e-8);
        assert!((report.params[1] - 1.0).abs() < 1e-8);
        for w in report.cost_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn zero_cost_start_is_converged() {
        let report = solve(
            &Rosenbrock,
            DVector::from_vec(vec![1.0, 1.0]),
            &LmConfig::default(),
        );
        assert!(report.converged);
        assert_eq!(report.iterations, 0);
    }
}
