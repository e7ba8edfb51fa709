//! Bounded Levenberg-Marquardt for small dense problems.
//!
//! Minimizes `½‖r(p)‖²` over a box. Parameters whose lower and upper bound
//! coincide are held fixed and drop out of the linear algebra. Steps that
//! leave the box are projected back onto it; for open lower bounds (strictly
//! positive parameters) the projection stops a fraction of the way to the
//! boundary so the iterate stays in the model domain.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// A least-squares problem: residual vector and (optionally) its Jacobian.
pub trait ResidualProblem {
    fn n_params(&self) -> usize;
    fn n_residuals(&self) -> usize;

    fn residuals(&self, params: &[f64], out: &mut [f64]) -> Result<()>;

    /// Row-major `n_residuals × n_params` Jacobian. Returning `false` makes
    /// the engine fall back to central differences.
    fn jacobian(&self, _params: &[f64], _out: &mut [f64]) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bound {
    pub lo: f64,
    pub hi: f64,
    /// `lo` itself is excluded from the feasible set.
    pub open_lo: bool,
}

impl Bound {
    pub const FREE: Bound = Bound {
        lo: f64::NEG_INFINITY,
        hi: f64::INFINITY,
        open_lo: false,
    };

    pub const POSITIVE: Bound = Bound {
        lo: 0.0,
        hi: f64::INFINITY,
        open_lo: true,
    };

    pub fn new(lo: f64, hi: f64) -> Self {
        Bound {
            lo,
            hi,
            open_lo: false,
        }
    }

    pub fn fixed(value: f64) -> Self {
        Bound::new(value, value)
    }

    pub fn is_fixed(&self) -> bool {
        self.lo == self.hi
    }

    pub fn contains(&self, v: f64) -> bool {
        let above = if self.open_lo { v > self.lo } else { v >= self.lo };
        above && v <= self.hi
    }

    /// Intersection with another box.
    pub fn intersect(&self, other: &Bound) -> Bound {
        let (lo, open_lo) = if other.lo > self.lo {
            (other.lo, other.open_lo)
        } else if other.lo < self.lo {
            (self.lo, self.open_lo)
        } else {
            (self.lo, self.open_lo || other.open_lo)
        };
        Bound {
            lo,
            hi: self.hi.min(other.hi),
            open_lo,
        }
    }

    fn project(&self, candidate: f64, previous: f64) -> f64 {
        if candidate > self.hi {
            return self.hi;
        }
        if self.open_lo {
            if candidate <= self.lo {
                return self.lo + 0.1 * (previous - self.lo);
            }
        } else if candidate < self.lo {
            return self.lo;
        }
        candidate
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LmOptions {
    pub max_iter: usize,
    /// Converged when an accepted step lowers the cost by less than this
    /// fraction.
    pub ftol: f64,
    /// Converged when the step is smaller than `xtol·(‖p‖ + xtol)`.
    pub xtol: f64,
    /// Converged when the scaled gradient infinity norm falls below this.
    pub gtol: f64,
    pub lambda0: f64,
    /// With per-point sigmas, report the covariance without rescaling by the
    /// reduced chi-square. Ignored when sigmas are absent.
    pub absolute_sigma: bool,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iter: 500,
            ftol: 1e-12,
            xtol: 1e-12,
            gtol: 1e-14,
            lambda0: 1e-3,
            absolute_sigma: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub params: Vec<f64>,
    pub cost: f64,
    pub n_iter: usize,
    pub converged: bool,
    /// Cost after every accepted step, starting with the initial cost.
    pub cost_history: Vec<f64>,
    /// Indices of the free parameters, in order.
    pub free: Vec<usize>,
    /// Residual Jacobian at the solution restricted to the free parameters.
    pub jacobian: DMatrix<f64>,
    pub residuals: Vec<f64>,
}

fn cost_of(r: &[f64]) -> f64 {
    0.5 * r.iter().map(|v| v * v).sum::<f64>()
}

fn eval_residuals(problem: &dyn ResidualProblem, p: &[f64]) -> Result<Vec<f64>> {
    let mut r = vec![0.0; problem.n_residuals()];
    problem.residuals(p, &mut r)?;
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Fit("non-finite residual".into()));
    }
    Ok(r)
}

/// Full Jacobian (all parameters), analytic when available.
pub fn jacobian_full(
    problem: &dyn ResidualProblem,
    p: &[f64],
    bounds: &[Bound],
) -> Result<DMatrix<f64>> {
    let m = problem.n_residuals();
    let n = problem.n_params();
    let mut buf = vec![0.0; m * n];
    if problem.jacobian(p, &mut buf) {
        return Ok(DMatrix::from_row_slice(m, n, &buf));
    }
    let mut jac = DMatrix::zeros(m, n);
    let mut work = p.to_vec();
    for j in 0..n {
        if bounds[j].is_fixed() {
            continue;
        }
        let h = 1e-6 * p[j].abs().max(1e-9);
        let up_ok = bounds[j].contains(p[j] + h);
        let dn_ok = bounds[j].contains(p[j] - h);
        let (hi, lo, span) = match (up_ok, dn_ok) {
            (true, true) => (p[j] + h, p[j] - h, 2.0 * h),
            (true, false) => (p[j] + h, p[j], h),
            (false, true) => (p[j], p[j] - h, h),
            (false, false) => continue,
        };
        work[j] = hi;
        let rp = eval_residuals(problem, &work)?;
        work[j] = lo;
        let rm = eval_residuals(problem, &work)?;
        work[j] = p[j];
        for i in 0..m {
            jac[(i, j)] = (rp[i] - rm[i]) / span;
        }
    }
    Ok(jac)
}

fn restrict(full: &DMatrix<f64>, free: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(full.nrows(), free.len(), |i, k| full[(i, free[k])])
}

fn solve_damped(a: &DMatrix<f64>, g: &DVector<f64>, lambda: f64) -> Option<DVector<f64>> {
    let n = a.nrows();
    let max_diag = (0..n).map(|i| a[(i, i)]).fold(0.0_f64, f64::max);
    let floor = (max_diag * 1e-12).max(f64::MIN_POSITIVE);
    let mut damped = a.clone();
    for i in 0..n {
        damped[(i, i)] += lambda * a[(i, i)].max(floor);
    }
    let rhs = -g;
    if let Some(ch) = damped.clone().cholesky() {
        return Some(ch.solve(&rhs));
    }
    damped.lu().solve(&rhs)
}

/// Run bounded Levenberg-Marquardt from `init`.
pub fn least_squares(
    problem: &dyn ResidualProblem,
    init: &[f64],
    bounds: &[Bound],
    opts: &LmOptions,
) -> Result<Solution> {
    let n = problem.n_params();
    if init.len() != n || bounds.len() != n {
        return Err(Error::invalid(format!(
            "expected {n} initial values and bounds, got {} and {}",
            init.len(),
            bounds.len()
        )));
    }
    for (j, (&v, b)) in init.iter().zip(bounds).enumerate() {
        if !v.is_finite() || !b.contains(v) {
            return Err(Error::invalid(format!(
                "initial value {v} of parameter {j} is outside its bounds [{}, {}]",
                b.lo, b.hi
            )));
        }
    }
    let free: Vec<usize> = (0..n).filter(|&j| !bounds[j].is_fixed()).collect();

    let mut p = init.to_vec();
    let mut r = eval_residuals(problem, &p)?;
    let mut cost = cost_of(&r);
    let mut history = vec![cost];
    let mut lambda = opts.lambda0;
    let mut converged = false;
    let mut n_iter = 0;

    if free.is_empty() {
        let jac = DMatrix::zeros(r.len(), 0);
        return Ok(Solution {
            params: p,
            cost,
            n_iter: 0,
            converged: true,
            cost_history: history,
            free,
            jacobian: jac,
            residuals: r,
        });
    }

    while n_iter < opts.max_iter {
        n_iter += 1;
        let jac = restrict(&jacobian_full(problem, &p, bounds)?, &free);
        let rv = DVector::from_column_slice(&r);
        let a = jac.transpose() * &jac;
        let g = jac.transpose() * &rv;

        let grad_scale = (0..free.len())
            .map(|k| g[k].abs() * p[free[k]].abs().max(1.0))
            .fold(0.0_f64, f64::max);
        if grad_scale <= opts.gtol * (cost.max(f64::MIN_POSITIVE)).sqrt() || cost == 0.0 {
            converged = true;
            break;
        }

        let mut accepted = false;
        while lambda < 1e16 {
            let Some(delta) = solve_damped(&a, &g, lambda) else {
                lambda *= 10.0;
                continue;
            };
            let mut candidate = p.clone();
            for (k, &j) in free.iter().enumerate() {
                candidate[j] = bounds[j].project(p[j] + delta[k], p[j]);
            }
            let step_norm = free
                .iter()
                .map(|&j| (candidate[j] - p[j]).powi(2))
                .sum::<f64>()
                .sqrt();
            let p_norm = free.iter().map(|&j| p[j] * p[j]).sum::<f64>().sqrt();
            let r_new = match eval_residuals(problem, &candidate) {
                Ok(r_new) => r_new,
                Err(_) => {
                    lambda *= 10.0;
                    continue;
                }
            };
            let cost_new = cost_of(&r_new);
            if cost_new < cost {
                debug_assert!(cost_new <= cost);
                let rel_drop = (cost - cost_new) / cost;
                p = candidate;
                r = r_new;
                cost = cost_new;
                history.push(cost);
                lambda = (lambda / 3.0).max(1e-12);
                accepted = true;
                if rel_drop < opts.ftol || step_norm <= opts.xtol * (p_norm + opts.xtol) {
                    converged = true;
                }
                break;
            }
            if step_norm <= opts.xtol * (p_norm + opts.xtol) {
                // The step has shrunk to nothing without improving the cost.
                converged = true;
                break;
            }
            lambda *= 4.0;
        }
        if converged {
            break;
        }
        if !accepted {
            converged = true;
            break;
        }
    }

    let jac = restrict(&jacobian_full(problem, &p, bounds)?, &free);
    Ok(Solution {
        params: p,
        cost,
        n_iter,
        converged,
        cost_history: history,
        free,
        jacobian: jac,
        residuals: r,
    })
}

/// `(JᵀJ)⁻¹` for a residual Jacobian, or `SingularJacobian` when some
/// direction in parameter space is not constrained by the data.
pub fn unscaled_covariance(jac: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = jac.ncols();
    let a = jac.transpose() * jac;
    let mut scale = DVector::zeros(n);
    for i in 0..n {
        let d = a[(i, i)];
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::SingularJacobian(format!(
                "parameter column {i} has no influence on the residuals"
            )));
        }
        scale[i] = 1.0 / d.sqrt();
    }
    let corr = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * scale[i] * scale[j]);
    let eig = corr.clone().symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let min_ev = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min_ev > 1e-13 * max_ev) {
        return Err(Error::SingularJacobian(format!(
            "normal matrix condition number exceeds 1e13 (min eigenvalue {min_ev:e})"
        )));
    }
    let inv = corr
        .try_inverse()
        .ok_or_else(|| Error::SingularJacobian("normal matrix is not invertible".into()))?;
    Ok(DMatrix::from_fn(n, n, |i, j| inv[(i, j)] * scale[i] * scale[j]))
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rosenbrock;

    impl ResidualProblem for Rosenbrock {
        fn n_params(&self) -> usize {
            2
        }
        fn n_residuals(&self) -> usize {
            2
        }
        fn residuals(&self, p: &[f64], out: &mut [f64]) -> Result<()> {
            out[0] = 10.0 * (p[1] - p[0] * p[0]);
            out[1] = 1.0 - p[0];
            Ok(())
        }
    }

    #[test]
    fn rosenbrock_with_numeric_jacobian() {
        let sol = least_squares(
            &Rosenbrock,
            &[-1.2, 1.0],
            &[Bound::FREE, Bound::FREE],
            &LmOptions::default(),
        )
        .unwrap();
        assert!(sol.converged);
        assert!((sol.params[0] - 1.0).abs() < 1e-8);
        assert!((sol.params[1] - 1.0).abs() < 1e-8);
        assert!(sol.cost_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn box_constraint_is_active() {
        let bounds = [Bound::new(-2.0, 0.5), Bound::FREE];
        let sol = least_squares(&Rosenbrock, &[-1.2, 1.0], &bounds, &LmOptions::default())
            .unwrap();
        assert!(sol.params[0] <= 0.5);
        assert!((sol.params[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn fixed_parameters_do_not_move() {
        let bounds = [Bound::fixed(0.3), Bound::FREE];
        let sol =
            least_squares(&Rosenbrock, &[0.3, 1.0], &bounds, &LmOptions::default()).unwrap();
        assert_eq!(sol.params[0], 0.3);
        assert!((sol.params[1] - 0.09).abs() < 1e-10);
        assert_eq!(sol.free, vec![1]);
    }

    #[test]
    fn init_outside_bounds_is_rejected() {
        let err = least_squares(
            &Rosenbrock,
            &[1.0, 1.0],
            &[Bound::POSITIVE, Bound::new(2.0, 3.0)],
            &LmOptions::default(),
        );
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn open_bound_projection_stays_interior() {
        let b = Bound::POSITIVE;
        let v = b.project(-5.0, 1.0);
        assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn covariance_detects_dead_column() {
        let jac = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, 0.0, 3.0, 0.0]);
        assert!(matches!(
            unscaled_covariance(&jac),
            Err(Error::SingularJacobian(_))
        ));
        let jac = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 3.0, 6.0]);
        assert!(matches!(
            unscaled_covariance(&jac),
            Err(Error::SingularJacobian(_))
        ));
    }
}
