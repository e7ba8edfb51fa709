//! Nonlinear least-squares fitting: a bounded Levenberg-Marquardt engine and
//! the curve models used throughout the toolkit.
//!
//! Standard errors come from the inverse normal matrix at the solution. When
//! per-point sigmas are absent (or `absolute_sigma` is off) the covariance is
//! rescaled by the reduced chi-square `χ²/(n − p)`, the usual convention for
//! data with unknown noise level.

pub mod lm;
pub mod models;

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use lm::{least_squares, Bound, LmOptions, ResidualProblem, Solution};
pub use models::{CurveModel, ModelId, WindowAveraged};

use crate::{Error, Result};

/// Points to fit.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub sigma: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Self {
        Dataset { x, y, sigma: None }
    }

    pub fn with_sigma(mut self, sigma: Vec<f64>) -> Self {
        self.sigma = Some(sigma);
        self
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn validate(&self, n_params: usize) -> Result<()> {
        if self.x.len() != self.y.len() {
            return Err(Error::invalid(format!(
                "x has {} points but y has {}",
                self.x.len(),
                self.y.len()
            )));
        }
        if self.x.len() < n_params + 1 {
            return Err(Error::invalid(format!(
                "{} points cannot constrain {} parameters",
                self.x.len(),
                n_params
            )));
        }
        if self.x.iter().chain(&self.y).any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        if let Some(s) = &self.sigma {
            if s.len() != self.x.len() {
                return Err(Error::invalid("sigma length differs from x"));
            }
            if s.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::invalid("sigma must be positive and finite"));
            }
        }
        Ok(())
    }

    fn weight(&self, i: usize) -> f64 {
        self.sigma.as_ref().map_or(1.0, |s| 1.0 / s[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamEstimate {
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model_id: String,
    pub params: BTreeMap<String, ParamEstimate>,
    pub chi2: f64,
    pub dof: usize,
    pub converged: bool,
    pub n_iter: usize,
    /// Parameter order used by `covariance`.
    #[serde(skip)]
    pub order: Vec<String>,
    #[serde(skip)]
    pub covariance: Vec<Vec<f64>>,
    /// Cost after each accepted step.
    #[serde(skip)]
    pub cost_history: Vec<f64>,
}

impl FitResult {
    pub fn value(&self, name: &str) -> f64 {
        self.params.get(name).map_or(f64::NAN, |p| p.value)
    }

    pub fn stderr(&self, name: &str) -> f64 {
        self.params.get(name).map_or(f64::NAN, |p| p.stderr)
    }

    /// Values in model order.
    pub fn values(&self) -> Vec<f64> {
        self.order.iter().map(|n| self.value(n)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in &self.params {
            if !p.value.is_finite() || !p.stderr.is_finite() || p.stderr < 0.0 {
                return Err(Error::invalid(format!(
                    "parameter {name}: value {} / stderr {} must be finite with stderr >= 0",
                    p.value, p.stderr
                )));
            }
        }
        if !self.chi2.is_finite() || self.chi2 < 0.0 {
            return Err(Error::invalid("chi2 must be finite and non-negative"));
        }
        Ok(())
    }
}

struct CurveProblem<'a> {
    model: &'a dyn CurveModel,
    data: &'a Dataset,
}

impl ResidualProblem for CurveProblem<'_> {
    fn n_params(&self) -> usize {
        self.model.param_names().len()
    }

    fn n_residuals(&self) -> usize {
        self.data.len()
    }

    fn residuals(&self, params: &[f64], out: &mut [f64]) -> Result<()> {
        for (i, o) in out.iter_mut().enumerate() {
            *o = (self.data.y[i] - self.model.eval(params, self.data.x[i])) * self.data.weight(i);
        }
        Ok(())
    }

    fn jacobian(&self, params: &[f64], out: &mut [f64]) -> bool {
        let n = self.n_params();
        let mut grad = vec![0.0; n];
        for i in 0..self.data.len() {
            if !self.model.gradient(params, self.data.x[i], &mut grad) {
                return false;
            }
            let w = self.data.weight(i);
            for j in 0..n {
                out[i * n + j] = -grad[j] * w;
            }
        }
        true
    }
}

/// Fit `model` to `data` starting from `init` (model parameter order).
///
/// `bounds` are intersected with the model's domain constraints; a bound
/// with `lo == hi` fixes that parameter. Hitting `max_iter` is not an error:
/// the result comes back with `converged == false`.
pub fn lm_fit(
    model: &dyn CurveModel,
    data: &Dataset,
    init: &[f64],
    bounds: Option<&[Bound]>,
    opts: &LmOptions,
) -> Result<FitResult> {
    let names = model.param_names();
    let n = names.len();
    if init.len() != n {
        return Err(Error::invalid(format!(
            "{} expects {n} initial values, got {}",
            model.id(),
            init.len()
        )));
    }
    let domain = model.domain_bounds();
    let bounds: Vec<Bound> = match bounds {
        Some(b) if b.len() == n => domain.iter().zip(b).map(|(d, u)| d.intersect(u)).collect(),
        Some(b) => {
            return Err(Error::invalid(format!(
                "expected {n} bounds, got {}",
                b.len()
            )))
        }
        None => domain,
    };
    let n_free = bounds.iter().filter(|b| !b.is_fixed()).count();
    data.validate(n_free)?;
    for &x in &data.x {
        model.check_x(x)?;
    }
    model.check_params(init)?;

    let problem = CurveProblem { model, data };
    let sol = least_squares(&problem, init, &bounds, opts)?;
    let chi2 = 2.0 * sol.cost;
    let dof = data.len() - n_free;

    let mut cov_full = vec![vec![0.0; n]; n];
    if !sol.free.is_empty() {
        let mut cov = lm::unscaled_covariance(&sol.jacobian)?;
        let rescale = !(opts.absolute_sigma && data.sigma.is_some());
        if rescale {
            cov *= chi2 / dof as f64;
        }
        for (a, &i) in sol.free.iter().enumerate() {
            for (b, &j) in sol.free.iter().enumerate() {
                cov_full[i][j] = cov[(a, b)];
            }
        }
    }

    let params = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            (
                name.to_string(),
                ParamEstimate {
                    value: sol.params[j],
                    stderr: cov_full[j][j].max(0.0).sqrt(),
                },
            )
        })
        .collect();

    Ok(FitResult {
        model_id: model.id(),
        params,
        chi2,
        dof,
        converged: sol.converged,
        n_iter: sol.n_iter,
        order: names.iter().map(|s| s.to_string()).collect(),
        covariance: cov_full,
        cost_history: sol.cost_history,
    })
}

/// Weighted mean as a one-parameter fit (`y ≡ y0`), for data whose kinetics
/// are frozen out of the observation window.
pub fn fit_constant(data: &Dataset) -> Result<FitResult> {
    data.validate(1)?;
    let n = data.len();
    let (mut sw, mut swy) = (0.0, 0.0);
    for i in 0..n {
        let w = data.weight(i).powi(2);
        sw += w;
        swy += w * data.y[i];
    }
    let mean = swy / sw;
    let chi2: f64 = (0..n)
        .map(|i| ((data.y[i] - mean) * data.weight(i)).powi(2))
        .sum();
    let var = if data.sigma.is_some() {
        1.0 / sw
    } else {
        chi2 / (n - 1) as f64 / sw
    };
    let mut params = BTreeMap::new();
    params.insert(
        "y0".to_string(),
        ParamEstimate {
            value: mean,
            stderr: var.sqrt(),
        },
    );
    Ok(FitResult {
        model_id: "constant".into(),
        params,
        chi2,
        dof: n - 1,
        converged: true,
        n_iter: 0,
        order: vec!["y0".into()],
        covariance: vec![vec![var]],
        cost_history: vec![0.5 * chi2],
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianCheck {
    /// Largest discrepancy between analytic and central-difference
    /// sensitivities `p_j·∂f/∂p_j` (five-point central differences), relative to the largest sensitivity at
    /// the same point.
    pub max_rel_error: f64,
    /// `false` when the model has no analytic gradient; the error is then 0
    /// by definition.
    pub applicable: bool,
}

pub fn jacobian_check(model: &dyn CurveModel, params: &[f64], xs: &[f64]) -> Result<JacobianCheck> {
    model.check_params(params)?;
    let n = params.len();
    let mut analytic = vec![0.0; n];
    if xs.is_empty() || !model.gradient(params, xs[0], &mut analytic) {
        return Ok(JacobianCheck {
            max_rel_error: 0.0,
            applicable: false,
        });
    }
    let mut worst = 0.0_f64;
    let mut p = params.to_vec();
    for &x in xs {
        model.check_x(x)?;
        model.gradient(params, x, &mut analytic);
        let mut numeric = vec![0.0; n];
        for j in 0..n {
            let h = if params[j] != 0.0 { 1e-6 * params[j].abs() } else { 1e-6 };
            let mut at = |k: f64| {
                p[j] = params[j] + k * h;
                let v = model.eval(&p, x);
                p[j] = params[j];
                v
            };
            numeric[j] = (8.0 * (at(1.0) - at(-1.0)) - (at(2.0) - at(-2.0))) / (12.0 * h);
        }
        let scale = |j: usize| if params[j] != 0.0 { params[j].abs() } else { 1.0 };
        let reference = (0..n)
            .map(|j| (analytic[j].abs().max(numeric[j].abs())) * scale(j))
            .fold(0.0_f64, f64::max);
        if reference == 0.0 {
            continue;
        }
        for j in 0..n {
            let err = (analytic[j] - numeric[j]).abs() * scale(j) / reference;
            worst = worst.max(err);
        }
    }
    Ok(JacobianCheck {
        max_rel_error: worst,
        applicable: true,
    })
}

/// Covariance as a matrix, for callers doing linear algebra with it.
pub fn covariance_matrix(fit: &FitResult) -> DMatrix<f64> {
    let n = fit.covariance.len();
    DMatrix::from_fn(n, n, |i, j| fit.covariance[i][j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};

    fn sample(model: ModelId, p: &[f64], xs: &[f64], noise: f64, seed: u64) -> Dataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise.max(1e-300)).unwrap();
        let y = xs
            .iter()
            .map(|&x| model.eval(p, x) + if noise > 0.0 { normal.sample(&mut rng) } else { 0.0 })
            .collect();
        Dataset::new(xs.to_vec(), y)
    }

    #[test]
    fn exact_data_is_recovered_for_every_model() {
        let cases: Vec<(ModelId, Vec<f64>, Vec<f64>, Vec<f64>)> = vec![
            (
                ModelId::CompressedExp,
                vec![0.02, 0.55, 400.0, 6.0],
                vec![0.05, 0.5, 420.0, 5.0],
                (0..40).map(|i| 15.0 + 30.0 * i as f64).collect(),
            ),
            (
                ModelId::ExpDecay,
                vec![0.1, 2.0, 3.0],
                vec![0.0, 1.0, 1.0],
                (0..50).map(|i| 0.3 * i as f64).collect(),
            ),
            (
                ModelId::DoubleExp,
                vec![1.0, 0.8, 0.5, -1.5, 2.0],
                vec![0.9, 0.5, 0.3, -1.0, 1.0],
                (0..120).map(|i| 0.05 * i as f64).collect(),
            ),
            (
                ModelId::Hyperbolic,
                vec![272.0, 185.0],
                vec![200.0, 100.0],
                vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0],
            ),
            (
                ModelId::LorentzianDip,
                vec![1.0, 0.18, 2870.0, 9.0],
                vec![0.98, 0.1, 2866.0, 12.0],
                (0..141).map(|i| 2800.0 + i as f64).collect(),
            ),
            (
                ModelId::SaturationEmpirical,
                vec![100.0, 1.5, 3.0],
                vec![80.0, 1.0, 1.0],
                (1..30).map(|i| 0.5 * i as f64).collect(),
            ),
        ];
        for (model, truth, init, xs) in cases {
            let data = sample(model, &truth, &xs, 0.0, 0);
            let fit = lm_fit(&model, &data, &init, None, &LmOptions::default()).unwrap();
            for (name, t) in model.param_names().iter().zip(&truth) {
                let v = fit.value(name);
                assert!(
                    (v - t).abs() <= 1e-6 * t.abs().max(1.0),
                    "{model}: {name} = {v}, expected {t}"
                );
            }
            assert!(fit.cost_history.windows(2).all(|w| w[1] <= w[0]));
            assert_eq!(fit.dof, xs.len() - truth.len());
        }
    }

    #[test]
    fn linear_subcase_matches_closed_form() {
        let xs: Vec<f64> = (1..=25).map(|i| 0.7 * i as f64).collect();
        let ys: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| 3.2 * x + 0.4 * ((i * 7919 % 13) as f64 - 6.0))
            .collect();
        let data = Dataset::new(xs.clone(), ys.clone());
        let bounds = [Bound::fixed(0.0), Bound::fixed(1.0), Bound::FREE];
        let fit = lm_fit(
            &ModelId::SaturationEmpirical,
            &data,
            &[0.0, 1.0, 1.0],
            Some(&bounds),
            &LmOptions::default(),
        )
        .unwrap();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| x * y).sum();
        let sxx: f64 = xs.iter().map(|x| x * x).sum();
        let b = sxy / sxx;
        assert!((fit.value("b") - b).abs() <= 1e-10 * b.abs());
        assert_eq!(fit.stderr("i_sat"), 0.0);
        assert_eq!(fit.dof, xs.len() - 1);
    }

    #[test]
    fn dataset_validation() {
        let d = Dataset::new(vec![1.0, 2.0], vec![1.0]);
        assert!(d.validate(1).is_err());
        let d = Dataset::new(vec![1.0, 2.0], vec![1.0, 2.0]);
        assert!(d.validate(2).is_err());
        assert!(d.validate(1).is_ok());
        let d = d.with_sigma(vec![1.0, 0.0]);
        assert!(d.validate(1).is_err());
    }

    #[test]
    fn unidentifiable_parameters_are_reported() {
        // A flat line leaves tau and beta unconstrained once A is zero.
        let xs: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let data = Dataset::new(xs.clone(), vec![0.5; 20]);
        let bounds = [Bound::FREE, Bound::fixed(0.0), Bound::POSITIVE, Bound::POSITIVE];
        let res = lm_fit(
            &ModelId::CompressedExp,
            &data,
            &[0.4, 0.0, 5.0, 2.0],
            Some(&bounds),
            &LmOptions::default(),
        );
        assert!(matches!(res, Err(Error::SingularJacobian(_))));
    }

    #[test]
    fn max_iter_is_reported_not_raised() {
        let xs: Vec<f64> = (0..40).map(|i| 15.0 + 30.0 * i as f64).collect();
        let data = sample(ModelId::CompressedExp, &[0.0, 0.6, 500.0, 5.0], &xs, 0.0, 1);
        let opts = LmOptions {
            max_iter: 1,
            ..LmOptions::default()
        };
        let fit = lm_fit(&ModelId::CompressedExp, &data, &[0.1, 0.3, 800.0, 2.0], None, &opts)
            .unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.n_iter, 1);
    }

    #[test]
    fn user_bounds_are_respected() {
        let xs: Vec<f64> = (0..50).map(|i| 0.2 * i as f64).collect();
        let data = sample(ModelId::ExpDecay, &[0.0, 1.0, 2.0], &xs, 0.0, 0);
        let bounds = [Bound::new(0.05, 1.0), Bound::FREE, Bound::new(0.1, 1.5)];
        let fit = lm_fit(&ModelId::ExpDecay, &data, &[0.5, 1.0, 1.0], Some(&bounds), &LmOptions::default())
            .unwrap();
        assert!(fit.value("y0") >= 0.05 - 1e-12);
        assert!(fit.value("tau") <= 1.5 + 1e-12);
    }

    #[test]
    fn constant_fit() {
        let data = Dataset::new(vec![0.0, 1.0, 2.0, 3.0], vec![1.0, 2.0, 3.0, 2.0]);
        let fit = fit_constant(&data).unwrap();
        assert_eq!(fit.value("y0"), 2.0);
        // sample sd = sqrt(2/3), stderr = sd/2
        assert!((fit.stderr("y0") - (2.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let check = jacobian_check(
            &ModelId::CompressedExp,
            &[0.1, 0.5, 100.0, 5.0],
            &(1..=300).map(|i| i as f64).collect::<Vec<_>>(),
        )
        .unwrap();
        assert!(check.applicable);
        assert!(check.max_rel_error <= 1e-6, "{}", check.max_rel_error);

        let xs: Vec<f64> = (0..81).map(|i| 2860.0 + 0.25 * i as f64).collect();
        let check = jacobian_check(&ModelId::LorentzianDip, &[1.0, 0.05, 2870.0, 8.0], &xs).unwrap();
        assert!(check.max_rel_error <= 1e-6, "{}", check.max_rel_error);
    }

    struct NoGradient;

    impl CurveModel for NoGradient {
        fn id(&self) -> String {
            "quadratic".into()
        }
        fn param_names(&self) -> &[&'static str] {
            &["a", "b"]
        }
        fn domain_bounds(&self) -> Vec<Bound> {
            vec![Bound::FREE, Bound::FREE]
        }
        fn eval(&self, p: &[f64], x: f64) -> f64 {
            p[0] + p[1] * x * x
        }
    }

    #[test]
    fn numeric_only_models() {
        let check = jacobian_check(&NoGradient, &[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert!(!check.applicable);
        assert_eq!(check.max_rel_error, 0.0);

        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.5 + 0.25 * x * x).collect();
        let fit = lm_fit(&NoGradient, &Dataset::new(xs, ys), &[0.0, 1.0], None, &LmOptions::default())
            .unwrap();
        assert!((fit.value("a") - 1.5).abs() < 1e-8);
        assert!((fit.value("b") - 0.25).abs() < 1e-8);
    }
}
