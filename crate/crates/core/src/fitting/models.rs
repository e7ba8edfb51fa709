//! Closed-form curve models with analytic parameter gradients.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::lm::Bound;
use crate::{Error, Result};

/// A scalar model `y = f(params; x)`.
pub trait CurveModel: Sync {
    fn id(&self) -> String;

    fn param_names(&self) -> &[&'static str];

    /// Box constraints implied by the model domain, one per parameter.
    fn domain_bounds(&self) -> Vec<Bound>;

    fn check_x(&self, _x: f64) -> Result<()> {
        Ok(())
    }

    fn eval(&self, params: &[f64], x: f64) -> f64;

    /// Writes `∂f/∂params` into `grad`. Returns `false` when the model has no
    /// analytic gradient.
    fn gradient(&self, _params: &[f64], _x: f64, _grad: &mut [f64]) -> bool {
        false
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        let names = self.param_names();
        if params.len() != names.len() {
            return Err(Error::Domain(format!(
                "{} takes {} parameters, got {}",
                self.id(),
                names.len(),
                params.len()
            )));
        }
        for ((v, b), name) in params.iter().zip(self.domain_bounds()).zip(names) {
            if !v.is_finite() || !b.contains(*v) {
                return Err(Error::Domain(format!(
                    "{}: parameter {name} = {v} violates its domain",
                    self.id()
                )));
            }
        }
        Ok(())
    }

    /// Checked evaluation.
    fn evaluate(&self, params: &[f64], x: f64) -> Result<f64> {
        self.check_params(params)?;
        self.check_x(x)?;
        Ok(self.eval(params, x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    /// `y0 + A·(1 − exp(−(x/τ)^β))`
    CompressedExp,
    /// `y0 + A·exp(−x/τ)`
    ExpDecay,
    /// `y0 + A1·exp(−x/τ1) + A2·exp(−x/(τ1 + Δτ))`, so `τ1 < τ2` always.
    DoubleExp,
    /// `τ0 + c/x`
    Hyperbolic,
    /// `y0·[1 − C·(Γ/2)² / ((x − f0)² + (Γ/2)²)]`
    LorentzianDip,
    /// `I_sat·x/(x + P_sat) + b·x`
    SaturationEmpirical,
}

impl ModelId {
    pub const ALL: [ModelId; 6] = [
        ModelId::CompressedExp,
        ModelId::ExpDecay,
        ModelId::DoubleExp,
        ModelId::Hyperbolic,
        ModelId::LorentzianDip,
        ModelId::SaturationEmpirical,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelId::CompressedExp => "compressed_exp",
            ModelId::ExpDecay => "exp_decay",
            ModelId::DoubleExp => "double_exp",
            ModelId::Hyperbolic => "hyperbolic",
            ModelId::LorentzianDip => "lorentzian_dip",
            ModelId::SaturationEmpirical => "saturation_empirical",
        }
    }

    /// Index of a named parameter.
    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names().iter().position(|n| *n == name)
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelId::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown model `{s}`; expected one of compressed_exp, exp_decay, double_exp, \
                     hyperbolic, lorentzian_dip, saturation_empirical"
                ))
            })
    }
}

impl CurveModel for ModelId {
    fn id(&self) -> String {
        self.as_str().to_string()
    }

    fn param_names(&self) -> &[&'static str] {
        match self {
            ModelId::CompressedExp => &["y0", "A", "tau", "beta"],
            ModelId::ExpDecay => &["y0", "A", "tau"],
            ModelId::DoubleExp => &["y0", "A1", "tau1", "A2", "dtau"],
            ModelId::Hyperbolic => &["tau0", "c"],
            ModelId::LorentzianDip => &["y0", "contrast", "f0", "fwhm"],
            ModelId::SaturationEmpirical => &["i_sat", "p_sat", "b"],
        }
    }

    fn domain_bounds(&self) -> Vec<Bound> {
        use Bound as B;
        match self {
            ModelId::CompressedExp => vec![B::FREE, B::FREE, B::POSITIVE, B::POSITIVE],
            ModelId::ExpDecay => vec![B::FREE, B::FREE, B::POSITIVE],
            ModelId::DoubleExp => vec![B::FREE, B::FREE, B::POSITIVE, B::FREE, B::POSITIVE],
            ModelId::Hyperbolic => vec![B::FREE, B::FREE],
            ModelId::LorentzianDip => vec![B::FREE, B::FREE, B::FREE, B::POSITIVE],
            ModelId::SaturationEmpirical => vec![B::FREE, B::POSITIVE, B::FREE],
        }
    }

    fn check_x(&self, x: f64) -> Result<()> {
        let ok = match self {
            ModelId::CompressedExp | ModelId::SaturationEmpirical => x >= 0.0,
            ModelId::Hyperbolic => x > 0.0,
            _ => x.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("{self}: x = {x} is outside the model domain")))
        }
    }

    fn eval(&self, p: &[f64], x: f64) -> f64 {
        match self {
            ModelId::CompressedExp => {
                let u = (x / p[2]).powf(p[3]);
                p[0] + p[1] * (1.0 - (-u).exp())
            }
            ModelId::ExpDecay => p[0] + p[1] * (-x / p[2]).exp(),
            ModelId::DoubleExp => {
                let tau2 = p[2] + p[4];
                p[0] + p[1] * (-x / p[2]).exp() + p[3] * (-x / tau2).exp()
            }
            ModelId::Hyperbolic => p[0] + p[1] / x,
            ModelId::LorentzianDip => {
                let h = 0.5 * p[3];
                let d = x - p[2];
                p[0] * (1.0 - p[1] * h * h / (d * d + h * h))
            }
            ModelId::SaturationEmpirical => p[0] * x / (x + p[1]) + p[2] * x,
        }
    }

    fn gradient(&self, p: &[f64], x: f64, g: &mut [f64]) -> bool {
        match self {
            ModelId::CompressedExp => {
                let (a, tau, beta) = (p[1], p[2], p[3]);
                let u = (x / tau).powf(beta);
                let e = (-u).exp();
                g[0] = 1.0;
                g[1] = 1.0 - e;
                g[2] = -a * e * beta * u / tau;
                g[3] = if x > 0.0 { a * e * u * (x / tau).ln() } else { 0.0 };
            }
            ModelId::ExpDecay => {
                let e = (-x / p[2]).exp();
                g[0] = 1.0;
                g[1] = e;
                g[2] = p[1] * e * x / (p[2] * p[2]);
            }
            ModelId::DoubleExp => {
                let tau2 = p[2] + p[4];
                let e1 = (-x / p[2]).exp();
                let e2 = (-x / tau2).exp();
                let d2 = p[3] * e2 * x / (tau2 * tau2);
                g[0] = 1.0;
                g[1] = e1;
                g[2] = p[1] * e1 * x / (p[2] * p[2]) + d2;
                g[3] = e2;
                g[4] = d2;
            }
            ModelId::Hyperbolic => {
                g[0] = 1.0;
                g[1] = 1.0 / x;
            }
            ModelId::LorentzianDip => {
                let (y0, c, f0, h) = (p[0], p[1], p[2], 0.5 * p[3]);
                let d = x - f0;
                let den = d * d + h * h;
                let l = h * h / den;
                g[0] = 1.0 - c * l;
                g[1] = -y0 * l;
                g[2] = -y0 * c * 2.0 * h * h * d / (den * den);
                g[3] = -y0 * c * h * d * d / (den * den);
            }
            ModelId::SaturationEmpirical => {
                let s = x + p[1];
                g[0] = x / s;
                g[1] = -p[0] * x / (s * s);
                g[2] = x;
            }
        }
        true
    }
}

/// `model` averaged over a window of width `window` centered on `x`, for data
/// that are themselves window means (composite Simpson, 32 panels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowAveraged {
    pub model: ModelId,
    pub window: f64,
}

const SIMPSON_PANELS: usize = 32;

impl WindowAveraged {
    fn nodes(&self, x: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let h = self.window / SIMPSON_PANELS as f64;
        let lo = x - 0.5 * self.window;
        (0..=SIMPSON_PANELS).map(move |i| {
            let w = match i {
                0 => 1.0,
                _ if i == SIMPSON_PANELS => 1.0,
                _ if i % 2 == 1 => 4.0,
                _ => 2.0,
            };
            (lo + i as f64 * h, w / (3.0 * SIMPSON_PANELS as f64))
        })
    }
}

impl CurveModel for WindowAveraged {
    fn id(&self) -> String {
        self.model.id()
    }

    fn param_names(&self) -> &[&'static str] {
        self.model.param_names()
    }

    fn domain_bounds(&self) -> Vec<Bound> {
        self.model.domain_bounds()
    }

    fn check_x(&self, x: f64) -> Result<()> {
        if !(self.window > 0.0) {
            return Err(Error::Domain("averaging window must be > 0".into()));
        }
        self.model.check_x(x - 0.5 * self.window)?;
        self.model.check_x(x + 0.5 * self.window)
    }

    fn eval(&self, p: &[f64], x: f64) -> f64 {
        self.nodes(x).map(|(t, w)| w * self.model.eval(p, t)).sum()
    }

    fn gradient(&self, p: &[f64], x: f64, g: &mut [f64]) -> bool {
        let mut at = vec![0.0; g.len()];
        g.iter_mut().for_each(|v| *v = 0.0);
        for (t, w) in self.nodes(x) {
            if !self.model.gradient(p, t, &mut at) {
                return false;
            }
            for (gi, ai) in g.iter_mut().zip(&at) {
                *gi += w * ai;
            }
        }
        true
    }
}
