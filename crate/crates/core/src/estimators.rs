//! Photon-correlation and depletion-region estimators.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fitting::{lm_fit, Bound, CurveModel, Dataset, FitResult, LmOptions};
use crate::trace_sim::TimestampStream;
use crate::{Error, Result};

pub const MIN_G2_PHOTONS: usize = 1000;

/// Vacuum permittivity, F/m (CODATA 2018).
pub const EPSILON_0: f64 = 8.8541878128e-12;
/// Elementary charge, C (exact).
pub const ELEMENTARY_CHARGE: f64 = 1.602176634e-19;
pub const EPS_R_DIAMOND: f64 = 5.7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationHistogram {
    pub bin_width_s: f64,
    pub tau_bins_s: Vec<f64>,
    pub g2: Vec<f64>,
    pub counts: Vec<u64>,
    /// Coincidences expected per bin for uncorrelated photons.
    pub accidentals: Vec<f64>,
    pub g2_zero: f64,
    pub g2_zero_err: f64,
}

impl CorrelationHistogram {
    pub fn center(&self) -> usize {
        self.tau_bins_s.len() / 2
    }

    /// Poisson error of each g² value (a zero count is treated as one).
    pub fn g2_err(&self) -> Vec<f64> {
        self.counts
            .iter()
            .zip(&self.accidentals)
            .map(|(&c, &e)| (c.max(1) as f64).sqrt() / e)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.tau_bins_s.len();
        if n % 2 == 0 || self.g2.len() != n || self.counts.len() != n || self.accidentals.len() != n {
            return Err(Error::invalid("histogram arrays must have equal odd length"));
        }
        if self.g2.iter().any(|g| !(*g >= 0.0)) {
            return Err(Error::invalid("g2 must be >= 0"));
        }
        Ok(())
    }
}

/// Autocorrelation of all photon pairs within `±max_tau`, normalized by the
/// coincidences expected from uncorrelated light of the same mean rate,
/// `N(N−1)·bin·(T − |τ|)/T²`, so that the long-delay plateau sits at 1.
pub fn g2_histogram(stream: &TimestampStream, bin: f64, max_tau: f64) -> Result<CorrelationHistogram> {
    stream.validate()?;
    if !(bin > 0.0) || !bin.is_finite() {
        return Err(Error::invalid("bin must be positive"));
    }
    if !(max_tau >= 10.0 * bin) {
        return Err(Error::invalid("max_tau must be at least ten bins"));
    }
    let n = stream.times.len();
    if n < MIN_G2_PHOTONS {
        return Err(Error::TooFewPhotons {
            got: n,
            need: MIN_G2_PHOTONS,
        });
    }
    let t_total = stream.duration;
    if !(max_tau < t_total) {
        return Err(Error::invalid("max_tau must be shorter than the stream"));
    }
    let k_max = (max_tau / bin).floor() as usize;
    let reach = (k_max as f64 + 0.5) * bin;
    let times = &stream.times;
    const CHUNK: usize = 1 << 14;
    // one-sided counts per |k|; integer sums merge deterministically
    let one_sided = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut h = vec![0u64; k_max + 1];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                let ti = times[i];
                for &tj in &times[i + 1..] {
                    let dt = tj - ti;
                    if dt >= reach {
                        break;
                    }
                    h[(dt / bin + 0.5).floor() as usize] += 1;
                }
            }
            h
        })
        .reduce(
            || vec![0u64; k_max + 1],
            |mut a, b| {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                a
            },
        );
    let nf = n as f64;
    let mut tau_bins_s = Vec::with_capacity(2 * k_max + 1);
    let mut counts = Vec::with_capacity(2 * k_max + 1);
    let mut accidentals = Vec::with_capacity(2 * k_max + 1);
    for k in -(k_max as i64)..=k_max as i64 {
        let tau = k as f64 * bin;
        let c = if k == 0 { 2 * one_sided[0] } else { one_sided[k.unsigned_abs() as usize] };
        tau_bins_s.push(tau);
        counts.push(c);
        accidentals.push(nf * (nf - 1.0) * bin * (t_total - tau.abs()) / (t_total * t_total));
    }
    let g2: Vec<f64> = counts.iter().zip(&accidentals).map(|(&c, &e)| c as f64 / e).collect();
    let mid = k_max;
    Ok(CorrelationHistogram {
        bin_width_s: bin,
        g2_zero: g2[mid],
        g2_zero_err: (counts[mid].max(1) as f64).sqrt() / accidentals[mid],
        tau_bins_s,
        g2,
        counts,
        accidentals,
    })
}

/// `1 − (1 − g0)·e^{−|τ|/τ_a}` averaged over a histogram bin.
#[derive(Debug, Clone, Copy)]
pub struct AntibunchingModel {
    pub bin_width_s: f64,
}

impl AntibunchingModel {
    /// Bin average of `e^{−|τ|/τ_a}` and its derivative in `τ_a`.
    fn kernel(&self, tau_a: f64, x: f64) -> (f64, f64) {
        let b = self.bin_width_s;
        let (lo, hi) = (x - 0.5 * b, x + 0.5 * b);
        // ∫ e^{−|t|/τ} dt and its τ-derivative over [lo, hi]
        let prim = |t: f64| {
            let e = (-t.abs() / tau_a).exp();
            let v = tau_a * (1.0 - e);
            let dv = (1.0 - e) - t.abs() / tau_a * e;
            (t.signum() * v, t.signum() * dv)
        };
        let (vh, dh) = prim(hi);
        let (vl, dl) = prim(lo);
        ((vh - vl) / b, (dh - dl) / b)
    }
}

impl CurveModel for AntibunchingModel {
    fn id(&self) -> String {
        "antibunching".into()
    }

    fn param_names(&self) -> &[&'static str] {
        &["g0", "tau_a"]
    }

    fn domain_bounds(&self) -> Vec<Bound> {
        vec![Bound::new(0.0, 1.2), Bound::POSITIVE]
    }

    fn eval(&self, p: &[f64], x: f64) -> f64 {
        1.0 - (1.0 - p[0]) * self.kernel(p[1], x).0
    }

    fn gradient(&self, p: &[f64], x: f64, g: &mut [f64]) -> bool {
        let (k, dk) = self.kernel(p[1], x);
        g[0] = k;
        g[1] = -(1.0 - p[0]) * dk;
        true
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AntibunchingFit {
    pub g0: f64,
    pub g0_stderr: f64,
    pub tau_a_s: f64,
    /// `None` when the dip is too shallow to resolve a time constant.
    pub tau_a_stderr_s: Option<f64>,
    /// Fitted curve averaged over the zero-delay bin, comparable with
    /// [`CorrelationHistogram::g2_zero`].
    pub g2_zero_binned: f64,
    pub fit: FitResult,
}

/// Fits the antibunching dip, weighting bins by their Poisson errors.
pub fn antibunching_fit(hist: &CorrelationHistogram) -> Result<AntibunchingFit> {
    hist.validate()?;
    let model = AntibunchingModel {
        bin_width_s: hist.bin_width_s,
    };
    let data = Dataset::new(hist.tau_bins_s.clone(), hist.g2.clone()).with_sigma(hist.g2_err());
    let mid = hist.center();
    let g0_init = hist.g2_zero.clamp(0.0, 1.1);
    let half = 0.5 * (1.0 + g0_init);
    let k_half = hist.g2[mid..].iter().position(|&g| g >= half).unwrap_or(1).max(1);
    let tau_init = k_half as f64 * hist.bin_width_s / std::f64::consts::LN_2;
    let opts = LmOptions::default();
    let fit = match lm_fit(&model, &data, &[g0_init, tau_init], None, &opts) {
        Ok(f) => f,
        Err(Error::SingularJacobian(_)) => {
            let bounds = [Bound::new(0.0, 1.2), Bound::fixed(tau_init)];
            let fit = lm_fit(&model, &data, &[g0_init, tau_init], Some(&bounds), &opts)?;
            return Ok(AntibunchingFit {
                g0: fit.value("g0"),
                g0_stderr: fit.stderr("g0"),
                tau_a_s: tau_init,
                tau_a_stderr_s: None,
                g2_zero_binned: model.eval(&fit.values(), 0.0),
                fit,
            });
        }
        Err(e) => return Err(e),
    };
    Ok(AntibunchingFit {
        g0: fit.value("g0"),
        g0_stderr: fit.stderr("g0"),
        tau_a_s: fit.value("tau_a"),
        tau_a_stderr_s: Some(fit.stderr("tau_a")),
        g2_zero_binned: model.eval(&fit.values(), 0.0),
        fit,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepletionInput {
    #[serde(rename = "voltage_V")]
    pub voltage_v: f64,
    pub depletion_width_m: f64,
    #[serde(default = "default_eps_r")]
    pub epsilon_r: f64,
}

fn default_eps_r() -> f64 {
    EPS_R_DIAMOND
}

impl DepletionInput {
    pub fn new(voltage_v: f64, depletion_width_m: f64) -> Self {
        DepletionInput {
            voltage_v,
            depletion_width_m,
            epsilon_r: EPS_R_DIAMOND,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("voltage", self.voltage_v),
            ("depletion width", self.depletion_width_m),
            ("epsilon_r", self.epsilon_r),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

pub const ACCEPTOR_ASSUMPTIONS: &str = "one-sided abrupt junction, no built-in potential, \
uniform acceptor density, the applied voltage drops entirely across the depletion width";

/// `N_A = 2·ε₀·ε_r·V / (q·W²)` in cm⁻³.
pub fn acceptor_density(inp: &DepletionInput) -> Result<f64> {
    inp.validate()?;
    let per_m3 = 2.0 * EPSILON_0 * inp.epsilon_r * inp.voltage_v
        / (ELEMENTARY_CHARGE * inp.depletion_width_m * inp.depletion_width_m);
    Ok(per_m3 * 1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn acceptor_density_reference_value() {
        let n = acceptor_density(&DepletionInput::new(3.0, 1e-6)).unwrap();
        assert!((n / 1.8900e15 - 1.0).abs() < 1e-3, "{n}");
    }

    #[test]
    fn kernel_matches_quadrature() {
        let m = AntibunchingModel { bin_width_s: 2e-9 };
        for &x in &[0.0, 1e-9, 2e-9, -6e-9, 40e-9] {
            let n = 20000;
            let h = m.bin_width_s / n as f64;
            let q: f64 = (0..n)
                .map(|i| {
                    let t = x - 0.5 * m.bin_width_s + (i as f64 + 0.5) * h;
                    (-t.abs() / 20e-9).exp()
                })
                .sum::<f64>()
                / n as f64;
            assert!((m.kernel(20e-9, x).0 - q).abs() < 1e-8);
        }
    }

    #[test]
    fn too_few_photons() {
        let s = TimestampStream {
            times: (0..10).map(|i| i as f64).collect(),
            duration: 10.0,
        };
        assert!(matches!(
            g2_histogram(&s, 0.1, 1.0),
            Err(Error::TooFewPhotons { got: 10, .. })
        ));
    }
}
