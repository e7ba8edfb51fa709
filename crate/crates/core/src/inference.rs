//! Charge-state recovery from binned counts: a two-state Poisson HMM and a
//! two-component Poisson mixture.
//!
//! State 0 is dark (NV⁰), state 1 bright (NV⁻); fitted models are always
//! relabelled so that `lambda[0] < lambda[1]`.

use serde::{Deserialize, Serialize};

use crate::trace_sim::PhotonTrace;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoissonHmm {
    pub initial_prob: [f64; 2],
    /// Per-bin transition probabilities, rows = from-state.
    pub transition: [[f64; 2]; 2],
    /// Expected counts per bin in each state.
    #[serde(rename = "lambda_counts_per_bin")]
    pub lambda: [f64; 2],
}

impl PoissonHmm {
    /// Symmetric switching with per-bin switch probability `p_switch`.
    pub fn symmetric(lambda_dark: f64, lambda_bright: f64, p_switch: f64) -> Self {
        PoissonHmm {
            initial_prob: [0.5, 0.5],
            transition: [[1.0 - p_switch, p_switch], [p_switch, 1.0 - p_switch]],
            lambda: [lambda_dark, lambda_bright],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_prob = |p: f64| (0.0..=1.0).contains(&p);
        if !self.initial_prob.iter().all(|&p| ok_prob(p))
            || (self.initial_prob.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(Error::invalid("initial_prob must be a probability vector"));
        }
        for row in &self.transition {
            if !row.iter().all(|&p| ok_prob(p)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                return Err(Error::invalid("transition rows must be probability vectors"));
            }
        }
        if !(self.lambda[0] >= 0.0) || !self.lambda[1].is_finite() {
            return Err(Error::invalid("lambda must be finite and >= 0"));
        }
        Ok(())
    }

    /// Model with state labels exchanged.
    pub fn swapped(&self) -> Self {
        let t = &self.transition;
        PoissonHmm {
            initial_prob: [self.initial_prob[1], self.initial_prob[0]],
            transition: [[t[1][1], t[1][0]], [t[0][1], t[0][0]]],
            lambda: [self.lambda[1], self.lambda[0]],
        }
    }

    /// Relabels so that the dark state comes first.
    pub fn canonical(&self) -> Self {
        if self.lambda[0] > self.lambda[1] {
            self.swapped()
        } else {
            *self
        }
    }

    /// Stationary probability of the bright state.
    pub fn stationary_bright(&self) -> f64 {
        let a = self.transition[0][1];
        let b = self.transition[1][0];
        if a + b == 0.0 {
            self.initial_prob[1]
        } else {
            a / (a + b)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorResult {
    pub gamma: Vec<[f64; 2]>,
    pub log_likelihood: f64,
}

impl PosteriorResult {
    pub fn argmax_path(&self) -> Vec<u8> {
        self.gamma.iter().map(|g| u8::from(g[1] > g[0])).collect()
    }
}

/// `ln k!` for `k ≤ max`.
fn ln_factorials(max: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(max as usize + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=max {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

fn ln_poisson(k: u64, lambda: f64, lnfact: &[f64]) -> f64 {
    if lambda == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    k as f64 * lambda.ln() - lambda - lnfact[k as usize]
}

/// Per-bin emission log-probabilities.
fn log_emissions(hmm: &PoissonHmm, counts: &[u64]) -> Vec<[f64; 2]> {
    let max = counts.iter().copied().max().unwrap_or(0);
    let lnfact = ln_factorials(max);
    counts
        .iter()
        .map(|&k| {
            [
                ln_poisson(k, hmm.lambda[0], &lnfact),
                ln_poisson(k, hmm.lambda[1], &lnfact),
            ]
        })
        .collect()
}

struct Passes {
    alpha: Vec<[f64; 2]>,
    beta: Vec<[f64; 2]>,
    /// Rescaled emissions `exp(l − max l)` per bin.
    emis: Vec<[f64; 2]>,
    scale: Vec<f64>,
    log_likelihood: f64,
}

fn forward_backward_passes(hmm: &PoissonHmm, counts: &[u64]) -> Result<Passes> {
    let n = counts.len();
    let logs = log_emissions(hmm, counts);
    let a = &hmm.transition;
    let mut emis = Vec::with_capacity(n);
    let mut alpha = Vec::with_capacity(n);
    let mut scale = Vec::with_capacity(n);
    let mut ll = 0.0;
    for (t, l) in logs.iter().enumerate() {
        let m = l[0].max(l[1]);
        if m == f64::NEG_INFINITY {
            return Err(Error::NumericalUnderflow { bin: t });
        }
        let e = [(l[0] - m).exp(), (l[1] - m).exp()];
        let pred = if t == 0 {
            hmm.initial_prob
        } else {
            let p: &[f64; 2] = &alpha[t - 1];
            [
                p[0] * a[0][0] + p[1] * a[1][0],
                p[0] * a[0][1] + p[1] * a[1][1],
            ]
        };
        let raw = [pred[0] * e[0], pred[1] * e[1]];
        let c = raw[0] + raw[1];
        if !(c > 0.0) {
            return Err(Error::NumericalUnderflow { bin: t });
        }
        alpha.push([raw[0] / c, raw[1] / c]);
        scale.push(c);
        emis.push(e);
        ll += c.ln() + m;
    }
    let mut beta = vec![[1.0, 1.0]; n];
    for t in (0..n.saturating_sub(1)).rev() {
        let e = emis[t + 1];
        let b = beta[t + 1];
        let c = scale[t + 1];
        beta[t] = [
            (a[0][0] * e[0] * b[0] + a[0][1] * e[1] * b[1]) / c,
            (a[1][0] * e[0] * b[0] + a[1][1] * e[1] * b[1]) / c,
        ];
    }
    Ok(Passes {
        alpha,
        beta,
        emis,
        scale,
        log_likelihood: ll,
    })
}

fn posteriors(p: &Passes) -> Vec<[f64; 2]> {
    p.alpha
        .iter()
        .zip(&p.beta)
        .map(|(a, b)| {
            let g = [a[0] * b[0], a[1] * b[1]];
            let s = g[0] + g[1];
            [g[0] / s, g[1] / s]
        })
        .collect()
}

/// Exact state posteriors and log-likelihood by the scaled forward–backward
/// recursion; safe for arbitrarily long traces.
pub fn forward_backward(hmm: &PoissonHmm, trace: &PhotonTrace) -> Result<PosteriorResult> {
    hmm.validate()?;
    trace.validate()?;
    let p = forward_backward_passes(hmm, &trace.counts)?;
    Ok(PosteriorResult {
        gamma: posteriors(&p),
        log_likelihood: p.log_likelihood,
    })
}

/// Most probable state path and its joint log-probability. Ties go to
/// state 0.
pub fn viterbi(hmm: &PoissonHmm, trace: &PhotonTrace) -> Result<(Vec<u8>, f64)> {
    hmm.validate()?;
    trace.validate()?;
    let logs = log_emissions(hmm, &trace.counts);
    let la = hmm.transition.map(|r| r.map(f64::ln));
    let n = logs.len();
    let mut delta = [
        hmm.initial_prob[0].ln() + logs[0][0],
        hmm.initial_prob[1].ln() + logs[0][1],
    ];
    let mut back = vec![[0u8; 2]; n];
    for t in 1..n {
        let mut next = [0.0; 2];
        for j in 0..2 {
            let from0 = delta[0] + la[0][j];
            let from1 = delta[1] + la[1][j];
            let (best, arg) = if from1 > from0 { (from1, 1) } else { (from0, 0) };
            next[j] = best + logs[t][j];
            back[t][j] = arg;
        }
        delta = next;
    }
    let mut state = u8::from(delta[1] > delta[0]);
    let best = delta[state as usize];
    if best == f64::NEG_INFINITY {
        return Err(Error::NumericalUnderflow { bin: n - 1 });
    }
    let mut path = vec![0u8; n];
    for t in (0..n).rev() {
        path[t] = state;
        state = back[t][state as usize];
    }
    Ok((path, best))
}

/// Joint log-probability of a given path (used by enumeration checks).
pub fn path_log_prob(hmm: &PoissonHmm, counts: &[u64], path: &[u8]) -> f64 {
    let logs = log_emissions(hmm, counts);
    let mut lp = hmm.initial_prob[path[0] as usize].ln() + logs[0][path[0] as usize];
    for t in 1..path.len() {
        let (i, j) = (path[t - 1] as usize, path[t] as usize);
        lp += hmm.transition[i][j].ln() + logs[t][j];
    }
    lp
}

/// Minimum log-likelihood gain of the two-state model over a single Poisson
/// below which the data are treated as single-state.
pub const MIN_TWO_STATE_GAIN: f64 = 10.0;
pub const MIN_OCCUPANCY: f64 = 1e-6;

fn single_poisson_ll(counts: &[u64]) -> f64 {
    let n = counts.len() as f64;
    let mean = counts.iter().sum::<u64>() as f64 / n;
    let lnfact = ln_factorials(counts.iter().copied().max().unwrap_or(0));
    counts.iter().map(|&k| ln_poisson(k, mean, &lnfact)).sum()
}

fn quantile(sorted: &[u64], q: f64) -> f64 {
    let idx = (q * (sorted.len() - 1) as f64).floor() as usize;
    sorted[idx] as f64
}

/// Starting model from the 25th/75th count percentiles.
pub fn init_from_quantiles(counts: &[u64]) -> Result<PoissonHmm> {
    if counts.is_empty() {
        return Err(Error::invalid("no counts"));
    }
    let mut s = counts.to_vec();
    s.sort_unstable();
    let lo = quantile(&s, 0.25);
    let hi = quantile(&s, 0.75);
    if hi <= lo {
        return Err(Error::DegenerateFit(format!(
            "25th and 75th count percentiles coincide ({lo}); the data show one level"
        )));
    }
    Ok(PoissonHmm::symmetric(lo.max(1e-3), hi, 0.05))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaumWelchOptions {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for BaumWelchOptions {
    fn default() -> Self {
        BaumWelchOptions {
            max_iter: 500,
            tol: 1e-6,
        }
    }
}

/// Expectation-maximization for all HMM parameters. Returns the canonical
/// (dark-first) model and the log-likelihood of each E-step.
pub fn baum_welch(
    trace: &PhotonTrace,
    init: &PoissonHmm,
    opts: &BaumWelchOptions,
) -> Result<(PoissonHmm, Vec<f64>)> {
    init.validate()?;
    trace.validate()?;
    let counts = &trace.counts;
    let n = counts.len();
    let mut hmm = *init;
    let mut history: Vec<f64> = Vec::new();
    for _ in 0..opts.max_iter.max(1) {
        let p = forward_backward_passes(&hmm, counts)?;
        let gamma = posteriors(&p);
        let prev = history.last().copied();
        history.push(p.log_likelihood);
        if let Some(prev) = prev {
            if (p.log_likelihood - prev).abs() < opts.tol {
                break;
            }
        }
        let mut occ = [0.0; 2];
        let mut occ_head = [0.0; 2];
        let mut weighted = [0.0; 2];
        for (t, g) in gamma.iter().enumerate() {
            for s in 0..2 {
                occ[s] += g[s];
                weighted[s] += g[s] * counts[t] as f64;
                if t + 1 < n {
                    occ_head[s] += g[s];
                }
            }
        }
        for (s, o) in occ.iter().enumerate() {
            if o / (n as f64) < MIN_OCCUPANCY {
                return Err(Error::DegenerateFit(format!(
                    "state {s} occupancy {:.3e} is below {MIN_OCCUPANCY:e}",
                    o / n as f64
                )));
            }
        }
        let mut xi = [[0.0; 2]; 2];
        let a = hmm.transition;
        for t in 0..n.saturating_sub(1) {
            let al = p.alpha[t];
            let e = p.emis[t + 1];
            let b = p.beta[t + 1];
            let c = p.scale[t + 1];
            for i in 0..2 {
                for j in 0..2 {
                    xi[i][j] += al[i] * a[i][j] * e[j] * b[j] / c;
                }
            }
        }
        let mut next = hmm;
        next.initial_prob = gamma[0];
        for i in 0..2 {
            let row = xi[i][0] + xi[i][1];
            if row > 0.0 && occ_head[i] > 0.0 {
                next.transition[i] = [xi[i][0] / row, xi[i][1] / row];
            }
            next.lambda[i] = weighted[i] / occ[i];
        }
        hmm = next;
    }
    let gain = history.last().copied().unwrap_or(f64::NEG_INFINITY) - single_poisson_ll(counts);
    if gain < MIN_TWO_STATE_GAIN {
        return Err(Error::DegenerateFit(format!(
            "two-state model improves the log-likelihood by only {gain:.2} over one Poisson level"
        )));
    }
    Ok((hmm.canonical(), history))
}

/// Quantile-initialized Baum-Welch with default options.
pub fn fit_hmm(trace: &PhotonTrace) -> Result<(PoissonHmm, Vec<f64>)> {
    let init = init_from_quantiles(&trace.counts)?;
    baum_welch(trace, &init, &BaumWelchOptions::default())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureFit {
    #[serde(rename = "lambda_dark_counts_per_bin")]
    pub lambda_dark: f64,
    #[serde(rename = "lambda_bright_counts_per_bin")]
    pub lambda_bright: f64,
    pub weight_bright: f64,
    pub log_likelihood: f64,
    /// Bhattacharyya coefficient of the two Poisson components (1 = identical).
    pub overlap: f64,
    pub n_iter: usize,
}

/// Bhattacharyya coefficient between Poisson(a) and Poisson(b).
pub fn poisson_overlap(a: f64, b: f64) -> f64 {
    (-0.5 * (a.sqrt() - b.sqrt()).powi(2)).exp()
}

pub const MIN_MIXTURE_SAMPLES: usize = 100;

/// Two-component Poisson mixture by EM on the count histogram.
pub fn poisson_mixture_em(counts: &[u64]) -> Result<MixtureFit> {
    poisson_mixture_em_traced(counts).map(|(f, _)| f)
}

/// As [`poisson_mixture_em`], also returning the log-likelihood per iteration.
pub fn poisson_mixture_em_traced(counts: &[u64]) -> Result<(MixtureFit, Vec<f64>)> {
    if counts.len() < MIN_MIXTURE_SAMPLES {
        return Err(Error::invalid(format!(
            "mixture fit needs at least {MIN_MIXTURE_SAMPLES} samples, got {}",
            counts.len()
        )));
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    let mut hist = vec![0.0; max as usize + 1];
    for &k in counts {
        hist[k as usize] += 1.0;
    }
    let lnfact = ln_factorials(max);
    let n = counts.len() as f64;
    let init = init_from_quantiles(counts)?;
    let (mut l0, mut l1, mut w) = (init.lambda[0], init.lambda[1], 0.5_f64);
    let mut history = Vec::new();
    let mut iters = 0;
    for it in 0..10_000 {
        iters = it + 1;
        let (mut ll, mut r_sum, mut r_k, mut d_k) = (0.0, 0.0, 0.0, 0.0);
        for (k, &h) in hist.iter().enumerate() {
            if h == 0.0 {
                continue;
            }
            let a = (1.0 - w).ln() + ln_poisson(k as u64, l0, &lnfact);
            let b = w.ln() + ln_poisson(k as u64, l1, &lnfact);
            let m = a.max(b);
            let lse = m + ((a - m).exp() + (b - m).exp()).ln();
            let r = (b - lse).exp();
            ll += h * lse;
            r_sum += h * r;
            r_k += h * r * k as f64;
            d_k += h * (1.0 - r) * k as f64;
        }
        let converged = history
            .last()
            .is_some_and(|&prev: &f64| (ll - prev).abs() <= 1e-10 * ll.abs().max(1.0));
        history.push(ll);
        if converged {
            break;
        }
        w = r_sum / n;
        if w < MIN_OCCUPANCY || 1.0 - w < MIN_OCCUPANCY {
            return Err(Error::DegenerateFit(format!(
                "component weight {w:.3e} collapsed"
            )));
        }
        l1 = r_k / r_sum;
        l0 = d_k / (n - r_sum);
    }
    let ll = *history.last().unwrap();
    if ll - single_poisson_ll(counts) < MIN_TWO_STATE_GAIN {
        return Err(Error::DegenerateFit(
            "two components fit no better than one Poisson level".into(),
        ));
    }
    if l0 > l1 {
        std::mem::swap(&mut l0, &mut l1);
        w = 1.0 - w;
    }
    Ok((
        MixtureFit {
            lambda_dark: l0,
            lambda_bright: l1,
            weight_bright: w,
            log_likelihood: ll,
            overlap: poisson_overlap(l0, l1),
            n_iter: iters,
        },
        history,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancySeries {
    #[serde(rename = "window_s")]
    pub window: f64,
    /// Window centers.
    #[serde(rename = "times_s")]
    pub times: Vec<f64>,
    pub p_bright: Vec<f64>,
}

/// Per-bin bright-state evidence for windowing.
#[derive(Debug, Clone, Copy)]
pub enum StateEvidence<'a> {
    Posterior(&'a [[f64; 2]]),
    Path(&'a [u8]),
}

/// Mean bright probability per window. Windows start at the first bin and
/// span a whole number of bins; a trailing partial window is dropped.
pub fn occupancy_timeseries(
    evidence: StateEvidence<'_>,
    trace: &PhotonTrace,
    window: f64,
) -> Result<OccupancySeries> {
    trace.validate()?;
    if !(window >= trace.bin_width) {
        return Err(Error::invalid(format!(
            "window {window} s is shorter than a bin ({} s)",
            trace.bin_width
        )));
    }
    let bright: Vec<f64> = match evidence {
        StateEvidence::Posterior(g) => g.iter().map(|g| g[1]).collect(),
        StateEvidence::Path(p) => p.iter().map(|&s| f64::from(s)).collect(),
    };
    if bright.len() != trace.len() {
        return Err(Error::invalid(format!(
            "{} state values for {} bins",
            bright.len(),
            trace.len()
        )));
    }
    let per = ((window / trace.bin_width) * (1.0 + 1e-9)).floor() as usize;
    let span = per as f64 * trace.bin_width;
    let mut times = Vec::new();
    let mut p = Vec::new();
    for (k, chunk) in bright.chunks_exact(per).enumerate() {
        times.push(trace.meta.start_time_s + (k as f64 + 0.5) * span);
        p.push((chunk.iter().sum::<f64>() / per as f64).clamp(0.0, 1.0));
    }
    Ok(OccupancySeries {
        window: span,
        times,
        p_bright: p,
    })
}

/// Standard error of each window's occupancy by batch means: the window is
/// cut into `batches` equal runs of bins and the spread of the run means
/// gives the error of their average. Runs must be long compared with the
/// state correlation time for this to hold. Windows line up with
/// [`occupancy_timeseries`]; the result is floored at `floor`.
pub fn occupancy_errors(
    evidence: StateEvidence<'_>,
    trace: &PhotonTrace,
    window: f64,
    batches: usize,
    floor: f64,
) -> Result<Vec<f64>> {
    let occ = occupancy_timeseries(evidence, trace, window)?;
    let per = ((window / trace.bin_width) * (1.0 + 1e-9)).floor() as usize;
    if batches < 2 || per < 2 * batches {
        return Err(Error::invalid(format!(
            "{per} bins per window cannot be split into {batches} batches of at least 2"
        )));
    }
    let bright: Vec<f64> = match evidence {
        StateEvidence::Posterior(g) => g.iter().map(|g| g[1]).collect(),
        StateEvidence::Path(p) => p.iter().map(|&s| f64::from(s)).collect(),
    };
    let run = per / batches;
    Ok(bright
        .chunks_exact(per)
        .take(occ.p_bright.len())
        .map(|w| {
            let means: Vec<f64> = w
                .chunks_exact(run)
                .take(batches)
                .map(|r| r.iter().sum::<f64>() / run as f64)
                .collect();
            let m = means.iter().sum::<f64>() / batches as f64;
            let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
            (var / batches as f64).sqrt().max(floor)
        })
        .collect())
}
