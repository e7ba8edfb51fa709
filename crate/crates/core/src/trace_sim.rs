//! Stochastic photon traces from a two-state (bright/dark) telegraph emitter.
//!
//! Switching is simulated event by event: dwell times in the bright state are
//! exponential, and the possibly time-dependent dark→bright rate is handled
//! by Lewis thinning against the profile maximum. Bin counts are Poisson with
//! mean `∫ cps(state(t)) dt` over the bin, integrated exactly across switches.
//!
//! Two independent streams are derived from the user seed, one for switching
//! and one for counts, so changing bin width does not perturb the
//! trajectory.

use rand::Rng;
use rand_distr::{Distribution, Exp1, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{derive_seed, rng_from_seed, SimRng};
use crate::{Error, Result};

/// Dark→bright rate as a function of time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RateProfile {
    Constant { rate_per_s: f64 },
    /// Piecewise linear through `(times_s[i], rates_per_s[i])`, held constant
    /// outside the table.
    Tabulated {
        times_s: Vec<f64>,
        rates_per_s: Vec<f64>,
    },
}

impl RateProfile {
    pub fn constant(rate: f64) -> Self {
        RateProfile::Constant { rate_per_s: rate }
    }

    pub fn at(&self, t: f64) -> f64 {
        match self {
            RateProfile::Constant { rate_per_s } => *rate_per_s,
            RateProfile::Tabulated { times_s, rates_per_s } => {
                let k = times_s.partition_point(|&x| x <= t);
                if k == 0 {
                    return rates_per_s[0];
                }
                if k == times_s.len() {
                    return rates_per_s[k - 1];
                }
                let (t0, t1) = (times_s[k - 1], times_s[k]);
                let (r0, r1) = (rates_per_s[k - 1], rates_per_s[k]);
                r0 + (r1 - r0) * ((t - t0) / (t1 - t0))
            }
        }
    }

    pub fn max(&self) -> f64 {
        match self {
            RateProfile::Constant { rate_per_s } => *rate_per_s,
            RateProfile::Tabulated { rates_per_s, .. } => {
                rates_per_s.iter().copied().fold(0.0, f64::max)
            }
        }
    }

    /// Same profile with time stretched by `1/s` and rates multiplied by `s`.
    pub fn rescaled(&self, s: f64) -> Self {
        match self {
            RateProfile::Constant { rate_per_s } => RateProfile::constant(rate_per_s * s),
            RateProfile::Tabulated { times_s, rates_per_s } => RateProfile::Tabulated {
                times_s: times_s.iter().map(|t| t / s).collect(),
                rates_per_s: rates_per_s.iter().map(|r| r * s).collect(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            RateProfile::Constant { rate_per_s } => {
                if !(*rate_per_s >= 0.0) || !rate_per_s.is_finite() {
                    return Err(Error::invalid("rate must be finite and >= 0"));
                }
            }
            RateProfile::Tabulated { times_s, rates_per_s } => {
                if times_s.is_empty() || times_s.len() != rates_per_s.len() {
                    return Err(Error::invalid(
                        "rate table needs equal, non-zero numbers of times and rates",
                    ));
                }
                if times_s.windows(2).any(|w| !(w[1] > w[0])) {
                    return Err(Error::invalid("rate table times must be strictly increasing"));
                }
                if rates_per_s.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
                    return Err(Error::invalid("rate table entries must be finite and >= 0"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelegraphParams {
    pub rate_dark_to_bright: RateProfile,
    #[serde(rename = "rate_bright_to_dark_per_s")]
    pub rate_bright_to_dark: f64,
    pub cps_bright: f64,
    pub cps_dark: f64,
    /// State at t = 0.
    #[serde(default)]
    pub start_bright: bool,
}

impl TelegraphParams {
    pub fn constant(k_db: f64, k_bd: f64, cps_bright: f64, cps_dark: f64) -> Self {
        TelegraphParams {
            rate_dark_to_bright: RateProfile::constant(k_db),
            rate_bright_to_dark: k_bd,
            cps_bright,
            cps_dark,
            start_bright: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rate_dark_to_bright.validate()?;
        if !(self.rate_bright_to_dark >= 0.0) || !self.rate_bright_to_dark.is_finite() {
            return Err(Error::invalid("rate_bright_to_dark must be finite and >= 0"));
        }
        if !(self.cps_dark >= 0.0) || !self.cps_bright.is_finite() {
            return Err(Error::invalid("count rates must be finite and >= 0"));
        }
        // equal levels are allowed: the states are then unobservable
        if self.cps_bright < self.cps_dark {
            return Err(Error::invalid(format!(
                "cps_bright ({}) must not be below cps_dark ({})",
                self.cps_bright, self.cps_dark
            )));
        }
        Ok(())
    }

    /// All rates multiplied by `s` (time runs `s` times faster).
    pub fn rescaled(&self, s: f64) -> Self {
        TelegraphParams {
            rate_dark_to_bright: self.rate_dark_to_bright.rescaled(s),
            rate_bright_to_dark: self.rate_bright_to_dark * s,
            cps_bright: self.cps_bright * s,
            cps_dark: self.cps_dark * s,
            start_bright: self.start_bright,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceMeta {
    #[serde(rename = "bias_V")]
    pub bias_v: f64,
    #[serde(rename = "power_mW")]
    pub power_mw: f64,
    pub start_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhotonTrace {
    pub bin_width: f64,
    pub counts: Vec<u64>,
    pub meta: TraceMeta,
}

impl PhotonTrace {
    pub fn new(bin_width: f64, counts: Vec<u64>) -> Result<Self> {
        let t = PhotonTrace {
            bin_width,
            counts,
            meta: TraceMeta::default(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bin_width > 0.0) || !self.bin_width.is_finite() {
            return Err(Error::invalid("bin_width must be positive"));
        }
        if self.counts.is_empty() {
            return Err(Error::invalid("trace has no bins"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Start time of bin `i`.
    pub fn bin_start(&self, i: usize) -> f64 {
        self.meta.start_time_s + i as f64 * self.bin_width
    }

    pub fn duration(&self) -> f64 {
        self.counts.len() as f64 * self.bin_width
    }
}

/// Hidden trajectory behind a simulated trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTruth {
    pub start_bright: bool,
    /// Switch instants; the state alternates at each.
    pub switch_times: Vec<f64>,
    /// Fraction of each bin spent bright.
    pub bright_fraction: Vec<f64>,
}

impl TraceTruth {
    /// Per-bin state (1 = bright) by majority of bin time.
    pub fn bin_states(&self) -> Vec<u8> {
        self.bright_fraction
            .iter()
            .map(|&f| u8::from(f >= 0.5))
            .collect()
    }

    /// Completed dwell durations `(bright, dark)`, excluding the censored
    /// first and last dwells.
    pub fn dwells(&self) -> (Vec<f64>, Vec<f64>) {
        let mut bright = Vec::new();
        let mut dark = Vec::new();
        for (k, w) in self.switch_times.windows(2).enumerate() {
            // state after switch k
            let is_bright = self.start_bright == (k % 2 == 1);
            if is_bright {
                bright.push(w[1] - w[0]);
            } else {
                dark.push(w[1] - w[0]);
            }
        }
        (bright, dark)
    }
}

fn check_timing(duration: f64, bin_width: f64) -> Result<usize> {
    if !(bin_width > 0.0) || !bin_width.is_finite() || !duration.is_finite() {
        return Err(Error::invalid("bin width and duration must be positive and finite"));
    }
    if duration < bin_width {
        return Err(Error::invalid(format!(
            "duration {duration} s is shorter than one bin ({bin_width} s)"
        )));
    }
    Ok(((duration / bin_width) * (1.0 + 1e-12)).floor() as usize)
}

fn exp1(rng: &mut SimRng) -> f64 {
    Exp1.sample(rng)
}

/// Switching instants of the telegraph chain on `[0, duration)`.
fn switch_times(tp: &TelegraphParams, duration: f64, rng: &mut SimRng) -> Vec<f64> {
    let mut out = Vec::new();
    let mut t = 0.0;
    let mut bright = tp.start_bright;
    let k_bd = tp.rate_bright_to_dark;
    let ceiling = tp.rate_dark_to_bright.max();
    loop {
        if bright {
            if k_bd == 0.0 {
                break;
            }
            t += exp1(rng) / k_bd;
        } else {
            if ceiling == 0.0 {
                break;
            }
            // Lewis thinning: candidates at the ceiling rate, accepted with
            // probability rate(t)/ceiling.
            loop {
                t += exp1(rng) / ceiling;
                if t >= duration {
                    break;
                }
                let u: f64 = rng.random();
                if u * ceiling < tp.rate_dark_to_bright.at(t) {
                    break;
                }
            }
        }
        if t >= duration {
            break;
        }
        out.push(t);
        bright = !bright;
    }
    out
}

/// Fraction of each bin spent in the bright state.
fn bright_fractions(start_bright: bool, switches: &[f64], n_bins: usize, bin: f64) -> Vec<f64> {
    let mut frac = vec![0.0; n_bins];
    let end = n_bins as f64 * bin;
    let mut bright = start_bright;
    let mut t0 = 0.0;
    let add = |a: f64, b: f64, frac: &mut [f64]| {
        // bright interval [a, b)
        let b = b.min(end);
        if b <= a {
            return;
        }
        let i0 = (a / bin).floor() as usize;
        let i1 = ((b / bin).ceil() as usize).min(n_bins);
        for (i, f) in frac.iter_mut().enumerate().take(i1).skip(i0) {
            let lo = (i as f64 * bin).max(a);
            let hi = ((i + 1) as f64 * bin).min(b);
            if hi > lo {
                *f += (hi - lo) / bin;
            }
        }
    };
    for &s in switches {
        if bright {
            add(t0, s, &mut frac);
        }
        bright = !bright;
        t0 = s;
    }
    if bright {
        add(t0, end, &mut frac);
    }
    for f in &mut frac {
        *f = f.clamp(0.0, 1.0);
    }
    frac
}

fn poisson(rng: &mut SimRng, mean: f64) -> u64 {
    if mean <= 0.0 {
        return 0;
    }
    let d = Poisson::new(mean).expect("finite positive mean");
    d.sample(rng) as u64
}

/// Simulated trace plus its hidden trajectory.
pub fn simulate_trace_with_truth(
    tp: &TelegraphParams,
    duration: f64,
    bin_width: f64,
    seed: u64,
) -> Result<(PhotonTrace, TraceTruth)> {
    tp.validate()?;
    let n_bins = check_timing(duration, bin_width)?;
    let mut switch_rng = rng_from_seed(derive_seed(seed, 0));
    let mut count_rng = rng_from_seed(derive_seed(seed, 1));
    let switches = switch_times(tp, n_bins as f64 * bin_width, &mut switch_rng);
    let frac = bright_fractions(tp.start_bright, &switches, n_bins, bin_width);
    let counts = frac
        .iter()
        .map(|&f| {
            let mean = (f * tp.cps_bright + (1.0 - f) * tp.cps_dark) * bin_width;
            poisson(&mut count_rng, mean)
        })
        .collect();
    let trace = PhotonTrace {
        bin_width,
        counts,
        meta: TraceMeta::default(),
    };
    let truth = TraceTruth {
        start_bright: tp.start_bright,
        switch_times: switches,
        bright_fraction: frac,
    };
    Ok((trace, truth))
}

pub fn simulate_trace(
    tp: &TelegraphParams,
    duration: f64,
    bin_width: f64,
    seed: u64,
) -> Result<PhotonTrace> {
    simulate_trace_with_truth(tp, duration, bin_width, seed).map(|(t, _)| t)
}

/// `n` independent traces, trace `i` seeded with `derive_seed(seed, i)`.
/// Output order and content do not depend on the thread pool.
pub fn simulate_trace_batch(
    tp: &TelegraphParams,
    duration: f64,
    bin_width: f64,
    seed: u64,
    n: usize,
) -> Result<Vec<PhotonTrace>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| simulate_trace(tp, duration, bin_width, derive_seed(seed, i)))
        .collect()
}

/// Target bright-state probability `p(t) = y0 + A·(1 − exp(−(t/τ)^β))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OccupancyTarget {
    pub y0: f64,
    #[serde(rename = "A")]
    pub a: f64,
    #[serde(rename = "tau_s")]
    pub tau: f64,
    pub beta: f64,
}

/// Distance from 1 within which a target probability counts as unreachable.
pub const TARGET_EPS: f64 = 1e-9;

impl OccupancyTarget {
    pub fn at(&self, t: f64) -> f64 {
        self.y0 + self.a * (1.0 - (-(t / self.tau).powf(self.beta)).exp())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !(self.beta > 0.0) || !(self.y0 >= 0.0) {
            return Err(Error::invalid("target needs tau > 0, beta > 0, y0 >= 0"));
        }
        if !(self.y0 + self.a.min(0.0) >= 0.0) {
            return Err(Error::invalid("target probability would go negative"));
        }
        Ok(())
    }
}

/// Grid and clamp for [`rates_from_occupancy_target`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateTableGrid {
    pub duration_s: f64,
    pub step_s: f64,
    pub ceiling_per_s: f64,
}

impl RateTableGrid {
    pub fn new(duration_s: f64, step_s: f64) -> Self {
        RateTableGrid {
            duration_s,
            step_s,
            ceiling_per_s: 1e3,
        }
    }
}

/// Dark→bright rate table `k_db(t) = k_bd·p(t)/(1 − p(t))`, clamped at the
/// grid ceiling, so that the chain's quasi-static occupancy follows `p(t)`.
pub fn rates_from_occupancy_target(
    target: &OccupancyTarget,
    rate_bright_to_dark: f64,
    grid: &RateTableGrid,
) -> Result<RateProfile> {
    target.validate()?;
    if !(rate_bright_to_dark > 0.0) {
        return Err(Error::invalid("rate_bright_to_dark must be > 0"));
    }
    if !(grid.step_s > 0.0) || !(grid.duration_s > 0.0) || !(grid.ceiling_per_s > 0.0) {
        return Err(Error::invalid("grid duration, step and ceiling must be > 0"));
    }
    let sup = target.y0 + target.a.max(0.0);
    if sup >= 1.0 - TARGET_EPS {
        return Err(Error::TargetUnreachable(format!(
            "p(t) approaches {sup}, which needs an unbounded dark→bright rate"
        )));
    }
    let n = (grid.duration_s / grid.step_s).ceil() as usize;
    let times: Vec<f64> = (0..=n).map(|i| i as f64 * grid.step_s).collect();
    let rates = times
        .iter()
        .map(|&t| {
            let p = target.at(t);
            (rate_bright_to_dark * p / (1.0 - p)).min(grid.ceiling_per_s)
        })
        .collect();
    Ok(RateProfile::Tabulated {
        times_s: times,
        rates_per_s: rates,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmitterSpec {
    pub single_emitter: bool,
    #[serde(rename = "excited_lifetime_s")]
    pub excited_lifetime: f64,
    #[serde(rename = "pump_rate_per_s")]
    pub pump_rate: f64,
    #[serde(rename = "background_rate_cps")]
    pub background_rate: f64,
}

impl EmitterSpec {
    /// Photon rate of the two-level cycle.
    pub fn emitter_rate(&self) -> f64 {
        if !self.single_emitter {
            return 0.0;
        }
        let kr = 1.0 / self.excited_lifetime;
        self.pump_rate * kr / (self.pump_rate + kr)
    }

    /// Antibunching time `1/(k_pump + k_rad)`.
    pub fn antibunching_time(&self) -> f64 {
        1.0 / (self.pump_rate + 1.0 / self.excited_lifetime)
    }

    /// Background rate giving background fraction `b` of all counts.
    pub fn with_background_fraction(mut self, b: f64) -> Self {
        let s = self.emitter_rate();
        self.background_rate = if b >= 1.0 { f64::INFINITY } else { s * b / (1.0 - b) };
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.single_emitter && !(self.excited_lifetime > 0.0 && self.pump_rate > 0.0) {
            return Err(Error::invalid("emitter needs a positive lifetime and pump rate"));
        }
        if !(self.background_rate >= 0.0) || !self.background_rate.is_finite() {
            return Err(Error::invalid("background rate must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestampStream {
    pub times: Vec<f64>,
    pub duration: f64,
}

impl TimestampStream {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0) {
            return Err(Error::invalid("stream duration must be > 0"));
        }
        if self.times.first().is_some_and(|&t| t < 0.0)
            || self.times.last().is_some_and(|&t| t > self.duration)
        {
            return Err(Error::invalid("arrival times must lie in [0, duration]"));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("arrival times must be strictly increasing"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

fn merge(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    let (mut i, mut j) = (0, 0);
    while i < a.len() || j < b.len() {
        let take_a = j >= b.len() || (i < a.len() && a[i] <= b[j]);
        let v = if take_a {
            i += 1;
            a[i - 1]
        } else {
            j += 1;
            b[j - 1]
        };
        // coincident arrivals are indistinguishable to a single detector
        if out.last() != Some(&v) {
            out.push(v);
        }
    }
    out
}

/// Photon arrivals from an optional two-level emitter plus Poisson background.
///
/// The emitter cycles ground → excited (rate `pump_rate`) → ground with one
/// photon (rate `1/excited_lifetime`), so it never emits twice within one
/// cycle. Every emitted photon is detected.
pub fn simulate_timestamps(spec: &EmitterSpec, duration: f64, seed: u64) -> Result<TimestampStream> {
    spec.validate()?;
    if !(duration > 0.0) || !duration.is_finite() {
        return Err(Error::invalid("duration must be > 0"));
    }
    let mut emit_rng = rng_from_seed(derive_seed(seed, 0));
    let mut bg_rng = rng_from_seed(derive_seed(seed, 1));
    let mut emitted = Vec::new();
    if spec.single_emitter {
        let kp = spec.pump_rate;
        let kr = 1.0 / spec.excited_lifetime;
        let mut t = 0.0;
        loop {
            t += exp1(&mut emit_rng) / kp + exp1(&mut emit_rng) / kr;
            if t >= duration {
                break;
            }
            emitted.push(t);
        }
    }
    let mut background = Vec::new();
    if spec.background_rate > 0.0 {
        let mut t = 0.0;
        loop {
            t += exp1(&mut bg_rng) / spec.background_rate;
            if t >= duration {
                break;
            }
            background.push(t);
        }
    }
    Ok(TimestampStream {
        times: merge(&emitted, &background),
        duration,
    })
}

/// Routes each photon of `stream` to one of two detectors with probability ½.
pub fn split_stream(stream: &TimestampStream, seed: u64) -> (TimestampStream, TimestampStream) {
    let mut rng = rng_from_seed(derive_seed(seed, 2));
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for &t in &stream.times {
        if rng.random::<bool>() {
            a.push(t);
        } else {
            b.push(t);
        }
    }
    (
        TimestampStream {
            times: a,
            duration: stream.duration,
        },
        TimestampStream {
            times: b,
            duration: stream.duration,
        },
    )
}
