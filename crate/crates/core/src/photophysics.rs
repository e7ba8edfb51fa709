//! Five-level NV⁻/NV⁰ rate-equation model.
//!
//! Levels, in vector order: NV⁻ ground, NV⁻ excited, NV⁻ singlet, NV⁰ ground,
//! NV⁰ excited. Transitions (rates in 1/s, `P` in mW):
//!
//! | from → to        | rate                                              |
//! |------------------|---------------------------------------------------|
//! | g⁻ → e⁻          | `pump_rate_minus · P`                             |
//! | e⁻ → g⁻          | `rad_decay_minus`                                 |
//! | e⁻ → singlet     | `isc_up`                                          |
//! | singlet → g⁻     | `isc_down`                                        |
//! | g⁰ → e⁰          | `pump_rate_zero · P`                              |
//! | e⁰ → g⁰          | `rad_decay_zero`                                  |
//! | e⁻ → g⁰          | `ionize_coeff · P² · bias.ionization_factor`      |
//! | g⁰ → g⁻          | `recomb_coeff · P²`                               |
//! | g⁻ → e⁰          | `hole_capture_coeff · P_h · bias.hole_density_factor` |
//!
//! `P_h` is the power that generated the hole pool: the current power while
//! the laser is on, and the last nonzero power during dark intervals. Hole
//! capture leaves NV⁰ in its excited state, so the dark tail is NV⁰ light.

use nalgebra::{DMatrix, DVector, SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::fitting::{lm_fit, Bound, Dataset, LmOptions, ModelId};
use crate::{Error, Result};

pub const N_LEVELS: usize = 5;
pub const G_MINUS: usize = 0;
pub const E_MINUS: usize = 1;
pub const SINGLET: usize = 2;
pub const G_ZERO: usize = 3;
pub const E_ZERO: usize = 4;

type Gen = SMatrix<f64, N_LEVELS, N_LEVELS>;
type Pop = SVector<f64, N_LEVELS>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateParams {
    #[serde(rename = "pump_rate_minus_per_s_per_mW")]
    pub pump_rate_minus: f64,
    #[serde(rename = "pump_rate_zero_per_s_per_mW")]
    pub pump_rate_zero: f64,
    #[serde(rename = "rad_decay_minus_per_s")]
    pub rad_decay_minus: f64,
    #[serde(rename = "rad_decay_zero_per_s")]
    pub rad_decay_zero: f64,
    #[serde(rename = "isc_up_per_s")]
    pub isc_up: f64,
    #[serde(rename = "isc_down_per_s")]
    pub isc_down: f64,
    #[serde(rename = "ionize_coeff_per_s_per_mW2")]
    pub ionize_coeff: f64,
    #[serde(rename = "recomb_coeff_per_s_per_mW2")]
    pub recomb_coeff: f64,
    #[serde(rename = "hole_capture_coeff_per_s_per_mW")]
    pub hole_capture_coeff: f64,
    pub detection_efficiency: f64,
    #[serde(rename = "background_slope_cps_per_mW")]
    pub background_slope: f64,
}

impl RateParams {
    pub fn validate(&self) -> Result<()> {
        let rates = [
            ("pump_rate_minus", self.pump_rate_minus),
            ("pump_rate_zero", self.pump_rate_zero),
            ("rad_decay_minus", self.rad_decay_minus),
            ("rad_decay_zero", self.rad_decay_zero),
            ("isc_up", self.isc_up),
            ("isc_down", self.isc_down),
            ("ionize_coeff", self.ionize_coeff),
            ("recomb_coeff", self.recomb_coeff),
            ("hole_capture_coeff", self.hole_capture_coeff),
            ("background_slope", self.background_slope),
        ];
        for (name, v) in rates {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.detection_efficiency > 0.0 && self.detection_efficiency <= 1.0) {
            return Err(Error::invalid(format!(
                "detection_efficiency must lie in (0, 1], got {}",
                self.detection_efficiency
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BiasTag {
    ZeroBias,
    Biased,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasMode {
    pub tag: BiasTag,
    pub hole_density_factor: f64,
    /// Multiplies `ionize_coeff`. Defaults to 1 when absent from JSON.
    #[serde(default = "one")]
    pub ionization_factor: f64,
}

fn one() -> f64 {
    1.0
}

impl BiasMode {
    pub fn new(tag: BiasTag, hole_density_factor: f64) -> Self {
        BiasMode {
            tag,
            hole_density_factor,
            ionization_factor: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.hole_density_factor >= 0.0) || !self.hole_density_factor.is_finite() {
            return Err(Error::invalid("hole_density_factor must be finite and >= 0"));
        }
        if !(self.ionization_factor >= 0.0) || !self.ionization_factor.is_finite() {
            return Err(Error::invalid("ionization_factor must be finite and >= 0"));
        }
        Ok(())
    }
}

/// Weights applied to NV⁻ and NV⁰ radiative decay by the detection optics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionBand {
    pub weight_minus: f64,
    pub weight_zero: f64,
}

impl DetectionBand {
    /// 650 nm long-pass: NV⁻ emission only.
    pub const LONG_PASS_650: DetectionBand = DetectionBand {
        weight_minus: 1.0,
        weight_zero: 0.0,
    };

    /// Every emitted photon counts.
    pub const ALL: DetectionBand = DetectionBand {
        weight_minus: 1.0,
        weight_zero: 1.0,
    };

    pub fn new(weight_minus: f64, weight_zero: f64) -> Result<Self> {
        if !(weight_minus >= 0.0 && weight_zero >= 0.0) || weight_minus + weight_zero == 0.0 {
            return Err(Error::invalid("band weights must be >= 0 and not both zero"));
        }
        Ok(DetectionBand {
            weight_minus,
            weight_zero,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StatePopulations {
    pub levels: [f64; N_LEVELS],
}

impl StatePopulations {
    pub fn new(levels: [f64; N_LEVELS]) -> Result<Self> {
        let s = StatePopulations { levels };
        s.validate()?;
        Ok(s)
    }

    pub fn pure(level: usize) -> Self {
        let mut levels = [0.0; N_LEVELS];
        levels[level] = 1.0;
        StatePopulations { levels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid(format!(
                "populations must lie in [0, 1]: {:?}",
                self.levels
            )));
        }
        let sum: f64 = self.levels.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("populations sum to {sum}, not 1")));
        }
        Ok(())
    }

    pub fn nv_minus(&self) -> f64 {
        self.levels[G_MINUS] + self.levels[E_MINUS] + self.levels[SINGLET]
    }

    pub fn nv_zero(&self) -> f64 {
        self.levels[G_ZERO] + self.levels[E_ZERO]
    }

    fn from_vector(v: &Pop) -> Self {
        let mut levels = [0.0; N_LEVELS];
        for (l, x) in levels.iter_mut().zip(v.iter()) {
            // integration noise below the tolerance can leave tiny negatives
            *l = x.clamp(0.0, 1.0);
        }
        StatePopulations { levels }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PLCurve {
    pub times: Vec<f64>,
    pub counts_rate: Vec<f64>,
    pub populations: Option<Vec<StatePopulations>>,
}

/// Piecewise-constant excitation power: `(duration_s, power_mW)` segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerSchedule {
    pub segments: Vec<(f64, f64)>,
}

impl PowerSchedule {
    pub fn constant(duration: f64, power: f64) -> Self {
        PowerSchedule {
            segments: vec![(duration, power)],
        }
    }

    /// Laser on for `pulse` seconds, then dark for `dark` seconds.
    pub fn pulse(power: f64, pulse: f64, dark: f64) -> Self {
        PowerSchedule {
            segments: vec![(pulse, power), (dark, 0.0)],
        }
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.0).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::invalid("power schedule has no segments"));
        }
        for &(d, p) in &self.segments {
            if !(d >= 0.0) || !d.is_finite() || !(p >= 0.0) || !p.is_finite() {
                return Err(Error::invalid(format!(
                    "bad schedule segment ({d} s, {p} mW)"
                )));
            }
        }
        if !(self.duration() > 0.0) {
            return Err(Error::invalid("schedule duration must be > 0"));
        }
        Ok(())
    }
}

/// Generator matrix: entry `(i, j)` is the rate i → j, diagonal makes rows sum to 0.
pub fn rate_matrix(params: &RateParams, power: f64, hole_power: f64, bias: &BiasMode) -> Gen {
    let p = params;
    let mut q = Gen::zeros();
    q[(G_MINUS, E_MINUS)] = p.pump_rate_minus * power;
    q[(E_MINUS, G_MINUS)] = p.rad_decay_minus;
    q[(E_MINUS, SINGLET)] = p.isc_up;
    q[(SINGLET, G_MINUS)] = p.isc_down;
    q[(G_ZERO, E_ZERO)] = p.pump_rate_zero * power;
    q[(E_ZERO, G_ZERO)] = p.rad_decay_zero;
    q[(E_MINUS, G_ZERO)] = p.ionize_coeff * power * power * bias.ionization_factor;
    q[(G_ZERO, G_MINUS)] = p.recomb_coeff * power * power;
    q[(G_MINUS, E_ZERO)] = p.hole_capture_coeff * hole_power * bias.hole_density_factor;
    for i in 0..N_LEVELS {
        let out: f64 = (0..N_LEVELS).filter(|&j| j != i).map(|j| q[(i, j)]).sum();
        q[(i, i)] = -out;
    }
    q
}

/// Detected count rate for a population vector, background included.
pub fn pl_rate(
    params: &RateParams,
    pops: &StatePopulations,
    power: f64,
    band: &DetectionBand,
) -> f64 {
    emission_rate(params, pops, band) + params.background_slope * power
}

fn emission_rate(params: &RateParams, pops: &StatePopulations, band: &DetectionBand) -> f64 {
    params.detection_efficiency
        * (band.weight_minus * params.rad_decay_minus * pops.levels[E_MINUS]
            + band.weight_zero * params.rad_decay_zero * pops.levels[E_ZERO])
}

/// Strongly connected classes with no outgoing rate.
fn closed_classes(q: &Gen) -> Vec<Vec<usize>> {
    let mut reach = [[false; N_LEVELS]; N_LEVELS];
    for (i, row) in reach.iter_mut().enumerate() {
        row[i] = true;
        for (j, r) in row.iter_mut().enumerate() {
            if i != j && q[(i, j)] > 0.0 {
                *r = true;
            }
        }
    }
    for k in 0..N_LEVELS {
        for i in 0..N_LEVELS {
            for j in 0..N_LEVELS {
                if reach[i][k] && reach[k][j] {
                    reach[i][j] = true;
                }
            }
        }
    }
    let mut classes: Vec<Vec<usize>> = Vec::new();
    let mut seen = [false; N_LEVELS];
    for i in 0..N_LEVELS {
        if seen[i] {
            continue;
        }
        let class: Vec<usize> = (0..N_LEVELS).filter(|&j| reach[i][j] && reach[j][i]).collect();
        for &j in &class {
            seen[j] = true;
        }
        let closed = (0..N_LEVELS).all(|j| !reach[i][j] || class.contains(&j));
        if closed {
            classes.push(class);
        }
    }
    classes
}

/// Stationary distribution of the chain restricted to one closed class.
fn class_stationary(q: &Gen, class: &[usize]) -> Result<Pop> {
    let n = class.len();
    let mut a = DMatrix::zeros(n, n);
    for (r, &i) in class.iter().enumerate() {
        for (c, &j) in class.iter().enumerate() {
            a[(c, r)] = q[(i, j)];
        }
    }
    for c in 0..n {
        a[(n - 1, c)] = 1.0;
    }
    let mut b = DVector::zeros(n);
    b[n - 1] = 1.0;
    let x = a
        .lu()
        .solve(&b)
        .ok_or_else(|| Error::NonConvergence("singular class generator".into()))?;
    let mut out = Pop::zeros();
    for (r, &i) in class.iter().enumerate() {
        out[i] = x[r].max(0.0);
    }
    let s = out.sum();
    Ok(out / s)
}

fn stationary(q: &Gen, init: Option<&StatePopulations>) -> Result<Pop> {
    let classes = closed_classes(q);
    if classes.len() == 1 {
        return class_stationary(q, &classes[0]);
    }
    let init = init.ok_or_else(|| {
        Error::NonConvergence(format!(
            "{} closed classes {:?}; the stationary state depends on the initial populations",
            classes.len(),
            classes
        ))
    })?;
    // Absorption probabilities from transient states into each closed class.
    let recurrent: Vec<usize> = classes.iter().flatten().copied().collect();
    let transient: Vec<usize> = (0..N_LEVELS).filter(|i| !recurrent.contains(i)).collect();
    let nt = transient.len();
    let mut absorb = vec![vec![0.0; classes.len()]; N_LEVELS];
    for (c, class) in classes.iter().enumerate() {
        for &i in class {
            absorb[i][c] = 1.0;
        }
    }
    if nt > 0 {
        let mut a = DMatrix::zeros(nt, nt);
        let mut b = DMatrix::zeros(nt, classes.len());
        for (r, &i) in transient.iter().enumerate() {
            for (c, &j) in transient.iter().enumerate() {
                a[(r, c)] = q[(i, j)];
            }
            for (c, class) in classes.iter().enumerate() {
                b[(r, c)] = -class.iter().map(|&j| q[(i, j)]).sum::<f64>();
            }
        }
        let x = a
            .lu()
            .solve(&b)
            .ok_or_else(|| Error::NonConvergence("singular transient block".into()))?;
        for (r, &i) in transient.iter().enumerate() {
            for c in 0..classes.len() {
                absorb[i][c] = x[(r, c)];
            }
        }
    }
    let mut out = Pop::zeros();
    for (c, class) in classes.iter().enumerate() {
        let mass: f64 = (0..N_LEVELS).map(|i| init.levels[i] * absorb[i][c]).sum();
        if mass > 0.0 {
            out += class_stationary(q, class)? * mass;
        }
    }
    Ok(out)
}

fn check_inputs(params: &RateParams, power: f64, bias: &BiasMode) -> Result<()> {
    params.validate()?;
    bias.validate()?;
    if !(power >= 0.0) || !power.is_finite() {
        return Err(Error::invalid(format!("power must be finite and >= 0, got {power}")));
    }
    Ok(())
}

/// Stationary populations and detected count rate under constant illumination.
///
/// Fails with `NonConvergence` when the rates leave more than one closed
/// class (for example at zero power, where both ground states are
/// absorbing); use [`steady_state_from`] to resolve those cases.
pub fn steady_state(
    params: &RateParams,
    power: f64,
    bias: &BiasMode,
    band: &DetectionBand,
) -> Result<(StatePopulations, f64)> {
    check_inputs(params, power, bias)?;
    let q = rate_matrix(params, power, power, bias);
    let pops = StatePopulations::from_vector(&stationary(&q, None)?);
    let rate = pl_rate(params, &pops, power, band);
    Ok((pops, rate))
}

/// As [`steady_state`], but splits population among closed classes
/// according to absorption from `init` when the stationary state is not
/// unique.
pub fn steady_state_from(
    params: &RateParams,
    power: f64,
    bias: &BiasMode,
    band: &DetectionBand,
    init: &StatePopulations,
) -> Result<(StatePopulations, f64)> {
    check_inputs(params, power, bias)?;
    init.validate()?;
    let q = rate_matrix(params, power, power, bias);
    let pops = StatePopulations::from_vector(&stationary(&q, Some(init))?);
    let rate = pl_rate(params, &pops, power, band);
    Ok((pops, rate))
}

// Dormand–Prince 5(4) tableau. The system is autonomous within a segment,
// so the node offsets are not needed.
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

const ATOL: f64 = 1e-12;
const RTOL: f64 = 1e-10;

/// Integrates `dp/dt = Qᵀp` from `p` over `span`, returning the end state.
/// `h` carries the step size between calls.
fn dopri_advance(qt: &Gen, p: &mut Pop, span: f64, h: &mut f64) -> Result<()> {
    let mut t = 0.0;
    let mut k = [Pop::zeros(); 7];
    while t < span {
        let step = h.min(span - t);
        let last = step >= span - t;
        k[0] = qt * *p;
        for s in 1..7 {
            let mut y = *p;
            for (r, a) in A[s].iter().enumerate().take(s) {
                if *a != 0.0 {
                    y += k[r] * (a * step);
                }
            }
            k[s] = qt * y;
        }
        let mut y5 = *p;
        let mut err = Pop::zeros();
        for s in 0..7 {
            y5 += k[s] * (B5[s] * step);
            err += k[s] * ((B5[s] - B4[s]) * step);
        }
        let norm = (0..N_LEVELS)
            .map(|i| {
                let sc = ATOL + RTOL * p[i].abs().max(y5[i].abs());
                (err[i] / sc).powi(2)
            })
            .sum::<f64>()
            / N_LEVELS as f64;
        let norm = norm.sqrt();
        if norm <= 1.0 {
            *p = y5;
            t = if last { span } else { t + step };
            let grow = if norm == 0.0 { 5.0 } else { (0.9 * norm.powf(-0.2)).min(5.0) };
            // a step truncated at the span end says nothing about the next one
            if step >= *h || grow < 1.0 {
                *h = step * grow;
            }
        } else {
            *h = step * (0.9 * norm.powf(-0.2)).max(0.2);
        }
        if !(*h > 1e-18) || !h.is_finite() {
            return Err(Error::StepSize(format!(
                "adaptive step collapsed to {h:e} s; rates are too stiff for the explicit integrator"
            )));
        }
    }
    Ok(())
}

/// Integrates the rate equations under a piecewise-constant power schedule,
/// sampling every `dt` seconds from 0 through the schedule end.
///
/// `dt` is the output spacing; the internal step is adaptive (Dormand–Prince
/// 5(4), absolute tolerance 1e-12) and never crosses a schedule boundary.
pub fn evolve(
    params: &RateParams,
    init: &StatePopulations,
    schedule: &PowerSchedule,
    bias: &BiasMode,
    band: &DetectionBand,
    dt: f64,
) -> Result<PLCurve> {
    params.validate()?;
    bias.validate()?;
    init.validate()?;
    schedule.validate()?;
    let total = schedule.duration();
    if !(dt > 0.0) || !dt.is_finite() || dt > total {
        return Err(Error::StepSize(format!(
            "output step {dt} s must be positive and no longer than the schedule ({total} s)"
        )));
    }
    let n_out = (total / dt * (1.0 + 1e-12)).floor() as usize + 1;

    // Segment boundaries and the hole-pool power in effect during each.
    let mut bounds = Vec::with_capacity(schedule.segments.len());
    let mut t0 = 0.0;
    let mut pool = 0.0;
    for &(d, p) in &schedule.segments {
        if p > 0.0 {
            pool = p;
        }
        bounds.push((t0, t0 + d, p, pool));
        t0 += d;
    }

    let mut p = Pop::from_column_slice(&init.levels);
    let mut times = Vec::with_capacity(n_out);
    let mut rates = Vec::with_capacity(n_out);
    let mut pops = Vec::with_capacity(n_out);
    let mut h = dt.min(1e-10);
    let mut t = 0.0;
    let mut seg = 0;
    for i in 0..n_out {
        let target = (i as f64 * dt).min(total);
        while t < target {
            while seg + 1 < bounds.len() && t >= bounds[seg].1 {
                seg += 1;
            }
            let (_, end, power, hole) = bounds[seg];
            let stop = if seg + 1 < bounds.len() { end.min(target) } else { target };
            let qt = rate_matrix(params, power, hole, bias).transpose();
            dopri_advance(&qt, &mut p, stop - t, &mut h)?;
            t = stop;
        }
        let power_now = bounds
            .iter()
            .find(|b| target < b.1)
            .map_or(bounds.last().unwrap().2, |b| b.2);
        let sp = StatePopulations::from_vector(&p);
        times.push(target);
        rates.push(pl_rate(params, &sp, power_now, band).max(0.0));
        pops.push(sp);
    }
    Ok(PLCurve {
        times,
        counts_rate: rates,
        populations: Some(pops),
    })
}

/// Unclamped population sum at every output sample; used for conservation checks.
pub fn population_sums(curve: &PLCurve) -> Vec<f64> {
    curve
        .populations
        .as_ref()
        .map(|ps| ps.iter().map(|p| p.levels.iter().sum()).collect())
        .unwrap_or_default()
}

/// Pulse length, tail window and sampling used for the dark-tail analysis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TailProtocol {
    pub pulse_s: f64,
    /// Fit window, measured from the start of the pulse.
    pub window_s: (f64, f64),
    pub dt_s: f64,
    pub band: DetectionBand,
}

impl Default for TailProtocol {
    fn default() -> Self {
        TailProtocol {
            pulse_s: 2e-6,
            window_s: (4e-6, 14e-6),
            dt_s: 2e-9,
            band: DetectionBand::ALL,
        }
    }
}

/// Relative tail amplitude (vs the in-pulse rate) below which no decay is reported.
pub const TAIL_FLOOR: f64 = 1e-12;

/// Time constant of the dark PL tail after a pulse, from a single
/// exponential fit over the protocol window. The emitter starts dark-adapted
/// (pure NV⁰ ground state), which is where hole capture leaves it.
pub fn dark_tail_tau(params: &RateParams, power_during_pulse: f64, bias: &BiasMode) -> Result<f64> {
    dark_tail_tau_with(params, power_during_pulse, bias, &TailProtocol::default())
}

pub fn dark_tail_tau_with(
    params: &RateParams,
    power_during_pulse: f64,
    bias: &BiasMode,
    proto: &TailProtocol,
) -> Result<f64> {
    if !(power_during_pulse > 0.0) {
        return Err(Error::invalid("pulse power must be > 0"));
    }
    let (lo, hi) = proto.window_s;
    if !(proto.pulse_s > 0.0 && proto.pulse_s <= lo && lo < hi) {
        return Err(Error::invalid("tail window must start after the pulse and be non-empty"));
    }
    let curve = evolve(
        params,
        &StatePopulations::pure(G_ZERO),
        &PowerSchedule::pulse(power_during_pulse, proto.pulse_s, hi - proto.pulse_s),
        bias,
        &proto.band,
        proto.dt_s,
    )?;
    let pops = curve.populations.as_ref().unwrap();
    let on_level = curve
        .times
        .iter()
        .zip(pops)
        .filter(|(t, _)| **t < proto.pulse_s)
        .map(|(_, p)| emission_rate(params, p, &proto.band))
        .fold(0.0_f64, f64::max);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (t, p) in curve.times.iter().zip(pops) {
        if *t >= lo - 1e-15 && *t <= hi + 1e-15 {
            xs.push(t - lo);
            ys.push(emission_rate(params, p, &proto.band));
        }
    }
    let y_start = ys.first().copied().unwrap_or(0.0);
    if !(on_level > 0.0) || !(y_start > TAIL_FLOOR * on_level) {
        return Err(Error::NoDecay(format!(
            "tail amplitude {y_start:e} is below the floor ({:e} of the in-pulse rate)",
            TAIL_FLOOR
        )));
    }
    let ys: Vec<f64> = ys.iter().map(|y| y / y_start).collect();
    let y_end = *ys.last().unwrap();
    if y_end >= 0.5 {
        return Err(Error::NoDecay(format!(
            "tail decays by less than half across the window (end/start = {y_end})"
        )));
    }
    // Log-linear slope as a starting point.
    let k = ys.iter().position(|&y| y < 0.1).unwrap_or(ys.len() - 1).max(1);
    let tau0 = xs[k] / (1.0 / ys[k]).ln();
    let fit = lm_fit(
        &ModelId::ExpDecay,
        &Dataset::new(xs, ys),
        &[0.0, 1.0, tau0],
        Some(&[Bound::fixed(0.0), Bound::FREE, Bound::POSITIVE]),
        &LmOptions::default(),
    )?;
    Ok(fit.value("tau"))
}

/// Named parameter set plus the two bias conditions it was tuned for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub name: String,
    pub version: u32,
    pub params: RateParams,
    pub zero_bias: BiasMode,
    pub biased: BiasMode,
}

impl Calibration {
    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.zero_bias.validate()?;
        self.biased.validate()
    }

    pub fn bias(&self, tag: BiasTag) -> BiasMode {
        match tag {
            BiasTag::ZeroBias => self.zero_bias,
            BiasTag::Biased => self.biased,
        }
    }
}

const DEFAULT_CALIBRATION: &str = include_str!("../data/nv2_default_v1.json");

/// The shipped parameter set (`data/nv2_default_v1.json`).
pub fn default_calibration() -> Calibration {
    serde_json::from_str(DEFAULT_CALIBRATION).expect("bundled calibration is valid JSON")
}

/// Observables the calibration is tuned against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorObservables {
    pub spike_decay_s: f64,
    pub rise_s: f64,
    pub tail_1mw_s: f64,
    pub tail_sweep_s: Vec<(f64, f64)>,
    pub hyperbolic_tau0_s: f64,
    pub crossing_mw: f64,
    pub biased_peak_mw: f64,
}

pub const TAIL_SWEEP_MW: [f64; 6] = [0.5, 1.0, 2.0, 4.0, 8.0, 16.0];

/// Spike after turn-on from pure NV⁻ under bias, fit by a single exponential
/// after the excited-state transient has settled.
pub fn spike_decay_tau(params: &RateParams, power: f64, bias: &BiasMode) -> Result<f64> {
    let curve = evolve(
        params,
        &StatePopulations::pure(G_MINUS),
        &PowerSchedule::constant(2e-6, power),
        bias,
        &DetectionBand::LONG_PASS_650,
        1e-9,
    )?;
    let (xs, ys) = after(&curve, 50e-9, params.background_slope * power);
    let y_last = *ys.last().unwrap();
    let fit = lm_fit(
        &ModelId::ExpDecay,
        &Dataset::new(xs, ys.clone()),
        &[y_last, ys[0] - y_last, 200e-9],
        None,
        &LmOptions::default(),
    )?;
    if fit.value("A") <= 0.0 {
        return Err(Error::NoDecay("no PL spike after turn-on".into()));
    }
    Ok(fit.value("tau"))
}

/// Charging rise from pure NV⁰, fit by a double exponential; returns the
/// time constant of the rising (negative-amplitude) component, or the slower
/// of the two when both rise.
pub fn rise_tau(params: &RateParams, power: f64, bias: &BiasMode) -> Result<f64> {
    let curve = evolve(
        params,
        &StatePopulations::pure(G_ZERO),
        &PowerSchedule::constant(2e-6, power),
        bias,
        &DetectionBand::LONG_PASS_650,
        1e-9,
    )?;
    let (xs, ys) = after(&curve, 80e-9, params.background_slope * power);
    let scale = *ys.last().unwrap();
    if !(scale > 0.0) {
        return Err(Error::NoDecay("no NV⁻ emission during the pulse".into()));
    }
    let ys: Vec<f64> = ys.iter().map(|y| y / scale).collect();
    let data = Dataset::new(xs, ys);
    let mut best: Option<crate::fitting::FitResult> = None;
    for init in [
        [1.0, -0.6, 150e-9, -0.6, 150e-9],
        [1.0, 0.3, 150e-9, -1.2, 100e-9],
        [1.0, -1.2, 200e-9, 0.3, 200e-9],
    ] {
        if let Ok(f) = lm_fit(&ModelId::DoubleExp, &data, &init, None, &LmOptions::default()) {
            if best.as_ref().is_none_or(|b| f.chi2 < b.chi2) {
                best = Some(f);
            }
        }
    }
    let fit = best.ok_or_else(|| Error::Fit("double exponential did not converge".into()))?;
    let (a1, t1, a2) = (fit.value("A1"), fit.value("tau1"), fit.value("A2"));
    let t2 = t1 + fit.value("dtau");
    let tau = match (a1 < 0.0, a2 < 0.0) {
        (true, false) => t1,
        (false, true) => t2,
        // both rising: the faster one is the shelving transient
        (true, true) => t2,
        (false, false) => return Err(Error::NoDecay("no rising component".into())),
    };
    Ok(tau)
}

fn after(curve: &PLCurve, t_min: f64, background: f64) -> (Vec<f64>, Vec<f64>) {
    curve
        .times
        .iter()
        .zip(&curve.counts_rate)
        .filter(|(t, _)| **t >= t_min)
        .map(|(t, y)| (*t, y - background))
        .unzip()
}

/// Background-corrected 650 nm long-pass steady-state rate.
pub fn saturation_rate(params: &RateParams, power: f64, bias: &BiasMode) -> Result<f64> {
    let (_, rate) = steady_state(params, power, bias, &DetectionBand::LONG_PASS_650)?;
    Ok(rate - params.background_slope * power)
}

/// Smallest power in `[lo, hi]` where the zero-bias and biased saturation
/// curves cross, located by scanning then bisection.
pub fn saturation_crossing(cal: &Calibration, lo: f64, hi: f64) -> Result<f64> {
    let diff = |p: f64| -> Result<f64> {
        Ok(saturation_rate(&cal.params, p, &cal.zero_bias)?
            - saturation_rate(&cal.params, p, &cal.biased)?)
    };
    let n = 400;
    let mut a = lo;
    let mut fa = diff(a)?;
    for i in 1..=n {
        let b = lo + (hi - lo) * i as f64 / n as f64;
        let fb = diff(b)?;
        if fa == 0.0 {
            return Ok(a);
        }
        if fa.signum() != fb.signum() {
            let (mut x0, mut x1, mut f0) = (a, b, fa);
            for _ in 0..100 {
                let m = 0.5 * (x0 + x1);
                let fm = diff(m)?;
                if fm.signum() == f0.signum() {
                    x0 = m;
                    f0 = fm;
                } else {
                    x1 = m;
                }
            }
            return Ok(0.5 * (x0 + x1));
        }
        a = b;
        fa = fb;
    }
    Err(Error::Fit(format!("saturation curves do not cross in [{lo}, {hi}] mW")))
}

/// Power of maximum background-corrected PL in `[lo, hi]` (golden-section).
pub fn saturation_peak(params: &RateParams, bias: &BiasMode, lo: f64, hi: f64) -> Result<f64> {
    let f = |p: f64| saturation_rate(params, p, bias);
    // coarse scan first, the curve may be monotone
    let n = 200;
    let grid: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &p) in grid.iter().enumerate() {
        let v = f(p)?;
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    if best == 0 || best == n {
        return Err(Error::Fit(format!(
            "no interior maximum in [{lo}, {hi}] mW; the curve is monotone"
        )));
    }
    let (mut a, mut b) = (grid[best - 1], grid[best + 1]);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..100 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if f(c)? > f(d)? {
            b = d;
        } else {
            a = c;
        }
    }
    Ok(0.5 * (a + b))
}

/// All calibration observables for a parameter set.
pub fn anchor_observables(cal: &Calibration) -> Result<AnchorObservables> {
    let p = &cal.params;
    let spike = spike_decay_tau(p, 1.0, &cal.biased)?;
    let rise = rise_tau(p, 1.0, &cal.zero_bias)?;
    let mut sweep = Vec::new();
    for &pw in &TAIL_SWEEP_MW {
        sweep.push((pw, dark_tail_tau(p, pw, &cal.zero_bias)?));
    }
    let tail_1 = sweep[1].1;
    let (xs, ys): (Vec<f64>, Vec<f64>) = sweep.iter().copied().unzip();
    let hyp = lm_fit(
        &ModelId::Hyperbolic,
        &Dataset::new(xs, ys),
        &[250e-9, 200e-9],
        None,
        &LmOptions::default(),
    )?;
    Ok(AnchorObservables {
        spike_decay_s: spike,
        rise_s: rise,
        tail_1mw_s: tail_1,
        tail_sweep_s: sweep,
        hyperbolic_tau0_s: hyp.value("tau0"),
        crossing_mw: saturation_crossing(cal, 0.5, 20.0)?,
        biased_peak_mw: saturation_peak(p, &cal.biased, 0.2, 20.0)?,
    })
}
