//! Emission spectra: NV⁻/NV⁰ reference construction, non-negative
//! decomposition, window integration and the dark-tail spectral test.
//!
//! Integrated areas (normalization and decomposition weights) are taken
//! over 550–750 nm with a ±2 nm notch around the 572 nm Raman line, unless an
//! [`AreaConvention`] says otherwise.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpectrumMeta {
    #[serde(rename = "bias_V")]
    pub bias_v: f64,
    #[serde(rename = "power_mW")]
    pub power_mw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    pub wavelength_nm: Vec<f64>,
    pub intensity: Vec<f64>,
    #[serde(default)]
    pub meta: SpectrumMeta,
}

impl Spectrum {
    pub fn new(wavelength_nm: Vec<f64>, intensity: Vec<f64>) -> Result<Self> {
        let s = Spectrum {
            wavelength_nm,
            intensity,
            meta: SpectrumMeta::default(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.wavelength_nm.len() != self.intensity.len() {
            return Err(Error::invalid("wavelength and intensity lengths differ"));
        }
        if self.wavelength_nm.len() < 2 {
            return Err(Error::invalid("a spectrum needs at least two points"));
        }
        if self.wavelength_nm.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::invalid("wavelength grid must be strictly increasing"));
        }
        if self
            .wavelength_nm
            .iter()
            .chain(&self.intensity)
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("spectrum contains non-finite values"));
        }
        Ok(())
    }

    /// Linear interpolation at `x`; zero outside the grid.
    pub fn at(&self, x: f64) -> f64 {
        let w = &self.wavelength_nm;
        if x < w[0] || x > w[w.len() - 1] {
            return 0.0;
        }
        let k = w.partition_point(|&v| v <= x);
        if k == w.len() {
            return self.intensity[k - 1];
        }
        let (x0, x1) = (w[k - 1], w[k]);
        let (y0, y1) = (self.intensity[k - 1], self.intensity[k]);
        y0 + (y1 - y0) * (x - x0) / (x1 - x0)
    }

    pub fn scaled(&self, c: f64) -> Spectrum {
        Spectrum {
            wavelength_nm: self.wavelength_nm.clone(),
            intensity: self.intensity.iter().map(|v| v * c).collect(),
            meta: self.meta,
        }
    }

    pub fn same_grid(&self, other: &Spectrum) -> bool {
        self.wavelength_nm == other.wavelength_nm
    }

    fn mean_spacing(&self) -> f64 {
        let w = &self.wavelength_nm;
        (w[w.len() - 1] - w[0]) / (w.len() - 1) as f64
    }
}

/// Linear interpolation onto `grid`.
pub fn resample(spectrum: &Spectrum, grid: &[f64]) -> Result<Spectrum> {
    spectrum.validate()?;
    let out = Spectrum {
        wavelength_nm: grid.to_vec(),
        intensity: grid.iter().map(|&x| spectrum.at(x)).collect(),
        meta: spectrum.meta,
    };
    out.validate()?;
    Ok(out)
}

/// Puts two spectra on the coarser of their grids, restricted to the overlap.
pub fn harmonize(a: &Spectrum, b: &Spectrum) -> Result<(Spectrum, Spectrum)> {
    if a.same_grid(b) {
        return Ok((a.clone(), b.clone()));
    }
    let lo = a.wavelength_nm[0].max(b.wavelength_nm[0]);
    let hi = a.wavelength_nm[a.len() - 1].min(b.wavelength_nm[b.len() - 1]);
    let coarse = if a.mean_spacing() >= b.mean_spacing() { a } else { b };
    let grid: Vec<f64> = coarse
        .wavelength_nm
        .iter()
        .copied()
        .filter(|&x| x >= lo && x <= hi)
        .collect();
    if grid.len() < 2 {
        return Err(Error::invalid("spectra do not overlap"));
    }
    Ok((resample(a, &grid)?, resample(b, &grid)?))
}

impl Spectrum {
    pub fn len(&self) -> usize {
        self.wavelength_nm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavelength_nm.is_empty()
    }
}

/// Trapezoidal area over `[lo_nm, hi_nm]`, interpolating at the edges.
pub fn integrate_window(spectrum: &Spectrum, lo_nm: f64, hi_nm: f64) -> Result<f64> {
    if !(lo_nm < hi_nm) {
        return Err(Error::invalid(format!("window [{lo_nm}, {hi_nm}] is empty")));
    }
    let w = &spectrum.wavelength_nm;
    let a = lo_nm.max(w[0]);
    let b = hi_nm.min(w[w.len() - 1]);
    if !(a < b) {
        return Err(Error::EmptyWindow {
            lo: lo_nm,
            hi: hi_nm,
        });
    }
    let mut xs = vec![a];
    xs.extend(w.iter().copied().filter(|&x| x > a && x < b));
    xs.push(b);
    Ok(xs
        .windows(2)
        .map(|p| 0.5 * (p[1] - p[0]) * (spectrum.at(p[0]) + spectrum.at(p[1])))
        .sum())
}

/// Band and optional notch used for integrated areas.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AreaConvention {
    pub lo_nm: f64,
    pub hi_nm: f64,
    /// `(center_nm, half_width_nm)` excluded from the area.
    pub notch: Option<(f64, f64)>,
}

impl Default for AreaConvention {
    fn default() -> Self {
        AreaConvention {
            lo_nm: 550.0,
            hi_nm: 750.0,
            notch: Some((572.0, 2.0)),
        }
    }
}

impl AreaConvention {
    pub fn area(&self, spectrum: &Spectrum) -> Result<f64> {
        let full = integrate_window(spectrum, self.lo_nm, self.hi_nm)?;
        match self.notch {
            Some((c, h)) if c + h > self.lo_nm && c - h < self.hi_nm => {
                let cut = integrate_window(spectrum, (c - h).max(self.lo_nm), (c + h).min(self.hi_nm))
                    .unwrap_or(0.0);
                Ok(full - cut)
            }
            _ => Ok(full),
        }
    }
}

fn normalized(spectrum: &Spectrum, conv: &AreaConvention) -> Result<Spectrum> {
    let area = conv.area(spectrum)?;
    if !(area > 0.0) {
        return Err(Error::AllZero);
    }
    Ok(spectrum.scaled(1.0 / area))
}

/// NV⁻ ZPL height at 637 nm above a straight baseline through 629 and 645 nm.
pub fn zpl_637_height(spectrum: &Spectrum) -> f64 {
    // quadratic baseline through the flanks, excluding the line core
    let flank: Vec<(f64, f64)> = spectrum
        .wavelength_nm
        .iter()
        .zip(&spectrum.intensity)
        .map(|(&w, &v)| ((w - 637.0) / ZPL_MATCH_HALF_WIDTH_NM, v))
        .filter(|&(x, _)| x.abs() <= 1.0 && x.abs() * ZPL_MATCH_HALF_WIDTH_NM > ZPL_CORE_HALF_WIDTH_NM)
        .collect();
    let mid = spectrum.at(637.0);
    if flank.len() < 3 {
        return mid - 0.5 * (spectrum.at(629.0) + spectrum.at(645.0));
    }
    let a = DMatrix::from_fn(flank.len(), 3, |r, c| flank[r].0.powi(c as i32));
    let y = DVector::from_iterator(flank.len(), flank.iter().map(|p| p.1));
    match a.svd(true, true).solve(&y, 1e-12) {
        Ok(b) => mid - b[0],
        Err(_) => mid - 0.5 * (spectrum.at(629.0) + spectrum.at(645.0)),
    }
}

/// NV⁰ reference as `clip(spec_0v − weight·spec_10v, 0)`, normalized to unit
/// area. Both spectra must share a grid (see [`harmonize`]).
pub fn build_nv0_reference(spec_0v: &Spectrum, spec_10v: &Spectrum, weight: f64) -> Result<Spectrum> {
    build_nv0_reference_with(spec_0v, spec_10v, weight, &AreaConvention::default())
}

pub fn build_nv0_reference_with(
    spec_0v: &Spectrum,
    spec_10v: &Spectrum,
    weight: f64,
    conv: &AreaConvention,
) -> Result<Spectrum> {
    spec_0v.validate()?;
    spec_10v.validate()?;
    if !spec_0v.same_grid(spec_10v) {
        return Err(Error::invalid("spectra must share a grid; resample first"));
    }
    if !(weight >= 0.0) || !weight.is_finite() {
        return Err(Error::invalid("subtraction weight must be finite and >= 0"));
    }
    let diff = Spectrum {
        wavelength_nm: spec_0v.wavelength_nm.clone(),
        intensity: spec_0v
            .intensity
            .iter()
            .zip(&spec_10v.intensity)
            .map(|(a, b)| (a - weight * b).max(0.0))
            .collect(),
        meta: spec_0v.meta,
    };
    if diff.intensity.iter().all(|&v| v == 0.0) {
        return Err(Error::AllZero);
    }
    match normalized(&diff, conv) {
        Err(Error::AllZero) | Err(Error::EmptyWindow { .. }) => Err(Error::AllZero),
        r => r,
    }
}

/// Half width of the band around 637 nm used to match the NV⁻ ZPL.
pub const ZPL_CORE_HALF_WIDTH_NM: f64 = 5.0;
pub const ZPL_MATCH_HALF_WIDTH_NM: f64 = 12.0;

/// Subtraction weight that cancels the 637 nm ZPL of `spec_0v` against
/// `spec_10v`: least squares of `spec_0v ≈ w·spec_10v` plus a quadratic
/// baseline over 637 ± 12 nm, so the smooth NV⁰ sideband is taken up by the baseline.
pub fn select_subtraction_weight(spec_0v: &Spectrum, spec_10v: &Spectrum) -> Result<f64> {
    if !spec_0v.same_grid(spec_10v) {
        return Err(Error::invalid("spectra must share a grid; resample first"));
    }
    if !(zpl_637_height(spec_10v) > 0.0) {
        return Err(Error::invalid("the biased spectrum shows no 637 nm ZPL"));
    }
    let rows: Vec<usize> = (0..spec_0v.len())
        .filter(|&i| (spec_0v.wavelength_nm[i] - 637.0).abs() <= ZPL_MATCH_HALF_WIDTH_NM)
        .collect();
    if rows.len() < 4 {
        return Err(Error::invalid("too few grid points around 637 nm"));
    }
    let a = DMatrix::from_fn(rows.len(), 4, |r, c| {
        let i = rows[r];
        let x = (spec_0v.wavelength_nm[i] - 637.0) / ZPL_MATCH_HALF_WIDTH_NM;
        match c {
            0 => spec_10v.intensity[i],
            1 => 1.0,
            2 => x,
            _ => x * x,
        }
    });
    let y = DVector::from_iterator(rows.len(), rows.iter().map(|&i| spec_0v.intensity[i]));
    let sol = a
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| Error::invalid(e.to_string()))?;
    Ok(sol[0].max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceBasis {
    pub ref_minus: Spectrum,
    pub ref_zero: Spectrum,
}

impl ReferenceBasis {
    /// Normalizes both references to unit area; they must share a grid.
    pub fn new(ref_minus: &Spectrum, ref_zero: &Spectrum) -> Result<Self> {
        Self::with_convention(ref_minus, ref_zero, &AreaConvention::default())
    }

    pub fn with_convention(
        ref_minus: &Spectrum,
        ref_zero: &Spectrum,
        conv: &AreaConvention,
    ) -> Result<Self> {
        ref_minus.validate()?;
        ref_zero.validate()?;
        if !ref_minus.same_grid(ref_zero) {
            return Err(Error::invalid("references must share a grid"));
        }
        Ok(ReferenceBasis {
            ref_minus: normalized(ref_minus, conv)?,
            ref_zero: normalized(ref_zero, conv)?,
        })
    }

    pub fn grid(&self) -> &[f64] {
        &self.ref_minus.wavelength_nm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub a_minus: f64,
    pub a_zero: f64,
    pub residual_norm: f64,
    pub fraction_zero: f64,
}

impl DecompositionResult {
    /// Weights relative to a reference area, e.g. the largest NV⁻ area of a
    /// power series.
    pub fn normalized_to(&self, reference_area: f64) -> (f64, f64) {
        (self.a_minus / reference_area, self.a_zero / reference_area)
    }
}

fn residual_norm(s: &[f64], r0: &[f64], r1: &[f64], a: f64, b: f64) -> f64 {
    s.iter()
        .zip(r0)
        .zip(r1)
        .map(|((s, x), y)| (s - a * x - b * y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// `min ‖s − a₋·ref₋ − a₀·ref₀‖` subject to `a ≥ 0`, solved exactly by
/// checking the unconstrained optimum and each face of the active set.
pub fn nnls_decompose(spectrum: &Spectrum, basis: &ReferenceBasis) -> Result<DecompositionResult> {
    spectrum.validate()?;
    if spectrum.wavelength_nm != basis.grid() {
        return Err(Error::invalid("spectrum is not on the basis grid; resample first"));
    }
    let s = &spectrum.intensity;
    let r0 = &basis.ref_minus.intensity;
    let r1 = &basis.ref_zero.intensity;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let g00 = dot(r0, r0);
    let g11 = dot(r1, r1);
    let g01 = dot(r0, r1);
    let b0 = dot(r0, s);
    let b1 = dot(r1, s);
    let det = g00 * g11 - g01 * g01;
    if !(det > 1e-12 * g00 * g11) {
        return Err(Error::SingularBasis);
    }
    let mut candidates = vec![(0.0, 0.0)];
    let (ua, ub) = ((b0 * g11 - b1 * g01) / det, (b1 * g00 - b0 * g01) / det);
    if ua >= 0.0 && ub >= 0.0 {
        candidates.push((ua, ub));
    }
    candidates.push(((b0 / g00).max(0.0), 0.0));
    candidates.push((0.0, (b1 / g11).max(0.0)));
    let (a, b, res) = candidates
        .into_iter()
        .map(|(a, b)| (a, b, residual_norm(s, r0, r1, a, b)))
        .fold((0.0, 0.0, f64::INFINITY), |best, c| if c.2 < best.2 { c } else { best });
    let total = a + b;
    Ok(DecompositionResult {
        a_minus: a,
        a_zero: b,
        residual_norm: res,
        fraction_zero: if total > 0.0 { b / total } else { 0.0 },
    })
}

/// Residual norm for given weights (for optimality checks).
pub fn decomposition_residual(spectrum: &Spectrum, basis: &ReferenceBasis, a_minus: f64, a_zero: f64) -> f64 {
    residual_norm(
        &spectrum.intensity,
        &basis.ref_minus.intensity,
        &basis.ref_zero.intensity,
        a_minus,
        a_zero,
    )
}

/// Tail detection windows of the time-resolved measurement.
pub const TAIL_WINDOWS_NM: [(f64, f64); 3] = [(550.0, 700.0), (600.0, 700.0), (650.0, 700.0)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Emitter {
    #[serde(rename = "NV-")]
    NvMinus,
    #[serde(rename = "NV0")]
    NvZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailPoint {
    pub lo_nm: f64,
    pub hi_nm: f64,
    pub tail: f64,
    pub spectral_minus: f64,
    pub spectral_zero: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailCorrelation {
    pub rms_minus: f64,
    pub rms_zero: f64,
    pub emitter: Emitter,
    pub points: Vec<TailPoint>,
}

/// Compares window-integrated tail signal with the references' window areas.
///
/// Everything is normalized to its value in the widest window (550–700 nm
/// for the standard set); the reference whose points lie closer to `y = x`
/// (lower RMS distance) is reported as the emitter.
pub fn tail_correlation(
    tail_areas: &[((f64, f64), f64)],
    basis: &ReferenceBasis,
) -> Result<TailCorrelation> {
    if tail_areas.len() < 2 {
        return Err(Error::invalid("tail correlation needs at least two windows"));
    }
    if tail_areas.iter().any(|(_, v)| !(*v > 0.0)) {
        return Err(Error::invalid("tail areas must be positive"));
    }
    let widest = tail_areas
        .iter()
        .enumerate()
        .max_by(|(_, a), (_, b)| {
            let wa = a.0 .1 - a.0 .0;
            let wb = b.0 .1 - b.0 .0;
            wa.total_cmp(&wb).then(b.0 .0.total_cmp(&a.0 .0))
        })
        .map(|(i, _)| i)
        .unwrap();
    let ((rlo, rhi), rtail) = tail_areas[widest];
    let m_ref = integrate_window(&basis.ref_minus, rlo, rhi)?;
    let z_ref = integrate_window(&basis.ref_zero, rlo, rhi)?;
    let mut points = Vec::new();
    for &((lo, hi), v) in tail_areas {
        points.push(TailPoint {
            lo_nm: lo,
            hi_nm: hi,
            tail: v / rtail,
            spectral_minus: integrate_window(&basis.ref_minus, lo, hi)? / m_ref,
            spectral_zero: integrate_window(&basis.ref_zero, lo, hi)? / z_ref,
        });
    }
    // distance of (x, y) from the line y = x is |y − x|/√2
    let rms = |f: &dyn Fn(&TailPoint) -> f64| {
        (points
            .iter()
            .map(|p| (f(p) - p.tail).powi(2) / 2.0)
            .sum::<f64>()
            / points.len() as f64)
            .sqrt()
    };
    let rms_minus = rms(&|p| p.spectral_minus);
    let rms_zero = rms(&|p| p.spectral_zero);
    Ok(TailCorrelation {
        rms_minus,
        rms_zero,
        emitter: if rms_zero <= rms_minus {
            Emitter::NvZero
        } else {
            Emitter::NvMinus
        },
        points,
    })
}

/// Gaussian line or skew-normal band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub center_nm: f64,
    pub width_nm: f64,
    /// Skew-normal shape parameter (0 = Gaussian).
    pub skew: f64,
    /// Peak-scale weight relative to the other bands of the same state.
    pub weight: f64,
}

impl Band {
    fn eval(&self, x: f64) -> f64 {
        let z = (x - self.center_nm) / self.width_nm;
        let g = (-0.5 * z * z).exp();
        let s = if self.skew == 0.0 {
            1.0
        } else {
            1.0 + erf(self.skew * z / std::f64::consts::SQRT_2)
        };
        self.weight * g * s
    }
}

/// Line shapes for [`synth_spectrum`]. The defaults follow the textbook room
/// temperature NV shapes: ZPLs at 637 and 575 nm, the NV⁻ sideband spanning
/// roughly 650–750 nm and the NV⁰ sideband 580–700 nm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineShapes {
    pub grid_lo_nm: f64,
    pub grid_hi_nm: f64,
    pub grid_step_nm: f64,
    pub minus: Vec<Band>,
    pub zero: Vec<Band>,
    /// Raman line added after mixing, as a fraction of the spectrum maximum.
    pub raman: Option<Band>,
}

impl Default for LineShapes {
    fn default() -> Self {
        LineShapes {
            grid_lo_nm: 540.0,
            grid_hi_nm: 760.0,
            grid_step_nm: 0.5,
            minus: vec![
                Band {
                    center_nm: 637.0,
                    width_nm: 1.5,
                    skew: 0.0,
                    weight: 0.35,
                },
                Band {
                    center_nm: 662.0,
                    width_nm: 38.0,
                    skew: 2.5,
                    weight: 1.0,
                },
            ],
            zero: vec![
                Band {
                    center_nm: 575.0,
                    width_nm: 1.2,
                    skew: 0.0,
                    weight: 0.45,
                },
                Band {
                    center_nm: 588.0,
                    width_nm: 42.0,
                    skew: 3.0,
                    weight: 1.0,
                },
            ],
            raman: None,
        }
    }
}

impl LineShapes {
    pub fn grid(&self) -> Vec<f64> {
        let n = ((self.grid_hi_nm - self.grid_lo_nm) / self.grid_step_nm).round() as usize;
        (0..=n)
            .map(|i| self.grid_lo_nm + i as f64 * self.grid_step_nm)
            .collect()
    }

    fn component(&self, bands: &[Band]) -> Result<Spectrum> {
        let grid = self.grid();
        let intensity = grid
            .iter()
            .map(|&x| bands.iter().map(|b| b.eval(x)).sum())
            .collect();
        normalized(&Spectrum::new(grid, intensity)?, &AreaConvention::default())
    }

    /// Pure NV⁻ and NV⁰ spectra, each of unit area.
    pub fn pure_components(&self) -> Result<(Spectrum, Spectrum)> {
        Ok((self.component(&self.minus)?, self.component(&self.zero)?))
    }

    pub fn basis(&self) -> Result<ReferenceBasis> {
        let (m, z) = self.pure_components()?;
        ReferenceBasis::new(&m, &z)
    }
}

/// Mixture `(1 − f)·NV⁻ + f·NV⁰` of unit-area components, so the true
/// decomposition weights are `(1 − f, f)`.
pub fn synth_spectrum(frac_zero: f64, shapes: &LineShapes) -> Result<Spectrum> {
    if !(0.0..=1.0).contains(&frac_zero) {
        return Err(Error::invalid(format!("frac_zero must lie in [0, 1], got {frac_zero}")));
    }
    let (m, z) = shapes.pure_components()?;
    let mut intensity: Vec<f64> = m
        .intensity
        .iter()
        .zip(&z.intensity)
        .map(|(a, b)| (1.0 - frac_zero) * a + frac_zero * b)
        .collect();
    if let Some(r) = shapes.raman {
        let peak = intensity.iter().copied().fold(0.0, f64::max);
        for (v, &x) in intensity.iter_mut().zip(&m.wavelength_nm) {
            *v += peak * r.eval(x);
        }
    }
    Spectrum::new(m.wavelength_nm, intensity)
}
