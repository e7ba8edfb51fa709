//! File formats: CSV tables with fixed headers and JSON documents.
//!
//! Floats are written in shortest round-trip form, so parse → write → parse
//! is the identity. Every load failure is reported as [`Error::Schema`] with a
//! 1-based line and column; line 0 refers to the document as a whole.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::estimators::CorrelationHistogram;
use crate::fitting::{CurveModel, Dataset, FitResult, ModelId};
use crate::inference::OccupancySeries;
use crate::spectra::Spectrum;
use crate::trace_sim::{PhotonTrace, TimestampStream, TraceMeta};
use crate::{Error, Result};

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    use std::io::Write;
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path)?)
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Rows of a numeric table with their 1-based line numbers.
struct Table {
    rows: Vec<(u64, Vec<f64>)>,
}

/// Parses CSV whose header must equal `required` optionally followed by
/// `optional`; returns the rows and whether the optional columns were present.
fn parse_table(text: &str, required: &[&str], optional: &[&str]) -> Result<(Table, bool)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::schema(1, 1, e.to_string()))?
        .clone();
    let names: Vec<&str> = header.iter().collect();
    let with_optional = names.len() == required.len() + optional.len()
        && !optional.is_empty()
        && names[required.len()..] == *optional;
    if names[..names.len().min(required.len())] != *required
        || !(names.len() == required.len() || with_optional)
    {
        let mut expect = required.join(",");
        if !optional.is_empty() {
            expect.push_str(&format!("[,{}]", optional.join(",")));
        }
        return Err(Error::schema(1, 1, format!("expected header `{expect}`, got `{}`", names.join(","))));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::schema(line, 1, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != names.len() {
            return Err(Error::schema(line, 1, format!("expected {} fields, got {}", names.len(), rec.len())));
        }
        let mut vals = Vec::with_capacity(rec.len());
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::schema(line, c as u64 + 1, format!("`{field}` is not a number")))?;
            if !v.is_finite() {
                return Err(Error::schema(line, c as u64 + 1, format!("non-finite value `{field}`")));
            }
            vals.push(v);
        }
        rows.push((line, vals));
    }
    Ok((Table { rows }, with_optional))
}

fn as_count(v: f64, line: u64, col: u64) -> Result<u64> {
    if v < 0.0 || v.fract() != 0.0 || v > u64::MAX as f64 {
        return Err(Error::schema(line, col, format!("`{v}` is not a non-negative integer count")));
    }
    Ok(v as u64)
}

fn write_table(header: &str, rows: impl Iterator<Item = Vec<String>>) -> String {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

fn check_increasing(table: &Table, col: usize) -> Result<()> {
    for w in table.rows.windows(2) {
        if !(w[1].1[col] > w[0].1[col]) {
            return Err(Error::schema(w[1].0, col as u64 + 1, "column must be strictly increasing"));
        }
    }
    Ok(())
}

/// Path of the JSON sidecar next to a CSV file: `x.csv` → `x.meta.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

// ---- photon traces ---------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSidecar {
    pub bin_width_s: f64,
    #[serde(flatten)]
    pub meta: TraceMeta,
}

pub fn trace_to_csv(trace: &PhotonTrace) -> String {
    write_table(
        "t_s,counts",
        trace
            .counts
            .iter()
            .enumerate()
            .map(|(i, c)| vec![fmt_f64(trace.bin_start(i)), c.to_string()]),
    )
}

pub fn trace_sidecar(trace: &PhotonTrace) -> TraceSidecar {
    TraceSidecar {
        bin_width_s: trace.bin_width,
        meta: trace.meta,
    }
}

/// Without a sidecar the bin width and start time come from the `t_s` column.
pub fn trace_from_csv(text: &str, sidecar: Option<&TraceSidecar>) -> Result<PhotonTrace> {
    let (table, _) = parse_table(text, &["t_s", "counts"], &[])?;
    if table.rows.is_empty() {
        return Err(Error::schema(0, 0, "trace has no rows"));
    }
    check_increasing(&table, 0)?;
    let t0 = table.rows[0].1[0];
    let (bin, meta) = match sidecar {
        Some(s) => (s.bin_width_s, s.meta),
        None => {
            if table.rows.len() < 2 {
                return Err(Error::schema(0, 0, "a single-row trace needs a metadata sidecar"));
            }
            let span = table.rows[table.rows.len() - 1].1[0] - t0;
            (
                span / (table.rows.len() - 1) as f64,
                TraceMeta {
                    start_time_s: t0,
                    ..TraceMeta::default()
                },
            )
        }
    };
    if !(bin > 0.0) || !bin.is_finite() {
        return Err(Error::schema(0, 0, "bin width must be positive"));
    }
    let mut counts = Vec::with_capacity(table.rows.len());
    for (i, (line, r)) in table.rows.iter().enumerate() {
        let expect = meta.start_time_s + i as f64 * bin;
        if (r[0] - expect).abs() > 1e-9 * bin.max(expect.abs()) {
            return Err(Error::schema(*line, 1, format!("t_s = {} breaks the uniform bin grid (expected {expect})", r[0])));
        }
        counts.push(as_count(r[1], *line, 2)?);
    }
    Ok(PhotonTrace {
        bin_width: bin,
        counts,
        meta,
    })
}

pub fn save_trace(path: &Path, trace: &PhotonTrace) -> Result<()> {
    trace.validate()?;
    write_atomic(path, trace_to_csv(trace).as_bytes())?;
    write_json(&sidecar_path(path), &trace_sidecar(trace))
}

pub fn load_trace(path: &Path) -> Result<PhotonTrace> {
    let side = sidecar_path(path);
    let sidecar: Option<TraceSidecar> = if side.exists() { Some(read_json(&side)?) } else { None };
    trace_from_csv(&read_text(path)?, sidecar.as_ref())
}

// ---- timestamp streams -----------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamSidecar {
    pub duration_s: f64,
}

pub fn timestamps_to_csv(stream: &TimestampStream) -> String {
    write_table("t_s", stream.times.iter().map(|t| vec![fmt_f64(*t)]))
}

/// Without a sidecar the duration is taken as the last arrival time.
pub fn timestamps_from_csv(text: &str, sidecar: Option<&StreamSidecar>) -> Result<TimestampStream> {
    let (table, _) = parse_table(text, &["t_s"], &[])?;
    check_increasing(&table, 0)?;
    if let Some((line, r)) = table.rows.first() {
        if r[0] < 0.0 {
            return Err(Error::schema(*line, 1, "arrival times must be >= 0"));
        }
    }
    let times: Vec<f64> = table.rows.iter().map(|(_, r)| r[0]).collect();
    let duration = match sidecar {
        Some(s) => s.duration_s,
        None => times.last().copied().unwrap_or(0.0),
    };
    let s = TimestampStream { times, duration };
    s.validate().map_err(|e| Error::schema(0, 0, e.to_string()))?;
    Ok(s)
}

pub fn save_timestamps(path: &Path, stream: &TimestampStream) -> Result<()> {
    stream.validate()?;
    write_atomic(path, timestamps_to_csv(stream).as_bytes())?;
    write_json(
        &sidecar_path(path),
        &StreamSidecar {
            duration_s: stream.duration,
        },
    )
}

pub fn load_timestamps(path: &Path) -> Result<TimestampStream> {
    let side = sidecar_path(path);
    let sidecar: Option<StreamSidecar> = if side.exists() { Some(read_json(&side)?) } else { None };
    timestamps_from_csv(&read_text(path)?, sidecar.as_ref())
}

// ---- spectra ---------------------------------------------------------------

pub fn spectrum_to_csv(s: &Spectrum) -> String {
    write_table(
        "wavelength_nm,intensity",
        s.wavelength_nm
            .iter()
            .zip(&s.intensity)
            .map(|(w, i)| vec![fmt_f64(*w), fmt_f64(*i)]),
    )
}

pub fn spectrum_from_csv(text: &str) -> Result<Spectrum> {
    let (table, _) = parse_table(text, &["wavelength_nm", "intensity"], &[])?;
    if table.rows.len() < 2 {
        return Err(Error::schema(0, 0, "a spectrum needs at least two rows"));
    }
    check_increasing(&table, 0)?;
    Ok(Spectrum {
        wavelength_nm: table.rows.iter().map(|(_, r)| r[0]).collect(),
        intensity: table.rows.iter().map(|(_, r)| r[1]).collect(),
        meta: Default::default(),
    })
}

pub fn save_spectrum(path: &Path, s: &Spectrum) -> Result<()> {
    s.validate()?;
    write_atomic(path, spectrum_to_csv(s).as_bytes())
}

pub fn load_spectrum(path: &Path) -> Result<Spectrum> {
    spectrum_from_csv(&read_text(path)?)
}

// ---- fit datasets ----------------------------------------------------------

pub fn dataset_to_csv(d: &Dataset) -> String {
    match &d.sigma {
        Some(s) => write_table(
            "x,y,sigma",
            (0..d.x.len()).map(|i| vec![fmt_f64(d.x[i]), fmt_f64(d.y[i]), fmt_f64(s[i])]),
        ),
        None => write_table("x,y", (0..d.x.len()).map(|i| vec![fmt_f64(d.x[i]), fmt_f64(d.y[i])])),
    }
}

pub fn dataset_from_csv(text: &str) -> Result<Dataset> {
    let (table, with_sigma) = parse_table(text, &["x", "y"], &["sigma"])?;
    let x = table.rows.iter().map(|(_, r)| r[0]).collect();
    let y = table.rows.iter().map(|(_, r)| r[1]).collect();
    let d = Dataset::new(x, y);
    if !with_sigma {
        return Ok(d);
    }
    for (line, r) in &table.rows {
        if !(r[2] > 0.0) {
            return Err(Error::schema(*line, 3, "sigma must be positive"));
        }
    }
    Ok(d.with_sigma(table.rows.iter().map(|(_, r)| r[2]).collect()))
}

pub fn save_dataset(path: &Path, d: &Dataset) -> Result<()> {
    write_atomic(path, dataset_to_csv(d).as_bytes())
}

/// Also accepts an occupancy series, read as x = t_s, y = p_bright.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let text = read_text(path)?;
    if text.lines().next().map(str::trim) == Some("t_s,p_bright") {
        let o = occupancy_from_csv(&text)?;
        return Ok(Dataset::new(o.times, o.p_bright));
    }
    dataset_from_csv(&text)
}

// ---- occupancy series ------------------------------------------------------

pub fn occupancy_to_csv(o: &OccupancySeries) -> String {
    write_table(
        "t_s,p_bright",
        o.times.iter().zip(&o.p_bright).map(|(t, p)| vec![fmt_f64(*t), fmt_f64(*p)]),
    )
}

/// The window is inferred from the spacing of the centers (or twice the
/// single center).
pub fn occupancy_from_csv(text: &str) -> Result<OccupancySeries> {
    let (table, _) = parse_table(text, &["t_s", "p_bright"], &[])?;
    if table.rows.is_empty() {
        return Err(Error::schema(0, 0, "occupancy series has no rows"));
    }
    check_increasing(&table, 0)?;
    for (line, r) in &table.rows {
        if !(0.0..=1.0).contains(&r[1]) {
            return Err(Error::schema(*line, 2, "p_bright must lie in [0, 1]"));
        }
    }
    let times: Vec<f64> = table.rows.iter().map(|(_, r)| r[0]).collect();
    let window = if times.len() > 1 { times[1] - times[0] } else { 2.0 * times[0] };
    Ok(OccupancySeries {
        window,
        p_bright: table.rows.iter().map(|(_, r)| r[1]).collect(),
        times,
    })
}

pub fn save_occupancy(path: &Path, o: &OccupancySeries) -> Result<()> {
    write_atomic(path, occupancy_to_csv(o).as_bytes())
}

pub fn load_occupancy(path: &Path) -> Result<OccupancySeries> {
    occupancy_from_csv(&read_text(path)?)
}

// ---- correlation histograms ------------------------------------------------

pub fn histogram_to_csv(h: &CorrelationHistogram) -> String {
    write_table(
        "tau_s,g2,coincidences",
        (0..h.tau_bins_s.len()).map(|i| vec![fmt_f64(h.tau_bins_s[i]), fmt_f64(h.g2[i]), h.counts[i].to_string()]),
    )
}

/// Accidentals are recovered as `coincidences / g2`; bins with g2 = 0 take
/// the median of the others.
pub fn histogram_from_csv(text: &str) -> Result<CorrelationHistogram> {
    let (table, _) = parse_table(text, &["tau_s", "g2", "coincidences"], &[])?;
    let n = table.rows.len();
    if n < 3 || n % 2 == 0 {
        return Err(Error::schema(0, 0, "histogram needs an odd number (>= 3) of bins"));
    }
    check_increasing(&table, 0)?;
    let tau: Vec<f64> = table.rows.iter().map(|(_, r)| r[0]).collect();
    let bin = tau[1] - tau[0];
    for (i, (line, _)) in table.rows.iter().enumerate() {
        if (tau[i] + tau[n - 1 - i]).abs() > 1e-9 * bin {
            return Err(Error::schema(*line, 1, "tau grid must be symmetric about 0"));
        }
    }
    let mut counts = Vec::with_capacity(n);
    for (line, r) in &table.rows {
        if r[1] < 0.0 {
            return Err(Error::schema(*line, 2, "g2 must be >= 0"));
        }
        counts.push(as_count(r[2], *line, 3)?);
    }
    let g2: Vec<f64> = table.rows.iter().map(|(_, r)| r[1]).collect();
    let mut known: Vec<f64> = counts
        .iter()
        .zip(&g2)
        .filter(|(_, g)| **g > 0.0)
        .map(|(c, g)| *c as f64 / g)
        .collect();
    known.sort_by(f64::total_cmp);
    let fill = known.get(known.len() / 2).copied().unwrap_or(1.0);
    let accidentals: Vec<f64> = counts
        .iter()
        .zip(&g2)
        .map(|(c, g)| if *g > 0.0 { *c as f64 / g } else { fill })
        .collect();
    let mid = n / 2;
    Ok(CorrelationHistogram {
        bin_width_s: bin,
        g2_zero: g2[mid],
        g2_zero_err: (counts[mid].max(1) as f64).sqrt() / accidentals[mid],
        tau_bins_s: tau,
        g2,
        counts,
        accidentals,
    })
}

pub fn save_histogram(path: &Path, h: &CorrelationHistogram) -> Result<()> {
    write_atomic(path, histogram_to_csv(h).as_bytes())
}

pub fn load_histogram(path: &Path) -> Result<CorrelationHistogram> {
    histogram_from_csv(&read_text(path)?)
}

// ---- tail window areas -----------------------------------------------------

pub fn tail_areas_to_csv(areas: &[((f64, f64), f64)]) -> String {
    write_table(
        "lo_nm,hi_nm,area",
        areas.iter().map(|((lo, hi), a)| vec![fmt_f64(*lo), fmt_f64(*hi), fmt_f64(*a)]),
    )
}

pub fn tail_areas_from_csv(text: &str) -> Result<Vec<((f64, f64), f64)>> {
    let (table, _) = parse_table(text, &["lo_nm", "hi_nm", "area"], &[])?;
    if table.rows.is_empty() {
        return Err(Error::schema(0, 0, "no tail windows"));
    }
    let mut out = Vec::with_capacity(table.rows.len());
    for (line, r) in &table.rows {
        if !(r[1] > r[0]) {
            return Err(Error::schema(*line, 2, "hi_nm must exceed lo_nm"));
        }
        out.push(((r[0], r[1]), r[2]));
    }
    Ok(out)
}

// ---- state paths -----------------------------------------------------------

/// One row per bin: bin start time and state (0 dark, 1 bright).
pub fn state_path_to_csv(trace: &PhotonTrace, path: &[u8]) -> String {
    write_table(
        "t_s,state",
        path.iter()
            .enumerate()
            .map(|(i, s)| vec![fmt_f64(trace.bin_start(i)), s.to_string()]),
    )
}

pub fn state_path_from_csv(text: &str) -> Result<Vec<u8>> {
    let (table, _) = parse_table(text, &["t_s", "state"], &[])?;
    check_increasing(&table, 0)?;
    table
        .rows
        .iter()
        .map(|(line, r)| match r[1] {
            v if v == 0.0 => Ok(0),
            v if v == 1.0 => Ok(1),
            v => Err(Error::schema(*line, 2, format!("state must be 0 or 1, got {v}"))),
        })
        .collect()
}

// ---- JSON ------------------------------------------------------------------

pub fn to_json_string<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::invalid(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn from_json_str<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::schema(e.line() as u64, e.column() as u64, e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    write_atomic(path, to_json_string(v)?.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    from_json_str(&read_text(path)?)
}

/// Parses and validates a FitResult, restoring model parameter order.
pub fn fit_result_from_json(text: &str) -> Result<FitResult> {
    let mut fit: FitResult = from_json_str(text)?;
    fit.validate().map_err(|e| Error::schema(0, 0, e.to_string()))?;
    fit.order = match fit.model_id.parse::<ModelId>() {
        Ok(m) => m.param_names().iter().map(|s| s.to_string()).collect(),
        Err(_) => fit.params.keys().cloned().collect(),
    };
    Ok(fit)
}

pub fn save_fit_result(path: &Path, fit: &FitResult) -> Result<()> {
    fit.validate()?;
    write_json(path, fit)
}

pub fn load_fit_result(path: &Path) -> Result<FitResult> {
    fit_result_from_json(&read_text(path)?)
}
