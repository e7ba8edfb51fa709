use std::collections::BTreeMap;
use std::path::PathBuf;

use nvcharge::estimators::CorrelationHistogram;
use nvcharge::fitting::{Dataset, FitResult, ParamEstimate};
use nvcharge::inference::OccupancySeries;
use nvcharge::io::*;
use nvcharge::photophysics::default_calibration;
use nvcharge::pipelines::{compute_scenario, Anchor, ScenarioConfig, ScenarioId};
use nvcharge::spectra::{Spectrum, SpectrumMeta};
use nvcharge::trace_sim::{PhotonTrace, TimestampStream, TraceMeta};
use nvcharge::Error;
use proptest::prelude::*;
use serde_json::Value;

// Set UPDATE_GOLDEN=1 to rewrite the files under tests/golden.
fn golden(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(&path).unwrap_or_else(|_| panic!("missing golden file {name}"));
    assert_eq!(actual, expected, "{name} drifted from its golden file");
}

fn trace() -> PhotonTrace {
    PhotonTrace {
        bin_width: 0.1,
        counts: vec![27, 31, 15, 0, 22],
        meta: TraceMeta {
            bias_v: 7.0,
            power_mw: 1.0,
            start_time_s: 0.0,
        },
    }
}

fn spectrum() -> Spectrum {
    Spectrum {
        wavelength_nm: vec![600.0, 637.0, 650.5, 700.25],
        intensity: vec![0.0, 1.5, 0.75, 1e-7],
        meta: SpectrumMeta::default(),
    }
}

fn fit() -> FitResult {
    let mut params = BTreeMap::new();
    for (n, v, s) in [("y0", 0.01, 0.004), ("A", 0.61, 0.02), ("tau", 1022.0, 31.5), ("beta", 5.4, 0.6)] {
        params.insert(n.to_string(), ParamEstimate { value: v, stderr: s });
    }
    FitResult {
        model_id: "compressed_exp".into(),
        params,
        chi2: 25.5,
        dof: 26,
        converged: true,
        n_iter: 12,
        order: ["y0", "A", "tau", "beta"].iter().map(|s| s.to_string()).collect(),
        covariance: Vec::new(),
        cost_history: Vec::new(),
    }
}

fn histogram() -> CorrelationHistogram {
    CorrelationHistogram {
        bin_width_s: 1e-9,
        tau_bins_s: vec![-1e-9, 0.0, 1e-9],
        g2: vec![1.0, 0.25, 0.5],
        counts: vec![40, 10, 20],
        accidentals: vec![40.0, 40.0, 40.0],
        g2_zero: 0.25,
        g2_zero_err: 10f64.sqrt() / 40.0,
    }
}

#[test]
fn trace_format() {
    let t = trace();
    let csv = trace_to_csv(&t);
    golden("trace.csv", &csv);
    golden("trace.meta.json", &to_json_string(&trace_sidecar(&t)).unwrap());
    assert_eq!(trace_from_csv(&csv, Some(&trace_sidecar(&t))).unwrap(), t);
    // grid alone recovers the bin width
    let bare = trace_from_csv(&csv, None).unwrap();
    assert_eq!(bare.counts, t.counts);
    assert!((bare.bin_width - 0.1).abs() < 1e-15);
}

#[test]
fn timestamps_format() {
    let s = TimestampStream {
        times: vec![1e-6, 2.5e-6, 0.75],
        duration: 1.0,
    };
    let csv = timestamps_to_csv(&s);
    golden("timestamps.csv", &csv);
    assert_eq!(timestamps_from_csv(&csv, Some(&StreamSidecar { duration_s: 1.0 })).unwrap(), s);
    assert_eq!(timestamps_from_csv(&csv, None).unwrap().duration, 0.75);
}

#[test]
fn spectrum_format() {
    let s = spectrum();
    let csv = spectrum_to_csv(&s);
    golden("spectrum.csv", &csv);
    assert_eq!(spectrum_from_csv(&csv).unwrap(), s);
}

#[test]
fn unsorted_spectrum_is_rejected() {
    let e = spectrum_from_csv("wavelength_nm,intensity\n600,1\n640,2\n620,3\n").unwrap_err();
    assert!(matches!(e, Error::Schema { line: 4, column: 1, .. }), "{e:?}");
}

#[test]
fn dataset_format() {
    let d = Dataset::new(vec![30.0, 90.0, 150.0], vec![0.01, 0.2, -0.5]);
    golden("dataset.csv", &dataset_to_csv(&d));
    let w = d.clone().with_sigma(vec![0.02, 0.02, 0.05]);
    golden("dataset_sigma.csv", &dataset_to_csv(&w));
    assert_eq!(dataset_from_csv(&dataset_to_csv(&w)).unwrap(), w);
    assert_eq!(dataset_from_csv(&dataset_to_csv(&d)).unwrap(), d);
}

#[test]
fn occupancy_format() {
    let o = OccupancySeries {
        window: 60.0,
        times: vec![30.0, 90.0, 150.0],
        p_bright: vec![0.0, 0.125, 0.6],
    };
    let csv = occupancy_to_csv(&o);
    golden("occupancy.csv", &csv);
    assert_eq!(occupancy_from_csv(&csv).unwrap(), o);
    assert!(occupancy_from_csv("t_s,p_bright\n30,1.2\n").is_err());
}

#[test]
fn histogram_format() {
    let h = histogram();
    let csv = histogram_to_csv(&h);
    golden("histogram.csv", &csv);
    assert_eq!(histogram_from_csv(&csv).unwrap(), h);
    assert!(histogram_from_csv("tau_s,g2,coincidences\n-1e-9,1,4\n0,1,4\n").is_err());
}

#[test]
fn tail_areas_format() {
    let areas = vec![((550.0, 700.0), 12.5), ((600.0, 650.0), 4.25), ((650.0, 700.0), 1e-3)];
    let csv = tail_areas_to_csv(&areas);
    golden("tail_areas.csv", &csv);
    assert_eq!(tail_areas_from_csv(&csv).unwrap(), areas);
    assert!(matches!(
        tail_areas_from_csv("lo_nm,hi_nm,area\n650,600,1\n"),
        Err(Error::Schema { line: 2, column: 2, .. })
    ));
}

#[test]
fn state_path_format() {
    let path = vec![0, 1, 1, 0, 1];
    let csv = state_path_to_csv(&trace(), &path);
    golden("state_path.csv", &csv);
    assert_eq!(state_path_from_csv(&csv).unwrap(), path);
    assert!(state_path_from_csv("t_s,state\n0,2\n").is_err());
}

#[test]
fn fit_result_format() {
    let f = fit();
    let text = to_json_string(&f).unwrap();
    golden("fit_result.json", &text);
    let back = fit_result_from_json(&text).unwrap();
    assert_eq!(back, f);
    assert_eq!(back.values(), vec![0.01, 0.61, 1022.0, 5.4]);
}

#[test]
fn non_finite_fit_result_is_rejected() {
    let mut f = fit();
    f.params.get_mut("tau").unwrap().stderr = f64::NAN;
    // NaN serializes as null
    let text = serde_json::to_string(&f).unwrap();
    assert!(matches!(fit_result_from_json(&text), Err(Error::Schema { .. })));
    let text = to_json_string(&fit()).unwrap().replace("1022.0", "\"slow\"");
    assert!(matches!(fit_result_from_json(&text), Err(Error::Schema { line, .. }) if line > 0));
}

#[test]
fn calibration_and_config_formats() {
    golden("calibration.json", &to_json_string(&default_calibration()).unwrap());
    let mut cfg = ScenarioConfig::new(ScenarioId::Fig1Odmr, 7).with_override("contrast_10V", 0.2);
    cfg.anchors.insert("contrast_0V".into(), Anchor::absolute(0.05, 0.01));
    let text = to_json_string(&cfg).unwrap();
    golden("scenario_config.json", &text);
    assert_eq!(from_json_str::<ScenarioConfig>(&text).unwrap(), cfg);
}

/// Replaces every scalar with its JSON type name.
fn shape(v: &Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(m.iter().map(|(k, v)| (k.clone(), shape(v))).collect()),
        Value::Array(a) => Value::Array(a.iter().map(shape).collect()),
        Value::Number(_) => Value::String("number".into()),
        Value::Bool(_) => Value::String("bool".into()),
        Value::String(_) => Value::String("string".into()),
        Value::Null => Value::Null,
    }
}

#[test]
fn scenario_report_schemas() {
    let mut all = serde_json::Map::new();
    for id in ScenarioId::ALL {
        let out = compute_scenario(&ScenarioConfig::new(id, 7)).unwrap();
        let report = serde_json::to_value(&out.report).unwrap();
        let headers: BTreeMap<&String, &str> =
            out.plots.iter().map(|(k, v)| (k, v.lines().next().unwrap_or(""))).collect();
        let files: BTreeMap<&String, Value> = out
            .files
            .iter()
            .map(|(k, v)| match serde_json::from_str::<Value>(v) {
                Ok(doc) if k.ends_with(".json") => (k, shape(&doc)),
                _ => (k, Value::String(v.lines().next().unwrap_or("").to_string())),
            })
            .collect();
        all.insert(
            id.to_string(),
            serde_json::json!({ "report": shape(&report), "plots": headers, "files": files }),
        );
    }
    golden("scenario_schemas.json", &to_json_string(&Value::Object(all)).unwrap());
}

#[test]
fn files_round_trip_with_sidecars() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("trace.csv");
    save_trace(&p, &trace()).unwrap();
    assert!(sidecar_path(&p).exists());
    assert_eq!(load_trace(&p).unwrap(), trace());
    let p = dir.path().join("nested/fit.json");
    save_fit_result(&p, &fit()).unwrap();
    assert_eq!(load_fit_result(&p).unwrap(), fit());
}

proptest! {
    #[test]
    fn spectrum_csv_round_trips(vals in prop::collection::vec((0.001f64..5.0, -1e3f64..1e3), 2..40)) {
        let mut wl = 500.0;
        let mut w = Vec::new();
        let mut i = Vec::new();
        for (step, v) in vals {
            wl += step;
            w.push(wl);
            i.push(v);
        }
        let s = Spectrum { wavelength_nm: w, intensity: i, meta: SpectrumMeta::default() };
        prop_assert_eq!(spectrum_from_csv(&spectrum_to_csv(&s)).unwrap(), s);
    }

    #[test]
    fn dataset_csv_round_trips(rows in prop::collection::vec((any::<f64>(), any::<f64>()), 1..30)) {
        let rows: Vec<_> = rows.into_iter().filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        prop_assume!(!rows.is_empty());
        let d = Dataset::new(rows.iter().map(|r| r.0).collect(), rows.iter().map(|r| r.1).collect());
        prop_assert_eq!(dataset_from_csv(&dataset_to_csv(&d)).unwrap(), d);
    }
}

#[test]
fn occupancy_file_loads_as_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("occ.csv");
    std::fs::write(&p, "t_s,p_bright\n30,0.5\n90,0.25\n").unwrap();
    assert_eq!(load_dataset(&p).unwrap(), Dataset::new(vec![30.0, 90.0], vec![0.5, 0.25]));
}
