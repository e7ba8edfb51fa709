//! One PASS/FAIL line per acceptance criterion. Run with
//! `cargo test -p nvcharge --test acceptance -- --nocapture` to see them.

use std::path::PathBuf;
use std::time::Instant;

use nvcharge::estimators::*;
use nvcharge::fitting::*;
use nvcharge::inference::*;
use nvcharge::io;
use nvcharge::photophysics::*;
use nvcharge::pipelines::*;
use nvcharge::rng::rng_from_seed;
use nvcharge::spectra::*;
use nvcharge::trace_sim::*;
use nvcharge::Error;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

// ---- 1. Table I round trip --------------------------------------------------

fn table1_round_trip() -> Verdict {
    let start = Instant::now();
    let mut ok = [0usize; 3];
    for seed in 0..20u64 {
        let cfg = ScenarioConfig::new(ScenarioId::Table1Kinetics, seed).with_override("compression", 10.0);
        let out = compute_scenario(&cfg).unwrap();
        for (i, v) in ["5V", "7V", "9V"].iter().enumerate() {
            // anchors carry the tau 15%, beta 30%, A ±0.05 bands
            let hit = ["tau", "beta", "A"].iter().all(|k| out.report.pass[&format!("{k}_{v}")]);
            ok[i] += usize::from(hit);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        ok.iter().all(|&n| n >= 18) && secs <= 300.0,
        format!("5 V {}/20, 7 V {}/20, 9 V {}/20 at 10x compression ({secs:.1} s)", ok[0], ok[1], ok[2]),
    )
}

// ---- 2. HMM correctness -----------------------------------------------------

fn ln_pmf(k: u64, l: f64) -> f64 {
    let lnfact: f64 = (1..=k).map(|j| (j as f64).ln()).sum();
    k as f64 * l.ln() - l - lnfact
}

fn path_lp(hmm: &PoissonHmm, counts: &[u64], path: &[usize]) -> f64 {
    let mut lp = hmm.initial_prob[path[0]].ln() + ln_pmf(counts[0], hmm.lambda[path[0]]);
    for t in 1..counts.len() {
        lp += hmm.transition[path[t - 1]][path[t]].ln() + ln_pmf(counts[t], hmm.lambda[path[t]]);
    }
    lp
}

fn random_hmm(rng: &mut impl Rng) -> PoissonHmm {
    let p0 = rng.random_range(0.01..0.99);
    let a = rng.random_range(0.01..0.99);
    let b = rng.random_range(0.01..0.99);
    let l0 = rng.random_range(0.5..20.0);
    PoissonHmm {
        initial_prob: [1.0 - p0, p0],
        transition: [[1.0 - a, a], [b, 1.0 - b]],
        lambda: [l0, l0 + rng.random_range(0.5..20.0)],
    }
}

fn min_dwell_trace(min_dwell: usize, n: usize, seed: u64) -> (Vec<u64>, Vec<u8>) {
    let mut rng = rng_from_seed(seed);
    let mut states = Vec::with_capacity(n);
    let mut s = 0u8;
    while states.len() < n {
        let mut len = min_dwell;
        while rng.random::<f64>() > 1.0 / 11.0 {
            len += 1;
        }
        states.extend(std::iter::repeat_n(s, len));
        s = 1 - s;
    }
    states.truncate(n);
    let lambda = [15.0, 27.0];
    let counts = states
        .iter()
        .map(|&s| Poisson::new(lambda[s as usize]).unwrap().sample(&mut rng) as u64)
        .collect();
    (counts, states)
}

fn hmm_correctness() -> Verdict {
    let mut rng = rng_from_seed(2024);
    let mut worst_ll: f64 = 0.0;
    let mut worst_vit: f64 = 0.0;
    for case in 0..300 {
        let hmm = random_hmm(&mut rng);
        let t = 1 + case % 10;
        let counts: Vec<u64> = (0..t).map(|_| rng.random_range(0..40)).collect();
        let tr = PhotonTrace::new(0.1, counts.clone()).unwrap();
        let lps: Vec<f64> = (0..1usize << t)
            .map(|m| path_lp(&hmm, &counts, &(0..t).map(|i| (m >> i) & 1).collect::<Vec<_>>()))
            .collect();
        let max = lps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ll = max + lps.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let post = forward_backward(&hmm, &tr).unwrap();
        worst_ll = worst_ll.max(((post.log_likelihood - ll) / ll).abs());
        let (path, lp) = viterbi(&hmm, &tr).unwrap();
        let path: Vec<usize> = path.iter().map(|&s| s as usize).collect();
        let on_path = path_lp(&hmm, &counts, &path);
        worst_vit = worst_vit.max(((lp - max) / max).abs()).max(((on_path - max) / max).abs());
    }

    let mut monotone = true;
    for seed in 0..20u64 {
        let (counts, _) = min_dwell_trace(10, 2000, 500 + seed);
        let tr = PhotonTrace::new(0.1, counts).unwrap();
        let init = random_hmm(&mut rng);
        match baum_welch(&tr, &init, &BaumWelchOptions { max_iter: 100, tol: 0.0 }) {
            Ok((_, hist)) => monotone &= hist.windows(2).all(|w| w[1] >= w[0] - 1e-8),
            Err(Error::DegenerateFit(_)) => {}
            Err(_) => monotone = false,
        }
    }

    let mut worst_acc: f64 = 1.0;
    for seed in 0..5u64 {
        let (counts, states) = min_dwell_trace(10, 10_000, seed);
        let tr = PhotonTrace::new(0.1, counts).unwrap();
        let acc = match fit_hmm(&tr) {
            Ok((hmm, _)) => {
                let path = forward_backward(&hmm, &tr).unwrap().argmax_path();
                path.iter().zip(&states).filter(|(a, b)| a == b).count() as f64 / states.len() as f64
            }
            Err(_) => 0.0,
        };
        worst_acc = worst_acc.min(acc);
    }
    verdict(
        worst_ll <= 1e-10 && worst_vit <= 1e-10 && monotone && worst_acc >= 0.97,
        format!(
            "ll rel err {worst_ll:.1e}, viterbi rel err {worst_vit:.1e}, baum-welch monotone {monotone}, \
             accuracy {worst_acc:.4}"
        ),
    )
}

// ---- 3. Mixture populations -------------------------------------------------

fn mixture_populations() -> Verdict {
    let weights: Vec<f64> = (0..10u64)
        .map(|seed| compute_scenario(&ScenarioConfig::new(ScenarioId::Fig2Hmm, seed)).unwrap().report.recovered["weight_bright"])
        .collect();
    let lo = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    verdict(
        lo >= 0.50 && hi <= 0.65,
        format!("weight_bright in [{lo:.3}, {hi:.3}] over 10 seeds"),
    )
}

// ---- 4. Photophysics anchors ------------------------------------------------

fn photophysics_anchors() -> Verdict {
    let cal = default_calibration();
    let obs = anchor_observables(&cal).unwrap();
    let rel = |a: f64, b: f64| (a / b - 1.0).abs();
    let anchors = [
        ("spike", rel(obs.spike_decay_s, 195e-9), 0.15),
        ("rise", rel(obs.rise_s, 270e-9), 0.15),
        ("tail", rel(obs.tail_1mw_s, 457e-9), 0.15),
        ("tau0", rel(obs.hyperbolic_tau0_s, 272e-9), 0.05),
        ("crossing", rel(obs.crossing_mw, 5.6), 0.20),
        ("peak", rel(obs.biased_peak_mw, 4.0), 0.25),
    ];
    let mut pass = anchors.iter().all(|(_, e, tol)| e <= tol);
    let mut parts: Vec<String> = anchors.iter().map(|(n, e, _)| format!("{n} {:.1}%", 100.0 * e)).collect();

    let mut worst_sum: f64 = 0.0;
    for (i, power) in [0.0, 0.5, 1.0, 4.0, 20.0].into_iter().enumerate() {
        for start in 0..N_LEVELS {
            let bias = if i % 2 == 0 { cal.zero_bias } else { cal.biased };
            let curve = evolve(
                &cal.params,
                &StatePopulations::pure(start),
                &PowerSchedule::pulse(power, 2e-6, 10e-6),
                &bias,
                &DetectionBand::ALL,
                1e-8,
            )
            .unwrap();
            for s in population_sums(&curve) {
                worst_sum = worst_sum.max((s - 1.0).abs());
            }
        }
    }
    let mut worst_ss: f64 = 0.0;
    for (power, bias) in [(1.0, cal.zero_bias), (4.0, cal.biased), (20.0, cal.zero_bias)] {
        let (ss, _) = steady_state(&cal.params, power, &bias, &DetectionBand::LONG_PASS_650).unwrap();
        let curve = evolve(
            &cal.params,
            &StatePopulations::pure(G_MINUS),
            &PowerSchedule::constant(2e-3, power),
            &bias,
            &DetectionBand::LONG_PASS_650,
            1e-5,
        )
        .unwrap();
        let last = curve.populations.as_ref().unwrap().last().unwrap();
        for (a, b) in last.levels.iter().zip(ss.levels) {
            worst_ss = worst_ss.max((a - b).abs());
        }
    }
    pass &= worst_sum <= 1e-9 && worst_ss <= 1e-6;
    parts.push(format!("conservation {worst_sum:.1e}"));
    parts.push(format!("steady state {worst_ss:.1e}"));
    verdict(pass, parts.join(", "))
}

// ---- 5. Spectral decomposition ----------------------------------------------

fn spectral_decomposition() -> Verdict {
    let shapes = LineShapes::default();
    let basis = shapes.basis().unwrap();
    let mut worst_exact: f64 = 0.0;
    for i in 0..=20 {
        let alpha = i as f64 / 20.0;
        let s = Spectrum {
            intensity: basis
                .ref_minus
                .intensity
                .iter()
                .zip(&basis.ref_zero.intensity)
                .map(|(m, z)| alpha * m + (1.0 - alpha) * z)
                .collect(),
            ..basis.ref_minus.clone()
        };
        let r = nnls_decompose(&s, &basis).unwrap();
        worst_exact = worst_exact.max((r.a_minus - alpha).abs()).max((r.a_zero - (1.0 - alpha)).abs());
    }

    let clean = synth_spectrum(0.6, &shapes).unwrap();
    let peak = clean.intensity.iter().copied().fold(0.0, f64::max);
    let noise = Normal::new(0.0, 0.02 * peak).unwrap();
    let mut worst_frac: f64 = 0.0;
    for seed in 0..50u64 {
        let mut rng = rng_from_seed(seed);
        let probe = Spectrum {
            intensity: clean.intensity.iter().map(|v| v + noise.sample(&mut rng)).collect(),
            ..clean.clone()
        };
        let r = nnls_decompose(&probe, &basis).unwrap();
        worst_frac = worst_frac.max((r.fraction_zero - 0.6).abs());
    }

    // full chain: references built from a noisy pair, then the dark tail
    let tail_hits = (0..100u64)
        .filter(|&seed| {
            let out = compute_scenario(&ScenarioConfig::new(ScenarioId::Fig3Spectra, seed)).unwrap();
            out.report.recovered["tail_is_nv0"] == 1.0
        })
        .count();
    verdict(
        worst_exact <= 1e-8 && worst_frac <= 0.02 && tail_hits == 100,
        format!("exact err {worst_exact:.1e}, 2% noise err {worst_frac:.4}, tail NV0 {tail_hits}/100"),
    )
}

// ---- 6. Photon statistics ---------------------------------------------------

fn emitter() -> EmitterSpec {
    EmitterSpec {
        single_emitter: true,
        excited_lifetime: 12e-9,
        pump_rate: 5e7,
        background_rate: 0.0,
    }
}

fn g2_zero_with_background(b: f64, seed: u64) -> f64 {
    let spec = emitter().with_background_fraction(b);
    let rate = spec.emitter_rate() + spec.background_rate;
    let s = simulate_timestamps(&spec, 1e6 / rate, seed).unwrap();
    g2_histogram(&s, 0.5e-9, 100e-9).unwrap().g2_zero
}

fn photon_statistics() -> Verdict {
    let poisson = EmitterSpec {
        single_emitter: false,
        background_rate: 1e6,
        ..emitter()
    };
    let s = simulate_timestamps(&poisson, 1.0, 3).unwrap();
    let h = g2_histogram(&s, 50e-9, 5e-6).unwrap();
    let flat = h.g2.iter().map(|g| (g - 1.0).abs()).fold(0.0, f64::max);

    let single = g2_zero_with_background(0.0, 11);
    let reported = g2_zero_with_background(1.0 - 0.78_f64.sqrt(), 5);
    let mut worst_law: f64 = 0.0;
    for (i, b) in [0.1, 0.2, 0.3, 0.4, 0.5].into_iter().enumerate() {
        let expect = 1.0 - (1.0 - b) * (1.0 - b);
        worst_law = worst_law.max((g2_zero_with_background(b, 20 + i as u64) - expect).abs());
    }
    verdict(
        flat <= 0.05 && single < 0.1 && (reported - 0.22).abs() <= 0.05 && worst_law <= 0.05,
        format!(
            "poisson max |g2-1| {flat:.3}, single g2(0) {single:.3}, background g2(0) {reported:.3}, \
             law max err {worst_law:.3}"
        ),
    )
}

// ---- 7. Fitting engine ------------------------------------------------------

fn fitting_engine() -> Verdict {
    // tau0 + c/x is linear in its parameters
    let xs: Vec<f64> = (1..=25).map(|i| 0.4 * i as f64).collect();
    let mut rng = rng_from_seed(9);
    let ys: Vec<f64> = xs.iter().map(|x| 272e-9 + 185e-9 / x + 4e-9 * (rng.random::<f64>() - 0.5)).collect();
    let (mut s1, mut su, mut suu, mut sy, mut suy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        let u = 1.0 / x;
        s1 += 1.0;
        su += u;
        suu += u * u;
        sy += y;
        suy += u * y;
    }
    let det = s1 * suu - su * su;
    let c = (s1 * suy - su * sy) / det;
    let tau0 = (sy - c * su) / s1;
    let opts = LmOptions {
        max_iter: 200,
        ..LmOptions::default()
    };
    let fit = lm_fit(&ModelId::Hyperbolic, &Dataset::new(xs, ys), &[1e-7, 1e-7], None, &opts).unwrap();
    let lin = ((fit.value("tau0") - tau0) / tau0).abs().max(((fit.value("c") - c) / c).abs());

    let minutes: Vec<f64> = (0..30).map(|i| 30.0 + 60.0 * i as f64).collect();
    let powers: Vec<f64> = (1..=40).map(|i| 0.5 * i as f64).collect();
    let ns: Vec<f64> = (0..200).map(|i| i as f64 * 5e-9).collect();
    let ghz: Vec<f64> = (0..41).map(|i| 2860.0 + 0.5 * i as f64).collect();
    let cases: Vec<(Box<dyn CurveModel>, Vec<f64>, &[f64])> = vec![
        (Box::new(ModelId::CompressedExp), vec![0.01, 0.61, 1022.0, 5.4], &minutes),
        (Box::new(ModelId::ExpDecay), vec![0.1, 1.0, 300e-9], &ns),
        (Box::new(ModelId::DoubleExp), vec![0.0, 1.0, 195e-9, -0.6, 75e-9], &ns),
        (Box::new(ModelId::Hyperbolic), vec![272e-9, 185e-9], &powers),
        (Box::new(ModelId::LorentzianDip), vec![1.0, 0.05, 2870.0, 10.0], &ghz),
        (Box::new(ModelId::SaturationEmpirical), vec![1e5, 5.6, 500.0], &powers),
        (
            Box::new(WindowAveraged {
                model: ModelId::CompressedExp,
                window: 60.0,
            }),
            vec![0.0, 0.57, 401.0, 6.9],
            &minutes,
        ),
    ];
    let mut worst_jac: f64 = 0.0;
    for (m, p, xs) in &cases {
        let c = jacobian_check(m.as_ref(), p, xs).unwrap();
        worst_jac = worst_jac.max(if c.applicable { c.max_rel_error } else { f64::INFINITY });
    }

    let row = table1_rows().into_iter().find(|r| r.bias_v == 7.0).unwrap();
    let s = KineticsSettings {
        compression: 10.0,
        ..KineticsSettings::default()
    };
    let fits: Vec<FitResult> = (0..200u64)
        .filter_map(|i| run_kinetics_row(&row, &s, 90_000 + i).ok().and_then(|r| r.fit))
        .collect();
    let mut ratios = Vec::new();
    for name in ["y0", "A", "tau", "beta"] {
        let v: Vec<f64> = fits.iter().map(|f| f.value(name)).collect();
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        let se = fits.iter().map(|f| f.stderr(name)).sum::<f64>() / n;
        ratios.push((name, sd / se));
    }
    let calibrated = fits.len() == 200 && ratios.iter().all(|(_, r)| (0.5..=2.0).contains(r));
    let shown: Vec<String> = ratios.iter().map(|(n, r)| format!("{n} {r:.2}")).collect();
    verdict(
        lin <= 1e-10 && worst_jac <= 1e-6 && calibrated,
        format!(
            "linear rel err {lin:.1e}, jacobian rel err {worst_jac:.1e}, MC sd/stderr [{}] over {} fits",
            shown.join(", "),
            fits.len()
        ),
    )
}

// ---- 8. Estimator formula ---------------------------------------------------

fn estimator_formula() -> Verdict {
    // 2·ε0·εr·V / (q·W²), W = 1e-4 cm
    let hand = 2.0 * 8.8541878128e-14 * 5.7 * 3.0 / (1.602176634e-19 * 1e-8);
    let n = acceptor_density(&DepletionInput::new(3.0, 1e-6)).unwrap();
    let out = compute_scenario(&ScenarioConfig::new(ScenarioId::Fig1G2, 0)).unwrap();
    let stated = out.report.notes.iter().any(|s| s.contains("6e15") && s.contains("order of magnitude"));
    let ratio = out.report.recovered["estimate_6e15_ratio"];
    verdict(
        (n / hand - 1.0).abs() <= 0.01 && (n / 1.9e15 - 1.0).abs() <= 0.01 && stated && ratio < 10.0,
        format!("N_A {n:.4e} cm^-3 vs hand {hand:.4e}, 6e15/N_A = {ratio:.2}, stated in report {stated}"),
    )
}

// ---- 9. Determinism and formats ---------------------------------------------

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn determinism_and_formats() -> Verdict {
    let mut identical = 0;
    for id in ScenarioId::ALL {
        let cfg = ScenarioConfig::new(id, 42);
        let a = compute_scenario(&cfg).unwrap();
        let b = compute_scenario(&cfg).unwrap();
        let same = io::to_json_string(&a.report).unwrap() == io::to_json_string(&b.report).unwrap()
            && a.files == b.files
            && a.plots == b.plots;
        identical += usize::from(same);
    }

    // every golden file must parse and re-serialize byte for byte
    let read = |name: &str| std::fs::read_to_string(golden_dir().join(name)).unwrap_or_default();
    let checks: Vec<(&str, bool)> = vec![
        ("trace.csv", {
            let side: Option<io::TraceSidecar> = io::from_json_str(&read("trace.meta.json")).ok();
            io::trace_from_csv(&read("trace.csv"), side.as_ref())
                .is_ok_and(|t| io::trace_to_csv(&t) == read("trace.csv"))
        }),
        ("timestamps.csv", io::timestamps_from_csv(&read("timestamps.csv"), None)
            .is_ok_and(|t| io::timestamps_to_csv(&t) == read("timestamps.csv"))),
        ("spectrum.csv", io::spectrum_from_csv(&read("spectrum.csv"))
            .is_ok_and(|s| io::spectrum_to_csv(&s) == read("spectrum.csv"))),
        ("dataset.csv", io::dataset_from_csv(&read("dataset.csv"))
            .is_ok_and(|d| io::dataset_to_csv(&d) == read("dataset.csv"))),
        ("dataset_sigma.csv", io::dataset_from_csv(&read("dataset_sigma.csv"))
            .is_ok_and(|d| io::dataset_to_csv(&d) == read("dataset_sigma.csv"))),
        ("occupancy.csv", io::occupancy_from_csv(&read("occupancy.csv"))
            .is_ok_and(|o| io::occupancy_to_csv(&o) == read("occupancy.csv"))),
        ("histogram.csv", io::histogram_from_csv(&read("histogram.csv"))
            .is_ok_and(|h| io::histogram_to_csv(&h) == read("histogram.csv"))),
        ("tail_areas.csv", io::tail_areas_from_csv(&read("tail_areas.csv"))
            .is_ok_and(|a| io::tail_areas_to_csv(&a) == read("tail_areas.csv"))),
        ("state_path.csv", {
            let trace = io::trace_from_csv(&read("trace.csv"), None);
            let path = io::state_path_from_csv(&read("state_path.csv"));
            match (trace, path) {
                (Ok(t), Ok(p)) => io::state_path_to_csv(&t, &p) == read("state_path.csv"),
                _ => false,
            }
        }),
        ("fit_result.json", io::fit_result_from_json(&read("fit_result.json"))
            .is_ok_and(|f| io::to_json_string(&f).unwrap() == read("fit_result.json"))),
        ("calibration.json", io::to_json_string(&default_calibration()).unwrap() == read("calibration.json")),
        ("scenario_config.json", io::from_json_str::<ScenarioConfig>(&read("scenario_config.json"))
            .is_ok_and(|c| io::to_json_string(&c).unwrap() == read("scenario_config.json"))),
        ("scenario_schemas.json", !read("scenario_schemas.json").is_empty()),
    ];
    let bad: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    verdict(
        identical == ScenarioId::ALL.len() && bad.is_empty(),
        format!(
            "{identical}/{} scenarios bit-identical, {}/{} golden formats stable{}",
            ScenarioId::ALL.len(),
            checks.len() - bad.len(),
            checks.len(),
            if bad.is_empty() { String::new() } else { format!(" (drifted: {})", bad.join(", ")) }
        ),
    )
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Verdict); 9] = [
        ("1 Table I round trip", table1_round_trip),
        ("2 HMM correctness", hmm_correctness),
        ("3 mixture populations", mixture_populations),
        ("4 photophysics anchors", photophysics_anchors),
        ("5 spectral decomposition", spectral_decomposition),
        ("6 photon statistics", photon_statistics),
        ("7 fitting engine", fitting_engine),
        ("8 estimator formula", estimator_formula),
        ("9 determinism and formats", determinism_and_formats),
    ];
    let mut failed = Vec::new();
    for (name, check) in criteria {
        let v = check();
        println!("{} criterion {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        if !v.pass {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
