use nvcharge::fitting::{lm_fit, Dataset, LmOptions, ModelId};
use nvcharge::inference::*;
use nvcharge::rng::rng_from_seed;
use nvcharge::trace_sim::*;
use nvcharge::Error;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Poisson};

fn ln_pmf(k: u64, l: f64) -> f64 {
    let lnfact: f64 = (1..=k).map(|j| (j as f64).ln()).sum();
    k as f64 * l.ln() - l - lnfact
}

fn brute_path_lp(hmm: &PoissonHmm, counts: &[u64], path: &[usize]) -> f64 {
    let mut lp = hmm.initial_prob[path[0]].ln() + ln_pmf(counts[0], hmm.lambda[path[0]]);
    for t in 1..counts.len() {
        lp += hmm.transition[path[t - 1]][path[t]].ln() + ln_pmf(counts[t], hmm.lambda[path[t]]);
    }
    lp
}

fn all_paths(t: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..1usize << t).map(move |m| (0..t).map(|i| (m >> i) & 1).collect())
}

fn sample_hmm(hmm: &PoissonHmm, n: usize, seed: u64) -> (Vec<u64>, Vec<u8>) {
    let mut rng = rng_from_seed(seed);
    let mut s = usize::from(rng.random::<f64>() < hmm.initial_prob[1]);
    let mut counts = Vec::with_capacity(n);
    let mut states = Vec::with_capacity(n);
    for _ in 0..n {
        counts.push(Poisson::new(hmm.lambda[s]).unwrap().sample(&mut rng) as u64);
        states.push(s as u8);
        if rng.random::<f64>() < hmm.transition[s][1 - s] {
            s = 1 - s;
        }
    }
    (counts, states)
}

fn trace(counts: Vec<u64>) -> PhotonTrace {
    PhotonTrace::new(0.1, counts).unwrap()
}

fn hmm_strategy() -> impl Strategy<Value = PoissonHmm> {
    (0.01f64..0.99, 0.01f64..0.99, 0.01f64..0.99, 0.5f64..20.0, 0.5f64..20.0).prop_map(|(p0, a, b, l0, dl)| {
        PoissonHmm {
            initial_prob: [1.0 - p0, p0],
            transition: [[1.0 - a, a], [b, 1.0 - b]],
            lambda: [l0, l0 + dl],
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_and_viterbi_match_enumeration(
        hmm in hmm_strategy(),
        counts in prop::collection::vec(0u64..40, 1..=10),
    ) {
        let tr = trace(counts.clone());
        let lps: Vec<(f64, Vec<usize>)> = all_paths(counts.len())
            .map(|p| (brute_path_lp(&hmm, &counts, &p), p))
            .collect();
        let max = lps.iter().map(|x| x.0).fold(f64::NEG_INFINITY, f64::max);
        let ll = max + lps.iter().map(|x| (x.0 - max).exp()).sum::<f64>().ln();
        let post = forward_backward(&hmm, &tr).unwrap();
        prop_assert!((post.log_likelihood - ll).abs() <= 1e-10 * ll.abs().max(1.0));
        for g in &post.gamma {
            prop_assert!((g[0] + g[1] - 1.0).abs() <= 1e-9);
        }
        // posterior marginals by enumeration
        for t in 0..counts.len() {
            let bright: f64 = lps.iter().filter(|x| x.1[t] == 1).map(|x| (x.0 - ll).exp()).sum();
            prop_assert!((post.gamma[t][1] - bright).abs() < 1e-9);
        }
        let (path, lp) = viterbi(&hmm, &tr).unwrap();
        let path: Vec<usize> = path.iter().map(|&s| s as usize).collect();
        prop_assert!((lp - max).abs() <= 1e-10 * max.abs().max(1.0));
        prop_assert!((brute_path_lp(&hmm, &counts, &path) - max).abs() <= 1e-10 * max.abs().max(1.0));
    }

    #[test]
    fn baum_welch_never_decreases_likelihood(seed in 0u64..10_000, init in hmm_strategy()) {
        let truth = PoissonHmm::symmetric(15.0, 27.0, 0.05);
        let (counts, _) = sample_hmm(&truth, 400, seed);
        let opts = BaumWelchOptions { max_iter: 60, tol: 0.0 };
        match baum_welch(&trace(counts), &init, &opts) {
            Ok((_, hist)) => {
                for w in hist.windows(2) {
                    prop_assert!(w[1] >= w[0] - 1e-8, "{} -> {}", w[0], w[1]);
                }
            }
            Err(Error::DegenerateFit(_)) => {}
            Err(e) => prop_assert!(false, "{e}"),
        }
    }

    #[test]
    fn mixture_em_never_decreases_likelihood(seed in 0u64..10_000, w in 0.1f64..0.9) {
        let mut rng = rng_from_seed(seed);
        let counts: Vec<u64> = (0..500)
            .map(|_| {
                let l = if rng.random::<f64>() < w { 27.0 } else { 15.0 };
                Poisson::new(l).unwrap().sample(&mut rng) as u64
            })
            .collect();
        if let Ok((fit, hist)) = poisson_mixture_em_traced(&counts) {
            for p in hist.windows(2) {
                prop_assert!(p[1] >= p[0] - 1e-8);
            }
            prop_assert!(fit.lambda_dark < fit.lambda_bright);
            prop_assert!((0.0..=1.0).contains(&fit.weight_bright));
        }
    }
}

// every dwell lasts at least `min_dwell` bins, plus a geometric excess
fn sample_min_dwell(lambda: [f64; 2], min_dwell: usize, extra_mean: f64, n: usize, seed: u64) -> (Vec<u64>, Vec<u8>) {
    let mut rng = rng_from_seed(seed);
    let mut states = Vec::with_capacity(n);
    let mut s = 0u8;
    while states.len() < n {
        let mut len = min_dwell;
        while rng.random::<f64>() > 1.0 / (extra_mean + 1.0) {
            len += 1;
        }
        states.extend(std::iter::repeat_n(s, len));
        s = 1 - s;
    }
    states.truncate(n);
    let counts = states
        .iter()
        .map(|&s| Poisson::new(lambda[s as usize]).unwrap().sample(&mut rng) as u64)
        .collect();
    (counts, states)
}

fn accuracy(path: &[u8], states: &[u8]) -> f64 {
    path.iter().zip(states).filter(|(a, b)| a == b).count() as f64 / states.len() as f64
}

#[test]
fn accuracy_at_observed_levels() {
    let mut worst: f64 = 1.0;
    for seed in 0..5 {
        let (counts, states) = sample_min_dwell([15.0, 27.0], 10, 10.0, 10_000, seed);
        let tr = trace(counts);
        let (fitted, _) = fit_hmm(&tr).unwrap();
        let acc = accuracy(&forward_backward(&fitted, &tr).unwrap().argmax_path(), &states);
        worst = worst.min(acc);
    }
    assert!(worst >= 0.97, "{worst}");
}

#[test]
fn accuracy_with_markov_dwells() {
    // geometric dwells averaging 20 bins
    let truth = PoissonHmm::symmetric(15.0, 27.0, 0.05);
    for seed in 0..5 {
        let (counts, states) = sample_hmm(&truth, 10_000, seed);
        let tr = trace(counts);
        let (fitted, _) = fit_hmm(&tr).unwrap();
        let acc = accuracy(&forward_backward(&fitted, &tr).unwrap().argmax_path(), &states);
        assert!(acc >= 0.97, "seed {seed}: {acc}");
    }
}

#[test]
fn baum_welch_recovers_generating_model() {
    let truth = PoissonHmm {
        initial_prob: [0.5, 0.5],
        transition: [[0.98, 0.02], [0.03, 0.97]],
        lambda: [15.0, 27.0],
    };
    let (counts, _) = sample_hmm(&truth, 100_000, 77);
    let (hmm, _) = fit_hmm(&trace(counts.clone())).unwrap();
    for s in 0..2 {
        assert!((hmm.lambda[s] / truth.lambda[s] - 1.0).abs() < 0.02, "{hmm:?}");
        let p = hmm.transition[s][1 - s];
        let q = truth.transition[s][1 - s];
        assert!((p / q - 1.0).abs() < 0.2, "{hmm:?}");
    }
    // posterior-mean count conservation
    let post = forward_backward(&hmm, &trace(counts.clone())).unwrap();
    let expected: f64 = post.gamma.iter().map(|g| g[0] * hmm.lambda[0] + g[1] * hmm.lambda[1]).sum();
    let total = counts.iter().sum::<u64>() as f64;
    assert!((expected / total - 1.0).abs() < 0.02);
}

#[test]
fn label_swap_converges_to_same_model() {
    let truth = PoissonHmm::symmetric(15.0, 27.0, 0.05);
    let (counts, _) = sample_hmm(&truth, 5000, 3);
    let tr = trace(counts);
    let init = PoissonHmm {
        initial_prob: [0.6, 0.4],
        transition: [[0.9, 0.1], [0.2, 0.8]],
        lambda: [12.0, 30.0],
    };
    let opts = BaumWelchOptions { max_iter: 2000, tol: 1e-10 };
    let (a, _) = baum_welch(&tr, &init, &opts).unwrap();
    let (b, _) = baum_welch(&tr, &init.swapped(), &opts).unwrap();
    for s in 0..2 {
        assert!((a.lambda[s] - b.lambda[s]).abs() < 1e-6);
        for j in 0..2 {
            assert!((a.transition[s][j] - b.transition[s][j]).abs() < 1e-6);
        }
    }
    assert!(a.lambda[0] < a.lambda[1]);
}

#[test]
fn constant_rate_data_is_degenerate() {
    let mut rng = rng_from_seed(5);
    let counts: Vec<u64> = (0..20_000).map(|_| Poisson::new(15.0).unwrap().sample(&mut rng) as u64).collect();
    assert!(matches!(fit_hmm(&trace(counts.clone())), Err(Error::DegenerateFit(_))));
    assert!(matches!(poisson_mixture_em(&counts), Err(Error::DegenerateFit(_))));
}

#[test]
fn mixture_recovers_balanced_components() {
    let mut rng = rng_from_seed(6);
    let counts: Vec<u64> = (0..100_000)
        .map(|i| Poisson::new(if i % 2 == 0 { 15.0 } else { 27.0 }).unwrap().sample(&mut rng) as u64)
        .collect();
    let fit = poisson_mixture_em(&counts).unwrap();
    assert!((fit.lambda_dark / 15.0 - 1.0).abs() < 0.02, "{fit:?}");
    assert!((fit.lambda_bright / 27.0 - 1.0).abs() < 0.02, "{fit:?}");
    assert!((fit.weight_bright - 0.5).abs() < 0.02, "{fit:?}");
    assert!((fit.overlap - poisson_overlap(15.0, 27.0)).abs() < 0.02);
}

#[test]
fn steady_regime_population() {
    // long-time asymptote of the biased rows: p ≈ 0.57
    let p = 0.57;
    let tp = TelegraphParams::constant(0.2 * p / (1.0 - p), 0.2, 270.0, 150.0);
    for seed in 0..5 {
        let tr = simulate_trace(&tp, 3000.0, 0.1, 300 + seed).unwrap();
        let fit = poisson_mixture_em(&tr.counts).unwrap();
        assert!((0.50..=0.65).contains(&fit.weight_bright), "seed {seed}: {}", fit.weight_bright);
    }
}

#[test]
fn rare_bursts_give_small_bright_weight() {
    let tp = TelegraphParams::constant(0.002, 1.0, 270.0, 150.0);
    let tr = simulate_trace(&tp, 1080.0, 0.1, 8).unwrap();
    let hmm = match fit_hmm(&tr) {
        Ok((h, _)) => h,
        Err(Error::DegenerateFit(_)) => PoissonHmm::symmetric(15.0, 27.0, 0.01),
        Err(e) => panic!("{e}"),
    };
    let post = forward_backward(&hmm, &tr).unwrap();
    let occ = occupancy_timeseries(StateEvidence::Posterior(&post.gamma), &tr, 60.0).unwrap();
    assert_eq!(occ.p_bright.len(), 18);
    assert!(occ.p_bright.iter().all(|&p| p < 0.05), "{:?}", occ.p_bright);
}

#[test]
fn path_switches_follow_truth() {
    let p = 0.57;
    let tp = TelegraphParams::constant(0.2 * p / (1.0 - p), 0.2, 270.0, 150.0);
    let (tr, truth) = simulate_trace_with_truth(&tp, 3000.0, 0.1, 12).unwrap();
    let (hmm, _) = fit_hmm(&tr).unwrap();
    let (path, _) = viterbi(&hmm, &tr).unwrap();
    let switches = path.windows(2).filter(|w| w[0] != w[1]).count() as f64;
    let ratio = switches / truth.switch_times.len() as f64;
    assert!((ratio - 1.0).abs() <= 0.2, "{ratio}");
}

#[test]
fn nine_volt_occupancy_recovers_tau() {
    let target = OccupancyTarget { y0: 0.0, a: 0.57, tau: 401.0, beta: 6.9 };
    let duration = 18.0 * 60.0;
    let k_bd = 3.0;
    let rate = rates_from_occupancy_target(&target, k_bd, &RateTableGrid::new(duration, 1.0)).unwrap();
    let tp = TelegraphParams { rate_dark_to_bright: rate, ..TelegraphParams::constant(0.0, k_bd, 270.0, 150.0) };
    let tr = simulate_trace(&tp, duration, 0.1, 21).unwrap();
    let (hmm, _) = fit_hmm(&tr).unwrap();
    let post = forward_backward(&hmm, &tr).unwrap();
    let occ = occupancy_timeseries(StateEvidence::Posterior(&post.gamma), &tr, 60.0).unwrap();
    let fit = lm_fit(
        &ModelId::CompressedExp,
        &Dataset::new(occ.times.clone(), occ.p_bright.clone()),
        &[0.0, 0.5, 350.0, 3.0],
        None,
        &LmOptions::default(),
    )
    .unwrap();
    assert!((fit.value("tau") / 401.0 - 1.0).abs() < 0.15, "{}", fit.value("tau"));
}

#[test]
fn occupancy_of_certain_bright_is_one() {
    let tr = trace(vec![20; 1000]);
    let gamma = vec![[0.0, 1.0]; 1000];
    let occ = occupancy_timeseries(StateEvidence::Posterior(&gamma), &tr, 10.0).unwrap();
    assert_eq!(occ.p_bright, vec![1.0; 10]);
    assert_eq!(occ.times[0], 5.0);
}
