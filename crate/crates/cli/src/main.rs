use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nvcharge::estimators::{acceptor_density, antibunching_fit, g2_histogram, DepletionInput, ACCEPTOR_ASSUMPTIONS};
use nvcharge::fitting::{lm_fit, Bound, CurveModel, LmOptions, ModelId, WindowAveraged};
use nvcharge::inference::{
    fit_hmm, forward_backward, occupancy_timeseries, poisson_mixture_em, viterbi, PoissonHmm, StateEvidence,
};
use nvcharge::io;
use nvcharge::pipelines::{emit_plotdata, run_scenario, ScenarioConfig, ScenarioId};
use nvcharge::spectra::{
    build_nv0_reference, integrate_window, nnls_decompose, resample, select_subtraction_weight, tail_correlation,
    ReferenceBasis, Spectrum,
};
use nvcharge::trace_sim::{simulate_timestamps, simulate_trace, EmitterSpec, TelegraphParams, TraceMeta};

/// Simulation and inference for single NV charge-state dynamics.
///
/// Exit status: 0 on success, 1 on a domain or data error, 2 on a usage error.
#[derive(Parser, Debug)]
#[command(name = "nvcharge", version, args_override_self = true)]
struct Cli {
    /// JSON object of flag values (keys are flag names without `--`); its
    /// values take precedence over the command line
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic data
    #[command(subcommand)]
    Simulate(SimulateCmd),
    /// Hidden-state inference on photon-count traces
    #[command(subcommand)]
    Infer(InferCmd),
    /// Fit a library model to an x,y[,sigma] CSV
    Fit(FitArgs),
    /// Spectral references, decomposition and window areas
    #[command(subcommand)]
    Spectra(SpectraCmd),
    /// Photon-statistics and depletion estimators
    #[command(subcommand)]
    Estimate(EstimateCmd),
    /// Reproducible end-to-end scenarios
    #[command(subcommand)]
    Scenario(ScenarioCmd),
}

#[derive(Subcommand, Debug)]
enum SimulateCmd {
    /// Binned telegraph photon-count trace (CSV plus .meta.json sidecar)
    Trace(SimTraceArgs),
    /// Photon arrival times from an antibunched emitter plus background
    Timestamps(SimStampArgs),
}

#[derive(Args, Debug)]
struct SimTraceArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    duration_s: f64,
    #[arg(long, default_value_t = 100.0)]
    bin_ms: f64,
    /// Long-run bright probability; sets the dark→bright rate
    #[arg(long, default_value_t = 0.57)]
    p_bright: f64,
    #[arg(long, default_value_t = 1.0)]
    rate_bd_per_s: f64,
    #[arg(long, default_value_t = 270.0)]
    cps_bright: f64,
    #[arg(long, default_value_t = 150.0)]
    cps_dark: f64,
    #[arg(long)]
    start_bright: bool,
    #[arg(long, default_value_t = 0.0)]
    bias_v: f64,
    #[arg(long, default_value_t = 1.0)]
    power_mw: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SimStampArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    duration_s: f64,
    #[arg(long, default_value_t = 12.0)]
    lifetime_ns: f64,
    #[arg(long, default_value_t = 5e7)]
    pump_rate_per_s: f64,
    /// Fraction of detected counts that are uncorrelated background
    #[arg(long, default_value_t = 0.0)]
    background_fraction: f64,
    /// Emit pure Poisson light at this rate instead of a single emitter
    #[arg(long, value_name = "CPS")]
    poisson_cps: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum InferCmd {
    /// Baum-Welch fit of a two-state Poisson HMM (JSON)
    Hmm(InferArgs),
    /// Most probable state path (CSV t_s,state)
    Viterbi(InferArgs),
    /// Two-component Poisson mixture of the count histogram (JSON)
    Mixture(InferArgs),
    /// Windowed bright-state occupancy (CSV t_s,p_bright)
    Occupancy(OccupancyArgs),
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long = "in", value_name = "TRACE_CSV")]
    input: PathBuf,
    /// Use this model instead of learning one
    #[arg(long, value_name = "HMM_JSON")]
    hmm: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct OccupancyArgs {
    #[command(flatten)]
    common: InferArgs,
    #[arg(long, default_value_t = 60.0)]
    window_s: f64,
    /// Average the Viterbi path instead of the posterior
    #[arg(long)]
    from_path: bool,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// compressed_exp, exp_decay, double_exp, hyperbolic, lorentzian_dip or saturation_empirical
    model_id: String,
    #[arg(long = "in", value_name = "DATA_CSV")]
    input: PathBuf,
    /// Initial values for every parameter, e.g. y0=0,A=0.6,tau=800,beta=5
    #[arg(long)]
    init: String,
    /// Comma-separated parameters held at their initial values
    #[arg(long)]
    fix: Option<String>,
    /// Fit the model averaged over windows of this width centred on each x
    #[arg(long)]
    window: Option<f64>,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum SpectraCmd {
    /// NV⁰ reference from a zero-bias/biased pair
    BuildRef(BuildRefArgs),
    /// Non-negative two-reference decomposition (JSON)
    Decompose(DecomposeArgs),
    /// Trapezoidal area over a wavelength window
    Integrate(IntegrateArgs),
    /// Which reference explains the window areas of a dark tail (JSON)
    Tailcorr(TailcorrArgs),
}

#[derive(Args, Debug)]
struct BuildRefArgs {
    #[arg(long, value_name = "CSV")]
    zero_bias: PathBuf,
    #[arg(long, value_name = "CSV")]
    biased: PathBuf,
    /// Subtraction weight; chosen to null the 637 nm line when omitted
    #[arg(long)]
    weight: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RefArgs {
    #[arg(long, value_name = "CSV")]
    ref_minus: PathBuf,
    #[arg(long, value_name = "CSV")]
    ref_zero: PathBuf,
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    #[arg(long = "in", value_name = "SPECTRUM_CSV")]
    input: PathBuf,
    #[command(flatten)]
    refs: RefArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct IntegrateArgs {
    #[arg(long = "in", value_name = "SPECTRUM_CSV")]
    input: PathBuf,
    #[arg(long)]
    lo_nm: f64,
    #[arg(long)]
    hi_nm: f64,
}

#[derive(Args, Debug)]
struct TailcorrArgs {
    /// CSV lo_nm,hi_nm,area
    #[arg(long = "in", value_name = "AREAS_CSV")]
    input: PathBuf,
    #[command(flatten)]
    refs: RefArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum EstimateCmd {
    /// g²(τ) histogram from arrival times (CSV tau_s,g2,coincidences)
    G2(G2Args),
    /// Acceptor density from the depletion width at a given bias
    AcceptorDensity(DensityArgs),
}

#[derive(Args, Debug)]
struct G2Args {
    #[arg(long = "in", value_name = "TIMESTAMPS_CSV")]
    input: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    bin_ns: f64,
    #[arg(long, default_value_t = 100.0)]
    max_tau_ns: f64,
    /// Also fit the antibunching dip and write the result here
    #[arg(long, value_name = "JSON")]
    fit_out: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct DensityArgs {
    #[arg(long)]
    voltage: f64,
    #[arg(long)]
    width_um: f64,
    #[arg(long, default_value_t = nvcharge::estimators::EPS_R_DIAMOND)]
    eps_r: f64,
}

#[derive(Subcommand, Debug)]
enum ScenarioCmd {
    /// Run a scenario and write its artifacts and report.json
    Run(ScenarioArgs),
    /// Run a scenario and also write one CSV per plot panel
    Plotdata(ScenarioArgs),
}

#[derive(Args, Debug)]
struct ScenarioArgs {
    #[arg(long)]
    id: String,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Scenario override, repeatable: --set compression=10
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// ScenarioConfig JSON supplying overrides and anchors
    #[arg(long, value_name = "JSON")]
    scenario_config: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Domain(nvcharge::Error),
}

impl From<nvcharge::Error> for Failure {
    fn from(e: nvcharge::Error) -> Self {
        Failure::Domain(e)
    }
}

type CliResult = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let argv = match apply_config(argv) {
        Ok(a) => a,
        Err(f) => return report(f),
    };
    let cli = Cli::try_parse_from(&argv).unwrap_or_else(|e| e.exit());
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    match f {
        Failure::Usage(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Failure::Domain(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

/// Appends the `--config` file's entries as flags so they override argv.
fn apply_config(mut argv: Vec<String>) -> Result<Vec<String>, Failure> {
    let pos = argv.iter().position(|a| a == "--config" || a.starts_with("--config="));
    let Some(pos) = pos else { return Ok(argv) };
    let path = match argv[pos].strip_prefix("--config=") {
        Some(p) => p.to_string(),
        None => argv
            .get(pos + 1)
            .cloned()
            .ok_or_else(|| usage("--config needs a file path"))?,
    };
    let text = std::fs::read_to_string(&path).map_err(|e| usage(format!("--config {path}: {e}")))?;
    let doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("--config {path}: {e}")))?;
    let serde_json::Value::Object(map) = doc else {
        return Err(usage(format!(
            "--config {path}: expected a JSON object of flag values, e.g. {{\"seed\": 7, \"duration-s\": 60}}"
        )));
    };
    for (key, v) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        match v {
            serde_json::Value::Bool(true) => argv.push(flag),
            serde_json::Value::Bool(false) => {}
            serde_json::Value::Number(n) => argv.extend([flag, n.to_string()]),
            serde_json::Value::String(s) => argv.extend([flag, s]),
            serde_json::Value::Array(items) => {
                for item in items {
                    let s = match item {
                        serde_json::Value::String(s) => s,
                        other => other.to_string(),
                    };
                    argv.extend([flag.clone(), s]);
                }
            }
            _ => return Err(usage(format!("--config {path}: `{key}` must be a scalar or a list"))),
        }
    }
    Ok(argv)
}

fn dispatch(cmd: Command) -> CliResult {
    match cmd {
        Command::Simulate(SimulateCmd::Trace(a)) => sim_trace(a),
        Command::Simulate(SimulateCmd::Timestamps(a)) => sim_timestamps(a),
        Command::Infer(InferCmd::Hmm(a)) => infer_hmm(a),
        Command::Infer(InferCmd::Viterbi(a)) => infer_viterbi(a),
        Command::Infer(InferCmd::Mixture(a)) => infer_mixture(a),
        Command::Infer(InferCmd::Occupancy(a)) => infer_occupancy(a),
        Command::Fit(a) => fit(a),
        Command::Spectra(SpectraCmd::BuildRef(a)) => build_ref(a),
        Command::Spectra(SpectraCmd::Decompose(a)) => decompose(a),
        Command::Spectra(SpectraCmd::Integrate(a)) => integrate(a),
        Command::Spectra(SpectraCmd::Tailcorr(a)) => tailcorr(a),
        Command::Estimate(EstimateCmd::G2(a)) => g2(a),
        Command::Estimate(EstimateCmd::AcceptorDensity(a)) => density(a),
        Command::Scenario(ScenarioCmd::Run(a)) => scenario(a, false),
        Command::Scenario(ScenarioCmd::Plotdata(a)) => scenario(a, true),
    }
}

fn emit(out: Option<&Path>, text: &str) -> CliResult {
    match out {
        Some(p) => Ok(io::write_atomic(p, text.as_bytes())?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit_json<T: serde::Serialize>(out: Option<&Path>, v: &T) -> CliResult {
    emit(out, &io::to_json_string(v)?)
}

fn positive(flag: &str, v: f64) -> Result<f64, Failure> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(usage(format!("--{flag} must be a positive number, got {v}")))
    }
}

fn sim_trace(a: SimTraceArgs) -> CliResult {
    if !(0.0..1.0).contains(&a.p_bright) {
        return Err(usage(format!("--p-bright must lie in [0, 1), got {}", a.p_bright)));
    }
    let k_bd = positive("rate-bd-per-s", a.rate_bd_per_s)?;
    let bin = positive("bin-ms", a.bin_ms)? * 1e-3;
    let mut tp = TelegraphParams::constant(k_bd * a.p_bright / (1.0 - a.p_bright), k_bd, a.cps_bright, a.cps_dark);
    tp.start_bright = a.start_bright;
    let mut trace = simulate_trace(&tp, positive("duration-s", a.duration_s)?, bin, a.seed)?;
    trace.meta = TraceMeta {
        bias_v: a.bias_v,
        power_mw: a.power_mw,
        start_time_s: 0.0,
    };
    match &a.out {
        Some(p) => Ok(io::save_trace(p, &trace)?),
        None => emit(None, &io::trace_to_csv(&trace)),
    }
}

fn sim_timestamps(a: SimStampArgs) -> CliResult {
    let spec = match a.poisson_cps {
        Some(rate) => EmitterSpec {
            single_emitter: false,
            excited_lifetime: 0.0,
            pump_rate: 0.0,
            background_rate: positive("poisson-cps", rate)?,
        },
        None => {
            if !(0.0..1.0).contains(&a.background_fraction) {
                return Err(usage("--background-fraction must lie in [0, 1)"));
            }
            EmitterSpec {
                single_emitter: true,
                excited_lifetime: positive("lifetime-ns", a.lifetime_ns)? * 1e-9,
                pump_rate: positive("pump-rate-per-s", a.pump_rate_per_s)?,
                background_rate: 0.0,
            }
            .with_background_fraction(a.background_fraction)
        }
    };
    let stream = simulate_timestamps(&spec, positive("duration-s", a.duration_s)?, a.seed)?;
    match &a.out {
        Some(p) => Ok(io::save_timestamps(p, &stream)?),
        None => emit(None, &io::timestamps_to_csv(&stream)),
    }
}

fn model_for(a: &InferArgs, trace: &nvcharge::trace_sim::PhotonTrace) -> Result<PoissonHmm, Failure> {
    match &a.hmm {
        Some(p) => {
            let hmm: PoissonHmm = io::read_json(p)?;
            hmm.validate()?;
            Ok(hmm)
        }
        None => Ok(fit_hmm(trace)?.0),
    }
}

fn infer_hmm(a: InferArgs) -> CliResult {
    let trace = io::load_trace(&a.input)?;
    let hmm = model_for(&a, &trace)?;
    emit_json(a.out.as_deref(), &hmm)
}

fn infer_viterbi(a: InferArgs) -> CliResult {
    let trace = io::load_trace(&a.input)?;
    let hmm = model_for(&a, &trace)?;
    let (path, _) = viterbi(&hmm, &trace)?;
    emit(a.out.as_deref(), &io::state_path_to_csv(&trace, &path))
}

fn infer_mixture(a: InferArgs) -> CliResult {
    if a.hmm.is_some() {
        return Err(usage("--hmm is not used by `infer mixture`"));
    }
    let trace = io::load_trace(&a.input)?;
    emit_json(a.out.as_deref(), &poisson_mixture_em(&trace.counts)?)
}

fn infer_occupancy(a: OccupancyArgs) -> CliResult {
    let trace = io::load_trace(&a.common.input)?;
    let hmm = model_for(&a.common, &trace)?;
    let window = positive("window-s", a.window_s)?;
    let occ = if a.from_path {
        let (path, _) = viterbi(&hmm, &trace)?;
        occupancy_timeseries(StateEvidence::Path(&path), &trace, window)?
    } else {
        let post = forward_backward(&hmm, &trace)?;
        occupancy_timeseries(StateEvidence::Posterior(&post.gamma), &trace, window)?
    };
    emit(a.common.out.as_deref(), &io::occupancy_to_csv(&occ))
}

fn parse_assignments(flag: &str, text: &str, names: &[&str]) -> Result<BTreeMap<String, f64>, Failure> {
    let expected = || format!("expected --{flag} {}", names.iter().map(|n| format!("{n}=<number>")).collect::<Vec<_>>().join(","));
    let mut out = BTreeMap::new();
    for part in text.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| usage(format!("--{flag}: `{part}` is not key=value; {}", expected())))?;
        let k = k.trim();
        if !names.contains(&k) {
            return Err(usage(format!("--{flag}: unknown parameter `{k}`; {}", expected())));
        }
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| usage(format!("--{flag}: `{v}` is not a number; {}", expected())))?;
        out.insert(k.to_string(), v);
    }
    Ok(out)
}

fn fit(a: FitArgs) -> CliResult {
    let id: ModelId = a.model_id.parse().map_err(|e: nvcharge::Error| usage(e.to_string()))?;
    let windowed;
    let model: &dyn CurveModel = match a.window {
        Some(w) => {
            windowed = WindowAveraged {
                model: id,
                window: positive("window", w)?,
            };
            &windowed
        }
        None => &id,
    };
    let names = model.param_names();
    let given = parse_assignments("init", &a.init, names)?;
    let missing: Vec<&str> = names.iter().copied().filter(|n| !given.contains_key(*n)).collect();
    if !missing.is_empty() {
        return Err(usage(format!(
            "--init is missing {}; {} takes {}",
            missing.join(", "),
            id,
            names.join(",")
        )));
    }
    let init: Vec<f64> = names.iter().map(|n| given[*n]).collect();
    let bounds = match &a.fix {
        Some(list) => {
            let fixed: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
            if let Some(bad) = fixed.iter().find(|f| !names.contains(f)) {
                return Err(usage(format!("--fix: unknown parameter `{bad}`; {id} takes {}", names.join(","))));
            }
            Some(
                names
                    .iter()
                    .zip(&init)
                    .map(|(n, v)| if fixed.contains(n) { Bound::fixed(*v) } else { Bound::FREE })
                    .collect::<Vec<_>>(),
            )
        }
        None => None,
    };
    let data = io::load_dataset(&a.input)?;
    let opts = LmOptions {
        max_iter: a.max_iter,
        ..LmOptions::default()
    };
    let result = lm_fit(model, &data, &init, bounds.as_deref(), &opts)?;
    match &a.out {
        Some(p) => Ok(io::save_fit_result(p, &result)?),
        None => emit_json(None, &result),
    }
}

fn build_ref(a: BuildRefArgs) -> CliResult {
    let s0 = io::load_spectrum(&a.zero_bias)?;
    let s10 = io::load_spectrum(&a.biased)?;
    let s10 = if s10.same_grid(&s0) { s10 } else { resample(&s10, &s0.wavelength_nm)? };
    let w = match a.weight {
        Some(w) => w,
        None => select_subtraction_weight(&s0, &s10)?,
    };
    eprintln!("subtraction weight {w}");
    let r = build_nv0_reference(&s0, &s10, w)?;
    emit(a.out.as_deref(), &io::spectrum_to_csv(&r))
}

fn basis(refs: &RefArgs) -> Result<ReferenceBasis, Failure> {
    let m = io::load_spectrum(&refs.ref_minus)?;
    let z = io::load_spectrum(&refs.ref_zero)?;
    let z = if z.same_grid(&m) { z } else { resample(&z, &m.wavelength_nm)? };
    Ok(ReferenceBasis::new(&m, &z)?)
}

fn on_grid(s: Spectrum, basis: &ReferenceBasis) -> Result<Spectrum, Failure> {
    if s.wavelength_nm == basis.grid() {
        Ok(s)
    } else {
        Ok(resample(&s, basis.grid())?)
    }
}

fn decompose(a: DecomposeArgs) -> CliResult {
    let b = basis(&a.refs)?;
    let s = on_grid(io::load_spectrum(&a.input)?, &b)?;
    emit_json(a.out.as_deref(), &nnls_decompose(&s, &b)?)
}

fn integrate(a: IntegrateArgs) -> CliResult {
    let s = io::load_spectrum(&a.input)?;
    println!("{:?}", integrate_window(&s, a.lo_nm, a.hi_nm)?);
    Ok(())
}

fn tailcorr(a: TailcorrArgs) -> CliResult {
    let b = basis(&a.refs)?;
    let areas = io::tail_areas_from_csv(&std::fs::read_to_string(&a.input).map_err(nvcharge::Error::from)?)?;
    emit_json(a.out.as_deref(), &tail_correlation(&areas, &b)?)
}

fn g2(a: G2Args) -> CliResult {
    let stream = io::load_timestamps(&a.input)?;
    let h = g2_histogram(&stream, positive("bin-ns", a.bin_ns)? * 1e-9, positive("max-tau-ns", a.max_tau_ns)? * 1e-9)?;
    if let Some(p) = &a.fit_out {
        io::write_json(p, &antibunching_fit(&h)?)?;
    }
    match &a.out {
        Some(p) => {
            io::save_histogram(p, &h)?;
            println!("g2(0) = {:.4} ± {:.4}", h.g2_zero, h.g2_zero_err);
            Ok(())
        }
        None => emit(None, &io::histogram_to_csv(&h)),
    }
}

fn density(a: DensityArgs) -> CliResult {
    let inp = DepletionInput {
        voltage_v: positive("voltage", a.voltage)?,
        depletion_width_m: positive("width-um", a.width_um)? * 1e-6,
        epsilon_r: positive("eps-r", a.eps_r)?,
    };
    let n = acceptor_density(&inp)?;
    println!("N_A = {n:.3e} cm^-3");
    println!("assumes: {ACCEPTOR_ASSUMPTIONS}");
    Ok(())
}

fn scenario(a: ScenarioArgs, plots: bool) -> CliResult {
    let id: ScenarioId = a.id.parse().map_err(|e: nvcharge::Error| usage(format!("--id: {e}")))?;
    let mut cfg = match &a.scenario_config {
        Some(p) => {
            let mut c: ScenarioConfig = io::read_json(p)?;
            c.scenario_id = id;
            c.seed = a.seed;
            c
        }
        None => ScenarioConfig::new(id, a.seed),
    };
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| usage(format!("--set: `{kv}` is not KEY=VALUE")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| usage(format!("--set {k}: `{v}` is not a number")))?;
        cfg.overrides.insert(k.trim().to_string(), v);
    }
    let (outcome, dir) = run_scenario(&cfg, &a.out)?;
    if plots {
        for p in emit_plotdata(&outcome, &dir)? {
            eprintln!("wrote {}", p.display());
        }
    }
    eprintln!("wrote {}", dir.display());
    emit_json(None, &outcome.report)
}
