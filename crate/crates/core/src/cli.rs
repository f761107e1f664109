//! Command-line front end. Exit codes: 0 success, 2 configuration error,
//! 3 runtime error.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::bounds::{self, ConstantLedger};
use crate::engine::{self, Mode, NoiseGenerator, ProjectionRadii, RunConfig};
use crate::harness::{
    self, emit_report, experiment_bounds, run_lockin, run_rate_fit, write_atomic,
    ExperimentConfig, ExperimentResult, HarnessError, Instance,
};
use crate::linalg;
use crate::model::{NoiseBounds, Radii, SpecJson, StepsizeSchedule};
use crate::rl::{self, GtdSampler, GtdVariant, MdpSpec};
use crate::spectral::{SpectralConstants, DEFAULT_Q_FRACTION, DEFAULT_SAFETY};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "twoscale",
    version,
    about = "Linear two-timescale stochastic approximation: simulation, lock-in bounds and GTD instances"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Monte Carlo lock-in frequency of unprojected iterates against the lock-in bound
    Lockin(ExperimentArgs),
    /// Empirical convergence rate of sparsely projected iterates
    Rate(ExperimentArgs),
    /// Constant ledger, thresholds and probability bounds
    Bounds(BoundsArgs),
    /// Build a GTD-family instance on a random Markov reward process
    Gtd(GtdArgs),
    /// Run a single trajectory and write it as CSV
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    /// Experiment config (or a manifest from an earlier run)
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory
    #[arg(long, default_value = "twoscale-out")]
    pub out: PathBuf,
    /// Number of independent trials
    #[arg(long)]
    pub trials: Option<usize>,
    /// Master RNG seed; trial i uses stream i
    #[arg(long)]
    pub seed: Option<u64>,
    /// Last simulated index
    #[arg(long)]
    pub horizon: Option<usize>,
    /// Recording stride (powers of two and the horizon are always recorded)
    #[arg(long)]
    pub stride: Option<usize>,
    /// n0: start index (n0' for rate experiments)
    #[arg(long)]
    pub n0: Option<usize>,
    /// n1: first monitored index of the lock-in event
    #[arg(long)]
    pub n1: Option<usize>,
    /// eps1: lock-in radius around theta*
    #[arg(long)]
    pub eps1: Option<f64>,
    /// eps2: lock-in radius for z = w - lambda(theta)
    #[arg(long)]
    pub eps2: Option<f64>,
    /// R1^in: initial radius around theta*; also sets the projection radius R1^in/2
    #[arg(long)]
    pub r1in: Option<f64>,
    /// R2^in: initial radius for z; also sets the projection radius R2^in/2
    #[arg(long)]
    pub r2in: Option<f64>,
    /// R2^out: outer radius for z, must exceed R2^in
    #[arg(long)]
    pub r2out: Option<f64>,
    /// kappa in (0, 1): split parameter of the closed-form series bound
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Worker threads (overrides TWOSCALE_WORKERS)
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Table,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Sweep {
    Eps,
    N0,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    /// Problem spec JSON (d, v1, gamma1, w1, v2, gamma2, w2)
    #[arg(long, required_unless_present = "config")]
    pub spec: Option<PathBuf>,
    /// Experiment config supplying spec, radii, noise and schedule; flags override it
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// eps: sets both eps1 and eps2
    #[arg(long)]
    pub eps: Option<f64>,
    /// eps1: lock-in radius around theta*
    #[arg(long)]
    pub eps1: Option<f64>,
    /// eps2: lock-in radius for z = w - lambda(theta)
    #[arg(long)]
    pub eps2: Option<f64>,
    /// n0: start index of the lock-in event (n0' when a power of two)
    #[arg(long)]
    pub n0: Option<u64>,
    /// R1^in: initial radius around theta*
    #[arg(long)]
    pub r1in: Option<f64>,
    /// R2^in: initial radius for z
    #[arg(long)]
    pub r2in: Option<f64>,
    /// R2^out: outer radius for z
    #[arg(long)]
    pub r2out: Option<f64>,
    /// m1: noise growth constant of the slow iterate
    #[arg(long)]
    pub m1: Option<f64>,
    /// m2: noise growth constant of the fast iterate
    #[arg(long)]
    pub m2: Option<f64>,
    /// alpha exponent of the slow stepsize (n+1)^-alpha
    #[arg(long)]
    pub alpha: Option<f64>,
    /// beta exponent of the fast stepsize (n+1)^-beta
    #[arg(long)]
    pub beta: Option<f64>,
    /// kappa in (0, 1): split parameter of the closed-form series bound
    #[arg(long)]
    pub kappa: Option<f64>,
    /// Safety factor: q1 = safety * (smallest real eigenvalue part of X1), likewise q2
    #[arg(long)]
    pub safety: Option<f64>,
    /// q = q_fraction * min(q1, q2)
    #[arg(long)]
    pub q_fraction: Option<f64>,
    /// Output format
    #[arg(long, value_enum, default_value = "json")]
    pub format: Format,
    /// Emit CSV over a grid of eps or n0 values
    #[arg(long, value_enum)]
    pub sweep: Option<Sweep>,
    /// Comma-separated sweep grid (defaults: 10 log-spaced eps, or n0 = 2^4..2^20)
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    /// Also write the output into this directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GtdArgs {
    /// Algorithm: gtd0, gtd2 or tdc
    #[arg(long)]
    pub variant: GtdVariant,
    /// Number of states of the Markov reward process
    #[arg(long, default_value_t = 5)]
    pub states: usize,
    /// Feature dimension d
    #[arg(long, default_value_t = 3)]
    pub dim: usize,
    /// Seed of the random instance
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// gamma: discount factor in [0, 1)
    #[arg(long, default_value_t = 0.9)]
    pub gamma: f64,
    /// Write spec.json, mdp.json and gtd.json into this directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SimMode {
    Unprojected,
    Projected,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Experiment config
    #[arg(long)]
    pub config: PathBuf,
    /// Trial index (RNG stream)
    #[arg(long, default_value_t = 0)]
    pub trial: u64,
    /// Projected mode uses radii R1^in/2 and R2^in/2 at powers of two
    #[arg(long, value_enum, default_value = "unprojected")]
    pub mode: SimMode,
    /// Output directory for trajectory.csv
    #[arg(long, default_value = "twoscale-out")]
    pub out: PathBuf,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime { name: String, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Runtime { .. } => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Config(m) => write!(f, "config error: {m}"),
            Self::Runtime { name, message } => write!(f, "runtime error [{name}]: {message}"),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        if e.is_config_error() {
            Self::Config(format!("{} ({})", e, e.qualified_name()))
        } else {
            Self::Runtime {
                name: e.qualified_name(),
                message: e.to_string(),
            }
        }
    }
}

fn from_bounds(e: bounds::BoundsError) -> CliError {
    HarnessError::from(e).into()
}

fn read_input(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = read_input(path)?;
    ExperimentConfig::from_json_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// The output directory must be creatable: either an existing directory or a
/// path whose parent exists.
fn check_out_dir(dir: &Path) -> Result<(), CliError> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(CliError::Config(format!("--out {} is not a directory", dir.display())));
        }
        return Ok(());
    }
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    if !parent.is_dir() {
        return Err(CliError::Config(format!(
            "--out {}: parent directory {} does not exist",
            dir.display(),
            parent.display()
        )));
    }
    Ok(())
}

fn write_output(dir: &Path, name: &str, contents: &str) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime {
        name: "harness::Io".into(),
        message: format!("{}: {e}", dir.display()),
    })?;
    write_atomic(&dir.join(name), contents.as_bytes()).map_err(CliError::from)
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(out) => {
            if !out.is_empty() {
                println!("{out}");
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("twoscale: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::Lockin(a) => experiment(a, true),
        Command::Rate(a) => experiment(a, false),
        Command::Bounds(a) => bounds_cmd(a),
        Command::Gtd(a) => gtd_cmd(a),
        Command::Simulate(a) => simulate_cmd(a),
    }
}

fn overlay(cfg: &mut ExperimentConfig, a: &ExperimentArgs) -> Result<(), CliError> {
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { cfg.$field = v; } )* };
    }
    set!(trials, seed, horizon, stride, n0, kappa);
    if a.n1.is_some() {
        cfg.n1 = a.n1;
    }
    if a.eps1.is_some() {
        cfg.eps1 = a.eps1;
    }
    if a.eps2.is_some() {
        cfg.eps2 = a.eps2;
    }
    if let Some(v) = a.r1in {
        cfg.radii.r1in = v;
    }
    if let Some(v) = a.r2in {
        cfg.radii.r2in = v;
    }
    if let Some(v) = a.r2out {
        cfg.radii.r2out = v;
    }
    cfg.validate().map_err(CliError::from)
}

fn experiment(a: ExperimentArgs, lockin: bool) -> Result<String, CliError> {
    let mut cfg = load_config(&a.config)?;
    overlay(&mut cfg, &a)?;
    check_out_dir(&a.out)?;
    let result = if lockin {
        ExperimentResult::Lockin(run_lockin(&cfg, a.workers)?)
    } else {
        ExperimentResult::Rate(run_rate_fit(&cfg, a.workers)?)
    };
    let bounds = experiment_bounds(&cfg)?;
    emit_report(&a.out, &cfg, &result, &bounds)?;
    let summary = match &result {
        ExperimentResult::Lockin(r) => json!({
            "kind": "lockin",
            "trials": r.outcomes.len(),
            "frequency": r.frequency,
            "wilson": r.wilson,
            "n1": r.n1,
            "bound": r.bound.map(|b| b.bound),
            "vacuous": r.bound.map(|b| b.vacuous),
            "consistent_with_bound": r.consistent_with_bound(),
            "out": a.out,
        }),
        ExperimentResult::Rate(r) => json!({
            "kind": "rate",
            "trials": r.trials,
            "window": r.window,
            "slope": r.slope,
            "predicted_slope": r.predicted_slope,
            "r_squared": r.r_squared,
            "window_too_noisy": r.window_too_noisy,
            "out": a.out,
        }),
    };
    Ok(serde_json::to_string_pretty(&summary).expect("summary serialises"))
}

struct BoundsSetup {
    ledger: ConstantLedger,
    schedule: StepsizeSchedule,
    eps1: f64,
    eps2: f64,
    n0: u64,
    kappa: f64,
}

fn missing(flag: &str) -> CliError {
    CliError::Config(format!("{flag} is required (pass the flag or a --config providing it)"))
}

fn bounds_setup(a: &BoundsArgs) -> Result<BoundsSetup, CliError> {
    let cfg = a.config.as_deref().map(load_config).transpose()?;
    let spec = match &a.spec {
        Some(path) => {
            let text = read_input(path)?;
            let json: SpecJson = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            json.build().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
        }
        None => Instance::from_config(cfg.as_ref().expect("clap requires --spec or --config"))?
            .spec,
    };
    let inst = cfg.as_ref().map(Instance::from_config).transpose()?;
    let safety = a
        .safety
        .or(cfg.as_ref().map(|c| c.spectral.safety))
        .unwrap_or(DEFAULT_SAFETY);
    let q_fraction = a
        .q_fraction
        .or(cfg.as_ref().map(|c| c.spectral.q_fraction))
        .unwrap_or(DEFAULT_Q_FRACTION);
    let spectral = SpectralConstants::from_spec(&spec, safety, q_fraction)
        .map_err(|e| CliError::Config(format!("spectral: {e}")))?;

    let radii = Radii {
        r1in: a.r1in.or(cfg.as_ref().map(|c| c.radii.r1in)).ok_or_else(|| missing("--r1in"))?,
        r2in: a.r2in.or(cfg.as_ref().map(|c| c.radii.r2in)).ok_or_else(|| missing("--r2in"))?,
        r2out: a
            .r2out
            .or(cfg.as_ref().map(|c| c.radii.r2out))
            .ok_or_else(|| missing("--r2out"))?,
    };
    radii
        .validate()
        .map_err(|e| CliError::Config(format!("radii: {e}")))?;
    let inst_nb = inst.as_ref().map(|i| i.noise_bounds);
    let noise = NoiseBounds::new(
        a.m1.or(inst_nb.map(|n| n.m1)).ok_or_else(|| missing("--m1"))?,
        a.m2.or(inst_nb.map(|n| n.m2)).ok_or_else(|| missing("--m2"))?,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;

    let schedule = match (a.alpha, a.beta, &cfg) {
        (None, None, Some(c)) => c.schedule.clone(),
        (al, be, c) => {
            let (ca, cb) = c
                .as_ref()
                .and_then(|c| c.schedule.exponents())
                .unwrap_or((0.75, 0.5));
            StepsizeSchedule::polynomial(al.unwrap_or(ca), be.unwrap_or(cb))
                .map_err(|e| CliError::Config(format!("--alpha/--beta: {e}")))?
        }
    };
    let eps1 = a
        .eps1
        .or(a.eps)
        .or(cfg.as_ref().and_then(|c| c.eps1))
        .ok_or_else(|| missing("--eps or --eps1"))?;
    let eps2 = a
        .eps2
        .or(a.eps)
        .or(cfg.as_ref().and_then(|c| c.eps2))
        .ok_or_else(|| missing("--eps or --eps2"))?;
    let n0 = a
        .n0
        .or(cfg.as_ref().map(|c| c.n0 as u64))
        .ok_or_else(|| missing("--n0"))?;
    let kappa = a
        .kappa
        .or(cfg.as_ref().map(|c| c.kappa))
        .unwrap_or(bounds::DEFAULT_KAPPA);
    if !(kappa > 0.0 && kappa < 1.0) {
        return Err(CliError::Config(format!("--kappa = {kappa} must lie in (0, 1)")));
    }
    let ledger = ConstantLedger::build(&spec, &spectral, &radii, &noise).map_err(from_bounds)?;
    Ok(BoundsSetup {
        ledger,
        schedule,
        eps1,
        eps2,
        n0,
        kappa,
    })
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn sweep_csv(s: &BoundsSetup, sweep: Sweep, grid: Option<&[f64]>) -> Result<String, CliError> {
    let mut out = String::from(
        "eps1,eps2,n0,N0,N1,lockin_bound,lockin_vacuous,n0_prime,projected_bound\n",
    );
    let points: Vec<(f64, f64, u64)> = match sweep {
        Sweep::Eps => {
            let cap = s.ledger.inputs.radii.r1in.min(4.0 * s.ledger.right.la);
            let values: Vec<f64> = match grid {
                Some(g) => g.to_vec(),
                None => (0..10)
                    .map(|i| cap * 0.01 * (90f64).powf(i as f64 / 9.0))
                    .collect(),
            };
            let ratio = s.eps2 / s.eps1;
            values.into_iter().map(|e| (e, e * ratio, s.n0)).collect()
        }
        Sweep::N0 => {
            let values: Vec<u64> = match grid {
                Some(g) => g.iter().map(|&v| v as u64).collect(),
                None => (4..=20).map(|k| 1u64 << k).collect(),
            };
            values.into_iter().map(|n| (s.eps1, s.eps2, n)).collect()
        }
    };
    for (e1, e2, n0) in points {
        let r = harness::bounds_report(&s.ledger, &s.schedule, e1, e2, n0, s.kappa)?;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            e1,
            e2,
            n0,
            fmt_opt(r.thresholds_n0.map(|t| t.n0)),
            fmt_opt(r.thresholds_n1.map(|t| t.n1)),
            fmt_opt(r.theorem1.map(|t| t.bound)),
            fmt_opt(r.theorem1.map(|t| t.vacuous)),
            fmt_opt(r.n0_prime.map(|p| p.value)),
            fmt_opt(r.theorem2.map(|t| t.bound)),
        ));
    }
    Ok(out)
}

fn bounds_cmd(a: BoundsArgs) -> Result<String, CliError> {
    if let Some(out) = &a.out {
        check_out_dir(out)?;
    }
    let s = bounds_setup(&a)?;
    let (text, name) = match a.sweep {
        Some(sweep) => (sweep_csv(&s, sweep, a.grid.as_deref())?, "sweep.csv"),
        None => {
            let r = harness::bounds_report(&s.ledger, &s.schedule, s.eps1, s.eps2, s.n0, s.kappa)?;
            match a.format {
                Format::Json => (
                    serde_json::to_string_pretty(&r).expect("report serialises"),
                    "bounds.json",
                ),
                Format::Table => (r.to_table(), "bounds.txt"),
                Format::Csv => {
                    let mut csv = String::from("name,value,column,formula\n");
                    for e in &r.ledger {
                        csv.push_str(&format!("{},{},{},\"{}\"\n", e.name, e.value, e.column, e.formula));
                    }
                    (csv, "ledger.csv")
                }
            }
        }
    };
    if let Some(out) = &a.out {
        write_output(out, name, &text)?;
    }
    Ok(text)
}

fn gtd_cmd(a: GtdArgs) -> Result<String, CliError> {
    if let Some(out) = &a.out {
        check_out_dir(out)?;
    }
    let rl_err = |e: rl::RlError| CliError::from(HarnessError::from(e));
    let mdp = MdpSpec::random(a.states, a.dim, a.gamma, a.seed).map_err(rl_err)?;
    let sampler = GtdSampler::new(mdp.clone(), a.variant).map_err(rl_err)?;
    let spec = sampler.spec();
    let m = sampler.matrices();
    let summary = json!({
        "variant": a.variant.to_string(),
        "states": a.states,
        "dim": a.dim,
        "gamma": a.gamma,
        "seed": a.seed,
        "stationary": mdp.pi().iter().collect::<Vec<_>>(),
        "A": linalg::to_rows(&m.a),
        "C": linalg::to_rows(&m.c),
        "b": m.b.iter().collect::<Vec<_>>(),
        "X1": linalg::to_rows(spec.x1()),
        "theta_star": spec.theta_star().iter().collect::<Vec<_>>(),
        "noise_bounds": sampler.noise_bounds(),
        "min_real_eig_X1": spec.derived().x1_min_real_eig,
        "min_real_eig_W2": spec.derived().w2_min_real_eig,
    });
    let text = serde_json::to_string_pretty(&summary).expect("summary serialises");
    if let Some(out) = &a.out {
        let spec_text = serde_json::to_string_pretty(&spec.to_json()).expect("spec serialises");
        let mdp_text = serde_json::to_string_pretty(&mdp.to_json()).expect("mdp serialises");
        write_output(out, "spec.json", &spec_text)?;
        write_output(out, "mdp.json", &mdp_text)?;
        write_output(out, "gtd.json", &text)?;
    }
    Ok(text)
}

fn simulate_cmd(a: SimulateArgs) -> Result<String, CliError> {
    let cfg = load_config(&a.config)?;
    cfg.validate()?;
    check_out_dir(&a.out)?;
    let inst = Instance::from_config(&cfg)?;
    let mode = match a.mode {
        SimMode::Unprojected => Mode::Unprojected,
        SimMode::Projected => Mode::Projected(ProjectionRadii {
            r1in: cfg.radii.r1in,
            r2in: cfg.radii.r2in,
        }),
    };
    let run = RunConfig {
        n_start: cfg.n0,
        n_end: cfg.horizon,
        stride: cfg.stride,
        mode,
        keep_path: false,
    };
    let (theta, w) = inst.initial_state(cfg.init.as_ref())?;
    let mut noise = NoiseGenerator::seeded(inst.noise.clone(), cfg.seed, a.trial);
    let traj = engine::run_trajectory(&inst.spec, &cfg.schedule, &mut noise, &run, theta, w)
        .map_err(|e| CliError::from(HarnessError::from(e)))?;
    write_output(&a.out, "trajectory.csv", &traj.to_csv())?;
    let last = traj.last();
    Ok(serde_json::to_string_pretty(&json!({
        "records": traj.records.len(),
        "final_n": last.state.n,
        "final_err_theta": last.err_theta,
        "final_err_z": last.err_z,
        "out": a.out,
    }))
    .expect("summary serialises"))
}
