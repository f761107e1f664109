//! Monte Carlo experiments: lock-in frequency against the lock-in bound, and
//! empirical convergence rates of sparsely projected iterates.
//!
//! Trials are seeded from `(master seed, trial index)`, run on a rayon pool
//! and folded in trial order, so results do not depend on the worker count.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::bounds::{
    self, BoundsError, ConstantLedger, LedgerEntry, N0Prime, N0Terms, N1Terms, Theorem1Report,
    Theorem2Report, Truncation,
};
use crate::engine::{
    run_trajectory, EngineError, Mode, NoiseGenerator, NoiseKind, ProjectionRadii, RunConfig,
    Trajectory,
};
use crate::linalg::Vector;
use crate::model::{LinearTtsSpec, ModelError, NoiseBounds, Radii, SpecJson, StepsizeSchedule};
use crate::rl::{GtdSampler, GtdVariant, MdpSpec, RlError};
use crate::spectral::{SpectralConstants, SpectralError, DEFAULT_Q_FRACTION, DEFAULT_SAFETY};

pub const MANIFEST_VERSION: u32 = 1;
pub const WORKERS_ENV: &str = "TWOSCALE_WORKERS";
pub const GIT_DESCRIBE: &str = env!("TWOSCALE_GIT_DESCRIBE");
const WILSON_Z: f64 = 1.96;
const MIN_R_SQUARED: f64 = 0.5;
const FIT_POINTS: usize = 60;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("initial iterate violates {which}: norm {norm} exceeds radius {radius}")]
    InvalidInitialization {
        which: &'static str,
        norm: f64,
        radius: f64,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// True for problems with the user's input rather than the computation.
    pub fn is_config_error(&self) -> bool {
        match self {
            Self::Config(_) | Self::InvalidInitialization { .. } | Self::Json(_) => true,
            Self::Model(_) | Self::Rl(_) | Self::Spectral(_) => true,
            Self::Bounds(e) => matches!(
                e,
                BoundsError::EpsilonOutOfRange(_)
                    | BoundsError::Domain(_)
                    | BoundsError::AssumptionViolated(_)
                    | BoundsError::NeedsPolynomialSchedule
                    | BoundsError::Model(_)
            ),
            Self::Engine(e) => matches!(e, EngineError::InvalidConfig(_) | EngineError::Model(_)),
            Self::Io { .. } => false,
        }
    }

    /// Error name qualified by the module that raised it.
    pub fn qualified_name(&self) -> String {
        fn variant<T: std::fmt::Debug>(e: &T) -> String {
            let s = format!("{e:?}");
            s.split(|c: char| !c.is_alphanumeric() && c != '_')
                .next()
                .unwrap_or("")
                .to_string()
        }
        match self {
            Self::Config(_) => "harness::Config".into(),
            Self::InvalidInitialization { .. } => "harness::InvalidInitialization".into(),
            Self::Model(e) => format!("model::{}", variant(e)),
            Self::Rl(e) => format!("rl::{}", variant(e)),
            Self::Spectral(e) => format!("spectral::{}", variant(e)),
            Self::Bounds(e) => format!("bounds::{}", variant(e)),
            Self::Engine(e) => format!("engine::{}", variant(e)),
            Self::Io { .. } => "harness::Io".into(),
            Self::Json(_) => "harness::Json".into(),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum SpecSource {
    Explicit {
        spec: SpecJson,
    },
    Gtd {
        variant: GtdVariant,
        states: usize,
        dim: usize,
        gamma: f64,
        seed: u64,
        /// Walk the chain instead of drawing iid transitions.
        #[serde(default)]
        markov: bool,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum NoiseConfig {
    None,
    /// `M⁽ⁱ⁾ = cᵢ u (1 + ‖θ‖ + ‖w‖)`, `u` uniform on the unit sphere.
    Sphere { c1: f64, c2: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectralOptions {
    pub safety: f64,
    pub q_fraction: f64,
}

impl Default for SpectralOptions {
    fn default() -> Self {
        Self {
            safety: DEFAULT_SAFETY,
            q_fraction: DEFAULT_Q_FRACTION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialPoint {
    pub theta: Vec<f64>,
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamedInit {
    /// `θ = 0`, `w = 0`
    Zero,
    /// `θ = θ*`, `w = λ(θ*)`
    Equilibrium,
}

/// Either explicit starting iterates or a named choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InitialState {
    Named(NamedInit),
    Point(InitialPoint),
}

fn default_kappa() -> f64 {
    bounds::DEFAULT_KAPPA
}

/// One file that fully describes an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub source: SpecSource,
    /// Required for explicit specs, forbidden for GTD instances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseConfig>,
    /// Overrides the noise constants derived from the noise model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_bounds: Option<NoiseBounds>,
    pub schedule: StepsizeSchedule,
    pub radii: Radii,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eps2: Option<f64>,
    /// Start index (`n0` for lock-in, `n0′` for rate experiments).
    pub n0: usize,
    /// First monitored index for lock-in; defaults to the computed `N1`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n1: Option<usize>,
    pub trials: usize,
    pub horizon: usize,
    pub stride: usize,
    pub seed: u64,
    /// Defaults to `"zero"`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitialState>,
    #[serde(default)]
    pub spectral: SpectralOptions,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit_window: Option<[usize; 2]>,
}

impl ExperimentConfig {
    /// Reads a config, or the `config` member of a manifest.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_json_str(&text)
    }

    pub fn from_json_str(text: &str) -> Result<Self, HarnessError> {
        let value: Value = serde_json::from_str(text)?;
        let value = match value.get("manifest_version") {
            Some(_) => value
                .get("config")
                .cloned()
                .ok_or_else(|| HarnessError::Config("manifest has no config member".into()))?,
            None => value,
        };
        Ok(serde_json::from_value(value)?)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.trials == 0 {
            return Err(HarnessError::Config("trials must be at least 1".into()));
        }
        if self.stride == 0 {
            return Err(HarnessError::Config("stride must be positive".into()));
        }
        if self.horizon <= self.n0 {
            return Err(HarnessError::Config(format!(
                "horizon ({}) must exceed n0 ({})",
                self.horizon, self.n0
            )));
        }
        if !(self.kappa > 0.0 && self.kappa < 1.0) {
            return Err(HarnessError::Config(format!("kappa = {} must lie in (0, 1)", self.kappa)));
        }
        self.radii.validate()?;
        self.schedule.check_horizon(self.horizon)?;
        match (&self.source, &self.noise) {
            (SpecSource::Explicit { .. }, None) => {
                return Err(HarnessError::Config("noise is required for explicit specs".into()))
            }
            (SpecSource::Gtd { .. }, Some(_)) => {
                return Err(HarnessError::Config(
                    "noise must be omitted for GTD sources (sampling noise is implied)".into(),
                ))
            }
            _ => {}
        }
        if let Some(NoiseConfig::Sphere { c1, c2 }) = self.noise {
            if !(c1 >= 0.0 && c2 >= 0.0 && c1.is_finite() && c2.is_finite()) {
                return Err(HarnessError::Config("noise.c1, noise.c2 must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// A problem instance with its noise model and decay envelopes.
#[derive(Debug, Clone)]
pub struct Instance {
    pub spec: LinearTtsSpec,
    pub noise: NoiseKind,
    pub noise_bounds: NoiseBounds,
    pub spectral: SpectralConstants,
}

impl Instance {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self, HarnessError> {
        let (spec, noise, derived_bounds) = match &cfg.source {
            SpecSource::Explicit { spec } => {
                let spec = spec.build()?;
                let (noise, nb) = match cfg.noise {
                    Some(NoiseConfig::Sphere { c1, c2 }) => {
                        (NoiseKind::UniformSphere { c1, c2 }, NoiseBounds::new(c1, c2)?)
                    }
                    _ => (NoiseKind::None, NoiseBounds::new(0.0, 0.0)?),
                };
                (spec, noise, nb)
            }
            SpecSource::Gtd {
                variant,
                states,
                dim,
                gamma,
                seed,
                markov,
            } => {
                let mdp = MdpSpec::random(*states, *dim, *gamma, *seed)?;
                let sampler = GtdSampler::new(mdp, *variant)?;
                let spec = sampler.spec().clone();
                let nb = sampler.noise_bounds();
                let noise = NoiseKind::Gtd {
                    sampler: Arc::new(sampler),
                    markov: *markov,
                };
                (spec, noise, nb)
            }
        };
        let spectral =
            SpectralConstants::from_spec(&spec, cfg.spectral.safety, cfg.spectral.q_fraction)?;
        Ok(Self {
            spec,
            noise,
            noise_bounds: cfg.noise_bounds.unwrap_or(derived_bounds),
            spectral,
        })
    }

    pub fn ledger(&self, radii: &Radii) -> Result<ConstantLedger, HarnessError> {
        Ok(ConstantLedger::build(
            &self.spec,
            &self.spectral,
            radii,
            &self.noise_bounds,
        )?)
    }

    pub fn initial_state(
        &self,
        init: Option<&InitialState>,
    ) -> Result<(Vector, Vector), HarnessError> {
        let d = self.spec.dim();
        match init {
            None | Some(InitialState::Named(NamedInit::Zero)) => {
                Ok((Vector::zeros(d), Vector::zeros(d)))
            }
            Some(InitialState::Named(NamedInit::Equilibrium)) => {
                let theta = self.spec.theta_star().clone();
                let w = self.spec.lambda(&theta);
                Ok((theta, w))
            }
            Some(InitialState::Point(s)) => {
                if s.theta.len() != d || s.w.len() != d {
                    return Err(HarnessError::Config(format!(
                        "init.theta and init.w must have length {d}"
                    )));
                }
                Ok((Vector::from_vec(s.theta.clone()), Vector::from_vec(s.w.clone())))
            }
        }
    }
}

/// Rayon pool sized by `workers`, else by `TWOSCALE_WORKERS`, else the
/// rayon default.
pub fn worker_pool(workers: Option<usize>) -> Result<rayon::ThreadPool, HarnessError> {
    let n = match workers {
        Some(n) => n,
        None => match std::env::var(WORKERS_ENV) {
            Ok(v) => v.trim().parse().map_err(|_| {
                HarnessError::Config(format!("{WORKERS_ENV} must be a non-negative integer, got '{v}'"))
            })?,
            Err(_) => 0,
        },
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| HarnessError::Config(format!("cannot build worker pool: {e}")))
}

fn run_trials(
    inst: &Instance,
    cfg: &ExperimentConfig,
    mode: Mode,
    workers: Option<usize>,
) -> Result<Vec<Trajectory>, HarnessError> {
    let (theta0, w0) = inst.initial_state(cfg.init.as_ref())?;
    let run = RunConfig {
        n_start: cfg.n0,
        n_end: cfg.horizon,
        stride: cfg.stride,
        mode,
        keep_path: false,
    };
    let pool = worker_pool(workers)?;
    let results: Vec<Result<Trajectory, EngineError>> = pool.install(|| {
        (0..cfg.trials as u64)
            .into_par_iter()
            .map(|trial| {
                let mut noise = NoiseGenerator::seeded(inst.noise.clone(), cfg.seed, trial);
                run_trajectory(
                    &inst.spec,
                    &cfg.schedule,
                    &mut noise,
                    &run,
                    theta0.clone(),
                    w0.clone(),
                )
            })
            .collect()
    });
    Ok(results.into_iter().collect::<Result<_, _>>()?)
}

fn median_sorted(v: &[f64]) -> f64 {
    quantile_sorted(v, 0.5)
}

/// Linear-interpolation quantile of sorted data.
fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

// ---------------------------------------------------------------------------
// Lock-in

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilsonInterval {
    pub lo: f64,
    pub hi: f64,
    pub half_width: f64,
}

/// 95% Wilson score interval for `successes` out of `trials`.
pub fn wilson_interval(successes: usize, trials: usize) -> WilsonInterval {
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = WILSON_Z * WILSON_Z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = WILSON_Z / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    WilsonInterval {
        lo: (center - half).max(0.0),
        hi: (center + half).min(1.0),
        half_width: half,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LockInPoint {
    pub n: usize,
    pub inside_fraction: f64,
    pub median_err_theta: f64,
    pub median_err_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LockInResult {
    pub outcomes: Vec<bool>,
    pub successes: usize,
    pub frequency: f64,
    pub wilson: WilsonInterval,
    pub n0: usize,
    pub n1: usize,
    pub horizon: usize,
    pub stride: usize,
    /// How the event over all `n ≥ n1` was sampled.
    pub event: String,
    pub bound: Option<Theorem1Report>,
    pub bound_error: Option<String>,
    pub curve: Vec<LockInPoint>,
}

impl LockInResult {
    /// Frequency is at least the bound minus three Wilson half-widths
    /// (trivially true when the bound is unavailable or outside `(0, 1)`).
    pub fn consistent_with_bound(&self) -> bool {
        match self.bound {
            Some(b) if b.bound > 0.0 && b.bound < 1.0 => {
                self.frequency >= b.bound - 3.0 * self.wilson.half_width
            }
            Some(b) if b.bound >= 1.0 => self.frequency >= 1.0 - 3.0 * self.wilson.half_width,
            _ => true,
        }
    }
}

fn check_initialization(
    inst: &Instance,
    cfg: &ExperimentConfig,
) -> Result<(), HarnessError> {
    let (theta, w) = inst.initial_state(cfg.init.as_ref())?;
    let err_theta = (&theta - inst.spec.theta_star()).norm();
    if err_theta > cfg.radii.r1in {
        return Err(HarnessError::InvalidInitialization {
            which: "||theta - theta*|| <= R1_in",
            norm: err_theta,
            radius: cfg.radii.r1in,
        });
    }
    let z = &w - inst.spec.lambda(&theta);
    if z.norm() > cfg.radii.r2in {
        return Err(HarnessError::InvalidInitialization {
            which: "||w - lambda(theta)|| <= R2_in",
            norm: z.norm(),
            radius: cfg.radii.r2in,
        });
    }
    Ok(())
}

fn lockin_truncation(cfg: &ExperimentConfig) -> Truncation {
    match cfg.schedule.horizon() {
        None => Truncation::ClosedFormTail {
            direct_terms: bounds::DEFAULT_DIRECT_TERMS,
        },
        Some(len) => Truncation::DirectUpTo { n: len as u64 - 1 },
    }
}

/// Runs unprojected trials from `(θ_{n0}, w_{n0})` and checks the lock-in
/// event at every recorded index from `n1` to the horizon.
pub fn run_lockin(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<LockInResult, HarnessError> {
    cfg.validate()?;
    let (eps1, eps2) = match (cfg.eps1, cfg.eps2) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(HarnessError::Config("eps1 and eps2 are required for lockin".into())),
    };
    let inst = Instance::from_config(cfg)?;
    let ledger = inst.ledger(&cfg.radii)?;
    ledger.check_epsilons(eps1, eps2)?;
    check_initialization(&inst, cfg)?;

    let n1 = match cfg.n1 {
        Some(n1) => n1,
        None => {
            let t = bounds::threshold_n1(&ledger, &cfg.schedule, cfg.n0 as u64, eps1, eps2)
                .map_err(|e| HarnessError::Config(format!("cannot default n1 ({e}); set n1")))?;
            usize::try_from(t.n1).unwrap_or(usize::MAX)
        }
    };
    if n1 < cfg.n0 || n1 > cfg.horizon {
        return Err(HarnessError::Config(format!(
            "n1 = {n1} must lie in [n0, horizon] = [{}, {}]",
            cfg.n0, cfg.horizon
        )));
    }

    let (bound, bound_error) = match bounds::theorem1_bound(
        &ledger,
        &cfg.schedule,
        cfg.n0 as u64,
        eps1,
        eps2,
        lockin_truncation(cfg),
    ) {
        Ok(b) => (Some(b), None),
        Err(e) => (None, Some(e.to_string())),
    };

    let trajectories = run_trials(&inst, cfg, Mode::Unprojected, workers)?;
    let inside = |err_theta: f64, err_z: f64| err_theta <= eps1 && err_z <= eps2;
    let outcomes: Vec<bool> = trajectories
        .iter()
        .map(|t| {
            t.records
                .iter()
                .filter(|r| r.state.n >= n1)
                .all(|r| inside(r.err_theta, r.err_z))
        })
        .collect();
    let successes = outcomes.iter().filter(|&&b| b).count();

    let n_records = trajectories[0].records.len();
    let curve = (0..n_records)
        .map(|i| {
            let n = trajectories[0].records[i].state.n;
            let et = sorted(trajectories.iter().map(|t| t.records[i].err_theta).collect());
            let ez = sorted(trajectories.iter().map(|t| t.records[i].err_z).collect());
            let inside_count = trajectories
                .iter()
                .filter(|t| inside(t.records[i].err_theta, t.records[i].err_z))
                .count();
            LockInPoint {
                n,
                inside_fraction: inside_count as f64 / cfg.trials as f64,
                median_err_theta: median_sorted(&et),
                median_err_z: median_sorted(&ez),
            }
        })
        .collect();

    Ok(LockInResult {
        frequency: successes as f64 / cfg.trials as f64,
        wilson: wilson_interval(successes, cfg.trials),
        successes,
        outcomes,
        n0: cfg.n0,
        n1,
        horizon: cfg.horizon,
        stride: cfg.stride,
        event: format!(
            "sampled forall n in [n1, horizon]: every {}-th index from n0, all powers of two, and the final index",
            cfg.stride
        ),
        bound,
        bound_error,
        curve,
    })
}

// ---------------------------------------------------------------------------
// Rate fit

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    pub n: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub trials: usize,
    pub curve: Vec<RatePoint>,
    pub window: [usize; 2],
    /// Recorded indices used by the least-squares fit.
    pub fit_indices: Vec<usize>,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// `−min(β/2, α − β)`; the polylog factor is ignored.
    pub predicted_slope: f64,
    /// `R² < 0.5`.
    pub window_too_noisy: bool,
    pub iqr_at_hi: f64,
}

/// Least-squares line through `(x, y)`: `(slope, intercept, R²)`.
pub fn least_squares(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, intercept, r2)
}

/// Recorded indices nearest to log-spaced targets in `[lo, hi]`.
fn log_spaced_indices(recorded: &[usize], lo: usize, hi: usize) -> Vec<usize> {
    let inside: Vec<usize> = recorded.iter().copied().filter(|&n| n >= lo && n <= hi).collect();
    if inside.len() <= FIT_POINTS {
        return inside;
    }
    let (l, h) = ((lo as f64).ln(), (hi as f64).ln());
    let mut out: Vec<usize> = (0..FIT_POINTS)
        .map(|i| {
            let target = (l + (h - l) * i as f64 / (FIT_POINTS - 1) as f64).exp();
            let pos = inside.partition_point(|&n| (n as f64) < target);
            let cands = [pos.saturating_sub(1), pos.min(inside.len() - 1)];
            *cands
                .iter()
                .map(|&i| &inside[i])
                .min_by(|a, b| {
                    ((**a as f64) - target)
                        .abs()
                        .total_cmp(&((**b as f64) - target).abs())
                })
                .unwrap()
        })
        .collect();
    out.dedup();
    out
}

/// Runs sparsely projected trials from `n0′` and fits the log-log slope of
/// the median of `max(‖θ′_n − θ*‖, ‖z′_n‖)` on the fit window.
pub fn run_rate_fit(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<RateFit, HarnessError> {
    cfg.validate()?;
    let (alpha, beta) = cfg
        .schedule
        .exponents()
        .ok_or_else(|| HarnessError::Config("rate experiments need a polynomial schedule".into()))?;
    let window = cfg
        .fit_window
        .unwrap_or([8 * cfg.n0.max(1), cfg.horizon]);
    if !(window[0] >= cfg.n0.max(1) && window[0] < window[1] && window[1] <= cfg.horizon) {
        return Err(HarnessError::Config(format!(
            "fit_window [{}, {}] must satisfy max(n0, 1) <= lo < hi <= horizon",
            window[0], window[1]
        )));
    }
    let inst = Instance::from_config(cfg)?;
    let mode = Mode::Projected(ProjectionRadii {
        r1in: cfg.radii.r1in,
        r2in: cfg.radii.r2in,
    });
    let trajectories = run_trials(&inst, cfg, mode, workers)?;
    let n_records = trajectories[0].records.len();
    let curve: Vec<RatePoint> = (0..n_records)
        .map(|i| {
            let v = sorted(
                trajectories
                    .iter()
                    .map(|t| t.records[i].err_theta.max(t.records[i].err_z))
                    .collect(),
            );
            RatePoint {
                n: trajectories[0].records[i].state.n,
                median: median_sorted(&v),
                q25: quantile_sorted(&v, 0.25),
                q75: quantile_sorted(&v, 0.75),
            }
        })
        .collect();

    let recorded: Vec<usize> = curve.iter().map(|p| p.n).collect();
    let fit_indices = log_spaced_indices(&recorded, window[0], window[1]);
    if fit_indices.len() < 3 {
        return Err(HarnessError::Config(format!(
            "fit window [{}, {}] holds fewer than 3 recorded indices; lower the stride",
            window[0], window[1]
        )));
    }
    let by_n: BTreeMap<usize, &RatePoint> = curve.iter().map(|p| (p.n, p)).collect();
    let xs: Vec<f64> = fit_indices.iter().map(|&n| (n as f64).ln()).collect();
    let ys: Vec<f64> = fit_indices.iter().map(|n| by_n[n].median.ln()).collect();
    let (slope, intercept, r_squared) = least_squares(&xs, &ys);
    let hi = by_n[fit_indices.last().unwrap()];
    Ok(RateFit {
        trials: cfg.trials,
        window,
        slope,
        intercept,
        r_squared,
        predicted_slope: -bounds::rate_exponent(alpha, beta),
        window_too_noisy: !(r_squared >= MIN_R_SQUARED),
        iqr_at_hi: hi.q75 - hi.q25,
        curve,
        fit_indices,
    })
}

// ---------------------------------------------------------------------------
// Bounds report

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundsReport {
    pub d: usize,
    pub noiseless: bool,
    pub inputs: bounds::LedgerInputs,
    pub ledger: Vec<LedgerEntry>,
    pub eps1: f64,
    pub eps2: f64,
    pub n0: u64,
    pub thresholds_n0: Option<N0Terms>,
    pub thresholds_n1: Option<N1Terms>,
    pub theorem1: Option<Theorem1Report>,
    pub n0_prime: Option<N0Prime>,
    pub theorem2: Option<Theorem2Report>,
    pub rate_exponent: Option<f64>,
    /// Quantities that could not be evaluated, keyed by name.
    pub errors: BTreeMap<String, String>,
}

/// Every ledger entry, threshold and bound that can be evaluated; failures
/// of individual quantities are collected in `errors`.
pub fn bounds_report(
    ledger: &ConstantLedger,
    schedule: &StepsizeSchedule,
    eps1: f64,
    eps2: f64,
    n0: u64,
    kappa: f64,
) -> Result<BoundsReport, HarnessError> {
    ledger.check_epsilons(eps1, eps2)?;
    let mut errors = BTreeMap::new();
    fn keep<T>(
        errors: &mut BTreeMap<String, String>,
        name: &str,
        r: Result<T, BoundsError>,
    ) -> Option<T> {
        r.map_err(|e| errors.insert(name.to_string(), e.to_string())).ok()
    }
    let thresholds_n0 = keep(&mut errors, "thresholds_n0", bounds::threshold_n0(ledger, schedule, eps1, eps2));
    let thresholds_n1 = keep(&mut errors, "thresholds_n1",
        bounds::threshold_n1(ledger, schedule, n0, eps1, eps2),
    );
    let truncation = match schedule.horizon() {
        None => Truncation::ClosedFormTail {
            direct_terms: bounds::DEFAULT_DIRECT_TERMS,
        },
        Some(len) => Truncation::DirectUpTo { n: len as u64 - 1 },
    };
    let theorem1 = keep(&mut errors, "theorem1",
        bounds::theorem1_bound(ledger, schedule, n0, eps1, eps2, truncation),
    );
    let eps = eps1.min(eps2);
    let (n0_prime, theorem2, rate_exponent) = match schedule.exponents() {
        Some((a, b)) => {
            let np = keep(&mut errors, "n0_prime", bounds::theorem2_n0_prime(ledger, eps, a, b));
            let t2 = if n0.is_power_of_two() {
                keep(&mut errors, "theorem2", bounds::theorem2_bound(ledger, kappa, eps, a, b, n0))
            } else {
                errors.insert("theorem2".into(), format!("n0 = {n0} is not a power of two"));
                None
            };
            (np, t2, Some(bounds::rate_exponent(a, b)))
        }
        None => {
            errors.insert("theorem2".into(), "needs a polynomial schedule".into());
            (None, None, None)
        }
    };
    Ok(BoundsReport {
        d: ledger.d(),
        noiseless: ledger.is_noiseless(),
        inputs: ledger.inputs,
        ledger: ledger.entries(),
        eps1,
        eps2,
        n0,
        thresholds_n0,
        thresholds_n1,
        theorem1,
        n0_prime,
        theorem2,
        rate_exponent,
        errors,
    })
}

impl BoundsReport {
    /// Plain-text table of the ledger followed by thresholds and bounds.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{:<10} {:>14}  {:<5}  formula\n", "name", "value", "col"));
        for e in &self.ledger {
            out.push_str(&format!(
                "{:<10} {:>14.6e}  {:<5}  {}\n",
                e.name, e.value, e.column, e.formula
            ));
        }
        out.push('\n');
        let row = |k: &str, v: String| format!("{k:<22} {v}\n");
        out.push_str(&row("eps1, eps2", format!("{}, {}", self.eps1, self.eps2)));
        out.push_str(&row("n0", self.n0.to_string()));
        if let Some(t) = self.thresholds_n0 {
            out.push_str(&row("Na, Nb, N0", format!("{}, {}, {}", t.na, t.nb, t.n0)));
        }
        if let Some(t) = self.thresholds_n1 {
            out.push_str(&row("na, nb, N1", format!("{}, {}, {}", t.na, t.nb, t.n1)));
        }
        if let Some(t) = self.theorem1 {
            out.push_str(&row(
                "lock-in bound",
                format!(
                    "{:e} (vacuous={}, noiseless={}, n0>=N0={})",
                    t.bound, t.vacuous, t.noiseless, t.n0_meets_threshold
                ),
            ));
        }
        if let Some(p) = self.n0_prime {
            out.push_str(&row("N0'", format!("{:e}", p.value)));
        }
        if let Some(t) = self.theorem2 {
            out.push_str(&row(
                "projected bound",
                format!("{:e} (vacuous={})", t.bound, t.vacuous),
            ));
        }
        if let Some(r) = self.rate_exponent {
            out.push_str(&row("rate exponent", format!("-{r}")));
        }
        for (k, v) in &self.errors {
            out.push_str(&row(&format!("[unavailable] {k}"), v.clone()));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Report emission

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ExperimentResult {
    Lockin(LockInResult),
    Rate(RateFit),
}

impl ExperimentResult {
    fn kind(&self) -> &'static str {
        match self {
            Self::Lockin(_) => "lockin",
            Self::Rate(_) => "rate",
        }
    }

    pub fn curves_csv(&self) -> String {
        match self {
            Self::Lockin(r) => {
                let mut s = String::from("n,inside_fraction,median_err_theta,median_err_z\n");
                for p in &r.curve {
                    s.push_str(&format!(
                        "{},{},{:e},{:e}\n",
                        p.n, p.inside_fraction, p.median_err_theta, p.median_err_z
                    ));
                }
                s
            }
            Self::Rate(r) => {
                let mut s = String::from("n,median,q25,q75\n");
                for p in &r.curve {
                    s.push_str(&format!("{},{:e},{:e},{:e}\n", p.n, p.median, p.q25, p.q75));
                }
                s
            }
        }
    }

    fn plot_data(&self) -> Value {
        let (values, y, title): (Vec<Value>, &str, &str) = match self {
            Self::Lockin(r) => (
                r.curve
                    .iter()
                    .flat_map(|p| {
                        [
                            json!({"n": p.n, "series": "median_err_theta", "value": p.median_err_theta}),
                            json!({"n": p.n, "series": "median_err_z", "value": p.median_err_z}),
                        ]
                    })
                    .collect(),
                "error",
                "Median errors across trials",
            ),
            Self::Rate(r) => (
                r.curve
                    .iter()
                    .flat_map(|p| {
                        [
                            json!({"n": p.n, "series": "median", "value": p.median}),
                            json!({"n": p.n, "series": "q25", "value": p.q25}),
                            json!({"n": p.n, "series": "q75", "value": p.q75}),
                        ]
                    })
                    .collect(),
                "max(err_theta, err_z)",
                "Projected iterate error across trials",
            ),
        };
        json!({
            "$schema": "https://vega.github.io/schema/vega-lite/v5.json",
            "title": title,
            "data": {"values": values},
            "mark": "line",
            "encoding": {
                "x": {"field": "n", "type": "quantitative", "scale": {"type": "log"}},
                "y": {"field": "value", "type": "quantitative", "scale": {"type": "log"}, "title": y},
                "color": {"field": "series", "type": "nominal"}
            }
        })
    }
}

pub fn manifest(cfg: &ExperimentConfig, result: &ExperimentResult) -> Value {
    json!({
        "manifest_version": MANIFEST_VERSION,
        "kind": result.kind(),
        "crate_version": env!("CARGO_PKG_VERSION"),
        "git_describe": GIT_DESCRIBE,
        "seeds": {
            "master": cfg.seed,
            "trials": cfg.trials,
            "derivation": "ChaCha8Rng::seed_from_u64(master) with stream = trial index",
        },
        "monitoring": {
            "n0": cfg.n0,
            "horizon": cfg.horizon,
            "stride": cfg.stride,
            "recorded": "n0, every stride-th index from n0, all powers of two, and the horizon",
        },
        "config": cfg,
    })
}

/// Writes `contents` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), HarnessError> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(contents).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| HarnessError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

pub const REPORT_FILES: [&str; 4] = ["manifest.json", "curves.csv", "bounds.json", "plot.vl.json"];

/// Writes `manifest.json`, `curves.csv`, `bounds.json` and `plot.vl.json`
/// into `dir`. All contents are rendered before anything is written.
pub fn emit_report(
    dir: &Path,
    cfg: &ExperimentConfig,
    result: &ExperimentResult,
    bounds: &Value,
) -> Result<(), HarnessError> {
    let files = [
        serde_json::to_string_pretty(&manifest(cfg, result))?,
        result.curves_csv(),
        serde_json::to_string_pretty(&json!({"result": result, "bounds": bounds}))?,
        serde_json::to_string_pretty(&result.plot_data())?,
    ];
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    for (name, contents) in REPORT_FILES.iter().zip(&files) {
        write_atomic(&dir.join(name), contents.as_bytes())?;
    }
    Ok(())
}

/// Bounds section for an experiment report. Quantities that cannot be
/// evaluated appear as error strings rather than failing the experiment.
pub fn experiment_bounds(cfg: &ExperimentConfig) -> Result<Value, HarnessError> {
    let inst = Instance::from_config(cfg)?;
    let ledger = inst.ledger(&cfg.radii)?;
    let mut out = json!({
        "noise_bounds": inst.noise_bounds,
        "spectral": inst.spectral,
        "ledger": ledger.entries(),
    });
    if let (Some(e1), Some(e2)) = (cfg.eps1, cfg.eps2) {
        out["report"] = match bounds_report(&ledger, &cfg.schedule, e1, e2, cfg.n0 as u64, cfg.kappa) {
            Ok(r) => serde_json::to_value(r)?,
            Err(e) => json!({"error": e.to_string()}),
        };
    }
    if let Some((a, b)) = cfg.schedule.exponents() {
        out["rate_exponent"] = json!(bounds::rate_exponent(a, b));
    }
    Ok(out)
}
