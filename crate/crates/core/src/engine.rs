//! Simulation of the coupled iterates, with optional sparse projection.
//!
//! The fast iterate is tracked through `z_n = w_n − λ(θ_n)`, recomputed from
//! `(θ_n, w_n)` after every step. [`z_update_direct`] is the recurrence form
//! of the same quantity and exists for cross-checking.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Vector;
use crate::model::{LinearTtsSpec, ModelError, StepsizeSchedule};
use crate::rl::GtdSampler;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("iterate became non-finite at step {n}")]
    NonFinite { n: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
}

/// Per-trial generator: the master seed picks the key, the trial index the
/// ChaCha stream, so trials never share a stream.
pub fn trial_rng(master_seed: u64, trial: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(trial);
    rng
}

#[derive(Debug, Clone)]
pub enum NoiseKind {
    None,
    /// `M⁽ⁱ⁾ = cᵢ u (1 + ‖θ‖ + ‖w‖)` with `u` uniform on the unit sphere.
    UniformSphere { c1: f64, c2: f64 },
    /// Sampling noise from a GTD instance; `markov` walks the chain instead
    /// of drawing iid states from the stationary distribution.
    Gtd {
        sampler: Arc<GtdSampler>,
        markov: bool,
    },
}

/// Stateful martingale-difference source bound to one trajectory.
#[derive(Debug, Clone)]
pub struct NoiseGenerator {
    kind: NoiseKind,
    rng: ChaCha8Rng,
    chain_state: Option<usize>,
}

impl NoiseGenerator {
    pub fn new(kind: NoiseKind, rng: ChaCha8Rng) -> Self {
        Self {
            kind,
            rng,
            chain_state: None,
        }
    }

    pub fn seeded(kind: NoiseKind, master_seed: u64, trial: u64) -> Self {
        Self::new(kind, trial_rng(master_seed, trial))
    }

    pub fn none() -> Self {
        Self::new(NoiseKind::None, ChaCha8Rng::seed_from_u64(0))
    }

    pub fn kind(&self) -> &NoiseKind {
        &self.kind
    }

    /// Draws `(M⁽¹⁾_{n+1}, M⁽²⁾_{n+1})` given the current iterates.
    pub fn sample(&mut self, theta: &Vector, w: &Vector) -> (Vector, Vector) {
        let d = theta.len();
        match &self.kind {
            NoiseKind::None => (Vector::zeros(d), Vector::zeros(d)),
            NoiseKind::UniformSphere { c1, c2 } => {
                let scale = 1.0 + theta.norm() + w.norm();
                let u1 = unit_sphere(&mut self.rng, d);
                let u2 = unit_sphere(&mut self.rng, d);
                (u1 * (c1 * scale), u2 * (c2 * scale))
            }
            NoiseKind::Gtd { sampler, markov } => {
                let s = if *markov {
                    sampler.draw_markov(&mut self.rng, &mut self.chain_state)
                } else {
                    sampler.draw_iid(&mut self.rng)
                };
                let sample = sampler.sample_at(s, theta, w);
                (sample.m1, sample.m2)
            }
        }
    }
}

/// Uniform direction on the unit sphere in `R^d` via normalised Gaussians.
pub fn unit_sphere(rng: &mut impl Rng, d: usize) -> Vector {
    loop {
        let v = Vector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let n = v.norm();
        if n > 1e-300 {
            return v / n;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterateState {
    pub n: usize,
    pub theta: Vector,
    pub w: Vector,
    pub z: Vector,
    /// Whether the projector moved `θ` and `w` when producing this state.
    pub projected: (bool, bool),
}

impl IterateState {
    pub fn new(spec: &LinearTtsSpec, n: usize, theta: Vector, w: Vector) -> Self {
        let z = &w - spec.lambda(&theta);
        Self {
            n,
            theta,
            w,
            z,
            projected: (false, false),
        }
    }
}

/// Result of one step together with the noise it consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: IterateState,
    pub m1: Vector,
    pub m2: Vector,
}

/// `θ + α(h1 + M1)`, `w + β(h2 + M2)` for given noise.
pub fn apply_update(
    spec: &LinearTtsSpec,
    alpha: f64,
    beta: f64,
    theta: &Vector,
    w: &Vector,
    m1: &Vector,
    m2: &Vector,
) -> (Vector, Vector) {
    let theta_next = theta + (spec.h1(theta, w) + m1) * alpha;
    let w_next = w + (spec.h2(theta, w) + m2) * beta;
    (theta_next, w_next)
}

pub fn step_unprojected(
    spec: &LinearTtsSpec,
    schedule: &StepsizeSchedule,
    noise: &mut NoiseGenerator,
    state: &IterateState,
) -> Result<StepOutcome, EngineError> {
    let n = state.n;
    schedule.check_horizon(n + 1)?;
    let (m1, m2) = noise.sample(&state.theta, &state.w);
    let (theta, w) = apply_update(
        spec,
        schedule.alpha(n),
        schedule.beta(n),
        &state.theta,
        &state.w,
        &m1,
        &m2,
    );
    finish(spec, n + 1, theta, w, (false, false), m1, m2)
}

pub fn step_projected(
    spec: &LinearTtsSpec,
    schedule: &StepsizeSchedule,
    noise: &mut NoiseGenerator,
    radii: ProjectionRadii,
    state: &IterateState,
) -> Result<StepOutcome, EngineError> {
    let n = state.n;
    schedule.check_horizon(n + 1)?;
    let (m1, m2) = noise.sample(&state.theta, &state.w);
    let (theta, w) = apply_update(
        spec,
        schedule.alpha(n),
        schedule.beta(n),
        &state.theta,
        &state.w,
        &m1,
        &m2,
    );
    let (theta, pt) = sparse_project_flagged(n + 1, radii.r1in / 2.0, theta);
    let (w, pw) = sparse_project_flagged(n + 1, radii.r2in / 2.0, w);
    finish(spec, n + 1, theta, w, (pt, pw), m1, m2)
}

fn finish(
    spec: &LinearTtsSpec,
    n: usize,
    theta: Vector,
    w: Vector,
    projected: (bool, bool),
    m1: Vector,
    m2: Vector,
) -> Result<StepOutcome, EngineError> {
    if !(theta.iter().all(|x| x.is_finite()) && w.iter().all(|x| x.is_finite())) {
        return Err(EngineError::NonFinite { n });
    }
    let mut state = IterateState::new(spec, n, theta, w);
    state.projected = projected;
    if !state.z.iter().all(|x| x.is_finite()) {
        return Err(EngineError::NonFinite { n });
    }
    Ok(StepOutcome { state, m1, m2 })
}

/// `z_{n+1} = z_n − β W2 z_n + β M⁽²⁾ + λ(θ_n) − λ(θ_{n+1})`.
pub fn z_update_direct(
    spec: &LinearTtsSpec,
    beta: f64,
    z: &Vector,
    m2: &Vector,
    theta: &Vector,
    theta_next: &Vector,
) -> Vector {
    z - spec.w2() * z * beta + m2 * beta + spec.lambda(theta) - spec.lambda(theta_next)
}

/// Ball projection applied only when `n` is a power of two (1 included).
pub fn sparse_project(n: usize, r: f64, x: Vector) -> Vector {
    sparse_project_flagged(n, r, x).0
}

/// As [`sparse_project`], also reporting whether `x` was moved.
pub fn sparse_project_flagged(n: usize, r: f64, x: Vector) -> (Vector, bool) {
    if !n.is_power_of_two() {
        return (x, false);
    }
    let norm = x.norm();
    if norm <= r {
        (x, false)
    } else {
        (x * (r / norm), true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionRadii {
    pub r1in: f64,
    pub r2in: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Mode {
    Unprojected,
    Projected(ProjectionRadii),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunConfig {
    pub n_start: usize,
    pub n_end: usize,
    pub stride: usize,
    pub mode: Mode,
    /// Keep every iterate and noise sample (needed for the error
    /// decomposition).
    pub keep_path: bool,
}

/// Every iterate from `n_start` on, with the noise consumed by each step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    pub n_start: usize,
    /// `theta[i] = θ_{n_start + i}`
    pub theta: Vec<Vector>,
    pub w: Vec<Vector>,
    /// `m1[i] = M⁽¹⁾_{n_start + i + 1}`
    pub m1: Vec<Vector>,
    pub m2: Vec<Vector>,
}

impl NoisePath {
    pub fn n_end(&self) -> usize {
        self.n_start + self.theta.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub state: IterateState,
    pub err_theta: f64,
    pub err_z: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub records: Vec<Record>,
    pub path: Option<NoisePath>,
    pub mode: Mode,
    pub stride: usize,
}

impl Trajectory {
    pub fn last(&self) -> &Record {
        self.records.last().expect("trajectories hold at least one record")
    }

    /// CSV with columns `n, err_theta, err_z, projected_theta, projected_w`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,err_theta,err_z,projected_theta,projected_w\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:e},{:e},{},{}\n",
                r.state.n,
                r.err_theta,
                r.err_z,
                r.state.projected.0 as u8,
                r.state.projected.1 as u8
            ));
        }
        out
    }
}

fn is_recorded(n: usize, cfg: &RunConfig) -> bool {
    n == cfg.n_start
        || n == cfg.n_end
        || (n - cfg.n_start) % cfg.stride == 0
        || n.is_power_of_two()
}

/// Runs from `(θ_start, w_start)` at index `n_start` up to `n_end`, recording
/// every `stride` steps, every power-of-two index and the final index.
pub fn run_trajectory(
    spec: &LinearTtsSpec,
    schedule: &StepsizeSchedule,
    noise: &mut NoiseGenerator,
    cfg: &RunConfig,
    theta_start: Vector,
    w_start: Vector,
) -> Result<Trajectory, EngineError> {
    if cfg.n_end <= cfg.n_start {
        return Err(EngineError::InvalidConfig(format!(
            "n_end ({}) must exceed n_start ({})",
            cfg.n_end, cfg.n_start
        )));
    }
    if cfg.stride == 0 {
        return Err(EngineError::InvalidConfig("stride must be positive".into()));
    }
    let d = spec.dim();
    if theta_start.len() != d || w_start.len() != d {
        return Err(EngineError::InvalidConfig(format!(
            "initial iterates must have dimension {d}"
        )));
    }
    if let Mode::Projected(r) = cfg.mode {
        if !(r.r1in > 0.0 && r.r2in > 0.0) {
            return Err(EngineError::InvalidConfig("projection radii must be positive".into()));
        }
    }
    schedule.check_horizon(cfg.n_end)?;

    let star = spec.theta_star().clone();
    let record = |s: &IterateState| Record {
        err_theta: (&s.theta - &star).norm(),
        err_z: s.z.norm(),
        state: s.clone(),
    };

    let mut state = IterateState::new(spec, cfg.n_start, theta_start, w_start);
    let mut records = vec![record(&state)];
    let steps = cfg.n_end - cfg.n_start;
    let mut path = cfg.keep_path.then(|| NoisePath {
        n_start: cfg.n_start,
        theta: Vec::with_capacity(steps + 1),
        w: Vec::with_capacity(steps + 1),
        m1: Vec::with_capacity(steps),
        m2: Vec::with_capacity(steps),
    });
    if let Some(p) = path.as_mut() {
        p.theta.push(state.theta.clone());
        p.w.push(state.w.clone());
    }

    while state.n < cfg.n_end {
        let out = match cfg.mode {
            Mode::Unprojected => step_unprojected(spec, schedule, noise, &state)?,
            Mode::Projected(r) => step_projected(spec, schedule, noise, r, &state)?,
        };
        state = out.state;
        if let Some(p) = path.as_mut() {
            p.theta.push(state.theta.clone());
            p.w.push(state.w.clone());
            p.m1.push(out.m1);
            p.m2.push(out.m2);
        }
        if is_recorded(state.n, cfg) {
            records.push(record(&state));
        }
    }

    Ok(Trajectory {
        records,
        path,
        mode: cfg.mode,
        stride: cfg.stride,
    })
}
