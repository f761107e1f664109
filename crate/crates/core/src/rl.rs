//! Policy-evaluation instances: finite Markov reward processes with linear
//! features, and the GTD(0), GTD2 and TDC recursions built on them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix, Vector};
use crate::model::{LinearTtsSpec, ModelError, NoiseBounds};

const FEATURE_ATTEMPTS: usize = 100;
const UNIFORM_MIX: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RlError {
    #[error("features are rank deficient after {attempts} attempts")]
    RankDeficientFeatures { attempts: usize },
    #[error("chain is not ergodic: eigenvalue 1 has multiplicity {multiplicity}")]
    NonErgodic { multiplicity: usize },
    #[error("invalid MRP: {0}")]
    InvalidMdp(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Finite Markov reward process with features and its stationary law.
#[derive(Debug, Clone, PartialEq)]
pub struct MdpSpec {
    p: Matrix,
    r: Vector,
    gamma: f64,
    phi: Matrix,
    pi: Vector,
}

/// JSON form `{P, r, gamma, Phi}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpJson {
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
    pub r: Vec<f64>,
    pub gamma: f64,
    #[serde(rename = "Phi")]
    pub phi: Vec<Vec<f64>>,
}

impl MdpSpec {
    pub fn new(p: Matrix, r: Vector, gamma: f64, phi: Matrix) -> Result<Self, RlError> {
        let n = p.nrows();
        if n == 0 || !p.is_square() {
            return Err(RlError::InvalidMdp("P must be a non-empty square matrix".into()));
        }
        if r.len() != n || phi.nrows() != n {
            return Err(RlError::InvalidMdp(format!(
                "r and Phi must have {n} rows, got {} and {}",
                r.len(),
                phi.nrows()
            )));
        }
        if !(0.0..1.0).contains(&gamma) {
            return Err(RlError::InvalidMdp(format!("gamma must lie in [0, 1), got {gamma}")));
        }
        for i in 0..n {
            let row = p.row(i);
            if row.iter().any(|&x| !(x >= 0.0 && x.is_finite())) {
                return Err(RlError::InvalidMdp(format!("row {i} of P has invalid entries")));
            }
            if (row.sum() - 1.0).abs() > 1e-12 {
                return Err(RlError::InvalidMdp(format!("row {i} of P does not sum to 1")));
            }
            if !(r[i].abs() <= 1.0) {
                return Err(RlError::InvalidMdp(format!("|r({i})| exceeds 1")));
            }
            if !(phi.row(i).norm() <= 1.0 + 1e-12) {
                return Err(RlError::InvalidMdp(format!("feature row {i} has norm above 1")));
            }
        }
        let d = phi.ncols();
        if d == 0 || d > n || feature_rank_deficient(&phi) {
            return Err(RlError::RankDeficientFeatures { attempts: 1 });
        }
        let pi = stationary_distribution(&p)?;
        Ok(Self { p, r, gamma, phi, pi })
    }

    /// Random instance: Dirichlet(1) transition rows mixed with the uniform
    /// law, rewards uniform on `[−1, 1]` and feature rows uniform in the
    /// unit ball.
    pub fn random(n_states: usize, d: usize, gamma: f64, seed: u64) -> Result<Self, RlError> {
        if n_states == 0 || d == 0 || d > n_states {
            return Err(RlError::InvalidMdp(format!(
                "need 1 <= d <= states, got d={d}, states={n_states}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let uniform = 1.0 / n_states as f64;
        let mut p = Matrix::zeros(n_states, n_states);
        for i in 0..n_states {
            let draws: Vec<f64> = (0..n_states).map(|_| Exp1.sample(&mut rng)).collect();
            let total: f64 = draws.iter().sum();
            for j in 0..n_states {
                p[(i, j)] = (1.0 - UNIFORM_MIX) * draws[j] / total + UNIFORM_MIX * uniform;
            }
            let s = p.row(i).sum();
            for j in 0..n_states {
                p[(i, j)] /= s;
            }
        }
        let r = Vector::from_fn(n_states, |_, _| rng.random_range(-1.0..=1.0));
        let mut phi = None;
        for _ in 0..FEATURE_ATTEMPTS {
            let candidate = Matrix::from_fn(n_states, d, |_, _| 0.0);
            let mut candidate = candidate;
            for i in 0..n_states {
                let dir = crate::engine::unit_sphere(&mut rng, d);
                let radius = rng.random::<f64>().powf(1.0 / d as f64);
                candidate.set_row(i, &(dir * radius).transpose());
            }
            if !feature_rank_deficient(&candidate) {
                phi = Some(candidate);
                break;
            }
        }
        let phi = phi.ok_or(RlError::RankDeficientFeatures {
            attempts: FEATURE_ATTEMPTS,
        })?;
        Self::new(p, r, gamma, phi)
    }

    pub fn from_json(j: &MdpJson) -> Result<Self, RlError> {
        let p = linalg::from_rows(&j.p).ok_or_else(|| RlError::InvalidMdp("ragged P".into()))?;
        let phi =
            linalg::from_rows(&j.phi).ok_or_else(|| RlError::InvalidMdp("ragged Phi".into()))?;
        Self::new(p, Vector::from_column_slice(&j.r), j.gamma, phi)
    }

    pub fn to_json(&self) -> MdpJson {
        MdpJson {
            p: linalg::to_rows(&self.p),
            r: self.r.iter().copied().collect(),
            gamma: self.gamma,
            phi: linalg::to_rows(&self.phi),
        }
    }

    pub fn n_states(&self) -> usize {
        self.p.nrows()
    }
    pub fn dim(&self) -> usize {
        self.phi.ncols()
    }
    pub fn p(&self) -> &Matrix {
        &self.p
    }
    pub fn r(&self) -> &Vector {
        &self.r
    }
    pub fn gamma(&self) -> f64 {
        self.gamma
    }
    pub fn phi(&self) -> &Matrix {
        &self.phi
    }
    pub fn pi(&self) -> &Vector {
        &self.pi
    }

    pub fn feature(&self, s: usize) -> Vector {
        self.phi.row(s).transpose()
    }
}

fn feature_rank_deficient(phi: &Matrix) -> bool {
    let sv = phi.clone().singular_values();
    sv.min() <= 1e-8 * sv.max().max(1e-300)
}

/// Left eigenvector of `P` for eigenvalue 1, normalised to a distribution.
pub fn stationary_distribution(p: &Matrix) -> Result<Vector, RlError> {
    let n = p.nrows();
    let multiplicity = if n == 1 {
        1
    } else {
        p.complex_eigenvalues()
            .iter()
            .filter(|z| (z.re - 1.0).abs() < 1e-9 && z.im.abs() < 1e-9)
            .count()
    };
    if multiplicity != 1 {
        return Err(RlError::NonErgodic { multiplicity });
    }
    // (Pᵀ − I) π = 0 with the last equation replaced by Σ π = 1
    let mut m = p.transpose() - Matrix::identity(n, n);
    for j in 0..n {
        m[(n - 1, j)] = 1.0;
    }
    let mut rhs = Vector::zeros(n);
    rhs[n - 1] = 1.0;
    let pi = linalg::solve(&m, &rhs).ok_or(RlError::NonErgodic { multiplicity: 2 })?;
    if pi.iter().any(|&x| x < -1e-12) {
        return Err(RlError::InvalidMdp("stationary vector has negative mass".into()));
    }
    let pi = pi.map(|x| x.max(0.0));
    let total = pi.sum();
    Ok(pi / total)
}

/// `A = E[φ(φ − γφ′)ᵀ]`, `C = E[φφᵀ]`, `b = E[rφ]` under `π` and `P`.
#[derive(Debug, Clone, PartialEq)]
pub struct GtdMatrices {
    pub a: Matrix,
    pub c: Matrix,
    pub b: Vector,
}

pub fn exact_matrices(mdp: &MdpSpec) -> GtdMatrices {
    let d = mdp.dim();
    let mut a = Matrix::zeros(d, d);
    let mut c = Matrix::zeros(d, d);
    let mut b = Vector::zeros(d);
    // expected next feature from each state
    let next = mdp.p() * mdp.phi();
    for s in 0..mdp.n_states() {
        let w = mdp.pi()[s];
        let phi = mdp.feature(s);
        let phi_next = next.row(s).transpose();
        a += (&phi * (&phi - phi_next * mdp.gamma()).transpose()) * w;
        c += (&phi * phi.transpose()) * w;
        b += &phi * (mdp.r()[s] * w);
    }
    GtdMatrices { a, c, b }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GtdVariant {
    Gtd0,
    Gtd2,
    Tdc,
}

impl std::str::FromStr for GtdVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "gtd0" | "gtd(0)" => Ok(Self::Gtd0),
            "gtd2" => Ok(Self::Gtd2),
            "tdc" => Ok(Self::Tdc),
            other => Err(format!("unknown GTD variant '{other}' (expected gtd0, gtd2, tdc)")),
        }
    }
}

impl std::fmt::Display for GtdVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gtd0 => "gtd0",
            Self::Gtd2 => "gtd2",
            Self::Tdc => "tdc",
        })
    }
}

/// Closed-form slow matrix: `AᵀA` for GTD(0), `AᵀC⁻¹A` otherwise.
pub fn closed_form_x1(m: &GtdMatrices, variant: GtdVariant) -> Option<Matrix> {
    match variant {
        GtdVariant::Gtd0 => Some(m.a.transpose() * &m.a),
        GtdVariant::Gtd2 | GtdVariant::Tdc => {
            let c_inv = m.c.clone().try_inverse()?;
            Some(m.a.transpose() * c_inv * &m.a)
        }
    }
}

/// Almost-sure noise constants for each variant.
pub fn noise_constants(m: &GtdMatrices, gamma: f64, variant: GtdVariant) -> NoiseBounds {
    let na = linalg::spectral_norm(&m.a);
    let nc = linalg::spectral_norm(&m.c);
    let nb = m.b.norm();
    let (m1, m2) = match variant {
        GtdVariant::Gtd0 => (1.0 + gamma + na, 1.0 + nb.max(gamma + na)),
        GtdVariant::Gtd2 => (1.0 + gamma + na, 1.0 + nb.max(gamma + na).max(nc)),
        GtdVariant::Tdc => {
            let m = 2.0 + gamma + na + nc;
            (m, m)
        }
    };
    NoiseBounds { m1, m2 }
}

pub fn gtd_spec(
    mdp: &MdpSpec,
    variant: GtdVariant,
) -> Result<(LinearTtsSpec, NoiseBounds), RlError> {
    let m = exact_matrices(mdp);
    let spec = spec_from_matrices(&m, variant)?;
    Ok((spec, noise_constants(&m, mdp.gamma(), variant)))
}

fn spec_from_matrices(m: &GtdMatrices, variant: GtdVariant) -> Result<LinearTtsSpec, ModelError> {
    let d = m.b.len();
    let zero = Matrix::zeros(d, d);
    let at = m.a.transpose();
    let spec = match variant {
        GtdVariant::Gtd0 => LinearTtsSpec::new(
            Vector::zeros(d),
            zero,
            -at,
            m.b.clone(),
            m.a.clone(),
            Matrix::identity(d, d),
        ),
        GtdVariant::Gtd2 => LinearTtsSpec::new(
            Vector::zeros(d),
            zero,
            -at,
            m.b.clone(),
            m.a.clone(),
            m.c.clone(),
        ),
        GtdVariant::Tdc => LinearTtsSpec::new(
            m.b.clone(),
            m.a.clone(),
            &m.c - at,
            m.b.clone(),
            m.a.clone(),
            m.c.clone(),
        ),
    }?;
    Ok(spec)
}

/// One sampled transition and the update directions it induces.
#[derive(Debug, Clone, PartialEq)]
pub struct GtdSample {
    pub s: usize,
    pub s_next: usize,
    pub dir1: Vector,
    pub dir2: Vector,
    pub m1: Vector,
    pub m2: Vector,
    /// `δ = r + γθᵀφ′ − θᵀφ`
    pub td_error: f64,
}

/// Draws transitions of an MRP and converts them into GTD noise.
#[derive(Debug, Clone)]
pub struct GtdSampler {
    variant: GtdVariant,
    mdp: MdpSpec,
    matrices: GtdMatrices,
    spec: LinearTtsSpec,
    bounds: NoiseBounds,
    pi_cdf: Vec<f64>,
    p_cdf: Vec<Vec<f64>>,
    features: Vec<Vector>,
}

fn cdf(weights: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = weights
        .map(|w| {
            acc += w;
            acc
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = f64::INFINITY;
    }
    out
}

fn draw(cdf: &[f64], u: f64) -> usize {
    cdf.partition_point(|&c| c <= u).min(cdf.len() - 1)
}

impl GtdSampler {
    pub fn new(mdp: MdpSpec, variant: GtdVariant) -> Result<Self, RlError> {
        let matrices = exact_matrices(&mdp);
        let spec = spec_from_matrices(&matrices, variant)?;
        let bounds = noise_constants(&matrices, mdp.gamma(), variant);
        let n = mdp.n_states();
        let pi_cdf = cdf(mdp.pi().iter().copied());
        let p_cdf = (0..n).map(|i| cdf(mdp.p().row(i).iter().copied())).collect();
        let features = (0..n).map(|s| mdp.feature(s)).collect();
        Ok(Self {
            variant,
            mdp,
            matrices,
            spec,
            bounds,
            pi_cdf,
            p_cdf,
            features,
        })
    }

    pub fn variant(&self) -> GtdVariant {
        self.variant
    }
    pub fn mdp(&self) -> &MdpSpec {
        &self.mdp
    }
    pub fn matrices(&self) -> &GtdMatrices {
        &self.matrices
    }
    pub fn spec(&self) -> &LinearTtsSpec {
        &self.spec
    }
    pub fn noise_bounds(&self) -> NoiseBounds {
        self.bounds
    }

    /// `s ~ π`, `s′ ~ P(s, ·)`.
    pub fn draw_iid(&self, rng: &mut impl Rng) -> (usize, usize) {
        let s = draw(&self.pi_cdf, rng.random());
        let s_next = draw(&self.p_cdf[s], rng.random());
        (s, s_next)
    }

    /// Continues a single chain; the first call starts it from `π`.
    pub fn draw_markov(&self, rng: &mut impl Rng, state: &mut Option<usize>) -> (usize, usize) {
        let s = match *state {
            Some(s) => s,
            None => draw(&self.pi_cdf, rng.random()),
        };
        let s_next = draw(&self.p_cdf[s], rng.random());
        *state = Some(s_next);
        (s, s_next)
    }

    pub fn sample(&self, rng: &mut impl Rng, theta: &Vector, w: &Vector) -> GtdSample {
        let s = self.draw_iid(rng);
        self.sample_at(s, theta, w)
    }

    /// Sampled directions for the transition `(s, s′)`; the martingale
    /// differences subtract the exact expected fields.
    pub fn sample_at(&self, (s, s_next): (usize, usize), theta: &Vector, w: &Vector) -> GtdSample {
        let gamma = self.mdp.gamma();
        let r = self.mdp.r()[s];
        let phi = &self.features[s];
        let phi_next = &self.features[s_next];
        let phi_t_w = phi.dot(w);
        let phi_t_theta = phi.dot(theta);
        let td_error = r + gamma * phi_next.dot(theta) - phi_t_theta;
        // rφ + φ(γφ′ − φ)ᵀθ = δφ
        let td_dir = phi * td_error;
        let (dir1, dir2) = match self.variant {
            GtdVariant::Gtd0 => ((phi - phi_next * gamma) * phi_t_w, &td_dir - w),
            GtdVariant::Gtd2 => ((phi - phi_next * gamma) * phi_t_w, &td_dir - phi * phi_t_w),
            GtdVariant::Tdc => (
                &td_dir - phi_next * (gamma * phi_t_w),
                &td_dir - phi * phi_t_w,
            ),
        };
        let m1 = &dir1 - self.spec.h1(theta, w);
        let m2 = &dir2 - self.spec.h2(theta, w);
        GtdSample {
            s,
            s_next,
            dir1,
            dir2,
            m1,
            m2,
            td_error,
        }
    }
}
