//! Problem definition for a linear two-timescale recursion.
//!
//! The coupled iterates are driven by the affine fields
//! `h1(θ, w) = v1 − Γ1 θ − W1 w` (slow) and `h2(θ, w) = v2 − Γ2 θ − W2 w`
//! (fast). Construction eliminates the fast variable, producing the slow
//! system matrix `X1 = Γ1 − W1 W2⁻¹ Γ2`, the offset `b1 = v1 − W1 W2⁻¹ v2`
//! and the equilibrium `θ* = X1⁻¹ b1`; both `X1` and `W2` must have spectra
//! in the open right half plane.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix, Vector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("non-finite entry in {0}")]
    NonFiniteEntry(&'static str),
    #[error("W2 is singular or ill-conditioned (condition number {condition:e})")]
    SingularW2 { condition: f64 },
    #[error("X1 is singular or ill-conditioned (condition number {condition:e})")]
    SingularX1 { condition: f64 },
    #[error("{matrix} is not positive definite: min real eigenvalue {eigenvalue}")]
    NotPositiveDefinite {
        matrix: &'static str,
        eigenvalue: f64,
    },
    #[error("invalid stepsize schedule: {0}")]
    InvalidSchedule(String),
    #[error("explicit schedule has {len} entries but index {needed} was requested")]
    ScheduleTooShort { len: usize, needed: usize },
    #[error("invalid {what}: {reason}")]
    InvalidParameter { what: &'static str, reason: String },
}

/// Quantities derived from the six defining matrices at construction time.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedEquilibria {
    pub x1: Matrix,
    pub b1: Vector,
    pub theta_star: Vector,
    pub w2_inv: Matrix,
    pub x1_inv: Matrix,
    /// Smallest real eigenvalue parts, kept for the spectral envelopes.
    pub x1_min_real_eig: f64,
    pub w2_min_real_eig: f64,
}

/// Validated linear two-timescale instance.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTtsSpec {
    v1: Vector,
    gamma1: Matrix,
    w1: Matrix,
    v2: Vector,
    gamma2: Matrix,
    w2: Matrix,
    derived: DerivedEquilibria,
}

impl LinearTtsSpec {
    pub fn new(
        v1: Vector,
        gamma1: Matrix,
        w1: Matrix,
        v2: Vector,
        gamma2: Matrix,
        w2: Matrix,
    ) -> Result<Self, ModelError> {
        let d = v1.len();
        if d == 0 {
            return Err(ModelError::InvalidParameter {
                what: "dimension",
                reason: "d must be positive".into(),
            });
        }
        check_vec("v2", &v2, d)?;
        for (name, m) in [("gamma1", &gamma1), ("w1", &w1), ("gamma2", &gamma2), ("w2", &w2)] {
            check_square(name, m, d)?;
        }
        if !linalg::all_finite_vec(&v1) {
            return Err(ModelError::NonFiniteEntry("v1"));
        }

        let w2_inv = linalg::conditioned_inverse(&w2)
            .map_err(|condition| ModelError::SingularW2 { condition })?;
        let w1_w2inv = &w1 * &w2_inv;
        let x1 = &gamma1 - &w1_w2inv * &gamma2;
        let b1 = &v1 - &w1_w2inv * &v2;

        let w2_min_real_eig = linalg::min_real_eigenvalue(&w2);
        if w2_min_real_eig <= 0.0 {
            return Err(ModelError::NotPositiveDefinite {
                matrix: "W2",
                eigenvalue: w2_min_real_eig,
            });
        }
        let x1_min_real_eig = linalg::min_real_eigenvalue(&x1);
        if x1_min_real_eig <= 0.0 {
            return Err(ModelError::NotPositiveDefinite {
                matrix: "X1",
                eigenvalue: x1_min_real_eig,
            });
        }
        let x1_inv = linalg::conditioned_inverse(&x1)
            .map_err(|condition| ModelError::SingularX1 { condition })?;
        let theta_star = linalg::solve(&x1, &b1).ok_or(ModelError::SingularX1 {
            condition: f64::INFINITY,
        })?;

        Ok(Self {
            v1,
            gamma1,
            w1,
            v2,
            gamma2,
            w2,
            derived: DerivedEquilibria {
                x1,
                b1,
                theta_star,
                w2_inv,
                x1_inv,
                x1_min_real_eig,
                w2_min_real_eig,
            },
        })
    }

    pub fn dim(&self) -> usize {
        self.v1.len()
    }
    pub fn v1(&self) -> &Vector {
        &self.v1
    }
    pub fn gamma1(&self) -> &Matrix {
        &self.gamma1
    }
    pub fn w1(&self) -> &Matrix {
        &self.w1
    }
    pub fn v2(&self) -> &Vector {
        &self.v2
    }
    pub fn gamma2(&self) -> &Matrix {
        &self.gamma2
    }
    pub fn w2(&self) -> &Matrix {
        &self.w2
    }
    pub fn derived(&self) -> &DerivedEquilibria {
        &self.derived
    }
    pub fn x1(&self) -> &Matrix {
        &self.derived.x1
    }
    pub fn b1(&self) -> &Vector {
        &self.derived.b1
    }
    pub fn theta_star(&self) -> &Vector {
        &self.derived.theta_star
    }
    pub fn w2_inv(&self) -> &Matrix {
        &self.derived.w2_inv
    }

    /// Fast-variable equilibrium `λ(θ) = W2⁻¹ (v2 − Γ2 θ)`.
    pub fn lambda(&self, theta: &Vector) -> Vector {
        &self.derived.w2_inv * (&self.v2 - &self.gamma2 * theta)
    }

    pub fn h1(&self, theta: &Vector, w: &Vector) -> Vector {
        &self.v1 - &self.gamma1 * theta - &self.w1 * w
    }

    pub fn h2(&self, theta: &Vector, w: &Vector) -> Vector {
        &self.v2 - &self.gamma2 * theta - &self.w2 * w
    }

    pub fn to_json(&self) -> SpecJson {
        SpecJson {
            d: self.dim(),
            v1: self.v1.iter().copied().collect(),
            gamma1: MatrixRepr::Rows(linalg::to_rows(&self.gamma1)),
            w1: MatrixRepr::Rows(linalg::to_rows(&self.w1)),
            v2: self.v2.iter().copied().collect(),
            gamma2: MatrixRepr::Rows(linalg::to_rows(&self.gamma2)),
            w2: MatrixRepr::Rows(linalg::to_rows(&self.w2)),
        }
    }
}

fn check_vec(what: &'static str, v: &Vector, d: usize) -> Result<(), ModelError> {
    if v.len() != d {
        return Err(ModelError::DimensionMismatch {
            what,
            expected: d,
            got: v.len(),
        });
    }
    if !linalg::all_finite_vec(v) {
        return Err(ModelError::NonFiniteEntry(what));
    }
    Ok(())
}

fn check_square(what: &'static str, m: &Matrix, d: usize) -> Result<(), ModelError> {
    for got in [m.nrows(), m.ncols()] {
        if got != d {
            return Err(ModelError::DimensionMismatch {
                what,
                expected: d,
                got,
            });
        }
    }
    if !linalg::all_finite_mat(m) {
        return Err(ModelError::NonFiniteEntry(what));
    }
    Ok(())
}

/// Matrix as it appears in JSON: nested rows, or a flat row-major array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixRepr {
    Rows(Vec<Vec<f64>>),
    Flat(Vec<f64>),
}

impl MatrixRepr {
    pub fn to_matrix(&self, what: &'static str, d: usize) -> Result<Matrix, ModelError> {
        match self {
            MatrixRepr::Rows(rows) => {
                if rows.len() != d {
                    return Err(ModelError::DimensionMismatch {
                        what,
                        expected: d,
                        got: rows.len(),
                    });
                }
                linalg::from_rows(rows)
                    .filter(|m| m.ncols() == d)
                    .ok_or(ModelError::DimensionMismatch {
                        what,
                        expected: d,
                        got: rows.iter().map(Vec::len).find(|&l| l != d).unwrap_or(0),
                    })
            }
            MatrixRepr::Flat(values) => {
                if values.len() != d * d {
                    return Err(ModelError::DimensionMismatch {
                        what,
                        expected: d * d,
                        got: values.len(),
                    });
                }
                Ok(Matrix::from_row_slice(d, d, values))
            }
        }
    }
}

/// JSON form `{d, v1, gamma1, w1, v2, gamma2, w2}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecJson {
    pub d: usize,
    pub v1: Vec<f64>,
    pub gamma1: MatrixRepr,
    pub w1: MatrixRepr,
    pub v2: Vec<f64>,
    pub gamma2: MatrixRepr,
    pub w2: MatrixRepr,
}

impl SpecJson {
    pub fn build(&self) -> Result<LinearTtsSpec, ModelError> {
        let d = self.d;
        for (what, v) in [("v1", &self.v1), ("v2", &self.v2)] {
            if v.len() != d {
                return Err(ModelError::DimensionMismatch {
                    what,
                    expected: d,
                    got: v.len(),
                });
            }
        }
        LinearTtsSpec::new(
            Vector::from_column_slice(&self.v1),
            self.gamma1.to_matrix("gamma1", d)?,
            self.w1.to_matrix("w1", d)?,
            Vector::from_column_slice(&self.v2),
            self.gamma2.to_matrix("gamma2", d)?,
            self.w2.to_matrix("w2", d)?,
        )
    }
}

/// Stepsizes and accumulated times at one index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stepsizes {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    /// `t_n = Σ_{k<n} α_k`
    pub t: f64,
    /// `s_n = Σ_{k<n} β_k`
    pub s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ScheduleSpec {
    /// `α_n = (n+1)^-alpha`, `β_n = (n+1)^-beta`.
    Polynomial { alpha: f64, beta: f64 },
    Explicit { alpha: Vec<f64>, beta: Vec<f64> },
}

/// Non-increasing stepsize pair with `α_n, β_n, α_n/β_n ≤ 1`.
///
/// Explicit schedules are finite tables; asking for an index past the end
/// panics, and [`StepsizeSchedule::check_horizon`] is the fallible gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleSpec", into = "ScheduleSpec")]
pub struct StepsizeSchedule {
    spec: ScheduleSpec,
}

impl TryFrom<ScheduleSpec> for StepsizeSchedule {
    type Error = ModelError;

    fn try_from(spec: ScheduleSpec) -> Result<Self, Self::Error> {
        match spec {
            ScheduleSpec::Polynomial { alpha, beta } => Self::polynomial(alpha, beta),
            ScheduleSpec::Explicit { alpha, beta } => Self::explicit(alpha, beta),
        }
    }
}

impl From<StepsizeSchedule> for ScheduleSpec {
    fn from(s: StepsizeSchedule) -> Self {
        s.spec
    }
}

impl StepsizeSchedule {
    pub fn polynomial(alpha: f64, beta: f64) -> Result<Self, ModelError> {
        if !(alpha.is_finite() && beta.is_finite()) {
            return Err(ModelError::InvalidSchedule("non-finite exponent".into()));
        }
        if alpha == beta {
            return Err(ModelError::InvalidSchedule(format!(
                "alpha = beta = {alpha} collapses to a single timescale"
            )));
        }
        if !(1.0 > alpha && alpha > beta && beta > 0.0) {
            return Err(ModelError::InvalidSchedule(format!(
                "need 1 > alpha > beta > 0, got alpha={alpha}, beta={beta}"
            )));
        }
        Ok(Self {
            spec: ScheduleSpec::Polynomial { alpha, beta },
        })
    }

    pub fn explicit(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self, ModelError> {
        if alpha.is_empty() || alpha.len() != beta.len() {
            return Err(ModelError::InvalidSchedule(format!(
                "alpha and beta must be non-empty and equally long ({} vs {})",
                alpha.len(),
                beta.len()
            )));
        }
        for (n, (&a, &b)) in alpha.iter().zip(&beta).enumerate() {
            if !(a > 0.0 && a <= 1.0 && b > 0.0 && b <= 1.0) {
                return Err(ModelError::InvalidSchedule(format!(
                    "stepsizes at n={n} must lie in (0, 1], got alpha={a}, beta={b}"
                )));
            }
            if a > b {
                return Err(ModelError::InvalidSchedule(format!(
                    "eta = alpha/beta exceeds 1 at n={n}"
                )));
            }
            if n > 0 {
                let (pa, pb) = (alpha[n - 1], beta[n - 1]);
                if a > pa || b > pb || a / b > pa / pb {
                    return Err(ModelError::InvalidSchedule(format!(
                        "alpha, beta and eta must be non-increasing (violated at n={n})"
                    )));
                }
            }
        }
        Ok(Self {
            spec: ScheduleSpec::Explicit { alpha, beta },
        })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    /// `(alpha_exp, beta_exp)` for the polynomial family.
    pub fn exponents(&self) -> Option<(f64, f64)> {
        match self.spec {
            ScheduleSpec::Polynomial { alpha, beta } => Some((alpha, beta)),
            ScheduleSpec::Explicit { .. } => None,
        }
    }

    /// Number of tabulated entries; `None` means unbounded.
    pub fn horizon(&self) -> Option<usize> {
        match &self.spec {
            ScheduleSpec::Polynomial { .. } => None,
            ScheduleSpec::Explicit { alpha, .. } => Some(alpha.len()),
        }
    }

    /// Errors unless `alpha(n)` is defined for every `n < end`.
    pub fn check_horizon(&self, end: usize) -> Result<(), ModelError> {
        match self.horizon() {
            Some(len) if end > len => Err(ModelError::ScheduleTooShort { len, needed: end - 1 }),
            _ => Ok(()),
        }
    }

    pub fn alpha(&self, n: usize) -> f64 {
        match &self.spec {
            ScheduleSpec::Polynomial { alpha, .. } => (n as f64 + 1.0).powf(-alpha),
            ScheduleSpec::Explicit { alpha, .. } => alpha[n],
        }
    }

    pub fn beta(&self, n: usize) -> f64 {
        match &self.spec {
            ScheduleSpec::Polynomial { beta, .. } => (n as f64 + 1.0).powf(-beta),
            ScheduleSpec::Explicit { beta, .. } => beta[n],
        }
    }

    pub fn eta(&self, n: usize) -> f64 {
        match &self.spec {
            ScheduleSpec::Polynomial { alpha, beta } => (n as f64 + 1.0).powf(beta - alpha),
            ScheduleSpec::Explicit { alpha, beta } => alpha[n] / beta[n],
        }
    }

    /// `sup_{k ≥ n} β_k`, which is `β_n` because schedules are non-increasing.
    pub fn tail_sup_beta(&self, n: usize) -> f64 {
        self.beta(n)
    }

    /// `sup_{k ≥ n} η_k`.
    pub fn tail_sup_eta(&self, n: usize) -> f64 {
        self.eta(n)
    }

    /// Stepsizes and accumulated times at index `n` (O(n) summation).
    pub fn at(&self, n: usize) -> Stepsizes {
        let (mut t, mut s) = (0.0, 0.0);
        for k in 0..n {
            t += self.alpha(k);
            s += self.beta(k);
        }
        Stepsizes {
            alpha: self.alpha(n),
            beta: self.beta(n),
            eta: self.eta(n),
            t,
            s,
        }
    }

    /// Precomputes stepsizes and prefix sums for indices `0..=len`.
    pub fn table(&self, len: usize) -> Result<ScheduleTable, ModelError> {
        self.check_horizon(len + 1)?;
        let alpha: Vec<f64> = (0..=len).map(|n| self.alpha(n)).collect();
        let beta: Vec<f64> = (0..=len).map(|n| self.beta(n)).collect();
        let mut t = Vec::with_capacity(len + 1);
        let mut s = Vec::with_capacity(len + 1);
        let (mut ta, mut sa) = (0.0, 0.0);
        for n in 0..=len {
            t.push(ta);
            s.push(sa);
            ta += alpha[n];
            sa += beta[n];
        }
        Ok(ScheduleTable { alpha, beta, t, s })
    }
}

/// Stepsizes with cached prefix sums; immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleTable {
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub t: Vec<f64>,
    pub s: Vec<f64>,
}

impl ScheduleTable {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    pub fn at(&self, n: usize) -> Stepsizes {
        Stepsizes {
            alpha: self.alpha[n],
            beta: self.beta[n],
            eta: self.alpha[n] / self.beta[n],
            t: self.t[n],
            s: self.s[n],
        }
    }

    /// The interpolation map `ξ(τ) = s_n + (β_n/α_n)(τ − t_n)` for
    /// `τ ∈ [t_n, t_{n+1})`, evaluated at a time inside the table.
    pub fn xi(&self, tau: f64) -> f64 {
        let last = self.len() - 1;
        // largest n with t_n <= tau
        let n = match self.t.binary_search_by(|x| x.partial_cmp(&tau).unwrap()) {
            Ok(i) => i,
            Err(0) => 0,
            Err(i) => i - 1,
        }
        .min(last);
        self.s[n] + self.beta[n] / self.alpha[n] * (tau - self.t[n])
    }
}

/// Almost-sure noise scale constants `m1`, `m2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseBounds {
    pub m1: f64,
    pub m2: f64,
}

impl NoiseBounds {
    pub fn new(m1: f64, m2: f64) -> Result<Self, ModelError> {
        for (what, m) in [("m1", m1), ("m2", m2)] {
            if !(m.is_finite() && m >= 0.0) {
                return Err(ModelError::InvalidParameter {
                    what,
                    reason: format!("must be a finite non-negative number, got {m}"),
                });
            }
        }
        Ok(Self { m1, m2 })
    }

    pub fn is_noiseless(&self) -> bool {
        self.m1 == 0.0 && self.m2 == 0.0
    }
}

/// User-chosen radii `R1^in`, `R2^in`, `R2^out`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Radii {
    pub r1in: f64,
    pub r2in: f64,
    pub r2out: f64,
}

impl Radii {
    pub fn new(r1in: f64, r2in: f64, r2out: f64) -> Result<Self, ModelError> {
        let radii = Self { r1in, r2in, r2out };
        radii.validate()?;
        Ok(radii)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.r1in > 0.0 && self.r1in.is_finite()) {
            return Err(ModelError::InvalidParameter {
                what: "r1in",
                reason: format!("must be positive, got {}", self.r1in),
            });
        }
        if !(self.r2in > 0.0 && self.r2in.is_finite()) {
            return Err(ModelError::InvalidParameter {
                what: "r2in",
                reason: format!("must be positive, got {}", self.r2in),
            });
        }
        if !(self.r2out > self.r2in && self.r2out.is_finite()) {
            return Err(ModelError::InvalidParameter {
                what: "r2out",
                reason: format!("must exceed r2in = {}, got {}", self.r2in, self.r2out),
            });
        }
        Ok(())
    }
}
