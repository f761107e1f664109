//! Exponential decay envelopes `‖e^{−Mt}‖ ≤ K e^{−qt}`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, Matrix};
use crate::model::LinearTtsSpec;

pub const DEFAULT_SAFETY: f64 = 0.9;
pub const DEFAULT_Q_FRACTION: f64 = 0.5;
const SLACK: f64 = 1.05;
const T_MIN: f64 = 1e-7;
const MIN_GRID_POINTS: usize = 512;
const MAX_RATIO: f64 = 1.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error("matrix is not stable: min real eigenvalue {0}")]
    NotStable(f64),
    #[error("matrix exponential overflowed (norm of M t = {0:e})")]
    Overflow(f64),
    #[error("non-finite matrix entry")]
    NonFinite,
    #[error("invalid {what}: {value}")]
    InvalidParameter { what: &'static str, value: f64 },
}

/// `e^{M t}` by Padé scaling and squaring.
pub fn matrix_exp(m: &Matrix, t: f64) -> Result<Matrix, SpectralError> {
    if !linalg::all_finite_mat(m) || !t.is_finite() {
        return Err(SpectralError::NonFinite);
    }
    let mt = m * t;
    if mt.iter().all(|&x| x == 0.0) {
        return Ok(Matrix::identity(m.nrows(), m.ncols()));
    }
    let e = mt.exp();
    if !linalg::all_finite_mat(&e) {
        return Err(SpectralError::Overflow(mt.norm()));
    }
    Ok(e)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub q: f64,
    pub k: f64,
    /// Number of grid times examined (0 on the diagonal fast path).
    pub grid_points: usize,
    pub t_max: f64,
}

/// Decay envelope for a stable `M`: `q = safety·q′` where `q′` is the
/// smallest real eigenvalue part, and `K` a slackened grid maximum of
/// `‖e^{−Mt}‖ e^{qt}`.
pub fn envelope(m: &Matrix, safety: f64) -> Result<Envelope, SpectralError> {
    if !(safety > 0.0 && safety < 1.0) {
        return Err(SpectralError::InvalidParameter {
            what: "safety",
            value: safety,
        });
    }
    if !linalg::all_finite_mat(m) {
        return Err(SpectralError::NonFinite);
    }
    let q_prime = linalg::min_real_eigenvalue(m);
    if !(q_prime > 0.0) {
        return Err(SpectralError::NotStable(q_prime));
    }
    let q = safety * q_prime;
    let t_max = 50.0 / ((1.0 - safety) * q_prime);
    if linalg::is_diagonal(m) {
        return Ok(Envelope {
            q,
            k: 1.0,
            grid_points: 0,
            t_max,
        });
    }

    let neg = -m;
    let f = |t: f64| -> f64 {
        match matrix_exp(&neg, t) {
            Ok(e) => linalg::spectral_norm(&e) * (q * t).exp(),
            Err(_) => f64::INFINITY,
        }
    };

    let grid = envelope_grid(t_max);
    let mut best = 1.0; // t = 0
    let mut best_idx = None;
    for (i, &t) in grid.iter().enumerate() {
        let v = f(t);
        if v > best {
            best = v;
            best_idx = Some(i);
        }
    }
    if let Some(i) = best_idx {
        let lo = if i == 0 { 0.0 } else { grid[i - 1] };
        let hi = grid.get(i + 1).copied().unwrap_or(t_max);
        let (_, v) = golden_max(&f, lo, hi, 60);
        best = best.max(v);
    }
    Ok(Envelope {
        q,
        k: (best * SLACK).max(1.0),
        grid_points: grid.len() + 1,
        t_max,
    })
}

/// Geometric grid anchored at `T_MIN` with ratio at most `MAX_RATIO`, so
/// grids for different `t_max` share their common prefix.
fn envelope_grid(t_max: f64) -> Vec<f64> {
    let span = (t_max / T_MIN).ln();
    let ratio = MAX_RATIO.min((span / (MIN_GRID_POINTS - 1) as f64).exp());
    let steps = (span / ratio.ln()).ceil() as usize;
    let mut grid: Vec<f64> = (0..=steps)
        .map(|j| T_MIN * ratio.powi(j as i32))
        .take_while(|&t| t < t_max)
        .collect();
    grid.push(t_max);
    grid
}

fn golden_max(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, iters: usize) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = f(d);
        }
    }
    if fc > fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Envelopes for `X1` and `W2` plus the joint rate `q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralConstants {
    pub q1: f64,
    pub q2: f64,
    pub k1: f64,
    pub k2: f64,
    pub q_min: f64,
    pub q: f64,
    pub grid_points_x1: usize,
    pub grid_points_w2: usize,
}

impl SpectralConstants {
    /// `q = q_fraction · min(q1, q2)`.
    pub fn from_spec(
        spec: &LinearTtsSpec,
        safety: f64,
        q_fraction: f64,
    ) -> Result<Self, SpectralError> {
        let e1 = envelope(spec.x1(), safety)?;
        let e2 = envelope(spec.w2(), safety)?;
        Self::from_parts(e1.q, e1.k, e2.q, e2.k, q_fraction).map(|mut s| {
            s.grid_points_x1 = e1.grid_points;
            s.grid_points_w2 = e2.grid_points;
            s
        })
    }

    pub fn with_defaults(spec: &LinearTtsSpec) -> Result<Self, SpectralError> {
        Self::from_spec(spec, DEFAULT_SAFETY, DEFAULT_Q_FRACTION)
    }

    /// Builds constants from user-supplied envelopes.
    pub fn from_parts(
        q1: f64,
        k1: f64,
        q2: f64,
        k2: f64,
        q_fraction: f64,
    ) -> Result<Self, SpectralError> {
        for (what, value) in [("q1", q1), ("q2", q2)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(SpectralError::InvalidParameter { what, value });
            }
        }
        for (what, value) in [("k1", k1), ("k2", k2)] {
            if !(value >= 1.0 && value.is_finite()) {
                return Err(SpectralError::InvalidParameter { what, value });
            }
        }
        if !(q_fraction > 0.0 && q_fraction < 1.0) {
            return Err(SpectralError::InvalidParameter {
                what: "q_fraction",
                value: q_fraction,
            });
        }
        let q_min = q1.min(q2);
        Ok(Self {
            q1,
            q2,
            k1,
            k2,
            q_min,
            q: q_fraction * q_min,
            grid_points_x1: 0,
            grid_points_w2: 0,
        })
    }

    /// Replaces the joint rate, which must stay in `(0, q_min)`.
    pub fn with_q(mut self, q: f64) -> Result<Self, SpectralError> {
        if !(q > 0.0 && q < self.q_min) {
            return Err(SpectralError::InvalidParameter { what: "q", value: q });
        }
        self.q = q;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Vector;

    #[test]
    fn exp_of_zero_is_identity() {
        let e = matrix_exp(&Matrix::zeros(3, 3), 2.0).unwrap();
        assert_eq!(e, Matrix::identity(3, 3));
    }

    #[test]
    fn exp_of_diagonal() {
        let m = Matrix::from_diagonal(&Vector::from_vec(vec![-1.0, -2.0]));
        let e = matrix_exp(&m, 1.0).unwrap();
        assert!((e[(0, 0)] - (-1f64).exp()).abs() < 1e-15);
        assert!((e[(1, 1)] - (-2f64).exp()).abs() < 1e-15);
        assert_eq!(e[(0, 1)], 0.0);
    }

    #[test]
    fn exp_overflow_is_reported() {
        let m = Matrix::from_element(1, 1, 1.0);
        assert!(matches!(matrix_exp(&m, 1e4), Err(SpectralError::Overflow(_))));
    }

    #[test]
    fn scalar_envelope() {
        let e = envelope(&Matrix::from_element(1, 1, 1.0), 0.9).unwrap();
        assert!((e.q - 0.9).abs() < 1e-15);
        assert!(e.k >= 1.0 && e.k <= 1.05);
    }

    #[test]
    fn diagonal_fast_path() {
        let m = Matrix::from_diagonal(&Vector::from_vec(vec![1.0, 3.0]));
        let e = envelope(&m, 0.9).unwrap();
        assert_eq!(e.k, 1.0);
        assert!((e.q - 0.9).abs() < 1e-15);
    }

    #[test]
    fn defective_envelope_exceeds_one() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 10.0, 0.0, 1.0]);
        let e = envelope(&m, 0.5).unwrap();
        assert!(e.k > 1.0);
        // true supremum of 10 t e^{-t/2} plus the identity part is near 20/e
        assert!(e.k > 20.0 / std::f64::consts::E);
        assert!(e.grid_points >= MIN_GRID_POINTS);
    }

    #[test]
    fn unstable_matrix_is_rejected() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(matches!(envelope(&m, 0.9), Err(SpectralError::NotStable(_))));
    }

    #[test]
    fn grid_has_enough_points() {
        for t_max in [1e-3, 1.0, 500.0, 1e6] {
            let g = envelope_grid(t_max);
            assert!(g.len() >= MIN_GRID_POINTS, "t_max={t_max} gave {}", g.len());
            assert_eq!(*g.last().unwrap(), t_max);
            assert!(g.windows(2).all(|w| w[0] < w[1]));
        }
    }
}
