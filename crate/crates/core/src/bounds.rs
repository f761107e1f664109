//! Constants, thresholds and lock-in probability bounds.
//!
//! The [`ConstantLedger`] is computed in two passes: the left column depends
//! only on the problem data, radii, noise constants and decay envelopes; the
//! right column may read the left column but never the reverse.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;
use crate::model::{LinearTtsSpec, ModelError, NoiseBounds, Radii, StepsizeSchedule};
use crate::spectral::SpectralConstants;

/// Largest index any threshold search may return.
pub const MAX_INDEX: u64 = 1 << 62;
pub const DEFAULT_KAPPA: f64 = 0.5;
/// Forward-scan cap for `i1`.
pub const I1_SCAN_CAP: u64 = 10_000_000;
const DIRECT_SCAN: u64 = 1_000_000;
/// Relative size below which a series term ends direct summation.
const REL_TAIL: f64 = 1e-16;
/// Default number of direct terms before the closed-form tail takes over.
pub const DEFAULT_DIRECT_TERMS: u64 = 1_000_000;
/// Direct summation needs `a_{n0}`; beyond this start index the closed-form
/// tail is used from `n0` on.
const DIRECT_START_CAP: u64 = 20_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BoundsError {
    #[error("epsilon out of range: {0}")]
    EpsilonOutOfRange(String),
    #[error("{what} exceeds the largest supported index (estimate {estimate:e})")]
    IndexOverflow { what: &'static str, estimate: f64 },
    #[error("{what} is not reached within the explicit schedule of length {len}")]
    ThresholdNotReached { what: &'static str, len: usize },
    #[error("series terms have not decayed by index {index}")]
    NonSummable { index: u64 },
    #[error("scan for i1 exhausted its cap of {cap} indices")]
    ScanExhausted { cap: u64 },
    #[error("parameter out of domain: {0}")]
    Domain(String),
    #[error("assumption violated: {0}")]
    AssumptionViolated(String),
    #[error("this bound needs a polynomial stepsize schedule")]
    NeedsPolynomialSchedule,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Norms of the problem data that enter the ledger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemNorms {
    pub d: usize,
    pub v1: f64,
    pub gamma1: f64,
    pub w1: f64,
    pub v2: f64,
    pub gamma2: f64,
    pub w2: f64,
    pub w2_inv: f64,
    pub x1: f64,
    pub x1_inv: f64,
    pub b1: f64,
    pub theta_star: f64,
    /// `‖W2⁻¹ v2‖`
    pub w2_inv_v2: f64,
    /// `‖W2⁻¹ Γ2‖`
    pub w2_inv_gamma2: f64,
}

impl ProblemNorms {
    pub fn of(spec: &LinearTtsSpec) -> Self {
        let sn = linalg::spectral_norm;
        let w2_inv = spec.w2_inv();
        Self {
            d: spec.dim(),
            v1: spec.v1().norm(),
            gamma1: sn(spec.gamma1()),
            w1: sn(spec.w1()),
            v2: spec.v2().norm(),
            gamma2: sn(spec.gamma2()),
            w2: sn(spec.w2()),
            w2_inv: sn(w2_inv),
            x1: sn(spec.x1()),
            x1_inv: sn(&spec.derived().x1_inv),
            b1: spec.b1().norm(),
            theta_star: spec.theta_star().norm(),
            w2_inv_v2: (w2_inv * spec.v2()).norm(),
            w2_inv_gamma2: sn(&(w2_inv * spec.gamma2())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerInputs {
    pub norms: ProblemNorms,
    pub spectral: SpectralConstants,
    pub radii: Radii,
    pub noise: NoiseBounds,
}

/// Entries that depend on nothing in the right column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeftColumn {
    pub k1: f64,
    pub k2: f64,
    pub q1: f64,
    pub q2: f64,
    pub q_min: f64,
    pub q: f64,
    pub r1out: f64,
    pub r_star: f64,
    pub r2w: f64,
    pub r1gap: f64,
    pub r2gap: f64,
    pub j_theta: f64,
    pub j_z: f64,
    pub l1a: f64,
}

impl LeftColumn {
    pub fn compute(inp: &LedgerInputs) -> Self {
        let n = &inp.norms;
        let s = &inp.spectral;
        let r = &inp.radii;
        let m = &inp.noise;
        let e = std::f64::consts::E;
        let l1a = s.k1 * n.w1 * s.k2 * r.r2in / ((s.q_min - s.q) * e);
        let r1out = r.r1in + 4.0 * l1a;
        let r_star = n.x1_inv * n.b1;
        let r2w = r.r2out + n.w2_inv * (n.v2 + n.gamma2 * (r_star + r1out));
        let growth = 1.0 + r_star + r1out + r2w;
        let j_theta = n.gamma1 * (r_star + r1out) + n.w1 * r2w + n.v1 + m.m1 * growth;
        let j_z = n.w2 * r.r2out + n.w2_inv * n.gamma2 * j_theta + m.m2 * growth;
        Self {
            k1: s.k1,
            k2: s.k2,
            q1: s.q1,
            q2: s.q2,
            q_min: s.q_min,
            q: s.q,
            r1out,
            r_star,
            r2w,
            r1gap: r1out - r.r1in,
            r2gap: r.r2out - r.r2in,
            j_theta,
            j_z,
            l1a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RightColumn {
    pub l1b: f64,
    pub l1c: f64,
    pub l1md: f64,
    pub l1de: f64,
    pub la: f64,
    pub lc: f64,
    pub lb: f64,
    pub l2md: f64,
    pub l2sd: f64,
    pub l2de: f64,
    pub lz: f64,
    /// `+∞` when the corresponding noise constant vanishes.
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

fn inverse_or_inf(x: f64) -> f64 {
    if x == 0.0 {
        f64::INFINITY
    } else {
        1.0 / x
    }
}

impl RightColumn {
    pub fn compute(inp: &LedgerInputs, left: &LeftColumn) -> Self {
        let n = &inp.norms;
        let r = &inp.radii;
        let m = &inp.noise;
        let d3 = (n.d as f64).powi(3);
        let growth = 1.0 + left.r_star + left.r1out + left.r2w;
        let (k1, k2, q1, q2) = (left.k1, left.k2, left.q1, left.q2);

        let l1b = k1 * n.w1 * n.w2 * r.r2in / q1;
        let l1c = k1 * n.w1 / q1;
        let l1md = k1 * m.m1 * growth;
        let l1de = k1 * n.x1 * left.j_theta / q1;
        let la = left.l1a;
        let lc = l1c;
        let lb = l1de + l1md + n.x1 * r.r1in + l1b;
        let l2md = k2 * m.m2 * growth;
        let l2sd = k2 * n.w2_inv * n.gamma2 * left.j_theta / q2;
        let l2de = k2 * n.w2 * left.j_z / q2;
        let lz = n.w2 * r.r2in + l2de + l2sd + l2md;
        let c1 = inverse_or_inf(16.0 * k1 * k1 * d3 * l1md * l1md);
        let c2 = inverse_or_inf(9.0 * k2 * k2 * d3 * l2md * l2md);
        let c3 = inverse_or_inf(64.0 * k2 * k2 * lc * lc * d3 * l2md * l2md);
        Self {
            l1b,
            l1c,
            l1md,
            l1de,
            la,
            lc,
            lb,
            l2md,
            l2sd,
            l2de,
            lz,
            c1,
            c2,
            c3,
        }
    }
}

/// Every constant needed by the lock-in bounds, with its defining formula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantLedger {
    pub inputs: LedgerInputs,
    pub left: LeftColumn,
    pub right: RightColumn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub name: &'static str,
    pub value: f64,
    pub formula: &'static str,
    pub column: &'static str,
}

impl ConstantLedger {
    pub fn build(
        spec: &LinearTtsSpec,
        spectral: &SpectralConstants,
        radii: &Radii,
        noise: &NoiseBounds,
    ) -> Result<Self, BoundsError> {
        radii.validate()?;
        Ok(Self::from_inputs(LedgerInputs {
            norms: ProblemNorms::of(spec),
            spectral: *spectral,
            radii: *radii,
            noise: *noise,
        }))
    }

    pub fn from_inputs(inputs: LedgerInputs) -> Self {
        let left = LeftColumn::compute(&inputs);
        let right = RightColumn::compute(&inputs, &left);
        Self {
            inputs,
            left,
            right,
        }
    }

    pub fn d(&self) -> usize {
        self.inputs.norms.d
    }

    /// True when every `c` constant is infinite, i.e. the iterates are
    /// deterministic and all probability bounds equal 1.
    pub fn is_noiseless(&self) -> bool {
        let r = &self.right;
        r.c1.is_infinite() && r.c2.is_infinite() && r.c3.is_infinite()
    }

    pub fn entries(&self) -> Vec<LedgerEntry> {
        let l = &self.left;
        let r = &self.right;
        let left = |name, value, formula| LedgerEntry {
            name,
            value,
            formula,
            column: "left",
        };
        let right = |name, value, formula| LedgerEntry {
            name,
            value,
            formula,
            column: "right",
        };
        vec![
            left("K1", l.k1, "||exp(-X1 t)|| <= K1 exp(-q1 t)"),
            left("K2", l.k2, "||exp(-W2 t)|| <= K2 exp(-q2 t)"),
            left("q1", l.q1, "decay rate of exp(-X1 t)"),
            left("q2", l.q2, "decay rate of exp(-W2 t)"),
            left("q_min", l.q_min, "min(q1, q2)"),
            left("q", l.q, "joint rate in (0, q_min)"),
            left("R1_out", l.r1out, "R1_in + 4 K1 ||W1|| K2 R2_in / ((q_min - q) e)"),
            left("R_star", l.r_star, "||X1^-1|| ||b1||"),
            left("R2_w", l.r2w, "R2_out + ||W2^-1|| (||v2|| + ||G2|| (R_star + R1_out))"),
            left("R1_gap", l.r1gap, "R1_out - R1_in"),
            left("R2_gap", l.r2gap, "R2_out - R2_in"),
            left(
                "J_theta",
                l.j_theta,
                "||G1|| (R_star + R1_out) + ||W1|| R2_w + ||v1|| + m1 (1 + R_star + R1_out + R2_w)",
            ),
            left(
                "J_z",
                l.j_z,
                "||W2|| R2_out + ||W2^-1|| ||G2|| J_theta + m2 (1 + R_star + R1_out + R2_w)",
            ),
            left("L1a", l.l1a, "K1 ||W1|| K2 R2_in / ((q_min - q) e)"),
            right("L1b", r.l1b, "K1 ||W1|| ||W2|| R2_in / q1"),
            right("L1c", r.l1c, "K1 ||W1|| / q1"),
            right("L1md", r.l1md, "K1 m1 (1 + R_star + R1_out + R2_w)"),
            right("L1de", r.l1de, "K1 ||X1|| J_theta / q1"),
            right("La", r.la, "L1a"),
            right("Lc", r.lc, "L1c"),
            right("Lb", r.lb, "L1de + L1md + ||X1|| R1_in + L1b"),
            right("L2md", r.l2md, "K2 m2 (1 + R_star + R1_out + R2_w)"),
            right("L2sd", r.l2sd, "K2 ||W2^-1|| ||G2|| J_theta / q2"),
            right("L2de", r.l2de, "K2 ||W2|| J_z / q2"),
            right("Lz", r.lz, "||W2|| R2_in + L2de + L2sd + L2md"),
            right("c1", r.c1, "1 / (16 K1^2 d^3 L1md^2)"),
            right("c2", r.c2, "1 / (9 K2^2 d^3 L2md^2)"),
            right("c3", r.c3, "1 / (64 K2^2 Lc^2 d^3 L2md^2)"),
        ]
    }

    /// Lock-in preconditions on `(ε1, ε2)`.
    pub fn check_epsilons(&self, eps1: f64, eps2: f64) -> Result<(), BoundsError> {
        let r = &self.inputs.radii;
        let cap1 = r.r1in.min(4.0 * self.right.la);
        if !(eps1 > 0.0 && eps1 < cap1) {
            return Err(BoundsError::EpsilonOutOfRange(format!(
                "eps1 = {eps1} must lie in (0, min(R1_in, 4 La)) = (0, {cap1})"
            )));
        }
        let cap2 = r.r2in.min(r.r2out - r.r2in);
        if !(eps2 > 0.0 && eps2 < cap2) {
            return Err(BoundsError::EpsilonOutOfRange(format!(
                "eps2 = {eps2} must lie in (0, min(R2_in, R2_out - R2_in)) = (0, {cap2})"
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Threshold searches

/// Smallest `n ≥ lo` with `pred(n)`, for monotone `pred`, by galloping and
/// bisection. `None` when no such index is at most `limit`.
fn first_true(lo: u64, limit: u64, pred: impl Fn(u64) -> bool) -> Option<u64> {
    if lo > limit {
        return None;
    }
    if pred(lo) {
        return Some(lo);
    }
    let mut bad = lo;
    let mut step = 1u64;
    let good = loop {
        let cand = bad.saturating_add(step).min(limit);
        if pred(cand) {
            break cand;
        }
        if cand == limit {
            return None;
        }
        bad = cand;
        step = step.saturating_mul(2);
    };
    let (mut bad, mut good) = (bad, good);
    while good - bad > 1 {
        let mid = bad + (good - bad) / 2;
        if pred(mid) {
            good = mid;
        } else {
            bad = mid;
        }
    }
    Some(good)
}

fn search_limit(schedule: &StepsizeSchedule) -> u64 {
    match schedule.horizon() {
        Some(len) => len as u64 - 1,
        None => MAX_INDEX,
    }
}

fn not_found(what: &'static str, schedule: &StepsizeSchedule, estimate: f64) -> BoundsError {
    match schedule.horizon() {
        Some(len) => BoundsError::ThresholdNotReached { what, len },
        None => BoundsError::IndexOverflow { what, estimate },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct N0Terms {
    pub na: u64,
    pub nb: u64,
    pub n0: u64,
}

/// `Na`, `Nb` and `N0 = max(Na, Nb)`.
pub fn threshold_n0(
    ledger: &ConstantLedger,
    schedule: &StepsizeSchedule,
    eps1: f64,
    eps2: f64,
) -> Result<N0Terms, BoundsError> {
    ledger.check_epsilons(eps1, eps2)?;
    let r = &ledger.right;
    let thr_a = (eps1 / 8.0).min(eps2 / 3.0) / (r.lz * r.lc.max(1.0));
    let thr_b = eps1 / (4.0 * r.lb);
    let limit = search_limit(schedule);
    let na = first_true(0, limit, |n| {
        let n = n as usize;
        schedule.tail_sup_beta(n) <= thr_a && schedule.tail_sup_eta(n) <= thr_a
    })
    .ok_or_else(|| {
        let est = schedule
            .exponents()
            .map(|(a, b)| thr_a.powf(-1.0 / b).max(thr_a.powf(-1.0 / (a - b))))
            .unwrap_or(f64::INFINITY);
        not_found("Na", schedule, est)
    })?;
    let nb = first_true(0, limit, |n| schedule.tail_sup_beta(n as usize) <= thr_b).ok_or_else(
        || {
            let est = schedule
                .exponents()
                .map(|(_, b)| thr_b.powf(-1.0 / b))
                .unwrap_or(f64::INFINITY);
            not_found("Nb", schedule, est)
        },
    )?;
    Ok(N0Terms {
        na,
        nb,
        n0: na.max(nb),
    })
}

/// `Σ_{m=lo}^{hi} m^{−a}` with Euler–Maclaurin for long ranges.
fn power_sum(a: f64, lo: u64, hi: u64) -> f64 {
    if hi < lo {
        return 0.0;
    }
    if hi - lo < 10_000 || lo < 100 {
        if hi - lo < 10_000 {
            return (lo..=hi).map(|m| (m as f64).powf(-a)).sum();
        }
        return (lo..100).map(|m| (m as f64).powf(-a)).sum::<f64>() + power_sum(a, 100, hi);
    }
    let (m, n) = (lo as f64, hi as f64);
    let f = |x: f64| x.powf(-a);
    let f1 = |x: f64| -a * x.powf(-a - 1.0);
    let f3 = |x: f64| -a * (a + 1.0) * (a + 2.0) * x.powf(-a - 3.0);
    let ratio_ln = ((n - m) / m).ln_1p();
    let integral = if (a - 1.0).abs() < 1e-12 {
        ratio_ln
    } else {
        m.powf(1.0 - a) * ((1.0 - a) * ratio_ln).exp_m1() / (1.0 - a)
    };
    integral + (f(m) + f(n)) / 2.0 + (f1(n) - f1(m)) / 12.0 - (f3(n) - f3(m)) / 720.0
}

/// `t_j − t_{n0}` (or `s_j − s_{n0}`) for a polynomial exponent.
fn poly_time_between(exp: f64, n0: u64, j: u64) -> f64 {
    // Σ_{k=n0}^{j−1} (k+1)^{−exp}
    if j <= n0 {
        0.0
    } else {
        power_sum(exp, n0 + 1, j)
    }
}

/// Smallest `j ≥ n0` at which the accumulated time since `n0` reaches
/// `target`, using `step(k)` as the `k`-th stepsize.
fn time_threshold(
    what: &'static str,
    schedule: &StepsizeSchedule,
    step: impl Fn(usize) -> f64,
    poly_exp: Option<f64>,
    n0: u64,
    target: f64,
) -> Result<u64, BoundsError> {
    if target <= 0.0 {
        return Ok(n0);
    }
    let limit = search_limit(schedule);
    let mut acc = 0.0;
    let mut j = n0;
    let scan_end = n0.saturating_add(DIRECT_SCAN).min(limit);
    while j < scan_end {
        acc += step(j as usize);
        j += 1;
        if acc >= target {
            return Ok(j);
        }
    }
    match poly_exp {
        Some(e) => {
            let base = acc;
            let from = j;
            first_true(from, MAX_INDEX, |jj| base + poly_time_between(e, from, jj) >= target)
                .ok_or(BoundsError::IndexOverflow {
                    what,
                    estimate: closed_form_upper(e, n0, target),
                })
        }
        None => Err(BoundsError::ThresholdNotReached {
            what,
            len: schedule.horizon().unwrap_or(0),
        }),
    }
}

/// Upper bound `[(n0+1)^{1−p} + (1−p) T]^{1/(1−p)} − 1` on the first index
/// whose accumulated polynomial time since `n0` reaches `T`.
pub fn closed_form_upper(p: f64, n0: u64, target: f64) -> f64 {
    (((n0 + 1) as f64).powf(1.0 - p) + (1.0 - p) * target).powf(1.0 / (1.0 - p)) - 1.0
}

/// Lower bound `[n0^{1−p} + (1−p) T]^{1/(1−p)} − 1` matching
/// [`closed_form_upper`].
pub fn closed_form_lower(p: f64, n0: u64, target: f64) -> f64 {
    ((n0 as f64).powf(1.0 - p) + (1.0 - p) * target).powf(1.0 / (1.0 - p)) - 1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct N1Terms {
    pub na: u64,
    pub nb: u64,
    pub n1: u64,
    /// Accumulated-time targets `ln(4(K1 R1_in + La)/ε1)/q` and
    /// `ln(3 K2 R2_in/ε2)/q2`.
    pub target_t: f64,
    pub target_s: f64,
}

/// `na`, `nb` and `N1 = max(na, nb)` for a given start index.
pub fn threshold_n1(
    ledger: &ConstantLedger,
    schedule: &StepsizeSchedule,
    n0: u64,
    eps1: f64,
    eps2: f64,
) -> Result<N1Terms, BoundsError> {
    ledger.check_epsilons(eps1, eps2)?;
    let l = &ledger.left;
    let r = &ledger.inputs.radii;
    let ca = l.k1 * r.r1in + ledger.right.la;
    let target_t = ((4.0 * ca / eps1).ln() / l.q).max(0.0);
    let target_s = ((3.0 * l.k2 * r.r2in / eps2).ln() / l.q2).max(0.0);
    let exps = schedule.exponents();
    let na = time_threshold(
        "na",
        schedule,
        |k| schedule.alpha(k),
        exps.map(|e| e.0),
        n0,
        target_t,
    )?;
    let nb = time_threshold(
        "nb",
        schedule,
        |k| schedule.beta(k),
        exps.map(|e| e.1),
        n0,
        target_s,
    )?;
    Ok(N1Terms {
        na,
        nb,
        n1: na.max(nb),
        target_t,
        target_s,
    })
}

// ---------------------------------------------------------------------------
// Accumulators and the lock-in bound

/// `a_{n+1} = a_n e^{−2 q1 α_n} + α_n²`, `b_{n+1} = b_n e^{−2 q2 β_n} + β_n²`.
#[derive(Debug, Clone)]
pub struct Accumulators<'a> {
    schedule: &'a StepsizeSchedule,
    q1: f64,
    q2: f64,
    n: usize,
    a: f64,
    b: f64,
}

impl<'a> Accumulators<'a> {
    pub fn new(schedule: &'a StepsizeSchedule, q1: f64, q2: f64) -> Self {
        Self {
            schedule,
            q1,
            q2,
            n: 0,
            a: 0.0,
            b: 0.0,
        }
    }

    /// `(n, a_n, b_n)` for the current index.
    pub fn current(&self) -> (usize, f64, f64) {
        (self.n, self.a, self.b)
    }

    pub fn advance(&mut self) {
        let alpha = self.schedule.alpha(self.n);
        let beta = self.schedule.beta(self.n);
        self.a = self.a * (-2.0 * self.q1 * alpha).exp() + alpha * alpha;
        self.b = self.b * (-2.0 * self.q2 * beta).exp() + beta * beta;
        self.n += 1;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesAccumulators {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

/// `a_n`, `b_n` for `n = 0..=n_max`.
pub fn series_accumulators(
    schedule: &StepsizeSchedule,
    q1: f64,
    q2: f64,
    n_max: usize,
) -> Result<SeriesAccumulators, BoundsError> {
    schedule.check_horizon(n_max)?;
    let mut acc = Accumulators::new(schedule, q1, q2);
    let mut a = Vec::with_capacity(n_max + 1);
    let mut b = Vec::with_capacity(n_max + 1);
    loop {
        let (n, an, bn) = acc.current();
        a.push(an);
        b.push(bn);
        if n == n_max {
            break;
        }
        acc.advance();
    }
    Ok(SeriesAccumulators { a, b })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Truncation {
    /// Sum directly up to and including index `n`; an unconverged sum is an
    /// error.
    DirectUpTo { n: u64 },
    /// Sum directly for at most `direct_terms` terms, then add the
    /// closed-form tail (polynomial schedules only).
    ClosedFormTail { direct_terms: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub bound: f64,
    /// `ln(2 d² Σ)`, finite even when the bound is hugely negative.
    pub log_excess: f64,
    pub direct_sum: f64,
    pub tail_bound: f64,
    pub first_index: u64,
    /// Index after the last directly summed term.
    pub cutoff: u64,
    pub vacuous: bool,
    pub noiseless: bool,
    pub n0_meets_threshold: bool,
}

fn series_term(c1e: f64, c2e: f64, c3e: f64, an: f64, bn: f64) -> f64 {
    let t = |c: f64, x: f64| if x > 0.0 { (-c / x).exp() } else { 0.0 };
    t(c1e, an) + t(c2e, bn) + t(c3e, bn)
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// `1 − 2d² Σ_{n≥n0} [e^{−c1ε1²/a_n} + e^{−c2ε1²/b_n} + e^{−c3ε2²/b_n}]`.
pub fn theorem1_bound(
    ledger: &ConstantLedger,
    schedule: &StepsizeSchedule,
    n0: u64,
    eps1: f64,
    eps2: f64,
    truncation: Truncation,
) -> Result<Theorem1Report, BoundsError> {
    ledger.check_epsilons(eps1, eps2)?;
    let n0_meets_threshold = match threshold_n0(ledger, schedule, eps1, eps2) {
        Ok(t) => n0 >= t.n0,
        Err(_) => false,
    };
    let d2 = (ledger.d() as f64).powi(2);
    if ledger.is_noiseless() {
        return Ok(Theorem1Report {
            bound: 1.0,
            log_excess: f64::NEG_INFINITY,
            direct_sum: 0.0,
            tail_bound: 0.0,
            first_index: n0,
            cutoff: n0,
            vacuous: false,
            noiseless: true,
            n0_meets_threshold,
        });
    }
    let r = &ledger.right;
    let (c1e, c2e, c3e) = (r.c1 * eps1 * eps1, r.c2 * eps1 * eps1, r.c3 * eps2 * eps2);
    let (q1, q2) = (ledger.left.q1, ledger.left.q2);

    let (max_index, use_tail) = match truncation {
        Truncation::DirectUpTo { n } => {
            schedule.check_horizon(n as usize)?;
            (n, false)
        }
        Truncation::ClosedFormTail { direct_terms } => {
            if schedule.exponents().is_none() {
                return Err(BoundsError::NeedsPolynomialSchedule);
            }
            if n0 > DIRECT_START_CAP {
                (n0.saturating_sub(1), true)
            } else {
                (n0 + direct_terms.saturating_sub(1), true)
            }
        }
    };

    let mut direct = 0.0;
    let mut comp = 0.0;
    let mut cutoff = n0;
    let mut converged = false;
    if max_index >= n0 {
        let mut acc = Accumulators::new(schedule, q1, q2);
        for _ in 0..n0 {
            acc.advance();
        }
        let (mut prev_a, mut prev_b) = (f64::INFINITY, f64::INFINITY);
        loop {
            let (n, an, bn) = acc.current();
            let term = series_term(c1e, c2e, c3e, an, bn);
            // Neumaier summation
            let t = direct + term;
            if direct.abs() >= term.abs() {
                comp += (direct - t) + term;
            } else {
                comp += (term - t) + direct;
            }
            direct = t;
            cutoff = n as u64 + 1;
            let decreasing = an <= prev_a && bn <= prev_b;
            if decreasing && (term == 0.0 || term <= REL_TAIL * (direct + comp)) {
                converged = true;
                break;
            }
            if n as u64 >= max_index {
                break;
            }
            prev_a = an;
            prev_b = bn;
            acc.advance();
        }
    }
    let direct = direct + comp;

    let (log_tail, tail) = if use_tail {
        let (alpha, beta) = schedule.exponents().expect("checked above");
        let start = cutoff.max(1);
        let la = log_pre_delta(r.c1, eps1, DEFAULT_KAPPA, alpha, q1, start)?;
        let lb2 = log_pre_delta(r.c2, eps1, DEFAULT_KAPPA, beta, q2, start)?;
        let lb3 = log_pre_delta(r.c3, eps2, DEFAULT_KAPPA, beta, q2, start)?;
        let lt = log_add(log_add(la, lb2), lb3);
        (lt, lt.exp())
    } else {
        if !converged {
            return Err(BoundsError::NonSummable { index: max_index });
        }
        (f64::NEG_INFINITY, 0.0)
    };

    let log_direct = if direct > 0.0 { direct.ln() } else { f64::NEG_INFINITY };
    let log_excess = (2.0 * d2).ln() + log_add(log_direct, log_tail);
    let bound = 1.0 - 2.0 * d2 * (direct + tail);
    Ok(Theorem1Report {
        bound,
        log_excess,
        direct_sum: direct,
        tail_bound: tail,
        first_index: n0,
        cutoff,
        vacuous: bound <= 0.0,
        noiseless: false,
        n0_meets_threshold,
    })
}

// ---------------------------------------------------------------------------
// Sub-exponential series

fn check_unit(what: &str, x: f64) -> Result<(), BoundsError> {
    if !(x > 0.0 && x < 1.0) {
        return Err(BoundsError::Domain(format!("{what} = {x} must lie in (0, 1)")));
    }
    Ok(())
}

/// Natural log of the closed-form upper bound on `Σ_{n≥n0} e^{−B n^p}`.
pub fn log_subexp_series_bound(b: f64, p: f64, n0: u64, kappa: f64) -> Result<f64, BoundsError> {
    if !(b > 0.0 && b.is_finite()) {
        return Err(BoundsError::Domain(format!("B = {b} must be positive")));
    }
    check_unit("p", p)?;
    check_unit("kappa", kappa)?;
    if n0 < 1 {
        return Err(BoundsError::Domain("n0 must be at least 1".into()));
    }
    let r = (1.0 - p) / p;
    Ok(2f64.ln() - (b * (1.0 - kappa) * p).ln() + r * ((1.0 - p) / (b * kappa * p)).ln()
        + b * (2.0 - kappa)
        - r
        - b * (1.0 - kappa) * (n0 as f64).powf(p))
}

/// `(2/(B(1−κ)p)) ((1−p)/(Bκp))^{(1−p)/p} exp(B(2−κ) − (1−p)/p − B(1−κ) n0^p)`.
pub fn subexp_series_bound(b: f64, p: f64, n0: u64, kappa: f64) -> Result<f64, BoundsError> {
    log_subexp_series_bound(b, p, n0, kappa).map(f64::exp)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubexpConstants {
    pub i1: u64,
    pub k_g: f64,
    pub c5: f64,
    pub c6: f64,
    pub c7: f64,
    pub ln_c7: f64,
}

/// `i1` and `K_g` for `(p, q̂)`.
///
/// With `f(n) = p ln n − q̂ Σ_{k=1}^{n−1} (k+1)^{−p}`, the defining inequality
/// is `f(n) ≤ 0`. The increment `f(n+1) − f(n)` has the sign of
/// `p (n+1)^p ln(1 + 1/n) − q̂`, which decreases in `n`, so once `f` is
/// non-positive and decreasing it stays non-positive.
pub fn i1_and_kg(p: f64, q_hat: f64) -> Result<(u64, f64), BoundsError> {
    check_unit("p", p)?;
    if !(q_hat > 0.0 && q_hat.is_finite()) {
        return Err(BoundsError::Domain(format!("q_hat = {q_hat} must be positive")));
    }
    let mut f = 0.0; // f(1)
    let mut f_max = 0.0f64;
    let mut last_fail = 0u64;
    let mut n = 1u64;
    loop {
        let nf = n as f64;
        let inc = p * (1.0 / nf).ln_1p() - q_hat * (nf + 1.0).powf(-p);
        if f <= 0.0 && inc < 0.0 {
            break;
        }
        if n >= I1_SCAN_CAP {
            return Err(BoundsError::ScanExhausted { cap: I1_SCAN_CAP });
        }
        f += inc;
        n += 1;
        if f > 0.0 {
            last_fail = n;
            f_max = f_max.max(f);
        }
    }
    Ok((last_fail + 1, f_max.exp()))
}

/// `c5`, `c6`, `c7` of the closed-form tail bound for `(c, κ, p, q̂)`.
pub fn subexp_constants(c: f64, kappa: f64, p: f64, q_hat: f64) -> Result<SubexpConstants, BoundsError> {
    if !(c > 0.0) {
        return Err(BoundsError::Domain(format!("c = {c} must be positive")));
    }
    check_unit("kappa", kappa)?;
    let (i1, k_g) = i1_and_kg(p, q_hat)?;
    let base = c * q_hat / (k_g * q_hat.exp());
    let ln_c7 = 2f64.ln() - base.ln() / p - (1.0 - kappa).ln() - p.ln() / p
        + (1.0 - p) / p * ((1.0 - p) / (std::f64::consts::E * kappa)).ln();
    Ok(SubexpConstants {
        i1,
        k_g,
        c5: base * (2.0 - kappa),
        c6: base * (1.0 - kappa),
        c7: ln_c7.exp(),
        ln_c7,
    })
}

/// `ln[c7 ε^{−2/p} e^{c5 ε²} e^{−c6 ε² n0^p}]`, an upper bound on
/// `ln Σ_{n≥n0} exp(−c ε²/c_n)` for the polynomial accumulator `c_n`.
pub fn log_pre_delta(
    c: f64,
    eps: f64,
    kappa: f64,
    p: f64,
    q_hat: f64,
    n0: u64,
) -> Result<f64, BoundsError> {
    if c.is_infinite() {
        return Ok(f64::NEG_INFINITY);
    }
    let k = subexp_constants(c, kappa, p, q_hat)?;
    let e2 = eps * eps;
    Ok(k.ln_c7 - 2.0 / p * eps.ln() + k.c5 * e2 - k.c6 * e2 * (n0.max(1) as f64).powf(p))
}

// ---------------------------------------------------------------------------
// Projected iterates

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Constants {
    pub kappa: f64,
    pub alpha: f64,
    pub beta: f64,
    pub c4: f64,
    pub a: SubexpConstants,
    pub b: SubexpConstants,
}

impl Theorem2Constants {
    pub fn new(ledger: &ConstantLedger, kappa: f64, alpha: f64, beta: f64) -> Result<Self, BoundsError> {
        let r = &ledger.right;
        let c4 = r.c2.min(r.c3);
        let finite = |c: f64| if c.is_infinite() { f64::MAX } else { c };
        Ok(Self {
            kappa,
            alpha,
            beta,
            c4,
            a: subexp_constants(finite(r.c1), kappa, alpha, ledger.left.q1)?,
            b: subexp_constants(finite(c4), kappa, beta, ledger.left.q2)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssumptionCheck {
    /// `‖θ*‖ ≤ R1_in/4`
    pub theta_ok: bool,
    /// Sufficient condition `R2_in ≥ 4‖W2⁻¹v2‖ + 2 R1_in ‖W2⁻¹Γ2‖`.
    pub w_ok: bool,
}

pub fn check_projection_assumptions(ledger: &ConstantLedger) -> AssumptionCheck {
    let n = &ledger.inputs.norms;
    let r = &ledger.inputs.radii;
    AssumptionCheck {
        theta_ok: n.theta_star <= r.r1in / 4.0,
        w_ok: r.r2in >= 4.0 * n.w2_inv_v2 + 2.0 * r.r1in * n.w2_inv_gamma2,
    }
}

fn check_projection_eps(ledger: &ConstantLedger, eps: f64) -> Result<(), BoundsError> {
    let r = &ledger.inputs.radii;
    let cap = (r.r1in / 4.0)
        .min(r.r2in / 4.0)
        .min(4.0 * ledger.right.la)
        .min(r.r2out - r.r2in);
    if !(eps > 0.0 && eps < cap) {
        return Err(BoundsError::EpsilonOutOfRange(format!(
            "eps = {eps} must lie in (0, min(R1_in/4, R2_in/4, 4 La, R2_out - R2_in)) = (0, {cap})"
        )));
    }
    let chk = check_projection_assumptions(ledger);
    if !chk.theta_ok {
        return Err(BoundsError::AssumptionViolated(
            "||theta*|| <= R1_in/4 (theta assumption)".into(),
        ));
    }
    if !chk.w_ok {
        return Err(BoundsError::AssumptionViolated(
            "R2_in >= 4||W2^-1 v2|| + 2 R1_in ||W2^-1 G2|| (w assumption)".into(),
        ));
    }
    Ok(())
}

fn check_exponents(alpha: f64, beta: f64) -> Result<(), BoundsError> {
    if !(1.0 > alpha && alpha > beta && beta > 0.0) {
        return Err(BoundsError::Domain(format!(
            "need 1 > alpha > beta > 0, got alpha={alpha}, beta={beta}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct N0Prime {
    pub terms: [f64; 4],
    pub value: f64,
    /// Smallest power of two not below `value`; `None` past `2^62`.
    pub power_of_two: Option<u64>,
}

/// The four terms of `N0′` (each clamped at 0) and their maximum with 3.
pub fn theorem2_n0_prime(
    ledger: &ConstantLedger,
    eps: f64,
    alpha: f64,
    beta: f64,
) -> Result<N0Prime, BoundsError> {
    check_exponents(alpha, beta)?;
    check_projection_eps(ledger, eps)?;
    let l = &ledger.left;
    let r = &ledger.right;
    let radii = &ledger.inputs.radii;
    let t1 = (8.0 * r.lz / eps * r.lc.max(1.0)).powf(1.0 / beta.min(alpha - beta));
    let t2 = (4.0 * r.lb / eps).powf(1.0 / beta);
    let t3 = ((1.0 - alpha) / ((1.5f64.powf(1.0 - alpha) - 1.0) * l.q)
        * (4.0 * (l.k1 * radii.r1in + r.la) / eps).ln())
    .max(0.0)
    .powf(1.0 / (1.0 - alpha));
    let t4 = ((1.0 - beta) / ((1.5f64.powf(1.0 - beta) - 1.0) * l.q2)
        * (3.0 * l.k2 * radii.r2in / eps).ln())
    .max(0.0)
    .powf(1.0 / (1.0 - beta));
    let value = t1.max(t2).max(t3).max(t4).max(3.0);
    let power_of_two = if value <= MAX_INDEX as f64 {
        (value.ceil() as u64).checked_next_power_of_two()
    } else {
        None
    };
    Ok(N0Prime {
        terms: [t1, t2, t3, t4],
        value,
        power_of_two,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    pub bound: f64,
    pub log_excess_a: f64,
    pub log_excess_b: f64,
    pub vacuous: bool,
    pub noiseless: bool,
    pub n0_meets_threshold: bool,
}

/// `1 − 2d²c7a ε^{−2/α} e^{c5a ε² − c6a ε² n0′^α} − 4d²c7b ε^{−2/β} e^{c5b ε² − c6b ε² n0′^β}`.
pub fn theorem2_bound(
    ledger: &ConstantLedger,
    kappa: f64,
    eps: f64,
    alpha: f64,
    beta: f64,
    n0_prime: u64,
) -> Result<Theorem2Report, BoundsError> {
    check_exponents(alpha, beta)?;
    check_unit("kappa", kappa)?;
    if !n0_prime.is_power_of_two() {
        return Err(BoundsError::Domain(format!("n0' = {n0_prime} must be a power of two")));
    }
    let threshold = theorem2_n0_prime(ledger, eps, alpha, beta)?;
    let n0_meets_threshold = n0_prime as f64 >= threshold.value;
    if ledger.is_noiseless() {
        return Ok(Theorem2Report {
            bound: 1.0,
            log_excess_a: f64::NEG_INFINITY,
            log_excess_b: f64::NEG_INFINITY,
            vacuous: false,
            noiseless: true,
            n0_meets_threshold,
        });
    }
    let k = Theorem2Constants::new(ledger, kappa, alpha, beta)?;
    let d2 = (ledger.d() as f64).powi(2);
    let e2 = eps * eps;
    let n = n0_prime as f64;
    let la = if ledger.right.c1.is_infinite() {
        f64::NEG_INFINITY
    } else {
        (2.0 * d2).ln() + k.a.ln_c7 - 2.0 / alpha * eps.ln() + k.a.c5 * e2
            - k.a.c6 * e2 * n.powf(alpha)
    };
    let lb = if k.c4.is_infinite() {
        f64::NEG_INFINITY
    } else {
        (4.0 * d2).ln() + k.b.ln_c7 - 2.0 / beta * eps.ln() + k.b.c5 * e2
            - k.b.c6 * e2 * n.powf(beta)
    };
    let bound = 1.0 - la.exp() - lb.exp();
    Ok(Theorem2Report {
        bound,
        log_excess_a: la,
        log_excess_b: lb,
        vacuous: bound <= 0.0,
        noiseless: false,
        n0_meets_threshold,
    })
}

/// `N0″(ε, δ)`: the start index beyond which the projected bound exceeds
/// `1 − δ`. Each bracket is clamped at 0.
pub fn theorem2_n0_double_prime(
    ledger: &ConstantLedger,
    kappa: f64,
    eps: f64,
    delta: f64,
    alpha: f64,
    beta: f64,
) -> Result<f64, BoundsError> {
    check_exponents(alpha, beta)?;
    check_unit("delta", delta)?;
    if ledger.is_noiseless() {
        return Ok(0.0);
    }
    let k = Theorem2Constants::new(ledger, kappa, alpha, beta)?;
    let d2 = (ledger.d() as f64).powi(2);
    let e2 = eps * eps;
    let term = |c: &SubexpConstants, factor: f64, p: f64| {
        let log_arg = (factor * d2).ln() + c.ln_c7 + c.c5 * e2 - 2.0 / p * eps.ln() - delta.ln();
        (log_arg / (c.c6 * e2)).max(0.0).powf(1.0 / p)
    };
    Ok(term(&k.a, 4.0, alpha).max(term(&k.b, 8.0, beta)))
}

/// `ε(n)` with `4 max(N0′(ε), N0″(ε, δ)) = n`, by bisection in `ln ε` over
/// the admissible range. `None` if `n` is below the value at the largest
/// admissible `ε`.
pub fn epsilon_for_n(
    ledger: &ConstantLedger,
    kappa: f64,
    delta: f64,
    alpha: f64,
    beta: f64,
    n: f64,
) -> Result<Option<f64>, BoundsError> {
    let r = &ledger.inputs.radii;
    let cap = (r.r1in / 4.0)
        .min(r.r2in / 4.0)
        .min(4.0 * ledger.right.la)
        .min(r.r2out - r.r2in);
    let big_n = |eps: f64| -> Result<f64, BoundsError> {
        let a = theorem2_n0_prime(ledger, eps, alpha, beta)?.value;
        let b = theorem2_n0_double_prime(ledger, kappa, eps, delta, alpha, beta)?;
        Ok(4.0 * a.max(b))
    };
    let mut hi = cap * (1.0 - 1e-9);
    if big_n(hi)? > n {
        return Ok(None);
    }
    let mut lo = hi;
    while big_n(lo)? <= n {
        lo /= 2.0;
        if lo < 1e-300 {
            return Ok(Some(lo));
        }
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if big_n(mid)? <= n {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(Some(hi))
}

/// `C max(n^{−β/2} √ln(n/δ), n^{−(α−β)})` for each `n`.
pub fn rate_curve(
    alpha: f64,
    beta: f64,
    c: f64,
    delta: f64,
    ns: &[f64],
) -> Result<Vec<(f64, f64)>, BoundsError> {
    check_exponents(alpha, beta)?;
    check_unit("delta", delta)?;
    ns.iter()
        .map(|&n| {
            if !(n > 3.0) {
                return Err(BoundsError::Domain(format!("n = {n} must exceed 3")));
            }
            let noise = n.powf(-beta / 2.0) * (n / delta).ln().sqrt();
            let track = n.powf(-(alpha - beta));
            Ok((n, c * noise.max(track)))
        })
        .collect()
}

/// Dominant exponent `min(β/2, α − β)` of the rate curve.
pub fn rate_exponent(alpha: f64, beta: f64) -> f64 {
    (beta / 2.0).min(alpha - beta)
}
