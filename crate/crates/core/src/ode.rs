//! Limiting ODEs, interpolated iterates and the variation-of-parameters
//! error decomposition.
//!
//! The slow ODE `θ̇ = b1 − X1 θ` and the fast ODE `ż = −W2 z` have closed
//! form solutions. Interpolating the iterates linearly on the `t_n` (resp.
//! `s_n`) grids, the gap between interpolant and ODE splits into
//! discretization, tracking (or slow drift) and martingale integrals. Every
//! per-interval integrand is a polynomial of degree at most one times a
//! matrix exponential, so each integral is evaluated exactly from one block
//! exponential of
//!
//! ```text
//! [ −M  I  0 ]
//! [  0  0  I ] · h
//! [  0  0  0 ]
//! ```
//!
//! whose first block row holds `e^{−Mh}`, `∫₀ʰ e^{−Mu} du` and
//! `∫₀ʰ e^{−Mu}(h − u) du`.

use thiserror::Error;

use crate::engine::{Mode, NoisePath, Trajectory};
use crate::linalg::{Matrix, Vector};
use crate::model::{LinearTtsSpec, ModelError, ScheduleTable, StepsizeSchedule};
use crate::spectral::{self, SpectralError};

pub const DEFAULT_SUBGRID: usize = 33;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("trajectory carries no per-step noise record")]
    MissingNoiseRecord,
    #[error("the decomposition identity needs an unprojected trajectory")]
    ProjectedTrajectory,
    #[error("index {n} outside the recorded range [{start}, {end}]")]
    IndexOutOfRange { n: usize, start: usize, end: usize },
    #[error("time {t} precedes the start time {t0}")]
    BeforeStart { t: f64, t0: f64 },
    #[error("sub-grid needs at least 2 points, got {0}")]
    SubgridTooSmall(usize),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `θ(t) = θ* + e^{−X1 (t − t0)} (θ0 − θ*)`.
pub fn theta_ode_at(
    spec: &LinearTtsSpec,
    t: f64,
    t0: f64,
    theta0: &Vector,
) -> Result<Vector, OdeError> {
    if t < t0 {
        return Err(OdeError::BeforeStart { t, t0 });
    }
    let star = spec.theta_star();
    let e = spectral::matrix_exp(&(-spec.x1()), t - t0)?;
    Ok(star + e * (theta0 - star))
}

/// `z(s) = e^{−W2 (s − s0)} z0`.
pub fn z_ode_at(spec: &LinearTtsSpec, s: f64, s0: f64, z0: &Vector) -> Result<Vector, OdeError> {
    if s < s0 {
        return Err(OdeError::BeforeStart { t: s, t0: s0 });
    }
    Ok(spectral::matrix_exp(&(-spec.w2()), s - s0)? * z0)
}

/// Block row `(e^{−Mh}, ∫₀ʰ e^{−Mu} du, ∫₀ʰ e^{−Mu}(h−u) du)`.
pub fn interval_operators(m: &Matrix, h: f64) -> Result<(Matrix, Matrix, Matrix), OdeError> {
    let d = m.nrows();
    let mut big = Matrix::zeros(3 * d, 3 * d);
    big.view_mut((0, 0), (d, d)).copy_from(&(-m));
    for i in 0..d {
        big[(i, d + i)] = 1.0;
        big[(d + i, 2 * d + i)] = 1.0;
    }
    let e = spectral::matrix_exp(&big, h)?;
    Ok((
        e.view((0, 0), (d, d)).into_owned(),
        e.view((0, d), (d, d)).into_owned(),
        e.view((0, 2 * d), (d, d)).into_owned(),
    ))
}

/// Piecewise-linear interpolants of `θ_n` on `{t_n}` and `z_n` on `{s_n}`.
#[derive(Debug, Clone)]
pub struct InterpolatedTrajectory {
    n_start: usize,
    table: ScheduleTable,
    theta: Vec<Vector>,
    z: Vec<Vector>,
}

impl InterpolatedTrajectory {
    pub fn new(
        spec: &LinearTtsSpec,
        schedule: &StepsizeSchedule,
        path: &NoisePath,
    ) -> Result<Self, OdeError> {
        let table = schedule.table(path.n_end())?;
        let z = path
            .theta
            .iter()
            .zip(&path.w)
            .map(|(t, w)| w - spec.lambda(t))
            .collect();
        Ok(Self {
            n_start: path.n_start,
            table,
            theta: path.theta.clone(),
            z,
        })
    }

    pub fn n_start(&self) -> usize {
        self.n_start
    }

    pub fn n_end(&self) -> usize {
        self.n_start + self.theta.len() - 1
    }

    pub fn table(&self) -> &ScheduleTable {
        &self.table
    }

    pub fn theta_at(&self, n: usize) -> &Vector {
        &self.theta[n - self.n_start]
    }

    pub fn z_at(&self, n: usize) -> &Vector {
        &self.z[n - self.n_start]
    }

    fn locate(&self, grid: &[f64], x: f64) -> usize {
        let lo = self.n_start;
        let hi = self.n_end();
        let k = grid[lo..=hi].partition_point(|&g| g <= x);
        (lo + k.saturating_sub(1)).min(hi.saturating_sub(1)).max(lo)
    }

    /// `θ̄(τ)`, clamped to the recorded span.
    pub fn theta_bar(&self, tau: f64) -> Vector {
        if self.theta.len() == 1 {
            return self.theta[0].clone();
        }
        let k = self.locate(&self.table.t, tau);
        let frac = ((tau - self.table.t[k]) / self.table.alpha[k]).clamp(0.0, 1.0);
        let a = self.theta_at(k);
        a + (self.theta_at(k + 1) - a) * frac
    }

    /// `z̄(μ)`, clamped to the recorded span.
    pub fn z_bar(&self, mu: f64) -> Vector {
        if self.z.len() == 1 {
            return self.z[0].clone();
        }
        let k = self.locate(&self.table.s, mu);
        let frac = ((mu - self.table.s[k]) / self.table.beta[k]).clamp(0.0, 1.0);
        let a = self.z_at(k);
        a + (self.z_at(k + 1) - a) * frac
    }

    /// `ξ(τ) = s_k + (β_k/α_k)(τ − t_k)` on `[t_k, t_{k+1})`.
    pub fn xi(&self, tau: f64) -> f64 {
        self.table.xi(tau)
    }
}

/// One grid index of the decomposition.
///
/// The suprema refer to the interval ending at `t_n` (resp. `s_n`); the row
/// for `n0` uses the single point `t_{n0}`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionRow {
    pub n: usize,
    pub e1de: Vector,
    pub e1te: Vector,
    pub e1md: Vector,
    pub e2de: Vector,
    pub e2sd: Vector,
    pub e2md: Vector,
    /// `θ̄(t_n) − θ(t_n)`
    pub theta_gap: Vector,
    /// `z̄(s_n) − z(s_n)`
    pub z_gap: Vector,
    pub rho: f64,
    pub rho_star: f64,
    pub nu: f64,
    pub nu_star: f64,
    pub good_event: Option<bool>,
}

impl DecompositionRow {
    pub fn e1(&self) -> Vector {
        &self.e1de + &self.e1te + &self.e1md
    }
    pub fn e2(&self) -> Vector {
        &self.e2de + &self.e2sd + &self.e2md
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDecomposition {
    pub n0: usize,
    pub subgrid: usize,
    pub rows: Vec<DecompositionRow>,
}

impl ErrorDecomposition {
    /// CSV with columns `n, e1de, e1te, e1md, e2de, e2sd, e2md, rho,
    /// rho_star, nu, nu_star, good_event` (component norms).
    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("n,e1de,e1te,e1md,e2de,e2sd,e2md,rho,rho_star,nu,nu_star,good_event\n");
        for r in &self.rows {
            let good = match r.good_event {
                Some(g) => (g as u8).to_string(),
                None => String::new(),
            };
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{}\n",
                r.n,
                r.e1de.norm(),
                r.e1te.norm(),
                r.e1md.norm(),
                r.e2de.norm(),
                r.e2sd.norm(),
                r.e2md.norm(),
                r.rho,
                r.rho_star,
                r.nu,
                r.nu_star,
                good
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecompositionOptions {
    /// Points per interval for the sup distances, endpoints included.
    pub subgrid: usize,
    /// `(R1^out, R2^out)` for the good-event flag.
    pub outer_radii: Option<(f64, f64)>,
}

impl Default for DecompositionOptions {
    fn default() -> Self {
        Self {
            subgrid: DEFAULT_SUBGRID,
            outer_radii: None,
        }
    }
}

fn unprojected_path(traj: &Trajectory) -> Result<&NoisePath, OdeError> {
    if matches!(traj.mode, Mode::Projected(_)) {
        return Err(OdeError::ProjectedTrajectory);
    }
    traj.path.as_ref().ok_or(OdeError::MissingNoiseRecord)
}

/// Splits `θ̄(t_k) − θ(t_k)` and `z̄(s_k) − z(s_k)` into their components for
/// every `k ∈ [n0, n]`, with ODEs started from the iterates at `n0`.
pub fn decompose(
    spec: &LinearTtsSpec,
    schedule: &StepsizeSchedule,
    traj: &Trajectory,
    n0: usize,
    n: usize,
    opts: DecompositionOptions,
) -> Result<ErrorDecomposition, OdeError> {
    let path = unprojected_path(traj)?;
    if opts.subgrid < 2 {
        return Err(OdeError::SubgridTooSmall(opts.subgrid));
    }
    let (start, end) = (path.n_start, path.n_end());
    for k in [n0, n] {
        if k < start || k > end || n < n0 {
            return Err(OdeError::IndexOutOfRange { n: k, start, end });
        }
    }
    let interp = InterpolatedTrajectory::new(spec, schedule, path)?;
    let d = spec.dim();
    let x1 = spec.x1();
    let w1 = spec.w1();
    let w2 = spec.w2();
    let star = spec.theta_star();
    let m = opts.subgrid;

    let mut e1 = [Vector::zeros(d), Vector::zeros(d), Vector::zeros(d)];
    let mut e2 = [Vector::zeros(d), Vector::zeros(d), Vector::zeros(d)];
    // deviations of the ODE solutions: θ(t_k) − θ*, z(s_k)
    let mut theta_dev = interp.theta_at(n0) - star;
    let mut z_ode = interp.z_at(n0).clone();
    let mut good = opts.outer_radii.map(|_| true);
    let knot_ok = |k: usize| -> bool {
        match opts.outer_radii {
            Some((r1, r2)) => {
                (interp.theta_at(k) - star).norm() <= r1 && interp.z_at(k).norm() <= r2
            }
            None => true,
        }
    };

    let mut rows = Vec::with_capacity(n - n0 + 1);
    good = good.map(|g| g && knot_ok(n0));
    rows.push(DecompositionRow {
        n: n0,
        e1de: e1[0].clone(),
        e1te: e1[1].clone(),
        e1md: e1[2].clone(),
        e2de: e2[0].clone(),
        e2sd: e2[1].clone(),
        e2md: e2[2].clone(),
        theta_gap: Vector::zeros(d),
        z_gap: Vector::zeros(d),
        rho: 0.0,
        rho_star: (interp.theta_at(n0) - star).norm(),
        nu: 0.0,
        nu_star: interp.z_at(n0).norm(),
        good_event: good,
    });

    let table = interp.table();
    for k in n0..n {
        let i = k - start;
        let (alpha, beta) = (table.alpha[k], table.beta[k]);
        let theta_k = interp.theta_at(k);
        let theta_next = interp.theta_at(k + 1);
        let z_k = interp.z_at(k);
        let z_next = interp.z_at(k + 1);
        let d_theta = theta_next - theta_k;
        let d_z = z_next - z_k;

        let (ex, phi_x, psi_x) = interval_operators(x1, alpha)?;
        let src_de = &psi_x * (x1 * &d_theta) / alpha;
        let src_te = &phi_x * (-(w1 * z_k));
        let src_md = &phi_x * &path.m1[i];
        e1[0] = &ex * &e1[0] + src_de;
        e1[1] = &ex * &e1[1] + src_te;
        e1[2] = &ex * &e1[2] + src_md;

        let (ew, phi_w, psi_w) = interval_operators(w2, beta)?;
        let drift = (spec.lambda(theta_k) - spec.lambda(theta_next)) / beta;
        e2[0] = &ew * &e2[0] + &psi_w * (w2 * &d_z) / beta;
        e2[1] = &ew * &e2[1] + &phi_w * drift;
        e2[2] = &ew * &e2[2] + &phi_w * &path.m2[i];

        // sup distances on a uniform sub-grid of the interval
        let sub_x = spectral::matrix_exp(&(-x1), alpha / (m - 1) as f64)?;
        let sub_w = spectral::matrix_exp(&(-w2), beta / (m - 1) as f64)?;
        let (mut rho, mut nu) = (0.0f64, 0.0f64);
        let mut dev = theta_dev.clone();
        let mut zo = z_ode.clone();
        for j in 0..m {
            let frac = j as f64 / (m - 1) as f64;
            let bar = theta_k + &d_theta * frac;
            rho = rho.max((bar - star - &dev).norm());
            let zbar = z_k + &d_z * frac;
            nu = nu.max((zbar - &zo).norm());
            dev = &sub_x * dev;
            zo = &sub_w * zo;
        }
        theta_dev = &ex * theta_dev;
        z_ode = &ew * z_ode;

        good = good.map(|g| g && knot_ok(k + 1));
        rows.push(DecompositionRow {
            n: k + 1,
            e1de: e1[0].clone(),
            e1te: e1[1].clone(),
            e1md: e1[2].clone(),
            e2de: e2[0].clone(),
            e2sd: e2[1].clone(),
            e2md: e2[2].clone(),
            theta_gap: theta_next - star - &theta_dev,
            z_gap: z_next - &z_ode,
            rho,
            // the norm of a linear interpolant peaks at an endpoint
            rho_star: (theta_k - star).norm().max((theta_next - star).norm()),
            nu,
            nu_star: z_k.norm().max(z_next.norm()),
            good_event: good,
        });
    }

    Ok(ErrorDecomposition {
        n0,
        subgrid: m,
        rows,
    })
}

/// Interval suprema `(ρ, ρ*, ν, ν*)` for the intervals ending at
/// `n0+1, …, n`.
pub fn sup_distances(
    spec: &LinearTtsSpec,
    schedule: &StepsizeSchedule,
    traj: &Trajectory,
    n0: usize,
    n: usize,
    subgrid: usize,
) -> Result<Vec<(usize, [f64; 4])>, OdeError> {
    let dec = decompose(
        spec,
        schedule,
        traj,
        n0,
        n,
        DecompositionOptions {
            subgrid,
            outer_radii: None,
        },
    )?;
    Ok(dec
        .rows
        .iter()
        .skip(1)
        .map(|r| (r.n, [r.rho, r.rho_star, r.nu, r.nu_star]))
        .collect())
}

/// `G_n`: the interpolants stay within `R1^out` of `θ*` and `R2^out` of 0
/// on `[t_{n0}, t_n]`. Both interpolants are piecewise linear, so checking
/// the knots is exact.
pub fn good_event(
    spec: &LinearTtsSpec,
    path: &NoisePath,
    r1out: f64,
    r2out: f64,
    n0: usize,
    n: usize,
) -> Result<bool, OdeError> {
    let (start, end) = (path.n_start, path.n_end());
    for k in [n0, n] {
        if k < start || k > end || n < n0 {
            return Err(OdeError::IndexOutOfRange { n: k, start, end });
        }
    }
    let star = spec.theta_star();
    Ok((n0..=n).all(|k| {
        let i = k - start;
        let theta = &path.theta[i];
        let z = &path.w[i] - spec.lambda(theta);
        (theta - star).norm() <= r1out && z.norm() <= r2out
    }))
}
