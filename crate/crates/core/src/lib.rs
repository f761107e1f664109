//! Linear two-timescale stochastic approximation toolkit.
//!
//! Simulates the coupled recursion
//! `θ_{n+1} = θ_n + α_n[h1(θ_n, w_n) + M⁽¹⁾_{n+1}]`,
//! `w_{n+1} = w_n + β_n[h2(θ_n, w_n) + M⁽²⁾_{n+1}]`
//! with affine `h1`, `h2`, evaluates finite-sample lock-in bounds and their
//! constants, and builds GTD-family instances on synthetic Markov reward
//! processes.

pub mod bounds;
pub mod cli;
pub mod engine;
pub mod harness;
pub mod linalg;
pub mod model;
pub mod ode;
pub mod rl;
pub mod spectral;

pub use linalg::{Matrix, Vector};
pub use model::{LinearTtsSpec, ModelError, NoiseBounds, Radii, StepsizeSchedule};
