//! Outage probability of networked control loops whose controller acts on
//! aged state information.
//!
//! The plant `x(t+1) = A x(t) + B u(t) + w(t)` is driven by a pseudo-inverse
//! controller that only sees `x(t - α(t))`, where the age `α(t)` grows by one per
//! lost uplink packet. [`outage_model`] gives the closed-form probability that
//! `g x` leaves a band of half-width `ΔG`; [`montecarlo`] checks it by simulation.

pub mod aoi_link;
pub mod cli;
pub mod control_loop;
pub mod error;
pub mod montecarlo;
pub mod outage_model;
pub mod report;
pub mod scenario;
pub mod statespace;

pub use aoi_link::{aoi_stationary_pmf, aoi_step, sample_reception, AoiState, LinkModel};
pub use control_loop::{closed_loop_step, LoopState, NoiseSampler, SystemModel};
pub use error::{Error, Result};
pub use montecarlo::{aggregate, compare, estimate_rate, run_episode, run_scenario, AgeSpec, ComparisonRow, RunStats, Scenario};
pub use outage_model::{
    error_variance, error_variance_diag, inflection_variance, outage_curve, outage_probability, q_function,
    InflectionAxis, Regime, VarianceConvention,
};
pub use scenario::ScenarioFile;
pub use statespace::{eig_decompose, mat_power, pseudo_inverse, transform_covariance, RealMatrix};
