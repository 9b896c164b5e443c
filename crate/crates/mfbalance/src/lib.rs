//! Simulation and analysis toolkit for load balancing in distributed
//! network intrusion detection systems under self-similar traffic.
//!
//! The crate synthesizes multifractal packet traces with controllable
//! Hurst exponent `H` and generalized-Hurst range `Δh`, estimates both
//! from series via MF-DFA, models NIDS sensor nodes with bounded queues
//! and signature-matching costs, and drives paired simulations of a
//! standard join-shortest-queue balancer (SM) against a
//! multifractality-aware one (PM) that sizes node pools from the
//! burst-adjusted inspection-time estimate `T_new`.
//!
//! Entry points:
//! - [`traffic::synthesize_trace`] — calibrated trace generation
//! - [`fractal::mfdfa`] — generalized Hurst estimation
//! - [`ids::dpi_time_estimate`] — the piecewise `T_new` formula
//! - [`engine::run`] / [`engine::sweep`] — simulations and grids

pub mod balancing;
pub mod engine;
pub mod error;
pub mod fractal;
pub mod ids;
pub mod metrics;
pub mod node;
pub mod report;
pub mod seed;
pub mod traffic;

pub use error::{Error, Result};
