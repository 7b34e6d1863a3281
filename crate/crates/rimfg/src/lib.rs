//! Solver and simulator for linear-quadratic robust incentive Stackelberg
//! mean-field games.
//!
//! The pipeline runs in four stages:
//!
//! - `leader`: concavity Riccati `K`, critical attenuation level, block Riccati `P`, and saddle-point gains.
//! - `incentive`: the incentive matrix `L(t)` and the follower-side Riccati quantities.
//! - `sim`: Monte Carlo simulation of the limit system and the N-follower population.
//! - `cli`: wires these stages to CSV/JSON artifacts.

pub mod cli;
pub mod error;
pub mod incentive;
pub mod leader;
pub mod linalg;
pub mod model;
pub mod odeint;
pub mod sim;

pub use error::{Error, Result};
pub use model::{ModelParams, MatrixTrajectory, TimeGrid};
