//! Finite-horizon stochastic knapsack with time-varying random batch demand.

pub mod bounds;
pub mod cli;
pub mod diffusion;
pub mod dp;
pub mod model;
pub mod numeric;
pub mod policy;
pub mod sim;
pub mod structure;
mod textfmt;
