//! Quadrotor model predictive control with a learned residual model and L1
//! adaptive uncertainty estimation, plus the simulation harness used to
//! benchmark it.

pub mod charts;
pub mod cli;
pub mod controllers;
pub mod dynamics;
pub mod error;
pub mod harness;
pub mod knode;
pub mod l1;
pub mod mpc;

pub use error::{Error, Result};
