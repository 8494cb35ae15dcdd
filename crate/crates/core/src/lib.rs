//! Quasi-LPV model predictive control.
//!
//! The crate is `no_std` (with `alloc`) and contains the numerical pipeline:
//! model abstraction, the gas-lift benchmark, scheduling extrapolation,
//! condensed prediction, a dense QP solver, the receding-horizon controller
//! and offline terminal-ingredient synthesis.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod demo;
pub mod error;
pub mod gaslift;
pub mod grid;
pub mod horizon;
pub mod linalg;
pub mod model;
pub mod mpc;
pub mod qp;
pub mod schedule;
pub mod terminal;

pub use error::ModelError;
pub use model::{BoxSet, Dims, LpvMatrices, ModelSets, NonlinearPlant, Qlpv, SchedulingSet};

/// Monotone time source used to measure controller compute time.
pub trait Clock {
    /// Seconds since an arbitrary fixed origin.
    fn now(&self) -> f64;
}

/// A clock that never advances; all measured durations are zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct NullClock;

impl Clock for NullClock {
    fn now(&self) -> f64 {
        0.0
    }
}
