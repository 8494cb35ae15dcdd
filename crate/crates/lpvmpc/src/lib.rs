//! Closed-loop simulation, file formats and command-line plumbing for the
//! quasi-LPV MPC toolkit in `lpvmpc-core`.

pub mod compare;
pub mod error;
pub mod log;
pub mod metrics;
pub mod plant;
pub mod plot;
pub mod scenario;
pub mod selftest;
pub mod sim;
pub mod terminal_io;

pub use error::{Error, Result};
