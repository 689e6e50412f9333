//! Deep recurrent stacks built from plain, highway and residual LSTM layers.
//!
//! Everything is double precision and dependency-free at the math level:
//! [`numerics`] provides the dense containers, [`cells`] the three step
//! functions and their exact reverse passes, [`network`] stacks them under
//! truncated BPTT, and [`training`] drives per-sequence SGD with L2 decay.
//! [`gradcheck`] is the independent finite-difference oracle, [`analysis`]
//! holds parameter accounting and the shortcut variance simulator, and
//! [`tasks`] generates the synthetic sequence benchmarks.

pub mod analysis;
pub mod cells;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod network;
pub mod numerics;
pub mod params;
pub mod rng;
pub mod tasks;
pub mod training;

pub use error::{Error, Result};
