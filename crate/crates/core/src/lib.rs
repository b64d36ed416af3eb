//! Asynchronous multi-fidelity batch Bayesian optimization.
//!
//! Gaussian-process surrogates (single task, independent per fidelity, and LMC multi-task),
//! acquisition functions, asynchronous batching strategies, fidelity selection rules, and a
//! discrete-event simulator that runs them against synthetic multi-fidelity benchmarks under
//! delayed observations and a batch-space budget.
//!
//! Fidelities are indexed `1..=M`; fidelity `M` is the target.

pub mod acquisition;
pub mod batch;
pub mod benchmarks;
pub mod engine;
pub mod error;
pub mod fidelity;
pub mod gp;
pub mod linalg;
pub mod mes;
pub mod mf_model;
pub mod posterior;
pub mod rng;
pub mod train;

pub use error::{Error, Result};

/// A point of the search domain.
pub type Point = Vec<f64>;

/// Fidelity index in `1..=M`.
pub type Fidelity = usize;
