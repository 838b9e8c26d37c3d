//! First-passage analysis of iterative stochastic optimization under
//! perturbations.
//!
//! Training (or any iterative stochastic process) is treated as a
//! first-passage process to an absorbing target on a scalar collective
//! variable. From an ensemble of unperturbed trajectories and a single
//! perturbed measurement, the crate predicts the mean first-passage time
//! when a perturbation (stochastic resetting, shrink-and-perturb, partial
//! resetting) is applied every `P` epochs.
//!
//! Modules:
//! - [`fpt`]: trajectories, ensembles, survival estimation.
//! - [`qss`]: quasi-steady-state detection from per-epoch CDFs.
//! - [`perturb`]: the perturbation operators.
//! - [`process`]: toy processes and the simulation protocols.
//! - [`oracle`]: exact survival and perturbed MFPT for finite Markov chains.
//! - [`predict`]: prediction curves and speedups.

pub mod error;
pub mod fpt;
pub mod oracle;
pub mod perturb;
pub mod predict;
pub mod process;
pub mod qss;
pub mod rng;

pub use error::{Error, Result};
