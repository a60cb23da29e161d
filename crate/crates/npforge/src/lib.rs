//! Meta-learning library for 1D stochastic-process prediction.
//!
//! Implements the convolutional conditional neural process (ConvCNP), its
//! latent-variable extension (ConvNP), and a vanilla neural-process baseline,
//! together with the exact Gaussian-process prediction oracle, the three
//! training/evaluation objectives (maximum-likelihood, variational, and
//! importance-weighted bounds), a meta-training loop, an evaluation harness,
//! and a Thompson-sampling / UCB Bayesian-optimization harness.
//!
//! Everything runs in 64-bit floats on CPU and is deterministic given a seed.

pub mod autodiff;
pub mod bayesopt;
pub mod checkpoint;
pub mod convdeepset;
pub mod evalharness;
pub mod gp;
pub mod models;
pub mod objectives;
pub mod synthproc;
pub mod trainer;
pub mod util;

pub use synthproc::{KernelSpec, ProcessSpec, Task, TaskProtocol};
