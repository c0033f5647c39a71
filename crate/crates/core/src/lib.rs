//! Bi-level score matching for energy-based latent variable models.
//!
//! The crate is organised bottom-up:
//!
//! - [`autodiff`]: tensors and a higher-order reverse-mode AD graph
//! - [`models`]: Gaussian RBM and a small deep EBLVM energy
//! - [`posteriors`]: amortized Bernoulli (binary Concrete) and Gaussian posteriors
//! - [`objectives`]: SM / SSM / DSM / MDSM, the bi-level upper loss and the
//!   KL / Fisher lower losses
//! - [`bilevel`]: inner updates, gradient unrolling, Adam and the training loop
//! - [`samplers`]: Gibbs, contrastive divergence, (annealed) Langevin dynamics
//! - [`eval`]: exact GRBM evaluation (partition function, likelihood, Fisher)
//! - [`data`]: synthetic datasets, minibatching and the dataset text format
//! - [`cli`]: configuration, checkpoints, metrics and subcommands

pub mod autodiff;
pub mod bilevel;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod models;
pub mod objectives;
pub mod posteriors;
pub mod rng;
pub mod samplers;

pub use autodiff::{Tensor, Var};
pub use error::{Error, Result};
