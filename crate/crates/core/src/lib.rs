//! Hybrid Bayesian neural stochastic differential equations trained with an
//! empirical PAC-Bayes objective.
//!
//! The crate is organised bottom-up: [`diffcore`] provides tensors and a
//! reverse-mode tape, [`bnn`] the variational drift network, [`priors`] the
//! known-physics drifts, [`sde`] the Euler-Maruyama simulator, [`pacloss`]
//! the objective and bounds, [`optim`] Adam, [`datagen`] the synthetic
//! datasets and [`harness`] the experiment drivers.

// Validation uses `!(x > 0.0)` so that NaN is rejected alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bnn;
pub mod checkpoint;
pub mod datagen;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod optim;
pub mod pacloss;
pub mod priors;
pub mod sde;

pub use bnn::{Activation, MlpArch, WeightPosterior};
pub use datagen::{Dataset, ObservationSequence};
pub use diffcore::{Tape, Tensor, Var};
pub use error::{Error, Result};
pub use harness::{ExperimentConfig, Model, Variant};
pub use pacloss::{LikelihoodSpec, LossBreakdown, PacConfig};
pub use priors::{GammaMask, PriorKind, PriorOde};
pub use sde::{DiffusionSpec, HybridSde, TimeGrid};
