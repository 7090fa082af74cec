//! Meta-learning with plain LSTMs and outer-product LSTMs.
//!
//! The crate is organised bottom-up:
//!
//! - [`ndtensor`]: dense tensors, a reverse-mode tape, Adam.
//! - [`cells`]: the LSTM cell, stacked and coordinate-wise variants.
//! - [`plain`]: the plain-LSTM meta-learner with sequential or mean-pooled ingestion.
//! - [`oplstm`]: the outer-product LSTM meta-learner.
//! - [`baselines`]: MAML and prototypical networks.
//! - [`tasks`]: sine regression, synthetic and image-folder few-shot episodes.
//! - [`harness`]: meta-training, evaluation, checkpoints, metrics, analysis.

pub mod baselines;
pub mod cells;
pub mod error;
pub mod harness;
pub mod ndtensor;
pub mod oplstm;
pub mod plain;
pub mod tasks;

mod params;

pub use error::{Error, Result};
pub use ndtensor::{Tape, Tensor, Var};
pub use params::{Activation, Learner, OutputKind, ParamCursor, TaskLoss};
