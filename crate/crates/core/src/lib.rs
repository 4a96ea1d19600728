//! Lifelong image-conditioned GAN training where each new task reuses a
//! frozen, growing bank of earlier tasks' filters.
//!
//! Every shared generator layer of task `n` is built from a small set of
//! freely learned filters plus "piggyback" filters, which are learned linear
//! mixtures of the bank. Earlier tasks are never modified, so their outputs
//! are reproduced exactly after any amount of later training.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod piggyback;
pub mod ppm;
pub mod rng;
pub mod run;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use piggyback::Lambda;
pub use run::{Mode, RunState};
pub use tensor::Tensor;
