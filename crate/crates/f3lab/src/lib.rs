//! f3lab: a desk-scale laboratory for attention-guided adversarial
//! purification on a toy vision-language model.
//!
//! The crate trains a small differentiable image+question answering model,
//! attacks it with white-box pixel attacks (PGD, a C&W-style unconstrained
//! attack, and EOT-PGD against randomized defenses), and purifies the
//! adversarial inputs by deliberately adding noise guided by the model's
//! cross-modal attention. An experiment harness turns the whole pipeline
//! into reproducible tables and attention heatmaps.

pub mod attack;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod purify;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, TensorError, Var};
