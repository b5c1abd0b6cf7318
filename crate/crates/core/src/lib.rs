//! Sequential recommendation with a bidirectional Transformer trained on a
//! cloze objective plus multi-pair contrastive learning across masked views.
//!
//! Pipeline: [`data`] turns raw interactions into padded windows and
//! leave-one-out splits, [`encoder`] holds the model, [`objectives`] the
//! losses, [`training`] the optimisation loop and [`eval`] whole-catalogue
//! ranking. [`checkpoint`] stores models in a versioned binary container.

pub mod checkpoint;
pub mod data;
pub mod encoder;
mod error;
pub mod eval;
pub mod objectives;
pub mod training;

pub use error::{Error, Result};

pub use cbit_tensor as tensor;
