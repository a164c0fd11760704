//! Variational recurrent sequence embeddings trained with a cross-view
//! adversarial regularizer, plus the retrieval metrics used to evaluate them.

pub mod adversarial;
pub mod checks;
mod codec;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod recurrent;
pub mod training;
pub mod vrnn;

pub use error::{Error, Result};
