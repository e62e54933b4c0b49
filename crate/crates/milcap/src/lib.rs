//! Multi-scale video captioning on a self-contained f32 autodiff engine.

pub mod bleu;
pub mod checkpoint;
pub mod corpus;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod lstm;
pub mod mil;
pub mod model;
pub mod net;
pub mod ops;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
