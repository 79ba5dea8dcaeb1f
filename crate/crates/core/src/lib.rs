//! Gated positional self-attention, conv → GPSA reparametrization, and a
//! small training harness.

pub mod error;
pub mod gpsa;
pub mod io;
pub mod model;
pub mod nn;
pub mod reparam;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Element, Tensor};
