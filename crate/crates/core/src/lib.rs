//! Attribute-specific embedding networks.
//!
//! An image feature map is pooled by an attribute-conditioned spatial
//! attention, gated by an attribute-conditioned channel attention and
//! projected into one embedding space per attribute. Cosine similarity in
//! that space measures similarity with respect to the attribute alone.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
