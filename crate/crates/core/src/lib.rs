//! Feature-space anomaly detection head.
//!
//! Backbone feature maps go through neighbourhood aggregation, resizing and
//! concatenation, a linear feature adaptor, and a small discriminator trained
//! against Gaussian-perturbed copies of normal features. The negated
//! discriminator output is the anomaly score.

pub mod bench;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod tensors;
pub mod training;

pub use error::{Error, ParseError, Result};
