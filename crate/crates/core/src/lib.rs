//! Hybrid generative-discriminative clustering: an energy-based density
//! and a prototype cluster head trained jointly on a shared encoder.

#![allow(clippy::needless_range_loop)]

pub mod autodiff;
mod binio;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod rng;
pub mod sampling;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{GediModel, ModelConfig};
pub use rng::SeededRng;
pub use tensor::Tensor;
