//! Multi-layer `[CLS]` pooling on a small transformer encoder.
//!
//! The encoder exposes the `[CLS]` vector of every layer. A pooling head
//! (last layer, LSTM over layers, or attention over layers) turns that trace
//! into one vector for a softmax classifier. Everything runs on a
//! tape-based reverse-mode autodiff over `f64` tensors.

pub mod analysis;
pub mod baseline;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod kfold;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pooling;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use pooling::PoolingKind;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
