//! Pose tokenizer, masked dual-stream transformer, iterative reconstruction
//! and the staged training loop.

pub mod error;
pub mod inference;
pub mod losses;
pub mod network;
pub mod nn;
pub mod tokenizer;
pub mod training;

pub use error::{ModelError, Result};

pub type Tokenizer32 = tokenizer::TokenizerWeights<f32>;
pub type Tokenizer64 = tokenizer::TokenizerWeights<f64>;
pub type Model32 = network::ModelWeights<f32>;
pub type Model64 = network::ModelWeights<f64>;
pub type Observations32 = network::ObservationSeq<f32>;
pub type Observations64 = network::ObservationSeq<f64>;
