//! Reconstruction-classification networks for unsupervised domain
//! adaptation: a convolutional encoder shared by a label predictor and a
//! convolutional decoder, trained by alternating RMSprop steps on labeled
//! source data and unlabeled target data.

pub mod data;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod layers;
pub mod model;
pub mod network;
pub mod noise;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
