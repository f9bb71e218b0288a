//! One-shot federated learning laboratory.
//!
//! Clients train a lossy convolutional feature extractor, a teacher
//! classifier on the extracted features, and a rectified-flow generator over
//! those features. They upload only the classifier and the generator. The
//! server samples a synthetic feature dataset from every generator, averages
//! the classifiers into a teacher, and distils a global student by matching
//! both the teacher's logits and an intermediate feature map.

pub mod autograd;
pub mod baselines;
pub mod checkpoint;
pub mod client;
pub mod data;
pub mod error;
pub mod experiment;
pub mod flow;
pub mod layers;
pub mod nets;
pub mod params;
pub mod privacy;
pub mod seed;
pub mod server;
pub mod tensor;
pub mod timing;
pub mod viz;

pub use error::{Error, Result};
pub use tensor::Tensor;
