//! Entity-aware news image captioning: a dynamic-convolution transformer
//! decoder attending over image, article, face and object contexts, with
//! its tokenizer, training loop, decoding and evaluation metrics.

pub mod adaptive_softmax;
pub mod bpe;
pub mod checkpoint;
pub mod context;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod generation;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod par;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
