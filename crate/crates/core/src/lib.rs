//! Conditional probability heads for compositional zero-shot learning.
//!
//! The crate works on precomputed backbone features: a deep class token,
//! deep patch tokens and a few shallow blocks per image, plus word
//! embeddings for attribute and object names. It provides a small reverse
//! mode autograd, the heads themselves, training, evaluation with bias
//! calibration, and the on-disk formats.

pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod space;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use model::{CpfParams, Dims, FeatureBundle, HeadConfig, TextEmbeddings, Variant};
pub use space::{CompositionSpace, Pair, Setting};
pub use tensor::Tensor;
