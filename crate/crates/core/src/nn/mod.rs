//! The trainable encoder and its optimizer.

pub mod encoder;
pub mod layers;
pub mod optim;

pub use encoder::{quantize, zero_grads, BatchStats, EmbeddingPass, Encoder, EncoderConfig, Grads, Param, RawPass};
pub use optim::Sgd;
