//! Self-supervised temporally coherent frame embeddings.
//!
//! The crate covers the whole desk-scale pipeline: unit-sphere embedding
//! geometry, a memory bank of per-frame embeddings, first-order / NCE /
//! second-order coherency losses with a rotation auxiliary task, an annealed
//! semi-hard negative-mining curriculum, trajectory curvature metrics
//! (TAC/MAC), synthetic and on-disk frame datasets with augmentation, a small
//! CNN encoder with SGD pretraining and checkpoints, and downstream
//! classification (linear probe / fine-tune) with averaged inference.

pub mod curvature;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod image;
pub mod index;
pub mod losses;
pub mod memory_bank;
pub mod mining;
pub mod nn;
pub mod rng;
pub mod trainer;

pub use embedding::{cosine_similarity, normalize, Embedding};
pub use error::{Result, TceError};
pub use image::Image;
pub use index::{enumerate_anchor_pairs, AnchorMode, AnchorPair, DatasetIndex, FrameRef, VideoEntry, VideoSequence};
pub use memory_bank::{BankKey, BankMode, MemoryBank};
pub use mining::{select_negatives, MiningSchedule};
