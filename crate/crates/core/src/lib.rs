//! Chunk-wise adaptive LoRA inference on a desk-scale decoder.
//!
//! A sequence is scored token by token for difficulty, grouped online into
//! variable-length chunks, and each chunk runs with its own slice of a
//! precomputed SVD rank ladder (rank plus gating scale) and its own KV-cache
//! policy. Chunk boundaries are cross-faded.
//!
//! The numeric core (`linalg`, `adapter`) is generic over the scalar type;
//! the aliases below pin the precisions used by the runtime.

pub mod adapter;
pub mod chunker;
pub mod complexity;
mod error;
pub mod kvcache;
pub mod linalg;
pub mod policy;
pub mod runtime;
pub mod toymodel;

pub use error::{Error, Result};

/// 64-bit matrix used for adapter factors and rank ladders.
pub type MatrixF64 = linalg::Matrix<f64>;
/// 32-bit matrix used for frozen model weights.
pub type MatrixF32 = linalg::Matrix<f32>;
pub type SvdF64 = linalg::SvdResult<f64>;
pub type AdapterF64 = adapter::LoraAdapter<f64>;
pub type LadderF64 = adapter::RankLadder<f64>;
