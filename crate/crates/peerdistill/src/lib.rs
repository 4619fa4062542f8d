//! Online mutual distillation among peer classifiers.
//!
//! A group of `M` peer networks trains jointly on the same batches. Each peer
//! minimizes its own cross-entropy; the designated deployment peer is
//! additionally pulled toward the soft predictions of the ensemble (the
//! softened softmax of the mean logits), and every pair of peers exchanges a
//! contrastive signal in a shared low-dimensional embedding space backed by
//! per-peer memory banks. After training, only the deployment peer is kept.
//!
//! The crate is organized around plain `f64` math on `ndarray` with hand
//! written backward passes, which keeps runs bit-for-bit reproducible on a
//! single CPU core.

pub mod cli;
pub mod config;
pub mod contrastive;
pub mod data;
pub mod eval;
pub mod fewshot;
pub mod graph;
pub mod error;
mod init;
pub mod losses;
pub mod nn;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
