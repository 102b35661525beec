//! Fused-window transformer for multivariate time-series classification.
//!
//! A compact CPU implementation built on a minimal reverse-mode autodiff
//! tape. Windows of a long series attend locally with cross-window fringe
//! context, per-window summary (CLS) tokens are regularized toward
//! agreement, and overlapping window outputs are fused by averaging.
//! A gradient-weighted relevancy map explains which time points drove a
//! classification.
//!
//! Modules:
//! - `diffcore`: arrays, the autodiff tape, gradient checking
//! - `fwmsa`: window geometry, relative position bias, fused attention
//! - `model`: transformer blocks, losses, checkpoints, ablation switches
//! - `explain`: relevancy propagation and token importance
//! - `data`: series I/O, z-scoring, cropping, synthetic task generation
//! - `harness`: training loop, optimizer, schedule, metrics, FLOP model

pub mod data;
pub mod diffcore;
pub mod error;
pub mod explain;
pub mod fwmsa;
pub mod harness;
pub mod model;

pub use error::{Error, Result};
