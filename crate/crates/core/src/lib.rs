//! Attention-based multi-scale feature fusion for small-object detection.
//!
//! The crate is layered bottom-up:
//! - [`tensor`]: dense tensors and a reverse-mode tape,
//! - [`gradcheck`]: finite-difference verification of that tape,
//! - [`nn`]: attention, MLP, positional embedding and C2F blocks,
//! - [`fusion`]: the FMSA / FDS (LADS) / FUS (GAUS) fusion modules,
//! - [`detector`]: a three-stage toy detector hosting the fusion modules,
//! - [`data`] and [`metrics`]: synthetic scenes and mAP evaluation,
//! - [`train`]: SGD training, evaluation and the module ablation sweep,
//! - [`harness`]: the block gradient-check suite, cost benchmarks and overlays.

pub mod data;
pub mod detector;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
