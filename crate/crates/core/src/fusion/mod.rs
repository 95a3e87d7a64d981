//! The fusion modules: FMSA (fused global attention at stride 8), FDS with
//! its local-attention downsample LADS, and FUS with its global-attention
//! upsample GAUS.

mod config;
mod fds;
mod fmsa;
mod fus;
mod patch;

pub use config::{FusionConfig, GausMode, ABLATION_SETTINGS};
pub use fds::{Fds, Lads};
pub use fmsa::{Fmsa, FusionInputs};
pub use fus::{Fus, Gaus, NearestUpsample};
pub use patch::{patch_assemble, patch_extract};
