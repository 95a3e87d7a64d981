//! Toy single-head detector hosting the fusion modules.

mod checkpoint;
mod config;
mod cost;
mod decode;
mod loss;
mod model;

pub use checkpoint::{Checkpoint, FORMAT_VERSION, MAGIC};
pub use config::{BoxLoss, Depths, ModelConfig};
pub use cost::{
    c2f_cost, compensate, conv_cost, count_params_flops, encoder_cost, fds_cost, gaus_cost, lads_cost, layer_norm_cost,
    linear_cost, msa_cost, Compensation, Cost, PARAM_TOLERANCE,
};
pub use decode::{center_cell, decode_box, decode_predictions, encode_box, nms};
pub use loss::{assign_targets, compute_loss, LossComponents, LossVars, Target};
pub use model::{Detector, FeaturePyramid, HeadOutput, FDS_C2F_DEPTH, HEAD_STRIDE};
