//! Reusable network blocks.

mod attention;
mod c2f;
mod layers;
mod params;

pub use attention::{add_positional, detokenize, positional_embedding, tokenize, EncoderLayer, Msa};
pub use c2f::{Bottleneck, C2f, C2F_HIDDEN_RATIO};
pub use layers::{ConvBlock, LayerNorm, Linear, Mlp, LN_EPS};
pub use params::{Bound, ParamBuilder, ParamId, ParamStore};

/// Attention heads used by every attention block unless configured otherwise.
pub const DEFAULT_HEADS: usize = 4;
/// MLP hidden width as a multiple of the embedding width.
pub const DEFAULT_MLP_RATIO: usize = 2;
/// Residual bottlenecks inside a C2F block.
pub const DEFAULT_C2F_DEPTH: usize = 2;
