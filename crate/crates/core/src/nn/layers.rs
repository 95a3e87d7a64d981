use super::params::{Bound, ParamBuilder, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

pub const LN_EPS: f64 = 1e-5;

/// `y = x W + b` over the last axis; `W` is stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, out_dim: usize) -> Self {
        Linear {
            w: pb.weight(&format!("{name}.w"), &[in_dim, out_dim], in_dim),
            b: pb.zeros(&format!("{name}.b"), &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.w), Some(p.var(self.b)))
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.zero(self.w);
        store.zero(self.b);
    }

    pub fn params(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: pb.ones(&format!("{name}.gamma"), &[dim]),
            beta: pb.zeros(&format!("{name}.beta"), &[dim]),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        g.layer_norm(x, p.var(self.gamma), p.var(self.beta), LN_EPS)
    }
}

/// Two-layer perceptron `in -> hidden -> out` with SiLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_dim: usize, hidden: usize, out_dim: usize) -> Self {
        Mlp {
            fc1: Linear::new(pb, &format!("{name}.fc1"), in_dim, hidden),
            fc2: Linear::new(pb, &format!("{name}.fc2"), hidden, out_dim),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, p, x)?;
        let h = g.silu(h);
        self.fc2.forward(g, p, h)
    }

    /// Zeroing both layers makes the block output exactly zero.
    pub fn zero(&self, store: &mut ParamStore) {
        self.fc1.zero(store);
        self.fc2.zero(store);
    }
}

/// Square convolution with bias, optionally followed by SiLU (with SiLU-gain init when it is).
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub w: ParamId,
    pub b: ParamId,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub activate: bool,
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        activate: bool,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let shape = [out_ch, in_ch, kernel, kernel];
        let w = if activate {
            pb.silu_weight(&format!("{name}.w"), &shape, fan_in)
        } else {
            pb.weight(&format!("{name}.w"), &shape, fan_in)
        };
        ConvBlock {
            w,
            b: pb.zeros(&format!("{name}.b"), &[out_ch]),
            in_ch,
            out_ch,
            kernel,
            stride,
            padding: kernel / 2,
            activate,
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let c = g.shape(x).get(1).copied();
        if c != Some(self.in_ch) {
            return Err(Error::dim(format!(
                "conv expects {} input channels, got shape {:?}",
                self.in_ch,
                g.shape(x)
            )));
        }
        let y = g.conv2d(x, p.var(self.w), Some(p.var(self.b)), self.stride, self.padding)?;
        Ok(if self.activate { g.silu(y) } else { y })
    }

    pub fn params(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel + self.out_ch
    }

    pub fn out_size(&self, h: usize) -> usize {
        (h + 2 * self.padding - self.kernel) / self.stride + 1
    }
}
