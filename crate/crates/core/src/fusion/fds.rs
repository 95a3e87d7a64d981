use super::patch::patch_extract;
use crate::error::{Error, Result};
use crate::nn::{Bound, C2f, ConvBlock, LayerNorm, Mlp, Msa, ParamBuilder, ParamStore};
use crate::tensor::{Graph, Var};

/// Local attention downsample: attention inside each `stride x stride` patch,
/// the patch tokens averaged to one, then an MLP.
#[derive(Clone, Debug)]
pub struct Lads {
    pub ln: LayerNorm,
    pub msa: Msa,
    pub mlp: Mlp,
    pub stride: usize,
}

impl Lads {
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        channels: usize,
        heads: usize,
        mlp_ratio: usize,
        stride: usize,
    ) -> Result<Self> {
        Ok(Lads {
            ln: LayerNorm::new(pb, &format!("{name}.ln"), channels),
            msa: Msa::new(pb, &format!("{name}.msa"), channels, heads)?,
            mlp: Mlp::new(pb, &format!("{name}.mlp"), channels, mlp_ratio * channels, channels),
            stride,
        })
    }

    /// `[B,C,H,W] -> [B,C,H/stride,W/stride]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let patches = patch_extract(g, x, self.stride)?;
        let (b, c) = (s[0], s[1]);
        let (ho, wo) = (s[2] / self.stride, s[3] / self.stride);
        let groups = g.reshape(patches, &[b * ho * wo, self.stride * self.stride, c])?;
        let z = self.ln.forward(g, p, groups)?;
        let z = self.msa.forward(g, p, z)?;
        let z = g.mean_axis(z, 1)?;
        let z = self.mlp.forward(g, p, z)?;
        let z = g.reshape(z, &[b, ho, wo, c])?;
        g.permute(z, &[0, 3, 1, 2])
    }

    pub fn zero(&self, store: &mut ParamStore) {
        self.msa.zero(store);
        self.mlp.zero(store);
    }
}

/// Hybrid downsample: `C2F(concat(strided conv(x), proj(LADS(x))))`.
///
/// Each branch contributes half of the output width.
#[derive(Clone, Debug)]
pub struct Fds {
    pub conv: ConvBlock,
    pub lads: Lads,
    pub lads_proj: ConvBlock,
    pub c2f: C2f,
}

impl Fds {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        heads: usize,
        mlp_ratio: usize,
        c2f_depth: usize,
    ) -> Result<Self> {
        if !out_ch.is_multiple_of(2) {
            return Err(Error::config(format!(
                "FDS output width {out_ch} must be even to split between its two branches"
            )));
        }
        let half = out_ch / 2;
        Ok(Fds {
            conv: ConvBlock::new(pb, &format!("{name}.conv"), in_ch, half, 3, 2, true),
            lads: Lads::new(pb, &format!("{name}.lads"), in_ch, heads, mlp_ratio, 2)?,
            lads_proj: ConvBlock::new(pb, &format!("{name}.lads_proj"), in_ch, half, 1, 1, false),
            c2f: C2f::new(pb, &format!("{name}.c2f"), out_ch, out_ch, c2f_depth)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(Error::dim(format!("FDS needs even spatial dims, got {s:?}")));
        }
        let a = self.conv.forward(g, p, x)?;
        let z = self.lads.forward(g, p, x)?;
        let z = self.lads_proj.forward(g, p, z)?;
        let cat = g.concat(&[a, z], 1)?;
        self.c2f.forward(g, p, cat)
    }
}
