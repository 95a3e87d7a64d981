use super::config::GausMode;
use crate::error::{Error, Result};
use crate::nn::{detokenize, tokenize, Bound, ConvBlock, LayerNorm, Mlp, Msa, ParamBuilder};
use crate::tensor::{Graph, Var};

/// Global attention upsample: `Replicate(MLP(MSA(LN(tokens))))`.
#[derive(Clone, Debug)]
pub struct Gaus {
    pub ln: LayerNorm,
    pub msa: Msa,
    pub mlp: Mlp,
    pub stride: usize,
    pub mode: GausMode,
    pub in_ch: usize,
}

impl Gaus {
    pub fn out_channels(in_ch: usize, stride: usize, mode: GausMode) -> Result<usize> {
        let div = match mode {
            GausMode::Replicate => stride,
            GausMode::PixelShuffle => stride * stride,
        };
        if stride == 0 || !in_ch.is_multiple_of(div) {
            return Err(Error::config(format!(
                "GAUS input width {in_ch} is not divisible by {div} (stride {stride}, {mode:?})"
            )));
        }
        Ok(in_ch / div)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        in_ch: usize,
        stride: usize,
        heads: usize,
        mlp_ratio: usize,
        mode: GausMode,
    ) -> Result<Self> {
        let out = Self::out_channels(in_ch, stride, mode)?;
        let mlp_out = match mode {
            GausMode::Replicate => out,
            GausMode::PixelShuffle => in_ch,
        };
        Ok(Gaus {
            ln: LayerNorm::new(pb, &format!("{name}.ln"), in_ch),
            msa: Msa::new(pb, &format!("{name}.msa"), in_ch, heads)?,
            mlp: Mlp::new(pb, &format!("{name}.mlp"), in_ch, mlp_ratio * in_ch, mlp_out),
            stride,
            mode,
            in_ch,
        })
    }

    /// `[B,C,H,W] -> [B,C',H*stride,W*stride]` with `C'` from [`Gaus::out_channels`].
    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 || s[1] != self.in_ch {
            return Err(Error::dim(format!("GAUS expects [B,{},H,W], got {s:?}", self.in_ch)));
        }
        let (b, h, w) = (s[0], s[2], s[3]);
        let t = tokenize(g, x)?;
        let t = self.ln.forward(g, p, t)?;
        let t = self.msa.forward(g, p, t)?;
        let t = self.mlp.forward(g, p, t)?;
        let m = detokenize(g, t, h, w)?;
        let st = self.stride;
        match self.mode {
            GausMode::Replicate => g.upsample_nearest(m, st),
            GausMode::PixelShuffle => {
                let c = self.in_ch / (st * st);
                let m = g.reshape(m, &[b, c, st, st, h, w])?;
                let m = g.permute(m, &[0, 1, 4, 2, 5, 3])?;
                g.reshape(m, &[b, c, h * st, w * st])
            }
        }
    }
}

/// Lifts the stride-32 and stride-16 maps to stride 8 through GAUS, projects
/// each to the fusion width and sums them.
#[derive(Clone, Debug)]
pub struct Fus {
    pub gaus_p5: Gaus,
    pub gaus_p4: Gaus,
    pub proj_p5: ConvBlock,
    pub proj_p4: ConvBlock,
}

impl Fus {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        c4: usize,
        c5: usize,
        out_ch: usize,
        heads: usize,
        mlp_ratio: usize,
        mode: GausMode,
        strides: (usize, usize),
    ) -> Result<Self> {
        let (s5, s4) = strides;
        let gaus_p5 = Gaus::new(pb, &format!("{name}.gaus_p5"), c5, s5, heads, mlp_ratio, mode)?;
        let gaus_p4 = Gaus::new(pb, &format!("{name}.gaus_p4"), c4, s4, heads, mlp_ratio, mode)?;
        let o5 = Gaus::out_channels(c5, s5, mode)?;
        let o4 = Gaus::out_channels(c4, s4, mode)?;
        Ok(Fus {
            proj_p5: ConvBlock::new(pb, &format!("{name}.proj_p5"), o5, out_ch, 1, 1, false),
            proj_p4: ConvBlock::new(pb, &format!("{name}.proj_p4"), o4, out_ch, 1, 1, false),
            gaus_p5,
            gaus_p4,
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, p4: Var, p5: Var) -> Result<Var> {
        let a = self.gaus_p5.forward(g, p, p5)?;
        let a = self.proj_p5.forward(g, p, a)?;
        let b = self.gaus_p4.forward(g, p, p4)?;
        let b = self.proj_p4.forward(g, p, b)?;
        if g.shape(a) != g.shape(b) {
            return Err(Error::dim(format!(
                "upsampled branches disagree: P5 path {:?} vs P4 path {:?}",
                g.shape(a),
                g.shape(b)
            )));
        }
        g.add(a, b)
    }

    /// Just the P4 branch, for additivity checks.
    pub fn forward_p4(&self, g: &mut Graph, p: &Bound, p4: Var) -> Result<Var> {
        let b = self.gaus_p4.forward(g, p, p4)?;
        self.proj_p4.forward(g, p, b)
    }
}

/// Nearest-neighbour stand-in for FUS: P5 and P4 upsampled by plain
/// replication, projected to the fusion width and summed.
#[derive(Clone, Debug)]
pub struct NearestUpsample {
    pub proj_p5: ConvBlock,
    pub proj_p4: ConvBlock,
}

impl NearestUpsample {
    pub fn new(pb: &mut ParamBuilder, name: &str, c4: usize, c5: usize, out_ch: usize) -> Self {
        NearestUpsample {
            proj_p5: ConvBlock::new(pb, &format!("{name}.proj_p5"), c5, out_ch, 1, 1, false),
            proj_p4: ConvBlock::new(pb, &format!("{name}.proj_p4"), c4, out_ch, 1, 1, false),
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, p4: Var, p5: Var) -> Result<Var> {
        // a 1x1 projection commutes with nearest upsampling
        let a = self.proj_p5.forward(g, p, p5)?;
        let a = g.upsample_nearest(a, 4)?;
        let b = self.proj_p4.forward(g, p, p4)?;
        let b = g.upsample_nearest(b, 2)?;
        g.add(a, b)
    }
}
