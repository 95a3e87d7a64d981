use crate::error::{Error, Result};
use crate::nn::{
    add_positional, detokenize, positional_embedding, tokenize, Bound, C2f, EncoderLayer, Linear, ParamBuilder,
    ParamStore,
};
use crate::tensor::{Graph, Tensor, Var};

/// Operands of the fused attention: the main stride-8 map plus the optional
/// FDS and FUS maps, all at the fusion width.
#[derive(Clone, Copy, Debug)]
pub struct FusionInputs {
    pub x_main: Var,
    pub fds_out: Option<Var>,
    pub fus_out: Option<Var>,
}

/// `C2F(MHSA(fds + fus + x) + x)`.
///
/// MHSA is the tokenized sum plus a sinusoidal table, `depth` pre-norm
/// encoder layers and a linear output projection, reshaped back to a map.
#[derive(Clone, Debug)]
pub struct Fmsa {
    pub layers: Vec<EncoderLayer>,
    pub out_proj: Linear,
    pub c2f: C2f,
    pub channels: usize,
}

impl Fmsa {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        pb: &mut ParamBuilder,
        name: &str,
        channels: usize,
        out_ch: usize,
        depth: usize,
        heads: usize,
        mlp_ratio: usize,
        c2f_depth: usize,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| EncoderLayer::new(pb, &format!("{name}.enc{i}"), channels, heads, mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        Ok(Fmsa {
            layers,
            out_proj: Linear::new(pb, &format!("{name}.out_proj"), channels, channels),
            c2f: C2f::new(pb, &format!("{name}.c2f"), channels, out_ch, c2f_depth)?,
            channels,
        })
    }

    /// The attention term alone, as a `[B,C,H,W]` map.
    pub fn attend(&self, g: &mut Graph, p: &Bound, inputs: &FusionInputs) -> Result<Var> {
        let shape = g.shape(inputs.x_main).to_vec();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(Error::dim(format!(
                "FMSA expects [B,{},H,W] main input, got {shape:?}",
                self.channels
            )));
        }
        let mut sum = inputs.x_main;
        for branch in [inputs.fds_out, inputs.fus_out] {
            // an absent branch is a zero map, so every configuration shares this path
            let b = match branch {
                Some(v) => {
                    if g.shape(v) != shape.as_slice() {
                        return Err(Error::dim(format!(
                            "fusion branch {:?} does not match main map {shape:?}",
                            g.shape(v)
                        )));
                    }
                    v
                }
                None => g.constant(Tensor::zeros(&shape)),
            };
            sum = g.add(sum, b)?;
        }
        let (h, w) = (shape[2], shape[3]);
        let t = tokenize(g, sum)?;
        let table = positional_embedding(h, w, self.channels);
        let mut z = add_positional(g, t, &table)?;
        for layer in &self.layers {
            z = layer.forward(g, p, z)?;
        }
        let z = self.out_proj.forward(g, p, z)?;
        detokenize(g, z, h, w)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, inputs: &FusionInputs) -> Result<Var> {
        let a = self.attend(g, p, inputs)?;
        let y = g.add(a, inputs.x_main)?;
        self.c2f.forward(g, p, y)
    }

    /// Zero every attention and MLP weight (including the output projection).
    pub fn zero_attention(&self, store: &mut ParamStore) {
        for l in &self.layers {
            l.zero_branches(store);
        }
        self.out_proj.zero(store);
    }
}
