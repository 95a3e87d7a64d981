//! Token-level blocks: multi-head self-attention, the pre-norm encoder layer,
//! sinusoidal positional tables and the map <-> token reshapes.

use super::layers::{LayerNorm, Linear, Mlp};
use super::params::{Bound, ParamBuilder, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// `[B,C,H,W] -> [B,H*W,C]`; token `p` is the channel vector of pixel `p` in raster order.
pub fn tokenize(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::dim(format!("tokenize expects [B,C,H,W], got {s:?}")));
    }
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.permute(flat, &[0, 2, 1])
}

/// Inverse of [`tokenize`].
pub fn detokenize(g: &mut Graph, tokens: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 3 || s[1] != h * w {
        return Err(Error::dim(format!(
            "detokenize to {h}x{w} needs [B,{},C], got {s:?}",
            h * w
        )));
    }
    let t = g.permute(tokens, &[0, 2, 1])?;
    g.reshape(t, &[s[0], s[2], h, w])
}

/// Sinusoidal table of shape `[h*w, c]` indexed by raster position.
///
/// Channel `2i` carries `sin(pos / 10000^(2i/c))` and channel `2i+1` the
/// matching cosine.
pub fn positional_embedding(h: usize, w: usize, c: usize) -> Tensor {
    let n = h * w;
    Tensor::from_fn(&[n, c], |idx| {
        let (pos, ch) = (idx / c, idx % c);
        let i = (ch / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / c as f64);
        if ch % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Add a `[N,C]` table to every batch element of `[B,N,C]` tokens.
pub fn add_positional(g: &mut Graph, tokens: Var, table: &Tensor) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 3 || table.shape() != [s[1], s[2]] {
        return Err(Error::dim(format!(
            "positional table {:?} does not match token grid {s:?}",
            table.shape()
        )));
    }
    let mut data = Vec::with_capacity(s[0] * table.len());
    for _ in 0..s[0] {
        data.extend_from_slice(table.data());
    }
    let e = g.constant(Tensor::new(&s, data)?);
    g.add(tokens, e)
}

#[derive(Clone, Debug)]
pub struct Msa {
    pub heads: usize,
    pub dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl Msa {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "embedding dim {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Msa {
            heads,
            dim,
            q: Linear::new(pb, &format!("{name}.q"), dim, dim),
            k: Linear::new(pb, &format!("{name}.k"), dim, dim),
            v: Linear::new(pb, &format!("{name}.v"), dim, dim),
            out: Linear::new(pb, &format!("{name}.out"), dim, dim),
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<Var> {
        Ok(self.forward_with_attention(g, p, tokens)?.0)
    }

    /// Output tokens plus the `[B,heads,N,N]` attention weights.
    pub fn forward_with_attention(&self, g: &mut Graph, p: &Bound, tokens: Var) -> Result<(Var, Var)> {
        let s = g.shape(tokens).to_vec();
        if s.len() != 3 || s[2] != self.dim || s[1] == 0 {
            return Err(Error::dim(format!(
                "attention expects [B,N,{}] tokens, got {s:?}",
                self.dim
            )));
        }
        let (b, n, h, d) = (s[0], s[1], self.heads, self.head_dim());
        let q = self.q.forward(g, p, tokens)?;
        let q = g.reshape(q, &[b, n, h, d])?;
        let q = g.permute(q, &[0, 2, 1, 3])?;
        let k = self.k.forward(g, p, tokens)?;
        let k = g.reshape(k, &[b, n, h, d])?;
        let kt = g.permute(k, &[0, 2, 3, 1])?;
        let v = self.v.forward(g, p, tokens)?;
        let v = g.reshape(v, &[b, n, h, d])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;

        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = g.softmax(scores, 3)?;
        let ctx = g.matmul(attn, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, n, self.dim])?;
        Ok((self.out.forward(g, p, ctx)?, attn))
    }

    pub fn zero(&self, store: &mut ParamStore) {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.zero(store);
        }
    }

    pub fn params(&self) -> usize {
        4 * self.q.params()
    }
}

/// Pre-norm transformer layer: `z' = MSA(LN(z)) + z`, `out = MLP(LN(z')) + z'`.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub msa: Msa,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderLayer {
    pub fn new(pb: &mut ParamBuilder, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<Self> {
        Ok(EncoderLayer {
            ln1: LayerNorm::new(pb, &format!("{name}.ln1"), dim),
            msa: Msa::new(pb, &format!("{name}.msa"), dim, heads)?,
            ln2: LayerNorm::new(pb, &format!("{name}.ln2"), dim),
            mlp: Mlp::new(pb, &format!("{name}.mlp"), dim, mlp_ratio * dim, dim),
        })
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var) -> Result<Var> {
        let n = self.ln1.forward(g, p, z)?;
        let a = self.msa.forward(g, p, n)?;
        let z1 = g.add(a, z)?;
        let n = self.ln2.forward(g, p, z1)?;
        let m = self.mlp.forward(g, p, n)?;
        g.add(m, z1)
    }

    /// Zero the attention and MLP weights, leaving only the residual path.
    pub fn zero_branches(&self, store: &mut ParamStore) {
        self.msa.zero(store);
        self.mlp.zero(store);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tokenize_layout() {
        // channel 0 = [[a,b]], channel 1 = [[c,d]]
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let t = tokenize(&mut g, x).unwrap();
        assert_eq!(g.shape(t), &[1, 2, 2]);
        assert_eq!(g.value(t).data(), &[1.0, 3.0, 2.0, 4.0]);
        let back = detokenize(&mut g, t, 1, 2).unwrap();
        assert_eq!(g.value(back), g.value(x));
    }

    #[test]
    fn positional_row_zero_is_sin0_cos0() {
        let e = positional_embedding(1, 1, 6);
        assert_eq!(e.shape(), &[1, 6]);
        assert_eq!(e.data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn positional_values_bounded_and_reproducible() {
        let a = positional_embedding(4, 5, 8);
        let b = positional_embedding(4, 5, 8);
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        // channel 2 of position 3: sin(3 / 10000^(2/8))
        let want = (3.0 / 10000f64.powf(0.25)).sin();
        assert_eq!(a.data()[3 * 8 + 2], want);
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        assert!(matches!(Msa::new(&mut pb, "m", 10, 4), Err(Error::Config(_))));
    }
}
