use super::layers::ConvBlock;
use super::params::{Bound, ParamBuilder};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Residual pair of 3x3 convolutions at constant width.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub cv1: ConvBlock,
    pub cv2: ConvBlock,
}

/// Split-transform-concat block: a 1x1 conv to `2h` channels, split in two,
/// `n` residual bottlenecks chained on the second half, every intermediate
/// concatenated, then a 1x1 conv to the output width.
#[derive(Clone, Debug)]
pub struct C2f {
    pub cv1: ConvBlock,
    pub blocks: Vec<Bottleneck>,
    pub cv2: ConvBlock,
    pub hidden: usize,
}

pub const C2F_HIDDEN_RATIO: f64 = 0.5;

impl C2f {
    pub fn new(pb: &mut ParamBuilder, name: &str, in_ch: usize, out_ch: usize, n: usize) -> Result<Self> {
        let hidden = (out_ch as f64 * C2F_HIDDEN_RATIO) as usize;
        if hidden == 0 || !out_ch.is_multiple_of(2) {
            return Err(Error::config(format!(
                "C2F output width {out_ch} cannot be split into two equal hidden halves"
            )));
        }
        let cv1 = ConvBlock::new(pb, &format!("{name}.cv1"), in_ch, 2 * hidden, 1, 1, true);
        let blocks = (0..n)
            .map(|i| Bottleneck {
                cv1: ConvBlock::new(pb, &format!("{name}.m{i}.cv1"), hidden, hidden, 3, 1, true),
                cv2: ConvBlock::new(pb, &format!("{name}.m{i}.cv2"), hidden, hidden, 3, 1, true),
            })
            .collect();
        let cv2 = ConvBlock::new(pb, &format!("{name}.cv2"), (2 + n) * hidden, out_ch, 1, 1, true);
        Ok(C2f {
            cv1,
            blocks,
            cv2,
            hidden,
        })
    }

    pub fn out_ch(&self) -> usize {
        self.cv2.out_ch
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let y = self.cv1.forward(g, p, x)?;
        let halves = g.split(y, 1, &[self.hidden, self.hidden])?;
        let mut branches = halves.clone();
        let mut cur = halves[1];
        for b in &self.blocks {
            let t = b.cv1.forward(g, p, cur)?;
            let t = b.cv2.forward(g, p, t)?;
            cur = g.add(cur, t)?;
            branches.push(cur);
        }
        let cat = g.concat(&branches, 1)?;
        self.cv2.forward(g, p, cat)
    }

    pub fn params(&self) -> usize {
        self.cv1.params()
            + self
                .blocks
                .iter()
                .map(|b| b.cv1.params() + b.cv2.params())
                .sum::<usize>()
            + self.cv2.params()
    }
}
