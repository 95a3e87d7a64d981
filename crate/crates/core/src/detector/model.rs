use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::fusion::{Fds, Fmsa, Fus, FusionInputs, NearestUpsample};
use crate::nn::{Bound, C2f, ConvBlock, ParamBuilder, ParamStore};
use crate::tensor::{Graph, Tensor, Var};

/// Stride of the single detection head.
pub const HEAD_STRIDE: usize = 8;

/// Backbone maps at strides 8, 16 and 32, plus the stride-8 FDS output when
/// FDS is enabled.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub p3: Var,
    pub p4: Var,
    pub p5: Var,
    pub fds_tap: Option<Var>,
}

/// Raw head logits `[B, 5+K, H/8, W/8]`; per cell the channels are
/// `[obj, cls_0..cls_{K-1}, tx, ty, tw, th]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub logits: Tensor,
    pub num_classes: usize,
}

impl HeadOutput {
    pub fn grid(&self) -> (usize, usize) {
        let s = self.logits.shape();
        (s[2], s[3])
    }
}

/// P3, the `(P4, P5)` pair when requested, and the FDS tap.
type BackboneOut = (Var, Option<(Var, Var)>, Option<Var>);

#[derive(Clone, Debug)]
enum Down {
    Conv(ConvBlock),
    Fds(Box<Fds>),
}

impl Down {
    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        match self {
            Down::Conv(c) => c.forward(g, p, x),
            Down::Fds(f) => f.forward(g, p, x),
        }
    }
}

#[derive(Clone, Debug)]
enum Neck {
    Plain(C2f),
    Fused {
        main_proj: Option<ConvBlock>,
        tap_proj: Option<ConvBlock>,
        fus: Option<Fus>,
        fallback: Option<NearestUpsample>,
        fmsa: Box<Fmsa>,
    },
}

/// Three-stage backbone, optional fusion neck and a single stride-8 head.
#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub store: ParamStore,
    stem: ConvBlock,
    s1_down: ConvBlock,
    s1: C2f,
    p3_down: Down,
    p3: C2f,
    p4_down: Down,
    p4: C2f,
    p5_down: ConvBlock,
    p5: C2f,
    neck: Neck,
    head_conv: ConvBlock,
    head_out: ConvBlock,
}

/// Zero mean, unit variance per image and channel.
fn standardize(g: &mut Graph, image: Var) -> Result<Var> {
    let s = g.shape(image).to_vec();
    let hw = s[2] * s[3];
    let flat = g.reshape(image, &[s[0], s[1], hw])?;
    let gamma = g.constant(Tensor::ones(&[hw]));
    let beta = g.constant(Tensor::zeros(&[hw]));
    let z = g.layer_norm(flat, gamma, beta, INPUT_EPS)?;
    g.reshape(z, &s)
}

const INPUT_EPS: f64 = 1e-6;

/// Internal C2F depth of each FDS block.
pub const FDS_C2F_DEPTH: usize = 1;

fn down(pb: &mut ParamBuilder, cfg: &ModelConfig, name: &str, cin: usize, cout: usize) -> Result<Down> {
    let f = &cfg.fusion;
    Ok(if f.enable_fds {
        Down::Fds(Box::new(Fds::new(
            pb,
            name,
            cin,
            cout,
            f.heads,
            f.mlp_ratio,
            FDS_C2F_DEPTH,
        )?))
    } else {
        Down::Conv(ConvBlock::new(pb, name, cin, cout, 3, 2, true))
    })
}

fn proj(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Option<ConvBlock> {
    (cin != cout).then(|| ConvBlock::new(pb, name, cin, cout, 1, 1, false))
}

impl Detector {
    /// Build and initialise a model; `seed` fixes every initial weight.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let cfg = config.clone();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pb = &mut ParamBuilder::new(&mut store, &mut rng);
        let [c1, c3, c4, c5] = cfg.widths;
        let d = cfg.depths;
        let f = &cfg.fusion;

        let stem = ConvBlock::new(pb, "stem", 3, cfg.stem_width, 3, 2, true);
        let s1_down = ConvBlock::new(pb, "s1.down", cfg.stem_width, c1, 3, 2, true);
        let s1 = C2f::new(pb, "s1.c2f", c1, c1, d.s1)?;
        let p3_down = down(pb, &cfg, "p3.down", c1, c3)?;
        let p3 = C2f::new(pb, "p3.c2f", c3, c3, d.p3)?;
        let p4_down = down(pb, &cfg, "p4.down", c3, c4)?;
        let p4 = C2f::new(pb, "p4.c2f", c4, c4, d.p4)?;
        let p5_down = ConvBlock::new(pb, "p5.down", c4, c5, 3, 2, true);
        let p5 = C2f::new(pb, "p5.c2f", c5, c5, d.p5)?;

        let neck = if f.enable_fmsa {
            let cf = f.channels;
            let main_proj = proj(pb, "neck.main_proj", c3, cf);
            let tap_proj = if f.enable_fds {
                proj(pb, "neck.tap_proj", c3, cf)
            } else {
                None
            };
            let fus = if f.enable_fus {
                Some(Fus::new(
                    pb,
                    "neck.fus",
                    c4,
                    c5,
                    cf,
                    f.heads,
                    f.mlp_ratio,
                    f.gaus_mode,
                    (f.fus_stride_p5, f.fus_stride_p4),
                )?)
            } else {
                None
            };
            let fallback =
                (!f.enable_fus && f.nearest_fallback).then(|| NearestUpsample::new(pb, "neck.upsample", c4, c5, cf));
            let fmsa = Fmsa::new(pb, "neck.fmsa", cf, c3, f.depth, f.heads, f.mlp_ratio, d.neck)?;
            Neck::Fused {
                main_proj,
                tap_proj,
                fus,
                fallback,
                fmsa: Box::new(fmsa),
            }
        } else {
            Neck::Plain(C2f::new(pb, "neck.c2f", c3, c3, d.neck)?)
        };

        let head_conv = ConvBlock::new(pb, "head.conv", c3, c3, 3, 1, true);
        let head_out = ConvBlock::new(pb, "head.out", c3, cfg.head_channels(), 1, 1, false);
        store.get_mut(head_out.b).data_mut()[0] = cfg.obj_prior;

        Ok(Detector {
            config: cfg,
            store,
            stem,
            s1_down,
            s1,
            p3_down,
            p3,
            p4_down,
            p4,
            p5_down,
            p5,
            neck,
            head_conv,
            head_out,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    fn check_input(&self, g: &Graph, image: Var) -> Result<()> {
        let s = g.shape(image);
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Input(format!("expected a [B,3,H,W] image batch, got {s:?}")));
        }
        if s[2] == 0 || s[3] == 0 || !s[2].is_multiple_of(32) || !s[3].is_multiple_of(32) {
            return Err(Error::Input(format!("image {}x{} is not divisible by 32", s[2], s[3])));
        }
        Ok(())
    }

    fn backbone(&self, g: &mut Graph, p: &Bound, image: Var, deep: bool) -> Result<BackboneOut> {
        self.check_input(g, image)?;
        let x = standardize(g, image)?;
        let x = self.stem.forward(g, p, x)?;
        let x = self.s1_down.forward(g, p, x)?;
        let x = self.s1.forward(g, p, x)?;
        let d3 = self.p3_down.forward(g, p, x)?;
        let tap = matches!(self.p3_down, Down::Fds(_)).then_some(d3);
        let p3 = self.p3.forward(g, p, d3)?;
        if !deep {
            return Ok((p3, None, tap));
        }
        let x = self.p4_down.forward(g, p, p3)?;
        let p4 = self.p4.forward(g, p, x)?;
        let x = self.p5_down.forward(g, p, p4)?;
        let p5 = self.p5.forward(g, p, x)?;
        Ok((p3, Some((p4, p5)), tap))
    }

    /// All three pyramid levels from one forward pass.
    pub fn backbone_forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<FeaturePyramid> {
        let (p3, deep, fds_tap) = self.backbone(g, p, image, true)?;
        let (p4, p5) = deep.expect("deep levels requested");
        Ok(FeaturePyramid { p3, p4, p5, fds_tap })
    }

    /// Head logits `[B, 5+K, H/8, W/8]` for an image batch `[B,3,H,W]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, image: Var) -> Result<Var> {
        let (p3, deep, tap) = self.backbone(g, p, image, self.config.needs_deep_levels())?;
        let neck = match &self.neck {
            Neck::Plain(c2f) => c2f.forward(g, p, p3)?,
            Neck::Fused {
                main_proj,
                tap_proj,
                fus,
                fallback,
                fmsa,
            } => {
                let x_main = match main_proj {
                    Some(c) => c.forward(g, p, p3)?,
                    None => p3,
                };
                let fds_out = match (tap, tap_proj) {
                    (Some(t), Some(c)) => Some(c.forward(g, p, t)?),
                    (t, _) => t,
                };
                let fus_out = match (deep, fus, fallback) {
                    (Some((p4, p5)), Some(m), _) => Some(m.forward(g, p, p4, p5)?),
                    (Some((p4, p5)), None, Some(m)) => Some(m.forward(g, p, p4, p5)?),
                    _ => None,
                };
                fmsa.forward(
                    g,
                    p,
                    &FusionInputs {
                        x_main,
                        fds_out,
                        fus_out,
                    },
                )?
            }
        };
        let h = self.head_conv.forward(g, p, neck)?;
        self.head_out.forward(g, p, h)
    }

    /// Inference on a constant batch.
    pub fn predict(&self, images: &Tensor) -> Result<HeadOutput> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.constant(images.clone());
        let y = self.forward(&mut g, &p, x)?;
        Ok(HeadOutput {
            logits: g.value(y).clone(),
            num_classes: self.config.num_classes,
        })
    }

    /// Zero every attention and MLP weight of the FMSA block, if present.
    pub fn zero_fmsa_attention(&mut self) {
        if let Neck::Fused { fmsa, .. } = &self.neck {
            let fmsa = fmsa.clone();
            fmsa.zero_attention(&mut self.store);
        }
    }
}
