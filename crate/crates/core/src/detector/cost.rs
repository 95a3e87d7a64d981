//! Analytic parameter and FLOP counts.
//!
//! A multiply-add counts as two FLOPs. Convolutions cost `2 k^2 Cin Cout H' W'`,
//! linear maps `2 N in out`, and multi-head self-attention over `G` groups of
//! `N` tokens of width `C` costs `8 G N C^2 + 4 G N^2 C` (the four projections
//! plus the score and mixing products). Biases, normalisation, activations and
//! elementwise ops are not counted. FLOPs cover one image of the configured
//! size along the path that actually executes; parameters cover every tensor.

use std::ops::{Add, AddAssign};

use super::config::ModelConfig;
use super::model::FDS_C2F_DEPTH;
use crate::error::{Error, Result};
use crate::fusion::{Gaus, GausMode};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Cost {
    pub params: u64,
    pub flops: u64,
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            params: self.params + o.params,
            flops: self.flops + o.flops,
        }
    }
}

impl AddAssign for Cost {
    fn add_assign(&mut self, o: Cost) {
        *self = *self + o;
    }
}

impl Cost {
    /// Same parameters, FLOPs dropped (for layers that are built but not run).
    fn idle(self) -> Cost {
        Cost {
            params: self.params,
            flops: 0,
        }
    }
}

fn u(x: usize) -> u64 {
    x as u64
}

/// Square convolution with bias on an `h x w` input; also returns the output size.
pub fn conv_cost(cin: usize, cout: usize, k: usize, stride: usize, h: usize, w: usize) -> (Cost, usize, usize) {
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let c = Cost {
        params: u(k * k * cin * cout + cout),
        flops: 2 * u(k * k) * u(cin) * u(cout) * u(oh) * u(ow),
    };
    (c, oh, ow)
}

pub fn linear_cost(tokens: usize, din: usize, dout: usize) -> Cost {
    Cost {
        params: u(din * dout + dout),
        flops: 2 * u(tokens) * u(din) * u(dout),
    }
}

pub fn layer_norm_cost(dim: usize) -> Cost {
    Cost {
        params: 2 * u(dim),
        flops: 0,
    }
}

/// Multi-head self-attention over `groups` independent sets of `tokens` tokens.
pub fn msa_cost(groups: usize, tokens: usize, dim: usize) -> Cost {
    let (g, n, c) = (u(groups), u(tokens), u(dim));
    Cost {
        params: 4 * (c * c + c),
        flops: 8 * g * n * c * c + 4 * g * n * n * c,
    }
}

fn mlp_cost(tokens: usize, din: usize, hidden: usize, dout: usize) -> Cost {
    linear_cost(tokens, din, hidden) + linear_cost(tokens, hidden, dout)
}

pub fn c2f_cost(cin: usize, cout: usize, n: usize, h: usize, w: usize) -> Cost {
    let hid = cout / 2;
    let mut c = conv_cost(cin, 2 * hid, 1, 1, h, w).0;
    for _ in 0..n {
        c += conv_cost(hid, hid, 3, 1, h, w).0;
        c += conv_cost(hid, hid, 3, 1, h, w).0;
    }
    c + conv_cost((2 + n) * hid, cout, 1, 1, h, w).0
}

pub fn encoder_cost(tokens: usize, dim: usize, ratio: usize) -> Cost {
    layer_norm_cost(dim) + msa_cost(1, tokens, dim) + layer_norm_cost(dim) + mlp_cost(tokens, dim, ratio * dim, dim)
}

/// Local attention downsample by 2 of a `c x h x w` map.
pub fn lads_cost(c: usize, ratio: usize, h: usize, w: usize) -> Cost {
    let groups = (h / 2) * (w / 2);
    layer_norm_cost(c) + msa_cost(groups, 4, c) + mlp_cost(groups, c, ratio * c, c)
}

pub fn fds_cost(cin: usize, cout: usize, ratio: usize, h: usize, w: usize) -> Cost {
    let half = cout / 2;
    let (conv, oh, ow) = conv_cost(cin, half, 3, 2, h, w);
    conv + lads_cost(cin, ratio, h, w)
        + conv_cost(cin, half, 1, 1, oh, ow).0
        + c2f_cost(cout, cout, FDS_C2F_DEPTH, oh, ow)
}

pub fn gaus_cost(c: usize, stride: usize, ratio: usize, mode: GausMode, h: usize, w: usize) -> Result<Cost> {
    let out = match mode {
        GausMode::Replicate => Gaus::out_channels(c, stride, mode)?,
        GausMode::PixelShuffle => c,
    };
    let n = h * w;
    Ok(layer_norm_cost(c) + msa_cost(1, n, c) + mlp_cost(n, c, ratio * c, out))
}

/// Parameter count and forward FLOPs of the whole detector.
pub fn count_params_flops(cfg: &ModelConfig) -> Result<Cost> {
    cfg.validate()?;
    let f = &cfg.fusion;
    let d = cfg.depths;
    let [c1, c3, c4, c5] = cfg.widths;
    let s = cfg.image_size;
    let deep = cfg.needs_deep_levels();
    let gate = |c: Cost, run: bool| if run { c } else { c.idle() };

    let mut total = Cost::default();
    let (c, h, w) = conv_cost(3, cfg.stem_width, 3, 2, s, s);
    total += c;
    let (c, h, w) = conv_cost(cfg.stem_width, c1, 3, 2, h, w);
    total += c + c2f_cost(c1, c1, d.s1, h, w);

    let down = |cin: usize, cout: usize, h: usize, w: usize| {
        if f.enable_fds {
            fds_cost(cin, cout, f.mlp_ratio, h, w)
        } else {
            conv_cost(cin, cout, 3, 2, h, w).0
        }
    };
    let (h3, w3) = (h / 2, w / 2);
    total += down(c1, c3, h, w) + c2f_cost(c3, c3, d.p3, h3, w3);
    let (h4, w4) = (h3 / 2, w3 / 2);
    total += gate(down(c3, c4, h3, w3) + c2f_cost(c4, c4, d.p4, h4, w4), deep);
    let (h5, w5) = (h4 / 2, w4 / 2);
    total += gate(conv_cost(c4, c5, 3, 2, h4, w4).0 + c2f_cost(c5, c5, d.p5, h5, w5), deep);

    if f.enable_fmsa {
        let cf = f.channels;
        if c3 != cf {
            total += conv_cost(c3, cf, 1, 1, h3, w3).0;
            if f.enable_fds {
                total += conv_cost(c3, cf, 1, 1, h3, w3).0;
            }
        }
        if f.enable_fus {
            let o5 = Gaus::out_channels(c5, f.fus_stride_p5, f.gaus_mode)?;
            let o4 = Gaus::out_channels(c4, f.fus_stride_p4, f.gaus_mode)?;
            total += gaus_cost(c5, f.fus_stride_p5, f.mlp_ratio, f.gaus_mode, h5, w5)?;
            total += gaus_cost(c4, f.fus_stride_p4, f.mlp_ratio, f.gaus_mode, h4, w4)?;
            total += conv_cost(o5, cf, 1, 1, h3, w3).0 + conv_cost(o4, cf, 1, 1, h3, w3).0;
        } else if f.nearest_fallback {
            total += conv_cost(c5, cf, 1, 1, h5, w5).0 + conv_cost(c4, cf, 1, 1, h4, w4).0;
        }
        let n = h3 * w3;
        for _ in 0..f.depth {
            total += encoder_cost(n, cf, f.mlp_ratio);
        }
        total += linear_cost(n, cf, cf) + c2f_cost(cf, c3, d.neck, h3, w3);
    } else {
        total += c2f_cost(c3, c3, d.neck, h3, w3);
    }
    total += conv_cost(c3, c3, 3, 1, h3, w3).0 + conv_cost(c3, cfg.head_channels(), 1, 1, h3, w3).0;
    Ok(total)
}

/// Allowed relative parameter gap between any setting and its baseline.
pub const PARAM_TOLERANCE: f64 = 0.05;

#[derive(Clone, Debug)]
pub struct Compensation {
    pub config: ModelConfig,
    pub params: u64,
    pub baseline_params: u64,
}

impl Compensation {
    pub fn relative_gap(&self) -> f64 {
        (self.params as f64 - self.baseline_params as f64).abs() / self.baseline_params as f64
    }
}

/// Search block counts no deeper than `cfg.depths` for the one whose
/// parameter count is closest to the fusion-free model at `cfg.depths`.
/// Ties go to the deeper network. Fails if the best gap exceeds
/// [`PARAM_TOLERANCE`].
pub fn compensate(cfg: &ModelConfig) -> Result<Compensation> {
    let baseline = count_params_flops(&cfg.as_baseline())?.params;
    let mut best: Option<(u64, usize, ModelConfig, u64)> = None;
    for depths in cfg.depths.reductions() {
        let mut c = cfg.clone();
        c.depths = depths;
        let p = count_params_flops(&c)?.params;
        let gap = p.abs_diff(baseline);
        let better = match &best {
            None => true,
            Some((bg, bt, _, _)) => gap < *bg || (gap == *bg && depths.total() > *bt),
        };
        if better {
            best = Some((gap, depths.total(), c, p));
        }
    }
    let (_, _, config, params) = best.expect("at least one depth vector");
    let out = Compensation {
        config,
        params,
        baseline_params: baseline,
    };
    if out.relative_gap() > PARAM_TOLERANCE {
        return Err(Error::config(format!(
            "no depth reduction brings {} params within {:.0}% of the baseline {}",
            out.params,
            PARAM_TOLERANCE * 100.0,
            baseline
        )));
    }
    Ok(out)
}
