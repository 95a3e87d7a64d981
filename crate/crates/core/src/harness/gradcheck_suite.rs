use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::GroundTruthBox;
use crate::detector::{compute_loss, BoxLoss, Depths, Detector, ModelConfig};
use crate::error::Result;
use crate::fusion::{Fds, Fmsa, Fus, FusionConfig, FusionInputs, Gaus, GausMode, Lads};
use crate::gradcheck::{grad_check, GradCheckOptions};
use crate::nn::{Bound, C2f, EncoderLayer, Msa, ParamBuilder, ParamStore};
use crate::tensor::{Graph, Tensor, UnaryOp, Var};

/// Result of checking one block at one shape.
#[derive(Clone, Debug)]
pub struct BlockReport {
    pub block: &'static str,
    pub shape: String,
    pub max_rel_error: f64,
    pub probes: usize,
    pub wall: Duration,
    pub tolerance: f64,
}

impl BlockReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tolerance
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub check: GradCheckOptions,
    pub shapes_per_block: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            check: GradCheckOptions {
                max_probes_per_input: Some(12),
                ..Default::default()
            },
            shapes_per_block: 3,
            seed: 7,
        }
    }
}

/// Every block the suite covers, in report order.
pub const SUITE_BLOCKS: [&str; 15] = [
    "matmul",
    "softmax",
    "layer_norm",
    "conv2d",
    "unary",
    "msa",
    "encoder",
    "c2f",
    "lads",
    "fds",
    "gaus",
    "fus",
    "fmsa",
    "loss",
    "detector",
];

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// `sum((y - y0) * R)` for a fixed pseudo-random `R` and the output `y0` at the
/// unperturbed inputs. Subtracting `y0` leaves the gradient unchanged and keeps
/// large constant offsets out of the finite-difference roundoff.
fn project(g: &mut Graph, y: Var, y0: &Tensor) -> Result<Var> {
    let r = uniform(y0.shape(), &mut ChaCha8Rng::seed_from_u64(0x5EED));
    let r = g.constant(r);
    let c = g.constant(y0.clone());
    let d = g.sub(y, c)?;
    let p = g.mul(d, r)?;
    Ok(g.sum_all(p))
}

fn with_params(store: &ParamStore, mut inputs: Vec<Tensor>) -> (usize, Vec<Tensor>) {
    let n = inputs.len();
    inputs.extend(store.tensors().iter().cloned());
    (n, inputs)
}

/// Randomise every parameter so zero-initialised biases and unit norms do
/// not hide broken terms.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
}

fn run_case(
    block: &'static str,
    shape: String,
    inputs: Vec<Tensor>,
    opts: &SuiteOptions,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<BlockReport> {
    let start = Instant::now();
    let y0 = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        g.value(y).clone()
    };
    let checked = |g: &mut Graph, v: &[Var]| {
        let y = f(g, v)?;
        project(g, y, &y0)
    };
    let r = grad_check(checked, &inputs, opts.check)?;
    Ok(BlockReport {
        block,
        shape,
        max_rel_error: r.max_rel_error,
        probes: r.probes,
        wall: start.elapsed(),
        tolerance: r.tolerance,
    })
}

fn builder_case<B>(
    block: &'static str,
    shape: String,
    x: Vec<Tensor>,
    rng: &mut ChaCha8Rng,
    opts: &SuiteOptions,
    build: impl FnOnce(&mut ParamBuilder) -> Result<B>,
    fwd: impl Fn(&B, &mut Graph, &Bound, &[Var]) -> Result<Var>,
) -> Result<BlockReport> {
    let mut store = ParamStore::new();
    let mut prng = ChaCha8Rng::seed_from_u64(rng.gen());
    let b = build(&mut ParamBuilder::new(&mut store, &mut prng))?;
    jitter(&mut store, rng);
    let (n, inputs) = with_params(&store, x);
    run_case(block, shape, inputs, opts, |g, v| {
        let p = store.bind_vars(&v[n..]);
        let y = fwd(&b, g, &p, &v[..n])?;
        Ok(y)
    })
}

fn case(block: &'static str, rng: &mut ChaCha8Rng, opts: &SuiteOptions) -> Result<BlockReport> {
    let heads = 2;
    match block {
        "matmul" => {
            let (b, m, k, n) = (
                rng.gen_range(1..3),
                rng.gen_range(1..5),
                rng.gen_range(1..5),
                rng.gen_range(1..5),
            );
            let inputs = vec![uniform(&[b, m, k], rng), uniform(&[b, k, n], rng)];
            run_case(block, format!("[{b},{m},{k}]x[{b},{k},{n}]"), inputs, opts, |g, v| {
                let y = g.matmul(v[0], v[1])?;
                Ok(y)
            })
        }
        "softmax" => {
            let (r, c) = (rng.gen_range(1..4), rng.gen_range(2..7));
            let x = Tensor::uniform(&[r, c], 3.0, rng);
            run_case(block, format!("[{r},{c}] axis 1"), vec![x], opts, |g, v| {
                let y = g.softmax(v[0], 1)?;
                Ok(y)
            })
        }
        "layer_norm" => {
            let (r, c) = (rng.gen_range(1..4), rng.gen_range(2..7));
            let inputs = vec![uniform(&[r, c], rng), uniform(&[c], rng), uniform(&[c], rng)];
            run_case(block, format!("[{r},{c}]"), inputs, opts, |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                Ok(y)
            })
        }
        "conv2d" => {
            let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let (h, w) = (rng.gen_range(3..7), rng.gen_range(3..7));
            let k = [1, 3][rng.gen_range(0..2)];
            let stride = rng.gen_range(1..3);
            let inputs = vec![
                uniform(&[1, cin, h, w], rng),
                uniform(&[cout, cin, k, k], rng),
                uniform(&[cout], rng),
            ];
            run_case(
                block,
                format!("[1,{cin},{h},{w}] k{k} s{stride} -> {cout}"),
                inputs,
                opts,
                move |g, v| {
                    let y = g.conv2d(v[0], v[1], Some(v[2]), stride, k / 2)?;
                    Ok(y)
                },
            )
        }
        "unary" => {
            let n = rng.gen_range(3..8);
            let x = Tensor::from_fn(&[n], |_| {
                rng.gen_range(0.2..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }
            });
            run_case(
                block,
                format!("[{n}] silu/sigmoid/exp/atan/softplus/square/log|x|"),
                vec![x],
                opts,
                |g, v| {
                    let mut acc = g.constant(Tensor::zeros(&[n]));
                    for op in [
                        UnaryOp::Silu,
                        UnaryOp::Sigmoid,
                        UnaryOp::Exp,
                        UnaryOp::Atan,
                        UnaryOp::Softplus,
                        UnaryOp::Square,
                    ] {
                        let y = g.unary(op, v[0]);
                        acc = g.add(acc, y)?;
                    }
                    let a = g.unary(UnaryOp::Abs, v[0]);
                    let l = g.unary(UnaryOp::Log, a);
                    let acc = g.add(acc, l)?;
                    Ok(acc)
                },
            )
        }
        "msa" => {
            let (b, n, dh) = (rng.gen_range(1..3), rng.gen_range(2..6), rng.gen_range(1..4));
            let c = heads * dh;
            let x = uniform(&[b, n, c], rng);
            builder_case(
                block,
                format!("[{b},{n},{c}] h{heads}"),
                vec![x],
                rng,
                opts,
                |pb| Msa::new(pb, "msa", c, heads),
                |m, g, p, v| m.forward(g, p, v[0]),
            )
        }
        "encoder" => {
            let (n, dh) = (rng.gen_range(2..6), rng.gen_range(1..4));
            let c = heads * dh;
            let x = uniform(&[1, n, c], rng);
            builder_case(
                block,
                format!("[1,{n},{c}] h{heads} mlp x2"),
                vec![x],
                rng,
                opts,
                |pb| EncoderLayer::new(pb, "enc", c, heads, 2),
                |m, g, p, v| m.forward(g, p, v[0]),
            )
        }
        "c2f" => {
            let (cin, cout) = (rng.gen_range(1..5), 2 * rng.gen_range(1..3));
            let (h, w, n) = (rng.gen_range(2..5), rng.gen_range(2..5), rng.gen_range(1..3));
            let x = uniform(&[1, cin, h, w], rng);
            builder_case(
                block,
                format!("[1,{cin},{h},{w}] -> {cout}, n={n}"),
                vec![x],
                rng,
                opts,
                |pb| C2f::new(pb, "c2f", cin, cout, n),
                |m, g, p, v| m.forward(g, p, v[0]),
            )
        }
        "lads" => {
            let c = heads * rng.gen_range(1..3);
            let (h, w) = (2 * rng.gen_range(1..3), 2 * rng.gen_range(1..3));
            let x = uniform(&[1, c, h, w], rng);
            builder_case(
                block,
                format!("[1,{c},{h},{w}] patch 2"),
                vec![x],
                rng,
                opts,
                |pb| Lads::new(pb, "lads", c, heads, 2, 2),
                |m, g, p, v| m.forward(g, p, v[0]),
            )
        }
        "fds" => {
            let cin = heads * rng.gen_range(1..3);
            let cout = 2 * rng.gen_range(1..3);
            let (h, w) = (2 * rng.gen_range(1..3), 2 * rng.gen_range(1..3));
            let x = uniform(&[1, cin, h, w], rng);
            builder_case(
                block,
                format!("[1,{cin},{h},{w}] -> {cout}"),
                vec![x],
                rng,
                opts,
                |pb| Fds::new(pb, "fds", cin, cout, heads, 2, 1),
                |m, g, p, v| m.forward(g, p, v[0]),
            )
        }
        "gaus" => {
            let stride = rng.gen_range(1..3);
            let mode = if rng.gen_bool(0.5) {
                GausMode::Replicate
            } else {
                GausMode::PixelShuffle
            };
            let c = 4;
            let (h, w) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let x = uniform(&[1, c, h, w], rng);
            builder_case(
                block,
                format!("[1,{c},{h},{w}] stride {stride} {mode:?}"),
                vec![x],
                rng,
                opts,
                |pb| Gaus::new(pb, "gaus", c, stride, heads, 2, mode),
                |m, g, p, v| m.forward(g, p, v[0]),
            )
        }
        "fus" => {
            let (c4, c5, out) = (4, 8, 2 * rng.gen_range(1..3));
            let (h, w) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let p5 = uniform(&[1, c5, h, w], rng);
            let p4 = uniform(&[1, c4, 2 * h, 2 * w], rng);
            builder_case(
                block,
                format!("P4 [1,{c4},{},{}] P5 [1,{c5},{h},{w}] -> {out}", 2 * h, 2 * w),
                vec![p4, p5],
                rng,
                opts,
                |pb| Fus::new(pb, "fus", c4, c5, out, heads, 2, GausMode::Replicate, (4, 2)),
                |m, g, p, v| m.forward(g, p, v[0], v[1]),
            )
        }
        "fmsa" => {
            let c = heads * rng.gen_range(1..3);
            let out = 2 * rng.gen_range(1..3);
            let (h, w) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let xs: Vec<Tensor> = (0..3).map(|_| uniform(&[1, c, h, w], rng)).collect();
            builder_case(
                block,
                format!("3 x [1,{c},{h},{w}] -> {out}"),
                xs,
                rng,
                opts,
                |pb| Fmsa::new(pb, "fmsa", c, out, 1, heads, 2, 1),
                |m, g, p, v| {
                    let inputs = FusionInputs {
                        x_main: v[0],
                        fds_out: Some(v[1]),
                        fus_out: Some(v[2]),
                    };
                    m.forward(g, p, &inputs)
                },
            )
        }
        "loss" => {
            let k = rng.gen_range(1..4);
            let grid = rng.gen_range(2..5);
            let kind = if rng.gen_bool(0.5) { BoxLoss::Ciou } else { BoxLoss::L1 };
            let truths: Vec<GroundTruthBox> = (0..rng.gen_range(1..4))
                .map(|_| {
                    GroundTruthBox::new(
                        rng.gen_range(0..k),
                        rng.gen_range(0.1..0.9),
                        rng.gen_range(0.1..0.9),
                        rng.gen_range(0.05..0.4),
                        rng.gen_range(0.05..0.4),
                    )
                })
                .collect::<Result<_>>()?;
            let head = uniform(&[1, 5 + k, grid, grid], rng);
            run_case(
                block,
                format!("[1,{},{grid},{grid}] {} truths {kind:?}", 5 + k, truths.len()),
                vec![head],
                opts,
                move |g, v| Ok(compute_loss(g, v[0], std::slice::from_ref(&truths), k, kind)?.total),
            )
        }
        "detector" => {
            let setting = rng.gen_range(0..5);
            let cfg = ModelConfig {
                image_size: 32,
                stem_width: 2,
                widths: [4, 4, 8, 8],
                depths: Depths {
                    s1: 1,
                    p3: 1,
                    p4: 1,
                    p5: 1,
                    neck: 1,
                },
                fusion: FusionConfig {
                    heads,
                    ..FusionConfig::setting(setting, 4)?
                },
                num_classes: 2,
                ..Default::default()
            };
            let mut model = Detector::new(&cfg, rng.gen())?;
            jitter(&mut model.store, rng);
            let x = Tensor::uniform(&[1, 3, 32, 32], 1.0, rng);
            let (n, inputs) = with_params(&model.store, vec![x]);
            run_case(block, format!("[1,3,32,32] setting {setting}"), inputs, opts, |g, v| {
                let p = model.store.bind_vars(&v[n..]);
                let y = model.forward(g, &p, v[0])?;
                Ok(y)
            })
        }
        other => unreachable!("unknown block {other}"),
    }
}

/// Check every entry of [`SUITE_BLOCKS`] at `shapes_per_block` random shapes.
pub fn run_gradcheck_suite(opts: &SuiteOptions, mut on_case: impl FnMut(&BlockReport)) -> Result<Vec<BlockReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();
    for block in SUITE_BLOCKS {
        for _ in 0..opts.shapes_per_block {
            let r = case(block, &mut rng, opts)?;
            on_case(&r);
            out.push(r);
        }
    }
    Ok(out)
}
