//! Shape contracts, attention invariants, residual degeneracy and composite
//! gradient checks of the fusion blocks.

use fusenet_core::detector::{Depths, Detector, ModelConfig};
use fusenet_core::fusion::{Fds, Fmsa, Fus, FusionConfig, FusionInputs, Gaus, GausMode};
use fusenet_core::gradcheck::{grad_check, GradCheckOptions};
use fusenet_core::nn::{C2f, EncoderLayer, Msa, ParamBuilder, ParamStore};
use fusenet_core::{Graph, Result, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SIZES: [usize; 3] = [64, 96, 128];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn shape_of(g: &Graph, v: Var) -> Vec<usize> {
    g.shape(v).to_vec()
}

fn jitter(store: &mut ParamStore, r: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v += r.gen_range(-0.2..0.2);
        }
    }
}

#[test]
fn fusion_shapes_over_the_size_set() {
    let (c3, c4, c5, cf) = (32, 64, 128, 32);
    let mut store = ParamStore::new();
    let mut prng = rng(1);
    let mut pb = ParamBuilder::new(&mut store, &mut prng);
    let fds = Fds::new(&mut pb, "fds", c3 / 2, c3, 4, 2, 1).unwrap();
    let gaus5 = Gaus::new(&mut pb, "g5", c5, 4, 4, 2, GausMode::Replicate).unwrap();
    let gaus4 = Gaus::new(&mut pb, "g4", c4, 2, 4, 2, GausMode::Replicate).unwrap();
    let shuffle5 = Gaus::new(&mut pb, "s5", c5, 4, 4, 2, GausMode::PixelShuffle).unwrap();
    let fus = Fus::new(&mut pb, "fus", c4, c5, cf, 4, 2, GausMode::Replicate, (4, 2)).unwrap();
    let fmsa = Fmsa::new(&mut pb, "fmsa", cf, c3, 1, 4, 2, 1).unwrap();
    let mut r = rng(2);
    for s in SIZES {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x4 = g.constant(Tensor::uniform(&[1, c3 / 2, s / 4, s / 4], 1.0, &mut r));
        let p4 = g.constant(Tensor::uniform(&[1, c4, s / 16, s / 16], 1.0, &mut r));
        let p5 = g.constant(Tensor::uniform(&[1, c5, s / 32, s / 32], 1.0, &mut r));
        let main = g.constant(Tensor::uniform(&[1, cf, s / 8, s / 8], 1.0, &mut r));

        let d = fds.forward(&mut g, &p, x4).unwrap();
        assert_eq!(shape_of(&g, d), [1, c3, s / 8, s / 8], "FDS halves H, W at {s}");

        let u5 = gaus5.forward(&mut g, &p, p5).unwrap();
        assert_eq!(shape_of(&g, u5), [1, c5 / 4, s / 8, s / 8], "GAUS x4 at {s}");
        let u4 = gaus4.forward(&mut g, &p, p4).unwrap();
        assert_eq!(shape_of(&g, u4), [1, c4 / 2, s / 8, s / 8], "GAUS x2 at {s}");
        let v5 = shuffle5.forward(&mut g, &p, p5).unwrap();
        assert_eq!(
            shape_of(&g, v5),
            [1, c5 / 16, s / 8, s / 8],
            "pixel-shuffle GAUS at {s}"
        );

        let f = fus.forward(&mut g, &p, p4, p5).unwrap();
        assert_eq!(shape_of(&g, f), [1, cf, s / 8, s / 8], "FUS lands at H/8 at {s}");

        let inputs = FusionInputs {
            x_main: main,
            fds_out: Some(main),
            fus_out: Some(f),
        };
        let y = fmsa.forward(&mut g, &p, &inputs).unwrap();
        assert_eq!(shape_of(&g, y)[2..], [s / 8, s / 8], "FMSA preserves H, W at {s}");
    }
}

#[test]
fn detector_pyramid_over_the_size_set() {
    for s in SIZES {
        for setting in 0..5 {
            let cfg = ModelConfig {
                image_size: s,
                fusion: FusionConfig::setting(setting, 32).unwrap(),
                ..Default::default()
            };
            let m = Detector::new(&cfg, 3).unwrap();
            let mut g = Graph::new();
            let p = m.store.bind(&mut g, false);
            let x = g.constant(Tensor::uniform(&[1, 3, s, s], 1.0, &mut rng(4)));
            let fp = m.backbone_forward(&mut g, &p, x).unwrap();
            assert_eq!(shape_of(&g, fp.p3), [1, 32, s / 8, s / 8]);
            assert_eq!(shape_of(&g, fp.p4), [1, 64, s / 16, s / 16]);
            assert_eq!(shape_of(&g, fp.p5), [1, 128, s / 32, s / 32]);
            if let Some(t) = fp.fds_tap {
                assert_eq!(shape_of(&g, t), [1, 32, s / 8, s / 8]);
            }
            let y = m.forward(&mut g, &p, x).unwrap();
            assert_eq!(shape_of(&g, y), [1, 8, s / 8, s / 8], "setting {setting} at {s}");
        }
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let mut r = rng(5);
    for case in 0..50 {
        let heads = [1, 2, 4][case % 3];
        let dim = heads * r.gen_range(1..5);
        let (b, n) = (r.gen_range(1..3), r.gen_range(1..12));
        let mut store = ParamStore::new();
        let mut prng = rng(case as u64);
        let msa = Msa::new(&mut ParamBuilder::new(&mut store, &mut prng), "msa", dim, heads).unwrap();
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let x = g.constant(Tensor::uniform(&[b, n, dim], 3.0, &mut r));
        let (_, attn) = msa.forward_with_attention(&mut g, &p, x).unwrap();
        let a = g.value(attn);
        assert_eq!(a.shape(), [b, heads, n, n]);
        for row in a.data().chunks(n) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-9, "row sums to {sum}");
            assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }
}

#[test]
fn msa_is_permutation_equivariant() {
    let mut r = rng(6);
    for case in 0..50 {
        let heads = [1, 2, 4][case % 3];
        let dim = heads * r.gen_range(1..5);
        let (b, n) = (r.gen_range(1..3), r.gen_range(2..12));
        let mut store = ParamStore::new();
        let mut prng = rng(100 + case as u64);
        let msa = Msa::new(&mut ParamBuilder::new(&mut store, &mut prng), "msa", dim, heads).unwrap();
        jitter(&mut store, &mut r);
        let x = Tensor::uniform(&[b, n, dim], 2.0, &mut r);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let permute = |t: &Tensor| {
            Tensor::from_fn(&[b, n, dim], |i| {
                let (bi, rest) = (i / (n * dim), i % (n * dim));
                let (ti, c) = (rest / dim, rest % dim);
                t.data()[(bi * n + perm[ti]) * dim + c]
            })
        };
        let run = |input: &Tensor| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let v = g.constant(input.clone());
            let y = msa.forward(&mut g, &p, v).unwrap();
            g.value(y).clone()
        };
        let lhs = run(&permute(&x));
        let rhs = permute(&run(&x));
        let err = lhs
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-10, "case {case}: permuted output differs by {err}");
    }
}

#[test]
fn zeroed_fmsa_is_exactly_its_c2f() {
    let mut r = rng(7);
    for (c, out, depth) in [(8, 8, 1), (8, 16, 2), (16, 8, 1)] {
        let mut store = ParamStore::new();
        let mut prng = rng(c as u64);
        let fmsa = Fmsa::new(
            &mut ParamBuilder::new(&mut store, &mut prng),
            "fmsa",
            c,
            out,
            depth,
            4,
            2,
            1,
        )
        .unwrap();
        jitter(&mut store, &mut r);
        fmsa.zero_attention(&mut store);
        let x = Tensor::uniform(&[2, c, 4, 6], 2.0, &mut r);
        let fds = Tensor::uniform(&[2, c, 4, 6], 2.0, &mut r);
        let fus = Tensor::uniform(&[2, c, 4, 6], 2.0, &mut r);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x);
        let fv = g.constant(fds);
        let uv = g.constant(fus);
        for (fds_out, fus_out) in [(None, None), (Some(fv), None), (None, Some(uv)), (Some(fv), Some(uv))] {
            let y = fmsa
                .forward(
                    &mut g,
                    &p,
                    &FusionInputs {
                        x_main: xv,
                        fds_out,
                        fus_out,
                    },
                )
                .unwrap();
            let reference = fmsa.c2f.forward(&mut g, &p, xv).unwrap();
            assert_eq!(g.value(y), g.value(reference), "FMSA must reduce to C2F(x) bit-for-bit");
        }
    }
}

#[test]
fn zeroed_encoder_layer_is_identity() {
    let mut r = rng(8);
    for (dim, heads) in [(4, 1), (8, 2), (12, 4)] {
        let mut store = ParamStore::new();
        let mut prng = rng(dim as u64);
        let layer = EncoderLayer::new(&mut ParamBuilder::new(&mut store, &mut prng), "enc", dim, heads, 2).unwrap();
        jitter(&mut store, &mut r);
        layer.zero_branches(&mut store);
        let z = Tensor::uniform(&[2, 7, dim], 3.0, &mut r);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let v = g.constant(z.clone());
        let y = layer.forward(&mut g, &p, v).unwrap();
        assert_eq!(g.value(y), &z);
    }
}

#[test]
fn zeroed_detector_fmsa_equals_its_c2f_path() {
    let cfg = ModelConfig {
        fusion: FusionConfig::setting(4, 32).unwrap(),
        ..Default::default()
    };
    let mut m = Detector::new(&cfg, 9).unwrap();
    m.zero_fmsa_attention();
    let img = Tensor::uniform(&[1, 3, 64, 64], 1.0, &mut rng(9));
    let a = m.predict(&img).unwrap();
    let mut other = m.clone();
    // inputs to the zeroed block (FDS and FUS parameters) no longer matter
    for (name, t) in other
        .store
        .iter()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect::<Vec<_>>()
    {
        if name.starts_with("neck.fus") {
            let id = other.store.names().iter().position(|n| *n == name).unwrap();
            other.store.tensors_mut()[id] = Tensor::uniform(t.shape(), 1.0, &mut rng(id as u64));
        }
    }
    assert_eq!(other.predict(&img).unwrap(), a);
}

/// `sum((y - y0) * R)`: the gradient of a projected scalar sum, with the base
/// output subtracted to keep constant offsets out of the difference quotient.
fn check_composite(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let y0 = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars).unwrap();
        g.value(y).clone()
    };
    let r = Tensor::uniform(y0.shape(), 1.0, &mut rng(0x5EED));
    let opts = GradCheckOptions {
        max_probes_per_input: Some(16),
        ..Default::default()
    };
    let report = grad_check(
        |g, v| {
            let y = f(g, v)?;
            let c = g.constant(y0.clone());
            let d = g.sub(y, c)?;
            let rv = g.constant(r.clone());
            let m = g.mul(d, rv)?;
            Ok(g.sum_all(m))
        },
        &inputs,
        opts,
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
    report.max_rel_error
}

fn with_store(store: &ParamStore, mut inputs: Vec<Tensor>) -> (usize, Vec<Tensor>) {
    let n = inputs.len();
    inputs.extend(store.tensors().iter().cloned());
    (n, inputs)
}

#[test]
fn fds_into_fmsa_gradients() {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let mut prng = rng(11);
    let mut pb = ParamBuilder::new(&mut store, &mut prng);
    let fds = Fds::new(&mut pb, "fds", 4, 4, 2, 2, 1).unwrap();
    let fmsa = Fmsa::new(&mut pb, "fmsa", 4, 4, 1, 2, 2, 1).unwrap();
    jitter(&mut store, &mut r);
    let x = Tensor::uniform(&[1, 4, 4, 4], 1.0, &mut r);
    let main = Tensor::uniform(&[1, 4, 2, 2], 1.0, &mut r);
    let (n, inputs) = with_store(&store, vec![x, main]);
    check_composite(inputs, |g, v| {
        let p = store.bind_vars(&v[n..]);
        let d = fds.forward(g, &p, v[0])?;
        fmsa.forward(
            g,
            &p,
            &FusionInputs {
                x_main: v[1],
                fds_out: Some(d),
                fus_out: None,
            },
        )
    });
}

#[test]
fn fus_into_fmsa_gradients() {
    let mut r = rng(12);
    let mut store = ParamStore::new();
    let mut prng = rng(13);
    let mut pb = ParamBuilder::new(&mut store, &mut prng);
    let fus = Fus::new(&mut pb, "fus", 4, 8, 4, 2, 2, GausMode::Replicate, (4, 2)).unwrap();
    let fmsa = Fmsa::new(&mut pb, "fmsa", 4, 4, 1, 2, 2, 1).unwrap();
    jitter(&mut store, &mut r);
    let p4 = Tensor::uniform(&[1, 4, 2, 2], 1.0, &mut r);
    let p5 = Tensor::uniform(&[1, 8, 1, 1], 1.0, &mut r);
    let main = Tensor::uniform(&[1, 4, 4, 4], 1.0, &mut r);
    let (n, inputs) = with_store(&store, vec![p4, p5, main]);
    check_composite(inputs, |g, v| {
        let p = store.bind_vars(&v[n..]);
        let u = fus.forward(g, &p, v[0], v[1])?;
        fmsa.forward(
            g,
            &p,
            &FusionInputs {
                x_main: v[2],
                fds_out: None,
                fus_out: Some(u),
            },
        )
    });
}

#[test]
fn backbone_scalar_sum_gradients_at_toy_widths() {
    for setting in [0, 3] {
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
                heads: 2,
                ..FusionConfig::setting(setting, 4).unwrap()
            },
            num_classes: 2,
            ..Default::default()
        };
        let m = Detector::new(&cfg, 14).unwrap();
        let x = Tensor::uniform(&[1, 3, 32, 32], 1.0, &mut rng(15));
        let (n, inputs) = with_store(&m.store, vec![x]);
        check_composite(inputs, |g, v| {
            let p = m.store.bind_vars(&v[n..]);
            let fp = m.backbone_forward(g, &p, v[0])?;
            let s3 = g.sum_all(fp.p3);
            let s4 = g.sum_all(fp.p4);
            let s5 = g.sum_all(fp.p5);
            let t = g.add(s3, s4)?;
            g.add(t, s5)
        });
    }
}

#[test]
fn c2f_widths_follow_the_hidden_ratio() {
    let mut store = ParamStore::new();
    let mut prng = rng(16);
    let c = C2f::new(&mut ParamBuilder::new(&mut store, &mut prng), "c", 8, 12, 2).unwrap();
    assert_eq!(c.out_ch(), 12);
    assert_eq!(c.params(), store.numel());
}
