//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! Runs the full five-seed ablation, so expect it to take about an hour on one core.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use fusenet_cli::commands::{load_split, Split};
use fusenet_cli::config::RunConfig;
use fusenet_core::data::{Detection, GroundTruthBox};
use fusenet_core::detector::{conv_cost, msa_cost, Detector, ModelConfig};
use fusenet_core::fusion::{Fds, Fmsa, Fus, FusionConfig, FusionInputs, Gaus, GausMode};
use fusenet_core::metrics::{average_precision, iou_ladder, mean_ap};
use fusenet_core::nn::{EncoderLayer, Msa, ParamBuilder, ParamStore};
use fusenet_core::train::Trainer;
use fusenet_core::{Graph, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[path = "../../core/tests/support/pr_oracle.rs"]
mod pr_oracle;

type Outcome = Result<String, String>;

const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_BUDGET: Duration = Duration::from_secs(5 * 60);
const ROW_SUM_TOLERANCE: f64 = 1e-9;
const EQUIVARIANCE_TOLERANCE: f64 = 1e-10;
const AP_TOLERANCE: f64 = 1e-9;
const PARAM_BUDGET: f64 = 0.05;
const ABLATION_BUDGET: Duration = Duration::from_secs(2 * 3600);
const SANITY_SEEDS: u64 = 20;
const SANITY_REQUIRED: usize = 19;
const GRADCHECK_BLOCKS: [&str; 9] = ["msa", "encoder", "c2f", "lads", "fds", "gaus", "fus", "fmsa", "loss"];
const SHAPES_PER_BLOCK: usize = 3;

fn fusenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fusenet"))
        .args(args)
        .output()
        .expect("failed to launch fusenet")
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn succeed(out: &Output, what: &str) -> Result<(), String> {
    ensure(out.status.success(), || {
        format!(
            "{what} exited with {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or("empty csv")?
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines.map(split_csv_line).collect();
    Ok((header, rows))
}

/// Comma split honouring double-quoted fields.
fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = vec![String::new()];
    let mut quoted = false;
    for ch in line.chars() {
        match ch {
            '"' => quoted = !quoted,
            ',' if !quoted => fields.push(String::new()),
            c => fields.last_mut().unwrap().push(c),
        }
    }
    fields
}

fn column(header: &[String], name: &str) -> Result<usize, String> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or(format!("missing column {name}"))
}

fn num(s: &str) -> Result<f64, String> {
    s.parse().map_err(|_| format!("not a number: {s:?}"))
}

fn gradient_integrity(out: &Path) -> Outcome {
    let dir = out.join("gradcheck");
    let start = Instant::now();
    let o = fusenet(&["gradcheck", "--out", dir.to_str().unwrap()]);
    let elapsed = start.elapsed();
    succeed(&o, "gradcheck")?;
    let (h, rows) = read_csv(&dir.join("gradcheck.csv"))?;
    let (b, e, s, w) = (
        column(&h, "block")?,
        column(&h, "max_rel_error")?,
        column(&h, "status")?,
        column(&h, "wall_ms")?,
    );
    let mut worst = 0.0f64;
    for r in &rows {
        let err = num(&r[e])?;
        ensure(err <= GRADCHECK_TOLERANCE && r[s] == "PASS", || {
            format!("{} at {} has error {err:e}", r[b], r[1])
        })?;
        num(&r[w])?;
        worst = worst.max(err);
    }
    for block in GRADCHECK_BLOCKS {
        let n = rows.iter().filter(|r| r[b] == block).count();
        ensure(n >= SHAPES_PER_BLOCK, || format!("{block} checked at {n} shapes"))?;
    }
    ensure(rows.iter().any(|r| r[b] == "detector"), || {
        "no composite detector case".into()
    })?;
    ensure(elapsed < GRADCHECK_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{} cases, worst relative error {worst:.2e}, {:.1}s",
        rows.len(),
        elapsed.as_secs_f64()
    ))
}

fn shape_contracts() -> Outcome {
    let (c3, c4, c5, cf) = (32, 64, 128, 32);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut pb = ParamBuilder::new(&mut store, &mut rng);
    let fds = Fds::new(&mut pb, "fds", c3, c3, 4, 2, 1).map_err(|e| e.to_string())?;
    let gaus = [4usize, 2].map(|s| {
        Gaus::new(
            &mut pb,
            &format!("g{s}"),
            if s == 4 { c5 } else { c4 },
            s,
            4,
            2,
            GausMode::Replicate,
        )
        .unwrap()
    });
    let fus = Fus::new(&mut pb, "fus", c4, c5, cf, 4, 2, GausMode::Replicate, (4, 2)).map_err(|e| e.to_string())?;
    let fmsa = Fmsa::new(&mut pb, "fmsa", cf, cf, 1, 4, 2, 1).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for s in [64usize, 96, 128] {
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let mut input = |shape: &[usize]| g.constant(Tensor::uniform(shape, 1.0, &mut rng));
        let x = input(&[1, c3, s / 4, s / 4]);
        let p4 = input(&[1, c4, s / 16, s / 16]);
        let p5 = input(&[1, c5, s / 32, s / 32]);
        let d = fds.forward(&mut g, &p, x).map_err(|e| e.to_string())?;
        ensure(g.shape(d) == [1, c3, s / 8, s / 8], || {
            format!("FDS at {s}: {:?}", g.shape(d))
        })?;
        for (gs, src, c, stride) in [(&gaus[0], p5, c5, 4), (&gaus[1], p4, c4, 2)] {
            let u = gs.forward(&mut g, &p, src).map_err(|e| e.to_string())?;
            let hw = g.shape(src)[2] * stride;
            ensure(g.shape(u) == [1, c / stride, hw, hw], || {
                format!("GAUS x{stride} at {s}: {:?}", g.shape(u))
            })?;
        }
        let f = fus.forward(&mut g, &p, p4, p5).map_err(|e| e.to_string())?;
        ensure(g.shape(f) == [1, cf, s / 8, s / 8], || {
            format!("FUS at {s}: {:?}", g.shape(f))
        })?;
        let y = fmsa
            .forward(
                &mut g,
                &p,
                &FusionInputs {
                    x_main: f,
                    fds_out: Some(d),
                    fus_out: Some(f),
                },
            )
            .map_err(|e| e.to_string())?;
        ensure(g.shape(y) == g.shape(f), || format!("FMSA at {s}: {:?}", g.shape(y)))?;
        for setting in 0..5 {
            let cfg = ModelConfig {
                image_size: s,
                fusion: FusionConfig::setting(setting, 32).unwrap(),
                ..Default::default()
            };
            let m = Detector::new(&cfg, 1).map_err(|e| e.to_string())?;
            let img = g.constant(Tensor::uniform(&[1, 3, s, s], 1.0, &mut rng));
            let mp = m.store.bind(&mut g, false);
            let fp = m.backbone_forward(&mut g, &mp, img).map_err(|e| e.to_string())?;
            ensure(g.shape(fp.p3)[2..] == [s / 8, s / 8], || {
                format!("setting {setting} P3 at {s}")
            })?;
        }
        checked += 1;
    }
    Ok(format!(
        "FDS, GAUS x2/x4, FUS, FMSA and 5 detector settings at {checked} input sizes"
    ))
}

fn attention_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_row, mut worst_perm) = (0.0f64, 0.0f64);
    for case in 0..50u64 {
        let heads = [1, 2, 4][case as usize % 3];
        let dim = heads * rng.gen_range(1..5);
        let n = rng.gen_range(2..12);
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(case);
        let msa =
            Msa::new(&mut ParamBuilder::new(&mut store, &mut prng), "msa", dim, heads).map_err(|e| e.to_string())?;
        for t in store.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        }
        let x = Tensor::uniform(&[1, n, dim], 2.0, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let permute = |t: &Tensor| Tensor::from_fn(&[1, n, dim], |i| t.data()[perm[i / dim] * dim + i % dim]);
        let run = |input: &Tensor| {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let v = g.constant(input.clone());
            let (y, a) = msa.forward_with_attention(&mut g, &p, v).unwrap();
            (g.value(y).clone(), g.value(a).clone())
        };
        let (y, attn) = run(&x);
        for row in attn.data().chunks(n) {
            worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
        }
        worst_perm = worst_perm.max(run(&permute(&x)).0.max_abs_diff(&permute(&y)));
    }
    ensure(worst_row <= ROW_SUM_TOLERANCE, || {
        format!("row sum off by {worst_row:e}")
    })?;
    ensure(worst_perm <= EQUIVARIANCE_TOLERANCE, || {
        format!("permutation error {worst_perm:e}")
    })?;
    Ok(format!(
        "50 cases: max |row sum - 1| {worst_row:.1e}, max equivariance error {worst_perm:.1e}"
    ))
}

fn residual_degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let mut prng = ChaCha8Rng::seed_from_u64(5);
    let mut pb = ParamBuilder::new(&mut store, &mut prng);
    let fmsa = Fmsa::new(&mut pb, "fmsa", 16, 16, 2, 4, 2, 1).map_err(|e| e.to_string())?;
    let enc = EncoderLayer::new(&mut pb, "enc", 16, 4, 2).map_err(|e| e.to_string())?;
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
    }
    fmsa.zero_attention(&mut store);
    enc.zero_branches(&mut store);
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(Tensor::uniform(&[2, 16, 6, 6], 2.0, &mut rng));
    let y = fmsa
        .forward(
            &mut g,
            &p,
            &FusionInputs {
                x_main: x,
                fds_out: None,
                fus_out: None,
            },
        )
        .map_err(|e| e.to_string())?;
    let c = fmsa.c2f.forward(&mut g, &p, x).map_err(|e| e.to_string())?;
    ensure(g.value(y) == g.value(c), || {
        format!("FMSA differs from C2F by {:e}", g.value(y).max_abs_diff(g.value(c)))
    })?;
    let z = Tensor::uniform(&[2, 9, 16], 2.0, &mut rng);
    let zv = g.constant(z.clone());
    let e = enc.forward(&mut g, &p, zv).map_err(|e| e.to_string())?;
    ensure(g.value(e) == &z, || "encoder layer is not the identity".into())?;
    Ok("FMSA == C2F(x) and encoder == identity, bit-for-bit".into())
}

fn map_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for case in 0..200 {
        let (dets, truths) = pr_oracle::random_case(&mut rng, 2, 20);
        for c in 0..2 {
            let got = average_precision(&dets, &truths, c, 0.5);
            let want = pr_oracle::oracle_ap(&dets, &truths, c, 0.5);
            worst = worst.max((got - want).abs());
            ensure((got - want).abs() <= AP_TOLERANCE, || {
                format!("case {case}: {got} vs oracle {want}")
            })?;
        }
    }
    let gt = |c, cx| GroundTruthBox::new(c, cx, 0.5, 0.1, 0.1).unwrap();
    let truths = vec![vec![gt(0, 0.2), gt(1, 0.7)]];
    let dets = vec![vec![Detection {
        class_id: 0,
        score: 0.9,
        cx: 0.2,
        cy: 0.5,
        w: 0.1,
        h: 0.1,
    }]];
    let r = mean_ap(&dets, &truths, 2, &iou_ladder()).map_err(|e| e.to_string())?;
    ensure(r.per_class_ap50 == [Some(1.0), Some(0.0)], || {
        format!("hand case APs {:?}", r.per_class_ap50)
    })?;
    ensure(r.map50 == 0.5, || format!("hand case mAP {}", r.map50))?;
    Ok(format!(
        "200 random sets, worst |AP - oracle| {worst:.1e}; hand case mAP = 0.5 exactly"
    ))
}

struct AblationOutcome {
    elapsed: Duration,
    exit_ok: bool,
    stderr: String,
    dir: PathBuf,
}

fn run_ablation(out: &Path) -> AblationOutcome {
    let dir = out.join("ablation");
    let start = Instant::now();
    let o = fusenet(&[
        "ablate",
        "--image-size",
        "64",
        "--epochs",
        "30",
        "--set",
        "data.train_count=200",
        "--set",
        "ablate.seeds=[1,2,3,4,5]",
        "--set",
        "ablate.settings=[0,1,2,3,4]",
        "--out",
        dir.to_str().unwrap(),
    ]);
    AblationOutcome {
        elapsed: start.elapsed(),
        exit_ok: o.status.success(),
        stderr: String::from_utf8_lossy(&o.stderr).into_owned(),
        dir,
    }
}

fn ablation_rows(a: &AblationOutcome) -> Result<Vec<(usize, u64, f64)>, String> {
    ensure(a.exit_ok, || {
        format!("ablate failed: {}", a.stderr.lines().last().unwrap_or(""))
    })?;
    let (h, rows) = read_csv(&a.dir.join("ablation.csv"))?;
    let (s, p, m) = (column(&h, "setting")?, column(&h, "params")?, column(&h, "mAP50")?);
    rows.iter()
        .map(|r| Ok((num(&r[s])? as usize, num(&r[p])? as u64, num(&r[m])?)))
        .collect()
}

fn parameter_budget(a: &AblationOutcome) -> Outcome {
    let rows = ablation_rows(a)?;
    let base = rows.iter().find(|r| r.0 == 0).ok_or("no baseline row")?.1 as f64;
    let mut worst = 0.0f64;
    for &(s, p, _) in &rows {
        let gap = (p as f64 - base).abs() / base;
        worst = worst.max(gap);
        ensure(gap <= PARAM_BUDGET, || {
            format!("setting {s}: {p} params, {:.2}% off", gap * 100.0)
        })?;
    }
    ensure(rows.len() == 5, || format!("{} settings reported", rows.len()))?;
    Ok(format!(
        "5 settings, largest gap {:.2}% of baseline {base}; asserted by ablate (exit 0)",
        worst * 100.0
    ))
}

fn directional_ablation(a: &AblationOutcome, warnings: &mut Vec<String>) -> Outcome {
    let rows = ablation_rows(a)?;
    let map = |s: usize| {
        rows.iter()
            .find(|r| r.0 == s)
            .map(|r| r.2)
            .ok_or(format!("no setting {s}"))
    };
    let (s0, s1, s3, s4) = (map(0)?, map(1)?, map(3)?, map(4)?);
    if s3 < s1 {
        warnings.push(format!(
            "median mAP50 of setting 3 ({s3:.4}) is below setting 1 ({s1:.4})"
        ));
    }
    let summary = format!(
        "median mAP50 s0 {s0:.4}, s1 {s1:.4}, s3 {s3:.4}, s4 {s4:.4}; {:.0} min",
        a.elapsed.as_secs_f64() / 60.0
    );
    ensure(a.elapsed < ABLATION_BUDGET, || format!("ablation took {:?}", a.elapsed))?;
    ensure(s4 >= s0, || format!("setting 4 below setting 0; {summary}"))?;
    Ok(summary)
}

fn training_sanity(out: &Path) -> Outcome {
    let mut decreasing = 0;
    let mut lines = Vec::new();
    for seed in 1..=SANITY_SEEDS {
        let cfg = RunConfig::load(
            None,
            &[
                ("seed".into(), toml::Value::Integer(seed as i64)),
                ("train.epochs".into(), toml::Value::Integer(6)),
            ],
        )
        .map_err(|e| e.to_string())?;
        let data = load_split(&cfg, Split::Train).map_err(|e| e.to_string())?;
        let mut t =
            Trainer::new(&cfg.resolved_model().map_err(|e| e.to_string())?, &cfg.train).map_err(|e| e.to_string())?;
        let losses: Vec<f64> = (0..6)
            .map(|_| t.run_epoch(&data).map(|l| l.loss))
            .collect::<Result<_, _>>()
            .map_err(|e| format!("seed {seed}: {e}"))?;
        if losses[5] < losses[0] {
            decreasing += 1;
        }
        lines.push(format!("{seed}:{:.3}->{:.3}", losses[0], losses[5]));
    }
    let dir = out.join("nan");
    let o = fusenet(&[
        "train",
        "--epochs",
        "1",
        "--set",
        "train.lr0=1e6",
        "--set",
        "data.train_count=12",
        "--out",
        dir.to_str().unwrap(),
    ]);
    ensure(o.status.code() == Some(2), || {
        format!("diverging run exited with {:?}", o.status.code())
    })?;
    ensure(dir.join("nan_dump.txt").exists(), || "no diagnostic dump".into())?;
    ensure(decreasing >= SANITY_REQUIRED, || {
        format!("{decreasing}/{SANITY_SEEDS} seeds decreased: {}", lines.join(" "))
    })?;
    Ok(format!(
        "{decreasing}/{SANITY_SEEDS} seeds lower at epoch 5 than epoch 0; diverging run exits 2 with a dump"
    ))
}

fn determinism(out: &Path) -> Outcome {
    let common = [
        "--epochs",
        "2",
        "--seed",
        "7",
        "--set",
        "data.train_count=16",
        "--set",
        "data.val_count=8",
        "--set",
        "fusion.setting=4",
    ];
    let mut snapshots = Vec::new();
    // same config includes the same output directory, cleared between runs
    let dir = out.join("determinism");
    for _ in 0..2 {
        let _ = fs::remove_dir_all(&dir);
        let d = dir.to_str().unwrap();
        succeed(&fusenet(&[&["train", "--out", d][..], &common[..]].concat()), "train")?;
        let ck = dir.join("last.ckpt");
        succeed(
            &fusenet(&[&["eval", ck.to_str().unwrap(), "--out", d][..], &common[..]].concat()),
            "eval",
        )?;
        let ab = dir.join("ablate");
        let ablate = [
            "ablate",
            "--epochs",
            "1",
            "--set",
            "data.train_count=8",
            "--set",
            "data.val_count=4",
            "--set",
            "ablate.seeds=[1,2]",
            "--set",
            "ablate.settings=[0,4]",
            "--out",
            ab.to_str().unwrap(),
        ];
        succeed(&fusenet(&ablate), "ablate")?;
        let files = [
            "last.ckpt",
            "best.ckpt",
            "train_log.csv",
            "run.toml",
            "eval.csv",
            "ablate/ablation.csv",
            "ablate/ablation_runs.csv",
            "ablate/ablation.md",
        ];
        snapshots.push(files.map(|f| (f, fs::read(dir.join(f)).unwrap_or_default())));
    }
    for ((name, a), (_, b)) in snapshots[0].iter().zip(&snapshots[1]) {
        ensure(!a.is_empty() && a == b, || format!("{name} differs between runs"))?;
    }
    Ok(format!("{} files byte-identical across two runs", snapshots[0].len()))
}

fn cost_accounting(out: &Path) -> Outcome {
    // 3x3 conv, 3 -> 16 channels, stride 1, 64x64: 2 * k^2 * cin * cout * H * W multiply-adds
    let (conv, ..) = conv_cost(3, 16, 3, 1, 64, 64);
    let conv_hand = 2 * 3 * 3 * 3 * 16 * 64 * 64;
    ensure(conv.flops == conv_hand as u64, || {
        format!("conv {} vs {conv_hand}", conv.flops)
    })?;
    ensure(conv.params == (3 * 3 * 3 * 16 + 16) as u64, || {
        format!("conv params {}", conv.params)
    })?;
    // 64 tokens of width 32: q, k, v, out projections + QK^T + AV
    let (n, c) = (64u64, 32u64);
    let attn_hand = 4 * 2 * n * c * c + 2 * n * n * c + 2 * n * n * c;
    let attn = msa_cost(1, n as usize, c as usize);
    ensure(attn.flops == attn_hand, || {
        format!("attention {} vs {attn_hand}", attn.flops)
    })?;

    let dir = out.join("bench");
    succeed(
        &fusenet(&[
            "bench",
            "--set",
            "bench.runs=3",
            "--set",
            "bench.warmup=1",
            "--out",
            dir.to_str().unwrap(),
        ]),
        "bench",
    )?;
    let (h, rows) = read_csv(&dir.join("bench.csv"))?;
    let (p, f, ms) = (column(&h, "params")?, column(&h, "flops")?, column(&h, "median_ms")?);
    ensure(!rows.is_empty(), || "bench wrote no rows".into())?;
    for r in &rows {
        ensure(num(&r[p])? > 0.0 && num(&r[f])? > 0.0 && num(&r[ms])? > 0.0, || {
            format!("bad bench row {r:?}")
        })?;
    }
    Ok(format!(
        "conv {conv_hand} and attention {attn_hand} FLOPs exact; bench reported {} settings",
        rows.len()
    ))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let out = tmp.path();
    let mut warnings = Vec::new();
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, r: Outcome| {
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => ("FAIL", d.as_str()),
        };
        println!("criterion {n:>2} [{tag}] {name}: {detail}");
        results.push((n, name, r));
    };
    record(1, "gradient integrity", gradient_integrity(out));
    record(2, "shape contracts", shape_contracts());
    record(3, "attention invariants", attention_invariants());
    record(4, "residual degeneracy", residual_degeneracy());
    record(5, "mAP oracle equivalence", map_oracle());
    let ablation = run_ablation(out);
    record(6, "parameter-budget compensation", parameter_budget(&ablation));
    record(
        7,
        "directional ablation",
        directional_ablation(&ablation, &mut warnings),
    );
    record(8, "training sanity", training_sanity(out));
    record(9, "determinism", determinism(out));
    record(10, "cost accounting", cost_accounting(out));
    if let Ok(table) = std::fs::read_to_string(ablation.dir.join("ablation_runs.csv")) {
        println!("per-run ablation results:");
        for line in table.lines() {
            println!("  {line}");
        }
    }
    for w in &warnings {
        println!("warning: {w}");
    }
    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("{}/{} criteria passed", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
