use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use fusenet_core::data::{read_ppm, write_ppm, Dataset};
use fusenet_core::detector::{count_params_flops, decode_predictions, Checkpoint, Detector, ModelConfig};
use fusenet_core::gradcheck::GradCheckOptions;
use fusenet_core::harness::{
    bench_config, bench_csv, draw_detections, run_gradcheck_suite, sidecar, BenchOptions, SuiteOptions,
};
use fusenet_core::metrics::MetricsReport;
use fusenet_core::train::{eval_csv, evaluate, fit, load_params, run_ablation, AblationPlan, AblationReport, Trainer};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

/// Resolved configuration written next to training outputs.
pub const RUN_CONFIG_FILE: &str = "run.toml";
pub const NAN_DUMP_FILE: &str = "nan_dump.txt";
pub const EVAL_FILE: &str = "eval.csv";
pub const ABLATION_CSV_FILE: &str = "ablation.csv";
pub const ABLATION_RUNS_FILE: &str = "ablation_runs.csv";
pub const ABLATION_MD_FILE: &str = "ablation.md";
pub const ABLATION_RUNS_HEADER: &str = "setting,seed,P,R,mAP50,mAP50-90";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";
pub const GRADCHECK_HEADER: &str = "block,shape,max_rel_error,probes,wall_ms,status";
pub const BENCH_FILE: &str = "bench.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// A dataset directory when configured, synthetic scenes otherwise.
pub fn load_split(cfg: &RunConfig, split: Split) -> CliResult<Dataset> {
    let d = &cfg.data;
    let (dir, count, seed) = match split {
        Split::Train => (&d.train_dir, d.train_count, d.train_seed),
        Split::Val => (&d.val_dir, d.val_count, d.val_seed),
    };
    Ok(match dir {
        Some(p) => Dataset::load(p)?,
        None => Dataset::synthetic(&d.scene, seed, count, cfg.exec)?,
    })
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> CliResult<Detector> {
    let model_cfg = cfg.resolved_model()?;
    let ck = Checkpoint::load(checkpoint, &model_cfg)?;
    let mut model = Detector::new(&model_cfg, cfg.seed)?;
    load_params(&mut model, &ck)?;
    Ok(model)
}

fn metrics_table(m: &MetricsReport) -> String {
    let mut s = String::from("class   AP50    AP50-90\n");
    for (c, (a, b)) in m.per_class_ap50.iter().zip(&m.per_class_ap50_95).enumerate() {
        if let (Some(a), Some(b)) = (a, b) {
            let _ = writeln!(s, "{c:<7} {a:.4}  {b:.4}");
        }
    }
    let _ = writeln!(s, "all     {:.4}  {:.4}", m.map50, m.map50_95);
    let _ = writeln!(
        s,
        "P {:.4}  R {:.4}  (confidence {})  params {}  flops {}",
        m.precision, m.recall, m.conf_threshold, m.params, m.flops
    );
    s
}

pub fn gen_data(cfg: &RunConfig) -> CliResult<()> {
    for (split, name) in [(Split::Train, "train"), (Split::Val, "val")] {
        let ds = load_split(cfg, split)?;
        let dir = cfg.out.join(name);
        ds.save(&dir)?;
        println!("{} {} images -> {}", name, ds.len(), dir.display());
    }
    Ok(())
}

pub fn train(cfg: &RunConfig) -> CliResult<()> {
    let model_cfg = cfg.resolved_model()?;
    let train = load_split(cfg, Split::Train)?;
    let val = load_split(cfg, Split::Val)?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(RUN_CONFIG_FILE), cfg.to_config_text())?;
    let mut trainer = match &cfg.resume {
        Some(p) => Trainer::from_checkpoint(&model_cfg, &cfg.train, &Checkpoint::load(p, &model_cfg)?)?,
        None => Trainer::new(&model_cfg, &cfg.train)?,
    };
    let cost = count_params_flops(&model_cfg)?;
    eprintln!(
        "training setting {:?}: {} params, {} flops, {} train / {} val images, epochs {}..{}",
        model_cfg.fusion.setting_id(),
        cost.params,
        cost.flops,
        train.len(),
        val.len(),
        trainer.epoch,
        cfg.train.epochs
    );
    let start = Instant::now();
    let result = fit(&mut trainer, &train, Some(&val), Some(&cfg.out), |row, m| {
        let m = m.map_or(String::new(), |m| {
            format!(" mAP50 {:.4} mAP50-90 {:.4}", m.map50, m.map50_95)
        });
        eprintln!(
            "epoch {:>3} loss {:.4} (obj {:.4} cls {:.4} box {:.4}) lr {:.5}{m} [{:.0}s]",
            row.epoch,
            row.loss,
            row.obj,
            row.cls,
            row.bbox,
            row.lr,
            start.elapsed().as_secs_f64()
        );
    });
    let summary = match result {
        Err(e @ fusenet_core::Error::Numerical(_)) => {
            let dump = format!("{e}\n\n# configuration\n{}", cfg.to_config_text());
            fs::write(cfg.out.join(NAN_DUMP_FILE), dump)?;
            eprintln!("diagnostic dump written to {}", cfg.out.join(NAN_DUMP_FILE).display());
            return Err(e.into());
        }
        other => other?,
    };
    if let Some(m) = &summary.final_metrics {
        print!("{}", metrics_table(m));
    }
    println!("outputs in {}", cfg.out.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, checkpoint: &Path, data: Option<&Path>) -> CliResult<()> {
    let model = load_model(cfg, checkpoint)?;
    let ds = match data {
        Some(p) => Dataset::load(p)?,
        None => load_split(cfg, Split::Val)?,
    };
    let m = evaluate(&model, &ds, cfg.exec)?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(EVAL_FILE), eval_csv(&m))?;
    print!("{}", metrics_table(&m));
    Ok(())
}

/// Per-seed rows of an ablation report.
pub fn ablation_runs_csv(report: &AblationReport) -> String {
    let mut s = format!("{ABLATION_RUNS_HEADER}\n");
    for r in &report.rows {
        for (seed, m) in report.seeds.iter().zip(&r.runs) {
            let _ = writeln!(
                s,
                "{},{seed},{:.6},{:.6},{:.6},{:.6}",
                r.setting, m.precision, m.recall, m.map50, m.map50_95
            );
        }
    }
    s
}

pub fn ablate(cfg: &RunConfig) -> CliResult<()> {
    let train = load_split(cfg, Split::Train)?;
    let val = load_split(cfg, Split::Val)?;
    let plan = AblationPlan {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        seeds: cfg.ablate_seeds.clone(),
        settings: cfg.ablate_settings.clone(),
        compensate: cfg.compensate,
    };
    eprintln!(
        "ablation: settings {:?} x seeds {:?}, {} epochs, {} train / {} val images",
        plan.settings,
        plan.seeds,
        plan.train.epochs,
        train.len(),
        val.len()
    );
    let start = Instant::now();
    let report = run_ablation(&plan, &train, &val, |setting, seed, m| {
        eprintln!(
            "setting {setting} seed {seed}: mAP50 {:.4} mAP50-90 {:.4} P {:.4} R {:.4} [{:.0}s]",
            m.map50,
            m.map50_95,
            m.precision,
            m.recall,
            start.elapsed().as_secs_f64()
        );
    })?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(ABLATION_CSV_FILE), report.to_csv())?;
    fs::write(cfg.out.join(ABLATION_RUNS_FILE), ablation_runs_csv(&report))?;
    fs::write(cfg.out.join(ABLATION_MD_FILE), report.to_markdown())?;
    print!("{}", report.to_markdown());
    println!(
        "parameter budget: every setting within ±5% of {} (baseline)",
        report.baseline_params
    );
    Ok(())
}

pub fn gradcheck(cfg: &RunConfig) -> CliResult<()> {
    let g = &cfg.gradcheck;
    let opts = SuiteOptions {
        check: GradCheckOptions {
            epsilon: g.epsilon,
            tolerance: g.tolerance,
            max_probes_per_input: (g.probes > 0).then_some(g.probes),
            seed: cfg.seed,
        },
        shapes_per_block: g.shapes,
        seed: cfg.seed,
    };
    println!(
        "{:<11} {:<48} {:>12} {:>7} {:>10}  status",
        "block", "shape", "max_rel_err", "probes", "wall_ms"
    );
    let start = Instant::now();
    let mut csv = format!("{GRADCHECK_HEADER}\n");
    let reports = run_gradcheck_suite(&opts, |r| {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        let ms = r.wall.as_secs_f64() * 1e3;
        println!(
            "{:<11} {:<48} {:>12.3e} {:>7} {:>10.2}  {status}",
            r.block, r.shape, r.max_rel_error, r.probes, ms
        );
        let _ = writeln!(
            csv,
            "{},\"{}\",{:.6e},{},{ms:.3},{status}",
            r.block, r.shape, r.max_rel_error, r.probes
        );
    })?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(GRADCHECK_FILE), csv)?;
    let mut offenders: Vec<&str> = reports.iter().filter(|r| !r.passed()).map(|r| r.block).collect();
    offenders.dedup();
    println!(
        "{} cases, tolerance {:e}, epsilon {:e}, total {:.2}s",
        reports.len(),
        g.tolerance,
        g.epsilon,
        start.elapsed().as_secs_f64()
    );
    if offenders.is_empty() {
        println!("all blocks passed");
        Ok(())
    } else {
        Err(CliError::GradCheck(offenders.join(", ")))
    }
}

fn setting_label(model: &ModelConfig) -> String {
    let f = &model.fusion;
    let mut parts = Vec::new();
    for (on, name) in [(f.enable_fmsa, "fmsa"), (f.enable_fus, "fus"), (f.enable_fds, "fds")] {
        if on {
            parts.push(name);
        }
    }
    let id = f.setting_id().map_or("custom".to_string(), |s| format!("s{s}"));
    if parts.is_empty() {
        format!("{id}-baseline")
    } else {
        format!("{id}-{}", parts.join("+"))
    }
}

pub fn bench(cfg: &RunConfig) -> CliResult<()> {
    let opts = BenchOptions {
        runs: cfg.bench.runs,
        warmup: cfg.bench.warmup,
        seed: cfg.seed,
    };
    let rows = cfg
        .bench
        .settings
        .iter()
        .map(|&s| {
            let m = cfg.setting_model(s)?;
            Ok(bench_config(&setting_label(&m), &m, &opts)?)
        })
        .collect::<CliResult<Vec<_>>>()?;
    let csv = bench_csv(&rows);
    fs::create_dir_all(&cfg.out)?;
    fs::write(cfg.out.join(BENCH_FILE), &csv)?;
    print!("{csv}");
    Ok(())
}

/// Overlay and sidecar paths for `image` under `out`.
pub fn render_paths(out: &Path, image: &Path) -> (PathBuf, PathBuf) {
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    (
        out.join(format!("{stem}_overlay.ppm")),
        out.join(format!("{stem}_overlay.txt")),
    )
}

pub fn render(cfg: &RunConfig, checkpoint: &Path, image: &Path) -> CliResult<()> {
    let model = load_model(cfg, checkpoint)?;
    let img = read_ppm(image)?;
    let s = img.shape().to_vec();
    let pred = model.predict(&img.clone().reshaped(&[1, s[0], s[1], s[2]])?)?;
    let dets = decode_predictions(&pred, cfg.render.conf, cfg.render.nms_iou)?.remove(0);
    let overlay = draw_detections(&img, &dets)?;
    fs::create_dir_all(&cfg.out)?;
    let (ppm, txt) = render_paths(&cfg.out, image);
    write_ppm(&ppm, &overlay)?;
    fs::write(&txt, sidecar(&dets, s[2], s[1]))?;
    println!("{} boxes -> {} ({})", dets.len(), ppm.display(), txt.display());
    Ok(())
}
