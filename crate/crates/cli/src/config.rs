//! Run configuration: defaults, config files and `--set` overrides.
//!
//! Config files are flat TOML: top-level keys plus one level of `[section]`
//! tables. Every key is addressed as `section.key` (or `key` at top level),
//! which is also the syntax of `--set key=value`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fusenet_core::data::SceneSpec;
use fusenet_core::detector::{compensate, BoxLoss, Depths, ModelConfig};
use fusenet_core::fusion::{FusionConfig, GausMode};
use fusenet_core::par::Exec;
use fusenet_core::train::TrainConfig;
use toml::Value;

use crate::error::{CliError, CliResult};

/// Named starting points; every other key is applied on top of one of these.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// 64x64 synthetic scenes, 30 epochs; the tested path.
    Desk,
    /// The published training schedule: 640x640, 1000 epochs.
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            _ => Err(CliError::Usage(format!(
                "unknown preset {s:?} (expected desk or paper)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

/// Where training and validation images come from.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Directory of PPM + annotation pairs; synthetic scenes when unset.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    pub train_count: usize,
    pub val_count: usize,
    /// Seed of the first synthetic scene of each split.
    pub train_seed: u64,
    pub val_seed: u64,
    /// Scene template; its size tracks `image_size`.
    pub scene: SceneSpec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub shapes: usize,
    /// Coordinates probed per input tensor; 0 probes all of them.
    pub probes: usize,
    pub epsilon: f64,
    pub tolerance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub runs: usize,
    pub warmup: usize,
    pub settings: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderConfig {
    pub conf: f64,
    pub nms_iou: f64,
}

/// Everything a subcommand needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub image_size: usize,
    pub out: PathBuf,
    pub exec: Exec,
    /// Model with the fusion toggles as configured (before compensation).
    pub model: ModelConfig,
    /// Shrink C2F depths of fusion models back to the baseline budget.
    pub compensate: bool,
    pub train: TrainConfig,
    pub resume: Option<PathBuf>,
    pub data: DataConfig,
    pub ablate_seeds: Vec<u64>,
    pub ablate_settings: Vec<usize>,
    pub gradcheck: GradcheckConfig,
    pub bench: BenchConfig,
    pub render: RenderConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::preset(Preset::Desk)
    }
}

/// Object sizes of the desk preset, as fractions of the image side (4 to 13
/// pixels at 64x64).
pub const DESK_MIN_SIZE_FRAC: f64 = 0.06;
pub const DESK_MAX_SIZE_FRAC: f64 = 0.20;

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (image_size, epochs) = match preset {
            Preset::Desk => (64, 30),
            Preset::Paper => (640, 1000),
        };
        let model = ModelConfig {
            image_size,
            ..ModelConfig::default()
        };
        let scene = SceneSpec {
            size: image_size,
            min_size_frac: DESK_MIN_SIZE_FRAC,
            max_size_frac: DESK_MAX_SIZE_FRAC,
            num_classes: model.num_classes,
            ..SceneSpec::default()
        };
        RunConfig {
            preset,
            seed: 1,
            image_size,
            out: PathBuf::from("runs"),
            exec: Exec::Parallel,
            model,
            compensate: true,
            train: TrainConfig {
                epochs,
                ..TrainConfig::default()
            },
            resume: None,
            data: DataConfig {
                train_dir: None,
                val_dir: None,
                train_count: 200,
                val_count: 50,
                train_seed: 100_000,
                val_seed: 200_000,
                scene,
            },
            ablate_seeds: vec![1, 2, 3, 4, 5],
            ablate_settings: vec![0, 1, 2, 3, 4],
            gradcheck: GradcheckConfig {
                shapes: 3,
                probes: 12,
                epsilon: 1e-5,
                tolerance: 1e-4,
            },
            bench: BenchConfig {
                runs: 30,
                warmup: 5,
                settings: vec![0, 4],
            },
            render: RenderConfig {
                conf: 0.25,
                nms_iou: 0.5,
            },
        }
    }

    /// Defaults, then `file`, then `overrides` (later entries win).
    pub fn load(file: Option<&Path>, overrides: &[(String, Value)]) -> CliResult<Self> {
        let mut entries = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                parse_config(&text)?
            }
            None => Vec::new(),
        };
        entries.extend(overrides.iter().cloned());
        RunConfig::from_entries(&entries)
    }

    /// Build from ordered `(key, value)` pairs. `preset` is applied first,
    /// `fusion.setting` before the individual toggles, the rest in order.
    pub fn from_entries(entries: &[(String, Value)]) -> CliResult<Self> {
        let last = |key: &str| entries.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v);
        let preset = match last("preset") {
            Some(v) => Preset::parse(&as_string("preset", v)?)?,
            None => Preset::Desk,
        };
        let mut cfg = RunConfig::preset(preset);
        if let Some(v) = last("fusion.setting") {
            let id = as_usize("fusion.setting", v)?;
            let s = FusionConfig::setting(id, cfg.model.fusion.channels)?;
            cfg.model.fusion.enable_fmsa = s.enable_fmsa;
            cfg.model.fusion.enable_fus = s.enable_fus;
            cfg.model.fusion.enable_fds = s.enable_fds;
        }
        for (k, v) in entries {
            if k != "preset" && k != "fusion.setting" {
                cfg.apply(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, v: &Value) -> CliResult<()> {
        let m = &mut self.model;
        let f = &mut m.fusion;
        let d = &mut self.data;
        match key {
            "seed" => self.seed = as_u64(key, v)?,
            "image_size" => self.image_size = as_usize(key, v)?,
            "out" => self.out = PathBuf::from(as_string(key, v)?),
            "exec" => {
                self.exec = match as_string(key, v)?.as_str() {
                    "parallel" => Exec::Parallel,
                    "sequential" => Exec::Sequential,
                    s => {
                        return Err(CliError::Usage(format!(
                            "exec: expected parallel or sequential, got {s:?}"
                        )))
                    }
                }
            }
            "train.lr0" => self.train.lr0 = as_f64(key, v)?,
            "train.lrf" => self.train.lrf = as_f64(key, v)?,
            "train.momentum" => self.train.momentum = as_f64(key, v)?,
            "train.batch_size" => self.train.batch_size = as_usize(key, v)?,
            "train.epochs" => self.train.epochs = as_usize(key, v)?,
            "train.resume" => self.resume = optional_path(key, v)?,
            "model.stem_width" => m.stem_width = as_usize(key, v)?,
            "model.widths" => {
                let w = as_list(key, v, as_usize)?;
                m.widths = w
                    .try_into()
                    .map_err(|_| CliError::Usage("model.widths: expected 4 values".into()))?;
            }
            "model.depths" => {
                let d = as_list(key, v, as_usize)?;
                let [s1, p3, p4, p5, neck]: [usize; 5] = d
                    .try_into()
                    .map_err(|_| CliError::Usage("model.depths: expected 5 values (s1, p3, p4, p5, neck)".into()))?;
                m.depths = Depths { s1, p3, p4, p5, neck };
            }
            "model.num_classes" => m.num_classes = as_usize(key, v)?,
            "model.box_loss" => m.box_loss = BoxLoss::parse(&as_string(key, v)?)?,
            "model.obj_prior" => m.obj_prior = as_f64(key, v)?,
            "fusion.fmsa" => f.enable_fmsa = as_bool(key, v)?,
            "fusion.fus" => f.enable_fus = as_bool(key, v)?,
            "fusion.fds" => f.enable_fds = as_bool(key, v)?,
            "fusion.channels" => f.channels = as_usize(key, v)?,
            "fusion.heads" => f.heads = as_usize(key, v)?,
            "fusion.depth" => f.depth = as_usize(key, v)?,
            "fusion.mlp_ratio" => f.mlp_ratio = as_usize(key, v)?,
            "fusion.gaus_mode" => {
                f.gaus_mode = match as_string(key, v)?.as_str() {
                    "replicate" => GausMode::Replicate,
                    "pixel_shuffle" => GausMode::PixelShuffle,
                    s => {
                        return Err(CliError::Usage(format!(
                            "fusion.gaus_mode: expected replicate or pixel_shuffle, got {s:?}"
                        )))
                    }
                }
            }
            "fusion.nearest_fallback" => f.nearest_fallback = as_bool(key, v)?,
            "fusion.compensate" => self.compensate = as_bool(key, v)?,
            "data.train_dir" => d.train_dir = optional_path(key, v)?,
            "data.val_dir" => d.val_dir = optional_path(key, v)?,
            "data.train_count" => d.train_count = as_usize(key, v)?,
            "data.val_count" => d.val_count = as_usize(key, v)?,
            "data.train_seed" => d.train_seed = as_u64(key, v)?,
            "data.val_seed" => d.val_seed = as_u64(key, v)?,
            "data.min_objects" => d.scene.min_objects = as_usize(key, v)?,
            "data.max_objects" => d.scene.max_objects = as_usize(key, v)?,
            "data.min_size" => d.scene.min_size_frac = as_f64(key, v)?,
            "data.max_size" => d.scene.max_size_frac = as_f64(key, v)?,
            "data.clutter" => d.scene.clutter = as_f64(key, v)?,
            "data.occlusion" => d.scene.occlusion_prob = as_f64(key, v)?,
            "ablate.seeds" => self.ablate_seeds = as_list(key, v, as_u64)?,
            "ablate.settings" => self.ablate_settings = as_list(key, v, as_usize)?,
            "gradcheck.shapes" => self.gradcheck.shapes = as_usize(key, v)?,
            "gradcheck.probes" => self.gradcheck.probes = as_usize(key, v)?,
            "gradcheck.epsilon" => self.gradcheck.epsilon = as_f64(key, v)?,
            "gradcheck.tolerance" => self.gradcheck.tolerance = as_f64(key, v)?,
            "bench.runs" => self.bench.runs = as_usize(key, v)?,
            "bench.warmup" => self.bench.warmup = as_usize(key, v)?,
            "bench.settings" => self.bench.settings = as_list(key, v, as_usize)?,
            "render.conf" => self.render.conf = as_f64(key, v)?,
            "render.nms_iou" => self.render.nms_iou = as_f64(key, v)?,
            _ => return Err(CliError::Usage(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    fn validate(&mut self) -> CliResult<()> {
        self.model.image_size = self.image_size;
        self.data.scene.size = self.image_size;
        self.data.scene.num_classes = self.model.num_classes;
        self.train.seed = self.seed;
        self.train.exec = self.exec;
        self.model.validate()?;
        self.train.validate()?;
        self.data.scene.validate()?;
        if self.ablate_seeds.is_empty() {
            return Err(CliError::Usage("ablate.seeds must not be empty".into()));
        }
        for &s in self.ablate_settings.iter().chain(&self.bench.settings) {
            FusionConfig::setting(s, self.model.fusion.channels)?;
        }
        if self.gradcheck.shapes == 0 {
            return Err(CliError::Usage("gradcheck.shapes must be positive".into()));
        }
        if !(self.gradcheck.tolerance > 0.0) {
            return Err(CliError::Usage("gradcheck.tolerance must be positive".into()));
        }
        for (k, t) in [
            ("render.conf", self.render.conf),
            ("render.nms_iou", self.render.nms_iou),
        ] {
            if !(t > 0.0 && t < 1.0) {
                return Err(CliError::Usage(format!("{k} {t} must lie in (0, 1)")));
            }
        }
        Ok(())
    }

    /// The model actually built: compensated when fusion is on and
    /// compensation is enabled.
    pub fn resolved_model(&self) -> CliResult<ModelConfig> {
        resolve(&self.model, self.compensate)
    }

    /// Model of ablation `setting` under this configuration.
    pub fn setting_model(&self, setting: usize) -> CliResult<ModelConfig> {
        let s = FusionConfig::setting(setting, self.model.fusion.channels)?;
        let mut m = self.model.clone();
        m.fusion.enable_fmsa = s.enable_fmsa;
        m.fusion.enable_fus = s.enable_fus;
        m.fusion.enable_fds = s.enable_fds;
        resolve(&m, self.compensate)
    }

    /// Canonical config file that reproduces this configuration.
    pub fn to_config_text(&self) -> String {
        let m = &self.model;
        let f = &m.fusion;
        let d = &self.data;
        let g = &self.gradcheck;
        let list = |v: &[String]| format!("[{}]", v.join(", "));
        let ints = |v: &[usize]| list(&v.iter().map(|x| x.to_string()).collect::<Vec<_>>());
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let mut s = String::new();
        let _ = writeln!(s, "preset = {:?}", self.preset.name());
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "image_size = {}", self.image_size);
        let _ = writeln!(s, "out = {:?}", self.out.display().to_string());
        let _ = writeln!(
            s,
            "exec = {:?}",
            if self.exec == Exec::Parallel {
                "parallel"
            } else {
                "sequential"
            }
        );
        let _ = writeln!(s, "\n[train]");
        let _ = writeln!(s, "lr0 = {:?}", self.train.lr0);
        let _ = writeln!(s, "lrf = {:?}", self.train.lrf);
        let _ = writeln!(s, "momentum = {:?}", self.train.momentum);
        let _ = writeln!(s, "batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "epochs = {}", self.train.epochs);
        let _ = writeln!(s, "resume = {:?}", path(&self.resume));
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "stem_width = {}", m.stem_width);
        let _ = writeln!(s, "widths = {}", ints(&m.widths));
        let dp = m.depths;
        let _ = writeln!(s, "depths = {}", ints(&[dp.s1, dp.p3, dp.p4, dp.p5, dp.neck]));
        let _ = writeln!(s, "num_classes = {}", m.num_classes);
        let _ = writeln!(s, "box_loss = {:?}", m.box_loss.name());
        let _ = writeln!(s, "obj_prior = {:?}", m.obj_prior);
        let _ = writeln!(s, "\n[fusion]");
        let _ = writeln!(s, "fmsa = {}", f.enable_fmsa);
        let _ = writeln!(s, "fus = {}", f.enable_fus);
        let _ = writeln!(s, "fds = {}", f.enable_fds);
        let _ = writeln!(s, "channels = {}", f.channels);
        let _ = writeln!(s, "heads = {}", f.heads);
        let _ = writeln!(s, "depth = {}", f.depth);
        let _ = writeln!(s, "mlp_ratio = {}", f.mlp_ratio);
        let gm = match f.gaus_mode {
            GausMode::Replicate => "replicate",
            GausMode::PixelShuffle => "pixel_shuffle",
        };
        let _ = writeln!(s, "gaus_mode = {gm:?}");
        let _ = writeln!(s, "nearest_fallback = {}", f.nearest_fallback);
        let _ = writeln!(s, "compensate = {}", self.compensate);
        let _ = writeln!(s, "\n[data]");
        let _ = writeln!(s, "train_dir = {:?}", path(&d.train_dir));
        let _ = writeln!(s, "val_dir = {:?}", path(&d.val_dir));
        let _ = writeln!(s, "train_count = {}", d.train_count);
        let _ = writeln!(s, "val_count = {}", d.val_count);
        let _ = writeln!(s, "train_seed = {}", d.train_seed);
        let _ = writeln!(s, "val_seed = {}", d.val_seed);
        let _ = writeln!(s, "min_objects = {}", d.scene.min_objects);
        let _ = writeln!(s, "max_objects = {}", d.scene.max_objects);
        let _ = writeln!(s, "min_size = {:?}", d.scene.min_size_frac);
        let _ = writeln!(s, "max_size = {:?}", d.scene.max_size_frac);
        let _ = writeln!(s, "clutter = {:?}", d.scene.clutter);
        let _ = writeln!(s, "occlusion = {:?}", d.scene.occlusion_prob);
        let _ = writeln!(s, "\n[ablate]");
        let seeds: Vec<String> = self.ablate_seeds.iter().map(|x| x.to_string()).collect();
        let _ = writeln!(s, "seeds = {}", list(&seeds));
        let _ = writeln!(s, "settings = {}", ints(&self.ablate_settings));
        let _ = writeln!(s, "\n[gradcheck]");
        let _ = writeln!(s, "shapes = {}", g.shapes);
        let _ = writeln!(s, "probes = {}", g.probes);
        let _ = writeln!(s, "epsilon = {:?}", g.epsilon);
        let _ = writeln!(s, "tolerance = {:?}", g.tolerance);
        let _ = writeln!(s, "\n[bench]");
        let _ = writeln!(s, "runs = {}", self.bench.runs);
        let _ = writeln!(s, "warmup = {}", self.bench.warmup);
        let _ = writeln!(s, "settings = {}", ints(&self.bench.settings));
        let _ = writeln!(s, "\n[render]");
        let _ = writeln!(s, "conf = {:?}", self.render.conf);
        let _ = writeln!(s, "nms_iou = {:?}", self.render.nms_iou);
        s
    }
}

fn resolve(model: &ModelConfig, compensate_depths: bool) -> CliResult<ModelConfig> {
    let f = &model.fusion;
    if compensate_depths && (f.enable_fmsa || f.enable_fus || f.enable_fds) {
        Ok(compensate(model)?.config)
    } else {
        Ok(model.clone())
    }
}

/// Flatten a config file into ordered `(section.key, value)` pairs.
pub fn parse_config(text: &str) -> CliResult<Vec<(String, Value)>> {
    let table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Usage(format!("config parse error: {e}")))?;
    let mut out = Vec::new();
    for (k, v) in table {
        match v {
            Value::Table(t) => {
                for (k2, v2) in t {
                    if v2.is_table() {
                        return Err(CliError::Usage(format!("config section [{k}.{k2}] nests too deep")));
                    }
                    out.push((format!("{k}.{k2}"), v2));
                }
            }
            v => out.push((k, v)),
        }
    }
    Ok(out)
}

/// Parse one `key=value` override. The value is read as a TOML value when it
/// is one (`4`, `true`, `[1, 2]`) and as a bare string otherwise.
pub fn parse_override(s: &str) -> CliResult<(String, Value)> {
    let (k, raw) = s
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got {s:?}")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(CliError::Usage(format!("--set expects key=value, got {s:?}")));
    }
    let raw = raw.trim();
    let parsed = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"));
    Ok((k.to_string(), parsed.unwrap_or_else(|| Value::String(raw.to_string()))))
}

fn bad(key: &str, what: &str, v: &Value) -> CliError {
    CliError::Usage(format!("{key}: expected {what}, got {v}"))
}

fn as_string(key: &str, v: &Value) -> CliResult<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Integer(i) => Ok(i.to_string()),
        Value::Float(x) => Ok(x.to_string()),
        Value::Boolean(b) => Ok(b.to_string()),
        _ => Err(bad(key, "a string", v)),
    }
}

fn optional_path(key: &str, v: &Value) -> CliResult<Option<PathBuf>> {
    let s = as_string(key, v)?;
    Ok((!s.is_empty()).then(|| PathBuf::from(s)))
}

fn as_u64(key: &str, v: &Value) -> CliResult<u64> {
    match v {
        Value::Integer(i) if *i >= 0 => Ok(*i as u64),
        Value::String(s) => s.trim().parse().map_err(|_| bad(key, "a non-negative integer", v)),
        _ => Err(bad(key, "a non-negative integer", v)),
    }
}

fn as_usize(key: &str, v: &Value) -> CliResult<usize> {
    as_u64(key, v).map(|x| x as usize)
}

fn as_f64(key: &str, v: &Value) -> CliResult<f64> {
    let x = match v {
        Value::Float(x) => *x,
        Value::Integer(i) => *i as f64,
        Value::String(s) => s.trim().parse().map_err(|_| bad(key, "a number", v))?,
        _ => return Err(bad(key, "a number", v)),
    };
    if x.is_finite() {
        Ok(x)
    } else {
        Err(bad(key, "a finite number", v))
    }
}

fn as_bool(key: &str, v: &Value) -> CliResult<bool> {
    match v {
        Value::Boolean(b) => Ok(*b),
        Value::Integer(0) => Ok(false),
        Value::Integer(1) => Ok(true),
        Value::String(s) => match s.as_str() {
            "true" | "yes" | "on" => Ok(true),
            "false" | "no" | "off" => Ok(false),
            _ => Err(bad(key, "a boolean", v)),
        },
        _ => Err(bad(key, "a boolean", v)),
    }
}

/// A TOML array, or a comma-separated string.
fn as_list<T>(key: &str, v: &Value, item: fn(&str, &Value) -> CliResult<T>) -> CliResult<Vec<T>> {
    match v {
        Value::Array(a) => a.iter().map(|x| item(key, x)).collect(),
        Value::String(s) => s
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| item(key, &Value::String(s.to_string())))
            .collect(),
        Value::Integer(_) => Ok(vec![item(key, v)?]),
        _ => Err(bad(key, "a list", v)),
    }
}

/// Keys accepted by [`RunConfig::from_entries`], for `--help`.
pub fn known_keys() -> BTreeMap<&'static str, &'static str> {
    BTreeMap::from([
        ("preset", "desk | paper (default desk)"),
        ("seed", "run seed: weight init, shuffles, gradcheck cases"),
        ("image_size", "square input side, multiple of 32"),
        ("out", "output directory"),
        ("exec", "parallel | sequential"),
        ("train.lr0 / lrf / momentum / batch_size / epochs", "SGD schedule"),
        ("train.resume", "checkpoint to resume from"),
        ("model.stem_width / widths / depths / num_classes", "architecture"),
        ("model.box_loss / obj_prior", "ciou | l1; initial objectness bias"),
        ("fusion.setting", "ablation setting 0-4"),
        ("fusion.fmsa / fus / fds", "module toggles"),
        ("fusion.channels / heads / depth / mlp_ratio", "fusion widths"),
        ("fusion.gaus_mode / nearest_fallback / compensate", "fusion variants"),
        ("data.train_dir / val_dir", "PPM datasets (synthetic when empty)"),
        (
            "data.train_count / val_count / train_seed / val_seed",
            "synthetic splits",
        ),
        (
            "data.min_objects / max_objects / min_size / max_size / clutter / occlusion",
            "scene template",
        ),
        ("ablate.seeds / settings", "ablation sweep"),
        ("gradcheck.shapes / probes / epsilon / tolerance", "gradient check"),
        ("bench.runs / warmup / settings", "latency benchmark"),
        ("render.conf / nms_iou", "overlay thresholds"),
    ])
}
