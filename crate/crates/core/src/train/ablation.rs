use super::eval::evaluate;
use super::fit::fit;
use super::trainer::{TrainConfig, Trainer};
use crate::data::Dataset;
use crate::detector::{compensate, count_params_flops, Depths, ModelConfig, PARAM_TOLERANCE};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, ABLATION_SETTINGS};
use crate::metrics::MetricsReport;
use crate::par::{map_range, Exec};

/// Seeds shared by every setting.
pub const ABLATION_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

#[derive(Clone, Debug)]
pub struct AblationPlan {
    /// Widths, depths and fusion hyper-parameters; the module toggles are
    /// overwritten per setting.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub settings: Vec<usize>,
    /// Run the depth-compensation search for fusion settings.
    pub compensate: bool,
}

impl Default for AblationPlan {
    fn default() -> Self {
        AblationPlan {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            seeds: ABLATION_SEEDS.to_vec(),
            settings: (0..ABLATION_SETTINGS.len()).collect(),
            compensate: true,
        }
    }
}

/// One ablation setting: its model, cost and per-seed validation results.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub setting: usize,
    pub fmsa: bool,
    pub fus: bool,
    pub fds: bool,
    pub depths: Depths,
    pub params: u64,
    pub flops: u64,
    pub runs: Vec<MetricsReport>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

impl AblationRow {
    fn med(&self, f: impl Fn(&MetricsReport) -> f64) -> f64 {
        median(&self.runs.iter().map(f).collect::<Vec<_>>())
    }

    pub fn precision(&self) -> f64 {
        self.med(|r| r.precision)
    }

    pub fn recall(&self) -> f64 {
        self.med(|r| r.recall)
    }

    pub fn map50(&self) -> f64 {
        self.med(|r| r.map50)
    }

    pub fn map50_95(&self) -> f64 {
        self.med(|r| r.map50_95)
    }
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
    pub baseline_params: u64,
}

pub const ABLATION_CSV_HEADER: &str = "setting,fmsa,fus,fds,params,flops,P,R,mAP50,mAP50-90";

impl AblationReport {
    pub fn row(&self, setting: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    /// Every row within [`PARAM_TOLERANCE`] of the baseline parameter count.
    pub fn check_param_budget(&self) -> Result<()> {
        for r in &self.rows {
            let gap = r.params.abs_diff(self.baseline_params) as f64 / self.baseline_params as f64;
            if gap > PARAM_TOLERANCE {
                return Err(Error::Config(format!(
                    "setting {} has {} params, {:.2}% away from the baseline {}",
                    r.setting,
                    r.params,
                    gap * 100.0,
                    self.baseline_params
                )));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{ABLATION_CSV_HEADER}\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.setting,
                u8::from(r.fmsa),
                u8::from(r.fus),
                u8::from(r.fds),
                r.params,
                r.flops,
                r.precision(),
                r.recall(),
                r.map50(),
                r.map50_95()
            ));
        }
        s
    }

    /// Markdown table of medians over the seed set, in percent.
    pub fn to_markdown(&self) -> String {
        let tick = |b: bool| if b { "✓" } else { "" };
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let mut s = format!(
            "Medians over seeds {{{}}}; P and R at confidence {}.\n\n\
             | Setting | FMSA | FUS | FDS | P | R | mAP50 | mAP50-90 | Params |\n\
             |---|---|---|---|---|---|---|---|---|\n",
            seeds.join(", "),
            crate::metrics::OPERATING_CONFIDENCE
        );
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {:.1} | {:.1} | {:.1} | {:.1} | {} |\n",
                r.setting,
                tick(r.fmsa),
                tick(r.fus),
                tick(r.fds),
                100.0 * r.precision(),
                100.0 * r.recall(),
                100.0 * r.map50(),
                100.0 * r.map50_95(),
                r.params
            ));
        }
        s
    }
}

/// Model configuration of `setting` under `plan`, compensated if requested.
pub fn setting_config(plan: &AblationPlan, setting: usize) -> Result<ModelConfig> {
    let base = FusionConfig::setting(setting, plan.model.fusion.channels)?;
    let mut cfg = plan.model.clone();
    cfg.fusion.enable_fmsa = base.enable_fmsa;
    cfg.fusion.enable_fus = base.enable_fus;
    cfg.fusion.enable_fds = base.enable_fds;
    if plan.compensate && setting != 0 {
        cfg = compensate(&cfg)?.config;
    }
    Ok(cfg)
}

/// Train every (setting, seed) pair on `train`, evaluate the final weights on
/// `val`, and assert the parameter budget.
pub fn run_ablation(
    plan: &AblationPlan,
    train: &Dataset,
    val: &Dataset,
    on_run: impl Fn(usize, u64, &MetricsReport) + Sync,
) -> Result<AblationReport> {
    let configs = plan
        .settings
        .iter()
        .map(|&s| setting_config(plan, s))
        .collect::<Result<Vec<_>>>()?;
    let baseline_params = count_params_flops(&plan.model.as_baseline())?.params;
    let jobs: Vec<(usize, u64)> = (0..configs.len())
        .flat_map(|k| plan.seeds.iter().map(move |&s| (k, s)))
        .collect();
    let results = map_range(plan.train.exec, jobs.len(), |j| -> Result<MetricsReport> {
        let (k, seed) = jobs[j];
        let tc = TrainConfig {
            seed,
            exec: Exec::Sequential,
            ..plan.train.clone()
        };
        let mut trainer = Trainer::new(&configs[k], &tc)?;
        fit(&mut trainer, train, None, None, |_, _| {})?;
        let m = evaluate(&trainer.model, val, Exec::Sequential)?;
        on_run(plan.settings[k], seed, &m);
        Ok(m)
    });
    let mut results = results.into_iter();
    let mut rows = Vec::new();
    for (k, cfg) in configs.iter().enumerate() {
        let runs = (0..plan.seeds.len())
            .map(|_| results.next().expect("one result per job"))
            .collect::<Result<Vec<_>>>()?;
        let cost = count_params_flops(cfg)?;
        let f = &cfg.fusion;
        rows.push(AblationRow {
            setting: plan.settings[k],
            fmsa: f.enable_fmsa,
            fus: f.enable_fus,
            fds: f.enable_fds,
            depths: cfg.depths,
            params: cost.params,
            flops: cost.flops,
            runs,
        });
    }
    let report = AblationReport {
        rows,
        seeds: plan.seeds.clone(),
        baseline_params,
    };
    report.check_param_budget()?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn compensated_settings_fit_the_budget() {
        let plan = AblationPlan::default();
        let base = count_params_flops(&plan.model.as_baseline()).unwrap().params;
        for s in 0..5 {
            let p = count_params_flops(&setting_config(&plan, s).unwrap()).unwrap().params;
            assert!(p.abs_diff(base) as f64 <= PARAM_TOLERANCE * base as f64);
        }
    }
}
