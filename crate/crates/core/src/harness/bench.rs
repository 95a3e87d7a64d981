use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::detector::{count_params_flops, Detector, ModelConfig};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct BenchOptions {
    pub runs: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            runs: 30,
            warmup: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub label: String,
    pub image_size: usize,
    pub params: u64,
    pub flops: u64,
    /// Median single-image forward latency.
    pub median_ms: f64,
}

pub const BENCH_CSV_HEADER: &str = "config,image_size,params,flops,median_ms,params_delta,flops_delta";

/// Analytic cost plus measured forward latency of `cfg` at its image size.
pub fn bench_config(label: &str, cfg: &ModelConfig, opts: &BenchOptions) -> Result<BenchRow> {
    let cost = count_params_flops(cfg)?;
    let model = Detector::new(cfg, opts.seed)?;
    let s = cfg.image_size;
    let image = Tensor::uniform(&[1, 3, s, s], 1.0, &mut ChaCha8Rng::seed_from_u64(opts.seed));
    for _ in 0..opts.warmup {
        model.predict(&image)?;
    }
    let mut times: Vec<f64> = (0..opts.runs.max(1))
        .map(|_| {
            let t = Instant::now();
            model.predict(&image).map(|_| t.elapsed().as_secs_f64() * 1e3)
        })
        .collect::<Result<_>>()?;
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median_ms = if n % 2 == 1 {
        times[n / 2]
    } else {
        (times[n / 2 - 1] + times[n / 2]) / 2.0
    };
    Ok(BenchRow {
        label: label.to_string(),
        image_size: s,
        params: cost.params,
        flops: cost.flops,
        median_ms,
    })
}

/// CSV with deltas relative to the first row.
pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_CSV_HEADER}\n");
    let (p0, f0) = rows.first().map_or((0, 0), |r| (r.params as i64, r.flops as i64));
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{:.3},{:+},{:+}\n",
            r.label,
            r.image_size,
            r.params,
            r.flops,
            r.median_ms,
            r.params as i64 - p0,
            r.flops as i64 - f0
        ));
    }
    s
}
