//! Gradient-check suite, cost benchmarking and detection overlays.

mod bench;
mod gradcheck_suite;
mod render;

pub use bench::{bench_config, bench_csv, BenchOptions, BenchRow, BENCH_CSV_HEADER};
pub use gradcheck_suite::{run_gradcheck_suite, BlockReport, SuiteOptions, SUITE_BLOCKS};
pub use render::{box_pixels, class_color, draw_detections, sidecar};
