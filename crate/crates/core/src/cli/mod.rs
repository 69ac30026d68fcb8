//! Experiment runner: configuration, the end-to-end pipeline, report and
//! plot-data emission, and the DLA versus MC-dropout timing benchmark.

mod bench;
mod config;
mod pipeline;
mod report;

pub use bench::{bench_uncertainty, BenchPoint, BenchReport};
pub use config::{DatasetKind, RunConfig};
pub use pipeline::{
    bench_backbone, calibrate_stage, create_out_dir, explain_stage, load_backbone, prepare_data, run_experiment, run_sweep, train_backbone,
    train_nam, ExplainReport, ExplainSample, Prepared, RunReport, StageError, StageExt, StageResult, SweepRow,
    TrainOutcome, UncertaintyBundle, UncertaintyReport, write_sweep, AuditSummary,
};
pub use report::{emit_plot_data, samples_csv, sweep_csv, write_json, SampleRow};

/// Sizes the global worker pool: `threads` (0 = all cores), capped by the
/// `FEDNAM_THREADS` environment variable. Only the first call has an effect.
pub fn configure_threads(threads: usize) {
    let mut n = if threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        threads
    };
    if let Some(cap) = std::env::var("FEDNAM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if cap > 0 {
            n = n.min(cap);
        }
    }
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
}
