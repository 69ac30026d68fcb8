use std::time::Instant;

use serde::Serialize;

use crate::conformal::{dla_widths, DlaConfig};
use crate::error::{Error, Result};
use crate::models::{mc_dropout_predict, MlpModel};
use crate::numkit::{Matrix, Rng};

use super::config::RunConfig;

/// Median wall times at one batch size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchPoint {
    pub n: usize,
    /// Seconds for one DLA evaluation of the batch.
    pub t_dla: f64,
    /// Seconds for all `passes` MC-dropout forward passes of the batch.
    pub t_mc: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub passes: usize,
    pub reps: usize,
    pub n: usize,
    pub t_dla: f64,
    pub t_mc: f64,
    /// `t_mc / t_dla`.
    pub ratio: f64,
    pub scaling: Vec<BenchPoint>,
}

fn median_secs(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        times.push(start.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let m = times.len() / 2;
    let t = if times.len() % 2 == 0 {
        (times[m - 1] + times[m]) / 2.0
    } else {
        times[m]
    };
    // Clock resolution floor keeps the ratio finite.
    Ok(t.max(1e-9))
}

/// `n` rows taken cyclically from `pool`.
fn cyclic_batch(pool: &Matrix, n: usize) -> Matrix {
    let idx: Vec<usize> = (0..n).map(|i| i % pool.rows()).collect();
    pool.select_rows(&idx)
}

fn bench_point(model: &MlpModel, batch: &Matrix, dla: &DlaConfig, cfg: &RunConfig) -> Result<BenchPoint> {
    let t_dla = median_secs(cfg.bench_reps, || dla_widths(model, batch, None, dla).map(|_| ()))?;
    let mut rng = Rng::new(cfg.seed);
    let t_mc = median_secs(cfg.bench_reps, || {
        mc_dropout_predict(model, batch, cfg.mc_passes, cfg.dropout_rate, &mut rng).map(|_| ())
    })?;
    Ok(BenchPoint {
        n: batch.rows(),
        t_dla,
        t_mc,
        ratio: t_mc / t_dla,
    })
}

/// Times DLA (forward, input-gradient backward, median) against MC dropout
/// with `mc_passes` passes on identical pre-built batches drawn from `pool`.
/// Each time is the median of `bench_reps` runs after one warm-up run.
pub fn bench_uncertainty(cfg: &RunConfig, model: &MlpModel, pool: &Matrix) -> Result<BenchReport> {
    if cfg.mc_passes < 2 {
        return Err(Error::Config(format!(
            "benchmark needs at least 2 MC passes, got {}",
            cfg.mc_passes
        )));
    }
    if cfg.bench_reps < 5 {
        return Err(Error::Config(format!("benchmark needs at least 5 repetitions, got {}", cfg.bench_reps)));
    }
    if pool.rows() == 0 {
        return Err(Error::Config("benchmark pool is empty".into()));
    }
    let dla = cfg.dla();
    let main = bench_point(model, &cyclic_batch(pool, cfg.bench_n), &dla, cfg)?;
    let scaling = cfg
        .bench_sizes
        .iter()
        .map(|&n| bench_point(model, &cyclic_batch(pool, n), &dla, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(BenchReport {
        passes: cfg.mc_passes,
        reps: cfg.bench_reps,
        n: main.n,
        t_dla: main.t_dla,
        t_mc: main.t_mc,
        ratio: main.ratio,
        scaling,
    })
}
