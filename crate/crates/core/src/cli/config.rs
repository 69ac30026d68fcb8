//! Run configuration in a flat `key = value` text format.
//!
//! Blank lines and lines starting with `#` are ignored. Lists are comma
//! separated. [`RunConfig::to_text`] writes every key in a fixed order, and
//! parsing that text reproduces the configuration exactly.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::conformal::{DlaConfig, QuantileRule};
use crate::error::{Error, Result};
use crate::fedsim::BatchSize;
use crate::interpret::Ranking;
use crate::models::ContributionMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Mnist,
    Synth,
    Csv,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(Self::Mnist),
            "synth" => Ok(Self::Synth),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!("unknown dataset {other:?} (mnist, synth, csv)"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mnist => "mnist",
            Self::Synth => "synth",
            Self::Csv => "csv",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub mnist_dir: PathBuf,
    pub csv_path: PathBuf,
    pub csv_label: String,
    pub synth_n: usize,
    pub synth_d: usize,
    pub synth_k: usize,
    /// Held-out test fraction for synthetic and CSV data (MNIST uses t10k).
    pub test_fraction: f64,
    /// Random training subset size; 0 keeps everything.
    pub train_subset: usize,
    pub test_subset: usize,
    pub calibration_fraction: f64,

    pub clients: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: BatchSize,
    pub hidden: Vec<usize>,
    pub audit: bool,

    pub alpha: f64,
    pub beta: f64,
    pub epsilon: f64,
    pub quantile_rule: QuantileRule,
    pub include_argmax: bool,
    pub mc_passes: usize,
    pub dropout_rate: f64,

    pub nam_hidden: Vec<usize>,
    pub nam_rounds: usize,
    pub nam_epochs: usize,
    pub nam_lr: f64,
    pub nam_batch_size: BatchSize,
    pub nam_subset: usize,
    pub contribution_mode: ContributionMode,
    pub ranking: Ranking,
    pub top_fraction: f64,
    pub overlays_per_client: usize,

    pub sweep_alphas: Vec<f64>,
    pub sweep_seeds: usize,
    pub bench_n: usize,
    pub bench_sizes: Vec<usize>,
    pub bench_reps: usize,

    pub seed: u64,
    pub out: PathBuf,
    /// Worker threads; 0 uses all cores (capped by `FEDNAM_THREADS`).
    pub threads: usize,
    pub record_timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Mnist,
            mnist_dir: PathBuf::from("data/mnist"),
            csv_path: PathBuf::new(),
            csv_label: "label".into(),
            synth_n: 6000,
            synth_d: 20,
            synth_k: 5,
            test_fraction: 0.2,
            train_subset: 0,
            test_subset: 0,
            calibration_fraction: 0.2,
            clients: 3,
            rounds: 5,
            local_epochs: 1,
            lr: 0.01,
            batch_size: BatchSize::Mini(32),
            hidden: vec![128, 64],
            audit: true,
            alpha: 0.1,
            beta: 1.5,
            epsilon: 1e-8,
            quantile_rule: QuantileRule::FiniteSample,
            include_argmax: false,
            mc_passes: 16,
            dropout_rate: 0.2,
            nam_hidden: vec![16, 16],
            nam_rounds: 3,
            nam_epochs: 1,
            nam_lr: 0.002,
            nam_batch_size: BatchSize::Mini(32),
            nam_subset: 12000,
            contribution_mode: ContributionMode::Gradient,
            ranking: Ranking::Magnitude,
            top_fraction: 0.3,
            overlays_per_client: 2,
            sweep_alphas: vec![0.05, 0.1, 0.2],
            sweep_seeds: 20,
            bench_n: 1024,
            bench_sizes: vec![256, 1024, 4096],
            bench_reps: 5,
            seed: 42,
            out: PathBuf::from("out"),
            threads: 0,
            record_timing: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true/false, got {value:?}"))),
    }
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "dataset" => self.dataset = v.parse()?,
            "mnist_dir" => self.mnist_dir = PathBuf::from(v),
            "csv_path" => self.csv_path = PathBuf::from(v),
            "csv_label" => self.csv_label = v.to_string(),
            "synth_n" => self.synth_n = parse(key, v)?,
            "synth_d" => self.synth_d = parse(key, v)?,
            "synth_k" => self.synth_k = parse(key, v)?,
            "test_fraction" => self.test_fraction = parse(key, v)?,
            "train_subset" => self.train_subset = parse(key, v)?,
            "test_subset" => self.test_subset = parse(key, v)?,
            "calibration_fraction" => self.calibration_fraction = parse(key, v)?,
            "clients" => self.clients = parse(key, v)?,
            "rounds" => self.rounds = parse(key, v)?,
            "local_epochs" => self.local_epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = v.parse()?,
            "hidden" => self.hidden = parse_list(key, v)?,
            "audit" => self.audit = parse_bool(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "quantile_rule" => self.quantile_rule = v.parse()?,
            "include_argmax" => self.include_argmax = parse_bool(key, v)?,
            "mc_passes" => self.mc_passes = parse(key, v)?,
            "dropout_rate" => self.dropout_rate = parse(key, v)?,
            "nam_hidden" => self.nam_hidden = parse_list(key, v)?,
            "nam_rounds" => self.nam_rounds = parse(key, v)?,
            "nam_epochs" => self.nam_epochs = parse(key, v)?,
            "nam_lr" => self.nam_lr = parse(key, v)?,
            "nam_batch_size" => self.nam_batch_size = v.parse()?,
            "nam_subset" => self.nam_subset = parse(key, v)?,
            "contribution_mode" => self.contribution_mode = v.parse()?,
            "ranking" => self.ranking = v.parse()?,
            "top_fraction" => self.top_fraction = parse(key, v)?,
            "overlays_per_client" => self.overlays_per_client = parse(key, v)?,
            "sweep_alphas" => self.sweep_alphas = parse_list(key, v)?,
            "sweep_seeds" => self.sweep_seeds = parse(key, v)?,
            "bench_n" => self.bench_n = parse(key, v)?,
            "bench_sizes" => self.bench_sizes = parse_list(key, v)?,
            "bench_reps" => self.bench_reps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "threads" => self.threads = parse(key, v)?,
            "record_timing" => self.record_timing = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Every key and its value, in file order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("dataset", self.dataset.to_string()),
            ("mnist_dir", self.mnist_dir.display().to_string()),
            ("csv_path", self.csv_path.display().to_string()),
            ("csv_label", self.csv_label.clone()),
            ("synth_n", self.synth_n.to_string()),
            ("synth_d", self.synth_d.to_string()),
            ("synth_k", self.synth_k.to_string()),
            ("test_fraction", self.test_fraction.to_string()),
            ("train_subset", self.train_subset.to_string()),
            ("test_subset", self.test_subset.to_string()),
            ("calibration_fraction", self.calibration_fraction.to_string()),
            ("clients", self.clients.to_string()),
            ("rounds", self.rounds.to_string()),
            ("local_epochs", self.local_epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("hidden", join(&self.hidden)),
            ("audit", self.audit.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("epsilon", self.epsilon.to_string()),
            ("quantile_rule", self.quantile_rule.to_string()),
            ("include_argmax", self.include_argmax.to_string()),
            ("mc_passes", self.mc_passes.to_string()),
            ("dropout_rate", self.dropout_rate.to_string()),
            ("nam_hidden", join(&self.nam_hidden)),
            ("nam_rounds", self.nam_rounds.to_string()),
            ("nam_epochs", self.nam_epochs.to_string()),
            ("nam_lr", self.nam_lr.to_string()),
            ("nam_batch_size", self.nam_batch_size.to_string()),
            ("nam_subset", self.nam_subset.to_string()),
            ("contribution_mode", self.contribution_mode.to_string()),
            ("ranking", self.ranking.to_string()),
            ("top_fraction", self.top_fraction.to_string()),
            ("overlays_per_client", self.overlays_per_client.to_string()),
            ("sweep_alphas", join(&self.sweep_alphas)),
            ("sweep_seeds", self.sweep_seeds.to_string()),
            ("bench_n", self.bench_n.to_string()),
            ("bench_sizes", join(&self.bench_sizes)),
            ("bench_reps", self.bench_reps.to_string()),
            ("seed", self.seed.to_string()),
            ("out", self.out.display().to_string()),
            ("threads", self.threads.to_string()),
            ("record_timing", self.record_timing.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn dla(&self) -> DlaConfig {
        DlaConfig {
            alpha: self.alpha,
            beta: self.beta,
            epsilon: self.epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.clients == 0 {
            return bad("clients must be >= 1".into());
        }
        if self.local_epochs == 0 || self.nam_epochs == 0 {
            return bad("local_epochs and nam_epochs must be >= 1".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.nam_lr >= 0.0 && self.nam_lr.is_finite()) {
            return bad(format!("learning rates must be finite and >= 0 (lr={}, nam_lr={})", self.lr, self.nam_lr));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad(format!("alpha {} outside (0, 1)", self.alpha));
        }
        self.dla().validate()?;
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if self.mc_passes == 0 {
            return bad("mc_passes must be >= 1".into());
        }
        for (name, f) in [
            ("calibration_fraction", self.calibration_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(f > 0.0 && f < 1.0) {
                return bad(format!("{name} {f} outside (0, 1)"));
            }
        }
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return bad(format!("top_fraction {} outside (0, 1]", self.top_fraction));
        }
        if self.hidden.contains(&0) || self.nam_hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if self.sweep_alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return bad("sweep_alphas must lie in (0, 1)".into());
        }
        if self.bench_reps < 5 {
            return bad(format!("bench_reps {} < 5", self.bench_reps));
        }
        if self.bench_n == 0 || self.bench_sizes.contains(&0) {
            return bad("benchmark batch sizes must be positive".into());
        }
        if self.dataset == DatasetKind::Csv && self.csv_path.as_os_str().is_empty() {
            return bad("dataset = csv requires csv_path".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.alpha = 0.05;
        cfg.epsilon = 3.0e-9;
        cfg.hidden = vec![7];
        cfg.batch_size = BatchSize::Full;
        cfg.sweep_alphas = vec![0.1, 0.3];
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_errors() {
        let cfg = RunConfig::from_text("# test\n\nrounds = 2\n dataset=synth \n").unwrap();
        assert_eq!(cfg.rounds, 2);
        assert_eq!(cfg.dataset, DatasetKind::Synth);
        assert!(RunConfig::from_text("rounds 2").is_err());
        assert!(RunConfig::from_text("bogus = 1").is_err());
        assert!(RunConfig::from_text("alpha = x").is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let bad = [
            "alpha = 1.5",
            "beta = 0.5",
            "epsilon = 0",
            "clients = 0",
            "dropout_rate = 1",
            "bench_reps = 3",
            "dataset = csv",
            "top_fraction = 0",
        ];
        for line in bad {
            assert!(RunConfig::from_text(line).unwrap().validate().is_err(), "{line}");
        }
    }
}
