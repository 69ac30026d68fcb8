use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::conformal::{
    calibrate_with, classwise_uncertainty, coverage_audit, coverage_sweep, dla_widths, mean_set_size,
    nonconformity, prediction_sets, SweepPoint,
};
use crate::dataio::{load_mnist, partition_iid, read_csv_tabular, synth_classification, Dataset, MnistSplit};
use crate::error::{Error, Result};
use crate::fedsim::{descent_audit, history_csv, AuditReport, Federation, RoundRecord, TrainConfig};
use crate::interpret::{
    export_overlay, nam_contribution_maps, sensitivity_map, top_fraction_mask_with, ContributionSource,
};
use crate::models::{mc_dropout_predict, Classifier, MlpModel, NamModel, ParamVector};
use crate::numkit::{argmax, softmax, Matrix, Rng};

use super::config::{DatasetKind, RunConfig};
use super::report::{emit_plot_data, samples_csv, sweep_csv, write_json, write_text, SampleRow};

/// Slack tolerance used for the descent audit in run reports.
const AUDIT_TOL: f64 = 1e-3;

const STREAM_INIT: u64 = 0x1000;
const STREAM_HOLDOUT: u64 = 0x2000;
const STREAM_TEST_SPLIT: u64 = 0x3000;
const STREAM_MC: u64 = 0x4000;
const STREAM_NAM_INIT: u64 = 0x5000;
const STREAM_NAM_FED: u64 = 0x6000;
const STREAM_SWEEP: u64 = 0x7000;

/// A module error tagged with the pipeline stage it came from.
#[derive(Debug)]
pub struct StageError {
    pub stage: &'static str,
    pub error: Error,
}

impl StageError {
    pub fn exit_code(&self) -> i32 {
        self.error.exit_code()
    }
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "stage {}: {}", self.stage, self.error)
    }
}

impl std::error::Error for StageError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

pub type StageResult<T> = std::result::Result<T, StageError>;

pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> StageResult<T>;
}

impl<T> StageExt<T> for Result<T> {
    fn stage(self, stage: &'static str) -> StageResult<T> {
        self.map_err(|error| StageError { stage, error })
    }
}

/// Client shards after the calibration holdout, plus the test set.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train_parts: Vec<Dataset>,
    pub cal_parts: Vec<Dataset>,
    pub test: Dataset,
    pub root: Rng,
}

impl Prepared {
    pub fn dim(&self) -> usize {
        self.test.dim()
    }

    pub fn classes(&self) -> usize {
        self.test.classes()
    }

    pub fn backbone_dims(&self, cfg: &RunConfig) -> Vec<usize> {
        let mut dims = vec![self.dim()];
        dims.extend(&cfg.hidden);
        dims.push(self.classes());
        dims
    }
}

fn load_datasets(cfg: &RunConfig, root: &Rng) -> Result<(Dataset, Dataset)> {
    let (train, test) = match cfg.dataset {
        DatasetKind::Mnist => (
            load_mnist(&cfg.mnist_dir, MnistSplit::Train)?,
            load_mnist(&cfg.mnist_dir, MnistSplit::Test)?,
        ),
        DatasetKind::Synth => {
            let (ds, _) = synth_classification(cfg.synth_n, cfg.synth_d, cfg.synth_k, cfg.seed)?;
            ds.split_holdout(cfg.test_fraction, &mut root.split(STREAM_TEST_SPLIT))?
        }
        DatasetKind::Csv => read_csv_tabular(&cfg.csv_path, &cfg.csv_label)?
            .split_holdout(cfg.test_fraction, &mut root.split(STREAM_TEST_SPLIT))?,
    };
    if train.classes() != test.classes() || train.dim() != test.dim() {
        return Err(Error::Consistency(format!(
            "train ({} features, {} classes) and test ({} features, {} classes) disagree",
            train.dim(),
            train.classes(),
            test.dim(),
            test.classes()
        )));
    }
    Ok((train.head(cfg.train_subset), test.head(cfg.test_subset)))
}

/// Loads data, partitions the training set IID across clients and holds out
/// `calibration_fraction` of every shard for calibration.
pub fn prepare_data(cfg: &RunConfig) -> StageResult<Prepared> {
    cfg.validate().stage("config")?;
    let root = Rng::new(cfg.seed);
    let (train, test) = load_datasets(cfg, &root).stage("data")?;
    let plan = partition_iid(train.len(), cfg.clients, cfg.seed).stage("partition")?;
    let mut train_parts = Vec::with_capacity(cfg.clients);
    let mut cal_parts = Vec::with_capacity(cfg.clients);
    for (k, idx) in plan.indices.iter().enumerate() {
        let shard = train.subset(idx).stage("partition")?;
        let (fit, cal) = shard
            .split_holdout(cfg.calibration_fraction, &mut root.split(STREAM_HOLDOUT + k as u64))
            .map_err(|e| Error::Partition(format!("client {k}: {e}")))
            .stage("partition")?;
        train_parts.push(fit);
        cal_parts.push(cal);
    }
    Ok(Prepared {
        train_parts,
        cal_parts,
        test,
        root,
    })
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub history: Vec<RoundRecord>,
    /// Global test accuracy before training and after every round.
    pub test_accuracy: Vec<f64>,
    pub audit: Option<AuditReport>,
}

impl TrainOutcome {
    /// Round history with a `test_accuracy` column (accuracy after the round).
    pub fn history_csv(&self) -> String {
        let base = history_csv(&self.history);
        let mut lines = base.lines();
        let mut out = String::new();
        if let Some(header) = lines.next() {
            out.push_str(header);
            out.push_str(",test_accuracy\n");
        }
        for (line, acc) in lines.zip(self.test_accuracy.iter().skip(1)) {
            out.push_str(&format!("{line},{acc}\n"));
        }
        out
    }
}

/// Federated training of the MLP backbone.
pub fn train_backbone(cfg: &RunConfig, prep: &Prepared) -> Result<TrainOutcome> {
    let dims = prep.backbone_dims(cfg);
    let model = MlpModel::init(&dims, &mut prep.root.split(STREAM_INIT))?;
    let train_cfg = TrainConfig {
        lr: cfg.lr,
        epochs: cfg.local_epochs,
        batch: cfg.batch_size,
    };
    let mut fed = Federation::new(model, prep.train_parts.clone(), train_cfg, &prep.root)?;
    fed.with_gradient = cfg.audit;
    let test = &prep.test;
    let mut test_accuracy = vec![fed.global_model()?.accuracy(test.features(), test.labels())?];
    for _ in 0..cfg.rounds {
        fed.run_round()?;
        test_accuracy.push(fed.global_model()?.accuracy(test.features(), test.labels())?);
    }
    let history = fed.server.history.clone();
    let audit = if cfg.audit && history.len() >= 2 {
        Some(descent_audit(&history, AUDIT_TOL)?)
    } else {
        None
    };
    Ok(TrainOutcome {
        model: fed.global_model()?,
        history,
        test_accuracy,
        audit,
    })
}

/// Reads a backbone checkpoint whose layout must match the configured dims.
pub fn load_backbone(cfg: &RunConfig, prep: &Prepared, path: &Path) -> Result<MlpModel> {
    let mut model = MlpModel::zeros(&prep.backbone_dims(cfg))?;
    model.unflatten(&ParamVector::load(path)?)?;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UncertaintyReport {
    pub config: BTreeMap<&'static str, String>,
    pub provenance: String,
    pub classes: usize,
    pub n_train: usize,
    pub n_cal: usize,
    pub n_test: usize,
    pub tau: f64,
    pub per_client_tau: Vec<f64>,
    pub per_client_n_cal: Vec<usize>,
    pub coverage: f64,
    pub mean_set_size: f64,
    pub empty_sets: usize,
    pub accuracy_backbone: f64,
    pub accuracy_wrapped: f64,
    pub accuracy_delta: f64,
    pub argmax_changes: usize,
    pub dla_threshold: f64,
    pub overall_mean_width: f64,
    /// Mean DLA width per predicted class; `null` for classes never predicted.
    pub class_uncertainty: Vec<Option<f64>>,
    pub class_counts: Vec<usize>,
    pub class_uncertainty_ratio: Option<f64>,
    /// Mean MC-dropout standard deviation of the predicted-class probability.
    pub mc_class_std: Vec<Option<f64>>,
    pub mc_mean_std: f64,
    pub coverage_sweep: Vec<SweepPoint>,
    pub descent_audit: Option<AuditSummary>,
    pub test_accuracy_by_round: Vec<f64>,
    pub timing: Option<BTreeMap<&'static str, f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditSummary {
    pub tol: f64,
    pub fraction_within: f64,
    pub max_slack: f64,
    pub slacks: Vec<f64>,
}

impl From<&AuditReport> for AuditSummary {
    fn from(a: &AuditReport) -> Self {
        Self {
            tol: a.tol,
            fraction_within: a.fraction_within,
            max_slack: a.max_slack,
            slacks: a.slacks.clone(),
        }
    }
}

/// Everything the uncertainty stage produces.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyBundle {
    pub report: UncertaintyReport,
    pub samples: Vec<SampleRow>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Calibration, prediction sets, DLA widths, class-wise aggregation and MC
/// dropout on the test set. `train` optionally supplies the training
/// history for the report.
pub fn calibrate_stage(
    cfg: &RunConfig,
    prep: &Prepared,
    model: &MlpModel,
    train: Option<&TrainOutcome>,
) -> Result<UncertaintyBundle> {
    let mut per_client_tau = Vec::with_capacity(prep.cal_parts.len());
    let mut pooled = Vec::new();
    for cal in &prep.cal_parts {
        let scores = nonconformity(&model.probabilities(cal.features())?, cal.labels())?;
        per_client_tau.push(calibrate_with(&scores, cfg.alpha, cfg.quantile_rule)?.tau);
        pooled.extend(scores);
    }
    let calibration = calibrate_with(&pooled, cfg.alpha, cfg.quantile_rule)?;

    let test = &prep.test;
    let labels = test.labels();
    let k = prep.classes();
    let logits = model.forward(test.features())?;
    let probs = softmax(&logits);
    let predicted = logits.argmax_rows();
    let sets = prediction_sets(&probs, calibration.tau, cfg.include_argmax);
    let coverage = coverage_audit(&sets, labels)?;

    // The wrapped prediction is the highest-scoring label inside the set.
    let wrapped: Vec<usize> = sets
        .iter()
        .zip(logits.iter_rows())
        .map(|(set, row)| {
            set.iter()
                .copied()
                .fold(None, |best: Option<usize>, c| match best {
                    Some(b) if row[b] >= row[c] => Some(b),
                    _ => Some(c),
                })
                .unwrap_or_else(|| argmax(row))
        })
        .collect();
    let accuracy = |pred: &[usize]| pred.iter().zip(labels).filter(|(p, y)| p == y).count() as f64 / labels.len() as f64;
    let accuracy_backbone = accuracy(&predicted);
    let accuracy_wrapped = accuracy(&wrapped);
    let argmax_changes = predicted.iter().zip(&wrapped).filter(|(a, b)| a != b).count();

    let dla = dla_widths(model, test.features(), None, &cfg.dla())?;
    let classwise = classwise_uncertainty(&dla.widths, &predicted, k)?;
    let class_uncertainty_ratio = {
        let present: Vec<f64> = classwise.present().collect();
        let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (!present.is_empty() && lo > 0.0).then(|| hi / lo)
    };

    let (_, mc_std) = mc_dropout_predict(
        model,
        test.features(),
        cfg.mc_passes,
        cfg.dropout_rate,
        &mut prep.root.split(STREAM_MC),
    )?;
    let predicted_std: Vec<f64> = predicted.iter().enumerate().map(|(i, &c)| mc_std.get(i, c)).collect();
    let mc_class = classwise_uncertainty(&predicted_std, &predicted, k)?;

    let sweep = coverage_sweep(&pooled, &probs, labels, &cfg.sweep_alphas, cfg.quantile_rule)?;

    let samples = (0..test.len())
        .map(|i| SampleRow {
            index: i,
            label: labels[i],
            predicted: predicted[i],
            top_prob: probs.get(i, predicted[i]),
            width: dla.widths[i],
            set_size: sets[i].len(),
            covered: sets[i].contains(&labels[i]),
            mc_std: predicted_std[i],
        })
        .collect();

    let report = UncertaintyReport {
        config: cfg.to_pairs().into_iter().collect(),
        provenance: test.provenance().to_string(),
        classes: k,
        n_train: prep.train_parts.iter().map(Dataset::len).sum(),
        n_cal: pooled.len(),
        n_test: test.len(),
        tau: calibration.tau,
        per_client_tau,
        per_client_n_cal: prep.cal_parts.iter().map(Dataset::len).collect(),
        coverage,
        mean_set_size: mean_set_size(&sets),
        empty_sets: sets.iter().filter(|s| s.is_empty()).count(),
        accuracy_backbone,
        accuracy_wrapped,
        accuracy_delta: accuracy_wrapped - accuracy_backbone,
        argmax_changes,
        dla_threshold: dla.threshold,
        overall_mean_width: mean(dla.widths.iter().copied()),
        class_uncertainty: classwise.mean_width,
        class_counts: classwise.counts,
        class_uncertainty_ratio,
        mc_class_std: mc_class.mean_width,
        mc_mean_std: mean(predicted_std.iter().copied()),
        coverage_sweep: sweep,
        descent_audit: train.and_then(|t| t.audit.as_ref()).map(AuditSummary::from),
        test_accuracy_by_round: train.map(|t| t.test_accuracy.clone()).unwrap_or_default(),
        timing: None,
    };
    Ok(UncertaintyBundle { report, samples })
}

/// Federated NAM training on the client shards (each truncated to its share
/// of `nam_subset`).
pub fn train_nam(cfg: &RunConfig, prep: &Prepared) -> Result<(NamModel, Vec<RoundRecord>)> {
    let nam = NamModel::init(prep.dim(), prep.classes(), &cfg.nam_hidden, &mut prep.root.split(STREAM_NAM_INIT))?;
    let per_client = if cfg.nam_subset == 0 {
        0
    } else {
        (cfg.nam_subset / cfg.clients).max(1)
    };
    let shards = prep.train_parts.iter().map(|p| p.head(per_client)).collect();
    let train_cfg = TrainConfig {
        lr: cfg.nam_lr,
        epochs: cfg.nam_epochs,
        batch: cfg.nam_batch_size,
    };
    let mut fed = Federation::new(nam, shards, train_cfg, &prep.root.split(STREAM_NAM_FED))?;
    fed.with_gradient = false;
    fed.run(cfg.nam_rounds)?;
    Ok((fed.global_model()?, fed.server.history.clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplainSample {
    pub client: usize,
    /// Row within the client's calibration shard.
    pub index: usize,
    pub label: usize,
    pub nam_predicted: usize,
    pub backbone_predicted: usize,
    pub selected: usize,
    /// Selected features shared with the backbone sensitivity mask.
    pub backbone_overlap: usize,
    /// Overlay base name inside the output directory, for image data.
    pub overlay: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExplainReport {
    pub nam_accuracy: f64,
    pub nam_round_losses: Vec<f64>,
    pub contribution_mode: String,
    pub ranking: String,
    pub top_fraction: f64,
    pub tie_rule: &'static str,
    pub samples: Vec<ExplainSample>,
}

/// NAM contributions and top-fraction masks for the first
/// `overlays_per_client` calibration rows of every client. Overlay images
/// go under `out/overlays` when the data has an image shape.
pub fn explain_stage(
    cfg: &RunConfig,
    prep: &Prepared,
    backbone: &MlpModel,
    nam: &NamModel,
    nam_history: &[RoundRecord],
    out: &Path,
) -> Result<ExplainReport> {
    let shape = prep.test.image_shape();
    let overlay_dir = out.join("overlays");
    if shape.is_some() && cfg.overlays_per_client > 0 {
        fs::create_dir_all(&overlay_dir).map_err(|e| Error::io(&overlay_dir, e))?;
    }
    let mut samples = Vec::new();
    let mut tie_rule = "";
    for (k, cal) in prep.cal_parts.iter().enumerate() {
        let take = cfg.overlays_per_client.min(cal.len());
        if take == 0 {
            continue;
        }
        let rows: Vec<usize> = (0..take).collect();
        let batch = cal.features().select_rows(&rows);
        let maps = nam_contribution_maps(nam, &batch, cfg.contribution_mode, shape)?;
        let nam_pred = nam.predict(&batch)?;
        let bb_pred = backbone.predict(&batch)?;
        for (i, map) in maps.iter().enumerate() {
            let mask = top_fraction_mask_with(&map.scores, cfg.top_fraction, cfg.ranking)?;
            tie_rule = mask.tie_rule;
            let sens = sensitivity_map(backbone, batch.row(i), bb_pred[i], ContributionSource::BackboneGradient)?;
            let bb_mask = top_fraction_mask_with(&sens.scores, cfg.top_fraction, cfg.ranking)?;
            let overlap = mask.bits.iter().zip(&bb_mask.bits).filter(|(a, b)| **a && **b).count();
            let overlay = match shape {
                Some((h, w)) => {
                    let name = format!("client{k}_{i}");
                    export_overlay(batch.row(i), h, w, &mask, &overlay_dir.join(&name))?;
                    Some(format!("overlays/{name}"))
                }
                None => None,
            };
            samples.push(ExplainSample {
                client: k,
                index: i,
                label: cal.labels()[i],
                nam_predicted: nam_pred[i],
                backbone_predicted: bb_pred[i],
                selected: mask.popcount(),
                backbone_overlap: overlap,
                overlay,
            });
        }
    }
    Ok(ExplainReport {
        nam_accuracy: nam.accuracy(prep.test.features(), prep.test.labels())?,
        nam_round_losses: nam_history.iter().map(|r| r.loss_after).collect(),
        contribution_mode: cfg.contribution_mode.to_string(),
        ranking: cfg.ranking.to_string(),
        top_fraction: cfg.top_fraction,
        tie_rule,
        samples,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
    /// `None` marks the mean over seeds.
    pub seed: Option<usize>,
    pub alpha: f64,
    pub tau: f64,
    pub coverage: f64,
    pub mean_set_size: f64,
}

/// Coverage versus α over `sweep_seeds` random re-splits of the pooled
/// calibration and test rows, keeping the calibration size fixed. The
/// final rows (`seed = None`) are means over seeds.
pub fn run_sweep(cfg: &RunConfig, prep: &Prepared, model: &MlpModel) -> Result<Vec<SweepRow>> {
    let mut parts: Vec<&Dataset> = prep.cal_parts.iter().collect();
    let n_cal: usize = parts.iter().map(|d| d.len()).sum();
    parts.push(&prep.test);
    let pool = Dataset::concat(&parts)?;
    let probs = model.probabilities(pool.features())?;
    let scores = nonconformity(&probs, pool.labels())?;
    let mut rows = Vec::new();
    let mut sums = vec![(0.0, 0.0, 0.0); cfg.sweep_alphas.len()];
    for s in 0..cfg.sweep_seeds {
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        prep.root.split(STREAM_SWEEP + s as u64).shuffle(&mut idx);
        let (cal_idx, test_idx) = idx.split_at(n_cal);
        let cal_scores: Vec<f64> = cal_idx.iter().map(|&i| scores[i]).collect();
        let test_probs: Matrix = probs.select_rows(test_idx);
        let test_labels: Vec<usize> = test_idx.iter().map(|&i| pool.labels()[i]).collect();
        let points = coverage_sweep(&cal_scores, &test_probs, &test_labels, &cfg.sweep_alphas, cfg.quantile_rule)?;
        for (acc, p) in sums.iter_mut().zip(&points) {
            acc.0 += p.tau;
            acc.1 += p.coverage;
            acc.2 += p.mean_set_size;
            rows.push(SweepRow {
                seed: Some(s),
                alpha: p.alpha,
                tau: p.tau,
                coverage: p.coverage,
                mean_set_size: p.mean_set_size,
            });
        }
    }
    if cfg.sweep_seeds > 0 {
        let n = cfg.sweep_seeds as f64;
        for (&alpha, &(t, c, m)) in cfg.sweep_alphas.iter().zip(&sums) {
            rows.push(SweepRow {
                seed: None,
                alpha,
                tau: t / n,
                coverage: c / n,
                mean_set_size: m / n,
            });
        }
    }
    Ok(rows)
}

/// Files and summaries of a full run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub train: TrainOutcome,
    pub uncertainty: UncertaintyBundle,
    pub explain: ExplainReport,
    pub files: Vec<PathBuf>,
}

struct Clock {
    enabled: bool,
    last: Instant,
    entries: BTreeMap<&'static str, f64>,
}

impl Clock {
    fn new(enabled: bool) -> Self {
        Self {
            enabled,
            last: Instant::now(),
            entries: BTreeMap::new(),
        }
    }

    fn lap(&mut self, stage: &'static str) {
        let now = Instant::now();
        if self.enabled {
            self.entries.insert(stage, (now - self.last).as_secs_f64());
        }
        self.last = now;
    }

    fn finish(self) -> Option<BTreeMap<&'static str, f64>> {
        self.enabled.then_some(self.entries)
    }
}

pub fn create_out_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

/// The whole pipeline: partition, federated rounds, calibration, prediction
/// sets, DLA widths, NAM training, contributions, masks and class-wise
/// uncertainty. Writes into `cfg.out`:
///
/// * `config.txt`, `round_history.csv`, `model.fnpv`
/// * `uncertainty_report.json`, `samples.csv`
/// * `plot_bounds.csv`, `plot_class_uncertainty.csv`, `plot_coverage_sweep.csv`
/// * `nam.fnpv`, `nam_history.csv`, `explain_report.json`, `overlays/`
pub fn run_experiment(cfg: &RunConfig) -> StageResult<RunReport> {
    cfg.validate().stage("config")?;
    let out = cfg.out.as_path();
    create_out_dir(out).stage("config")?;
    let mut files = Vec::new();
    let put = |files: &mut Vec<PathBuf>, name: &str, text: String| -> Result<()> {
        let path = out.join(name);
        write_text(&path, &text)?;
        files.push(path);
        Ok(())
    };
    put(&mut files, "config.txt", cfg.to_text()).stage("config")?;

    let mut clock = Clock::new(cfg.record_timing);
    let prep = prepare_data(cfg)?;
    clock.lap("data");

    let train = train_backbone(cfg, &prep).stage("train")?;
    put(&mut files, "round_history.csv", train.history_csv()).stage("train")?;
    let model_path = out.join("model.fnpv");
    train.model.flatten().save(&model_path).stage("train")?;
    clock.lap("train");

    let mut uncertainty = calibrate_stage(cfg, &prep, &train.model, Some(&train)).stage("calibrate")?;
    clock.lap("calibrate");

    let (nam, nam_history) = train_nam(cfg, &prep).stage("nam")?;
    let nam_path = out.join("nam.fnpv");
    nam.flatten().save(&nam_path).stage("nam")?;
    put(&mut files, "nam_history.csv", history_csv(&nam_history)).stage("nam")?;
    clock.lap("nam");

    let explain = explain_stage(cfg, &prep, &train.model, &nam, &nam_history, out).stage("explain")?;
    clock.lap("explain");

    uncertainty.report.timing = clock.finish();
    put(&mut files, "samples.csv", samples_csv(&uncertainty.samples)).stage("report")?;
    files.extend(emit_plot_data(&uncertainty, out).stage("report")?);
    files.push(write_json(&out.join("uncertainty_report.json"), &uncertainty.report).stage("report")?);
    files.push(write_json(&out.join("explain_report.json"), &explain).stage("report")?);
    files.push(model_path);
    files.push(nam_path);
    Ok(RunReport {
        train,
        uncertainty,
        explain,
        files,
    })
}

pub fn write_sweep(rows: &[SweepRow], out: &Path) -> Result<PathBuf> {
    let path = out.join("sweep.csv");
    write_text(&path, &sweep_csv(rows))?;
    Ok(path)
}

/// Backbone for the benchmark: the checkpoint at `path` when it exists,
/// otherwise one round of one local epoch on at most 2000 training rows.
pub fn bench_backbone(cfg: &RunConfig, prep: &Prepared, path: &Path) -> Result<MlpModel> {
    if path.exists() {
        return load_backbone(cfg, prep, path);
    }
    let per_client = (2000 / cfg.clients).max(1);
    let small = Prepared {
        train_parts: prep.train_parts.iter().map(|p| p.head(per_client)).collect(),
        cal_parts: prep.cal_parts.clone(),
        test: prep.test.clone(),
        root: prep.root.clone(),
    };
    let tiny = RunConfig {
        rounds: 1,
        local_epochs: 1,
        audit: false,
        ..cfg.clone()
    };
    Ok(train_backbone(&tiny, &small)?.model)
}
