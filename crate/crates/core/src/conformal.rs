//! Split conformal prediction for classifiers and gradient-driven dynamic
//! level adjustment (DLA) of per-sample interval widths.
//!
//! Prediction sets come solely from the calibrated threshold `τ`; DLA widths
//! are a separate per-sample uncertainty score. Neither touches the model,
//! so the wrapped classifier's argmax predictions are unchanged.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::numkit::Matrix;

/// `S(x, y) = 1 − p_y(x)`.
pub fn nonconformity(probs: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    if probs.rows() != labels.len() {
        return Err(Error::dims(
            "nonconformity",
            format!("probs {}", probs.shape_str()),
            format!("{} labels", labels.len()),
        ));
    }
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            if y >= probs.cols() {
                Err(Error::Index {
                    what: "class label",
                    index: y,
                    bound: probs.cols(),
                })
            } else {
                Ok(1.0 - probs.get(i, y))
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileRule {
    /// Rank `⌈(n+1)(1−α)⌉`, clamped to `n`.
    #[default]
    FiniteSample,
    /// Rank `⌈n(1−α)⌉`.
    Naive,
}

impl QuantileRule {
    /// 1-based rank of the threshold among `n` sorted scores.
    pub fn rank(self, n: usize, alpha: f64) -> usize {
        let m = match self {
            QuantileRule::FiniteSample => (n + 1) as f64,
            QuantileRule::Naive => n as f64,
        };
        // 1e-9 absorbs representation error in products like 20 × 0.95.
        let k = (m * (1.0 - alpha) - 1e-9).ceil();
        (k.max(1.0) as usize).min(n)
    }
}

impl std::str::FromStr for QuantileRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "finite_sample" => Ok(Self::FiniteSample),
            "naive" => Ok(Self::Naive),
            other => Err(Error::Config(format!("unknown quantile rule {other:?}"))),
        }
    }
}

impl std::fmt::Display for QuantileRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::FiniteSample => "finite_sample",
            Self::Naive => "naive",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationResult {
    pub scores: Vec<f64>,
    pub alpha: f64,
    pub tau: f64,
    pub rule: QuantileRule,
}

impl CalibrationResult {
    pub fn n(&self) -> usize {
        self.scores.len()
    }
}

pub fn calibrate(scores: &[f64], alpha: f64) -> Result<CalibrationResult> {
    calibrate_with(scores, alpha, QuantileRule::FiniteSample)
}

pub fn calibrate_with(scores: &[f64], alpha: f64, rule: QuantileRule) -> Result<CalibrationResult> {
    if scores.is_empty() {
        return Err(Error::Calibration("no calibration scores".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Calibration(format!("alpha {alpha} outside (0, 1)")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Calibration("non-finite calibration score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = rule.rank(sorted.len(), alpha);
    Ok(CalibrationResult {
        tau: sorted[k - 1],
        scores: sorted,
        alpha,
        rule,
    })
}

/// `{y : 1 − p_y ≤ τ}`; possibly empty.
pub fn prediction_set(probs: &[f64], tau: f64) -> Vec<usize> {
    probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| 1.0 - p <= tau)
        .map(|(y, _)| y)
        .collect()
}

/// Sets for every row; with `include_argmax` an empty set gets the top class.
pub fn prediction_sets(probs: &Matrix, tau: f64, include_argmax: bool) -> Vec<Vec<usize>> {
    probs
        .iter_rows()
        .map(|row| {
            let mut set = prediction_set(row, tau);
            if include_argmax && set.is_empty() && !row.is_empty() {
                set.push(crate::numkit::argmax(row));
            }
            set
        })
        .collect()
}

pub fn coverage_audit(sets: &[Vec<usize>], labels: &[usize]) -> Result<f64> {
    if sets.len() != labels.len() {
        return Err(Error::dims(
            "coverage_audit",
            format!("{} sets", sets.len()),
            format!("{} labels", labels.len()),
        ));
    }
    if sets.is_empty() {
        return Ok(0.0);
    }
    let hits = sets.iter().zip(labels).filter(|(s, y)| s.contains(y)).count();
    Ok(hits as f64 / sets.len() as f64)
}

pub fn mean_set_size(sets: &[Vec<usize>]) -> f64 {
    if sets.is_empty() {
        return 0.0;
    }
    sets.iter().map(Vec::len).sum::<usize>() as f64 / sets.len() as f64
}

// ---------------------------------------------------------------------------
// Dynamic level adjustment
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DlaConfig {
    /// Base interval.
    pub alpha: f64,
    /// Boost applied above the median magnitude.
    pub beta: f64,
    pub epsilon: f64,
}

impl Default for DlaConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1.5,
            epsilon: 1e-8,
        }
    }
}

impl DlaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("DLA alpha {} must be > 0", self.alpha)));
        }
        if !(self.beta >= 1.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("DLA beta {} must be >= 1", self.beta)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("DLA epsilon {} must be > 0", self.epsilon)));
        }
        Ok(())
    }

    pub fn max_width(&self) -> f64 {
        2.0 * self.alpha * self.beta
    }
}

/// Intermediate quantities of one DLA evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct DlaOutput {
    pub raw_magnitudes: Vec<f64>,
    pub normalized: Vec<f64>,
    pub threshold: f64,
    pub widths: Vec<f64>,
}

/// Median with the two middle values averaged for even lengths.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return 0.0;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-sample mean of `|G|` over the flattened feature axis.
pub fn gradient_magnitudes(grads: &Matrix) -> Vec<f64> {
    let d = grads.cols().max(1) as f64;
    grads
        .iter_rows()
        .map(|r| r.iter().map(|g| g.abs()).sum::<f64>() / d)
        .collect()
}

/// Widths from raw per-sample gradient magnitudes: min-max normalize with
/// `ε` in the denominator, map NaN to 0, threshold at the median, and emit
/// `αβ(1+g)` strictly above the threshold, `α(1+g)` otherwise.
pub fn dla_from_magnitudes(raw: &[f64], cfg: &DlaConfig) -> Result<DlaOutput> {
    cfg.validate()?;
    if raw.is_empty() {
        return Err(Error::Config("DLA on an empty batch".into()));
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let normalized: Vec<f64> = raw
        .iter()
        .map(|g| {
            let v = (g - lo) / (hi - lo + cfg.epsilon);
            if v.is_nan() {
                0.0
            } else {
                v
            }
        })
        .collect();
    let threshold = median(&normalized);
    let widths = normalized
        .iter()
        .map(|&g| {
            if g > threshold {
                cfg.alpha * cfg.beta * (1.0 + g)
            } else {
                cfg.alpha * (1.0 + g)
            }
        })
        .collect();
    Ok(DlaOutput {
        raw_magnitudes: raw.to_vec(),
        normalized,
        threshold,
        widths,
    })
}

/// DLA on a model and batch: one forward pass and one input-gradient
/// backward pass of the mean cross-entropy. Without labels the model's own
/// argmax serves as pseudo-label.
pub fn dla_widths<M: Classifier>(
    model: &M,
    batch: &Matrix,
    labels: Option<&[usize]>,
    cfg: &DlaConfig,
) -> Result<DlaOutput> {
    cfg.validate()?;
    if batch.rows() == 0 {
        return Err(Error::Config("DLA on an empty batch".into()));
    }
    let (_, grads) = match labels {
        Some(l) => model.input_gradients(batch, l)?,
        None => {
            let (_, loss, grads) = model.pseudo_labelled_input_gradients(batch)?;
            (loss, grads)
        }
    };
    dla_from_magnitudes(&gradient_magnitudes(&grads), cfg)
}

// ---------------------------------------------------------------------------
// Class-wise aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassUncertainty {
    /// Mean width per predicted class; `None` for classes never predicted.
    pub mean_width: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

impl ClassUncertainty {
    pub fn present(&self) -> impl Iterator<Item = f64> + '_ {
        self.mean_width.iter().flatten().copied()
    }
}

pub fn classwise_uncertainty(widths: &[f64], predicted: &[usize], classes: usize) -> Result<ClassUncertainty> {
    if widths.len() != predicted.len() {
        return Err(Error::dims(
            "classwise_uncertainty",
            format!("{} widths", widths.len()),
            format!("{} predictions", predicted.len()),
        ));
    }
    let mut sums = vec![0.0; classes];
    let mut counts = vec![0usize; classes];
    for (&w, &c) in widths.iter().zip(predicted) {
        if c >= classes {
            return Err(Error::Index {
                what: "predicted class",
                index: c,
                bound: classes,
            });
        }
        sums[c] += w;
        counts[c] += 1;
    }
    let mean_width = sums
        .iter()
        .zip(&counts)
        .map(|(&s, &n)| (n > 0).then(|| s / n as f64))
        .collect();
    Ok(ClassUncertainty { mean_width, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub tau: f64,
    pub coverage: f64,
    pub mean_set_size: f64,
}

/// Coverage and set size on a test set for several miscoverage levels.
pub fn coverage_sweep(
    cal_scores: &[f64],
    test_probs: &Matrix,
    test_labels: &[usize],
    alphas: &[f64],
    rule: QuantileRule,
) -> Result<Vec<SweepPoint>> {
    alphas
        .iter()
        .map(|&alpha| {
            let cal = calibrate_with(cal_scores, alpha, rule)?;
            let sets = prediction_sets(test_probs, cal.tau, false);
            Ok(SweepPoint {
                alpha,
                tau: cal.tau,
                coverage: coverage_audit(&sets, test_labels)?,
                mean_set_size: mean_set_size(&sets),
            })
        })
        .collect()
}
