use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};

use super::pipeline::{SweepRow, UncertaintyBundle};

/// One test sample of the uncertainty stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SampleRow {
    pub index: usize,
    pub label: usize,
    pub predicted: usize,
    /// Probability of the predicted class.
    pub top_prob: f64,
    pub width: f64,
    pub set_size: usize,
    pub covered: bool,
    pub mc_std: f64,
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<PathBuf> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)?;
    Ok(path.to_path_buf())
}

pub fn samples_csv(rows: &[SampleRow]) -> String {
    let mut s = String::from("index,label,predicted,top_prob,width,set_size,covered,mc_std\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.index, r.label, r.predicted, r.top_prob, r.width, r.set_size, r.covered as u8, r.mc_std
        );
    }
    s
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("seed,alpha,tau,coverage,mean_set_size\n");
    for r in rows {
        let seed = r.seed.map_or_else(|| "mean".to_string(), |v| v.to_string());
        let _ = writeln!(s, "{seed},{},{},{},{}", r.alpha, r.tau, r.coverage, r.mean_set_size);
    }
    s
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Plot data for a finished uncertainty stage:
///
/// * `plot_bounds.csv`: `index,prediction,width,lower,upper` with
///   `prediction` the top probability and `lower/upper = prediction ∓ width/2`.
/// * `plot_class_uncertainty.csv`: one row per class, `class,count,mean_width,mc_std`
///   (empty cells for classes never predicted).
/// * `plot_coverage_sweep.csv`: `alpha,tau,coverage,mean_set_size`.
pub fn emit_plot_data(bundle: &UncertaintyBundle, out: &Path) -> Result<Vec<PathBuf>> {
    let mut bounds = String::from("index,prediction,width,lower,upper\n");
    for r in &bundle.samples {
        let half = r.width / 2.0;
        let _ = writeln!(bounds, "{},{},{},{},{}", r.index, r.top_prob, r.width, r.top_prob - half, r.top_prob + half);
    }

    let rep = &bundle.report;
    let mut classes = String::from("class,count,mean_width,mc_std\n");
    for c in 0..rep.classes {
        let _ = writeln!(
            classes,
            "{c},{},{},{}",
            rep.class_counts[c],
            opt(rep.class_uncertainty[c]),
            opt(rep.mc_class_std[c])
        );
    }

    let mut sweep = String::from("alpha,tau,coverage,mean_set_size\n");
    for p in &rep.coverage_sweep {
        let _ = writeln!(sweep, "{},{},{},{}", p.alpha, p.tau, p.coverage, p.mean_set_size);
    }

    let mut files = Vec::new();
    for (name, text) in [
        ("plot_bounds.csv", bounds),
        ("plot_class_uncertainty.csv", classes),
        ("plot_coverage_sweep.csv", sweep),
    ] {
        let path = out.join(name);
        write_text(&path, &text)?;
        files.push(path);
    }
    Ok(files)
}
