//! End-to-end pipeline runs on small data.

use std::fs;
use std::path::{Path, PathBuf};

use fednam::cli::{
    bench_uncertainty, calibrate_stage, prepare_data, run_experiment, run_sweep, train_backbone, DatasetKind, RunConfig,
};
use fednam::models::MlpModel;
use fednam::numkit::Rng;

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn synth_config(out: &Path) -> RunConfig {
    RunConfig {
        dataset: DatasetKind::Synth,
        synth_n: 1500,
        synth_d: 8,
        synth_k: 4,
        rounds: 3,
        lr: 0.2,
        hidden: vec![16],
        nam_subset: 300,
        nam_rounds: 1,
        nam_lr: 0.01,
        mc_passes: 4,
        sweep_seeds: 5,
        out: out.to_path_buf(),
        ..RunConfig::default()
    }
}

/// MNIST subset when the files are present, otherwise the synthetic set.
fn small_config(out: &Path) -> RunConfig {
    if mnist_dir().join("train-images-idx3-ubyte").exists() {
        RunConfig {
            mnist_dir: mnist_dir(),
            train_subset: 6000,
            test_subset: 2000,
            rounds: 3,
            nam_subset: 300,
            nam_rounds: 1,
            mc_passes: 4,
            out: out.to_path_buf(),
            ..RunConfig::default()
        }
    } else {
        synth_config(out)
    }
}

#[test]
fn three_client_accuracy_increases_every_round() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        seed: 7,
        ..small_config(dir.path())
    };
    let prep = prepare_data(&cfg).unwrap();
    let train = train_backbone(&cfg, &prep).unwrap();
    let acc = &train.test_accuracy;
    assert_eq!(acc.len(), 4);
    for w in acc.windows(2) {
        assert!(w[1] > w[0], "accuracy by round {acc:?}");
    }
    assert_eq!(train.history.len(), 3);
    for r in &train.history {
        let g = r.grad_norm_sq.unwrap();
        assert!((r.slack.unwrap() - (r.loss_after - r.loss_before + cfg.lr * g)).abs() <= 1e-12);
    }
}

#[test]
fn zero_rounds_is_chance_level() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        rounds: 0,
        ..small_config(dir.path())
    };
    let prep = prepare_data(&cfg).unwrap();
    let train = train_backbone(&cfg, &prep).unwrap();
    assert!(train.history.is_empty());
    let k = prep.classes() as f64;
    let bundle = calibrate_stage(&cfg, &prep, &train.model, Some(&train)).unwrap();
    let acc = bundle.report.accuracy_backbone;
    assert!((acc - 1.0 / k).abs() < 0.1, "untrained accuracy {acc} vs 1/K = {}", 1.0 / k);
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn run_bundle_is_complete_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = small_config(&out);
    let report = run_experiment(&cfg).unwrap();
    let first = read_tree(&out);
    for name in [
        "config.txt",
        "round_history.csv",
        "model.fnpv",
        "uncertainty_report.json",
        "samples.csv",
        "plot_bounds.csv",
        "plot_class_uncertainty.csv",
        "plot_coverage_sweep.csv",
        "nam.fnpv",
        "nam_history.csv",
        "explain_report.json",
    ] {
        assert!(out.join(name).exists(), "missing {name}");
    }
    assert_eq!(RunConfig::from_file(&out.join("config.txt")).unwrap(), cfg);

    fs::remove_dir_all(&out).unwrap();
    run_experiment(&cfg).unwrap();
    assert_eq!(first, read_tree(&out), "second run differs");

    let json: serde_json::Value = serde_json::from_slice(&fs::read(out.join("uncertainty_report.json")).unwrap()).unwrap();
    for key in ["alpha", "beta", "epsilon", "mc_passes", "seed"] {
        assert!(json["config"][key].is_string(), "config echo lacks {key}");
    }
    assert!(json["timing"].is_null());
    assert_eq!(report.uncertainty.report.argmax_changes, 0);

    let classes = fs::read_to_string(out.join("plot_class_uncertainty.csv")).unwrap();
    assert_eq!(classes.lines().count(), 1 + report.uncertainty.report.classes);

    let bounds = fs::read_to_string(out.join("plot_bounds.csv")).unwrap();
    let mut rows = 0;
    for line in bounds.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!((v[4] - v[3] - v[2]).abs() <= 1e-15, "{line}");
        rows += 1;
    }
    assert_eq!(rows, report.uncertainty.report.n_test);
}

#[test]
fn overlays_follow_the_top_fraction() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    if cfg.dataset != DatasetKind::Mnist {
        return;
    }
    let report = run_experiment(&cfg).unwrap();
    assert_eq!(report.explain.samples.len(), cfg.clients * cfg.overlays_per_client);
    for s in &report.explain.samples {
        assert_eq!(s.selected, 236); // ⌈0.3 · 784⌉
        let base = s.overlay.as_ref().unwrap();
        let ppm = fednam::interpret::read_netpbm(&dir.path().join(format!("{base}_overlay.ppm"))).unwrap();
        let bits = fednam::interpret::mask_from_overlay(&ppm).unwrap();
        let csv = fs::read_to_string(dir.path().join(format!("{base}_mask.csv"))).unwrap();
        let listed: Vec<usize> = csv.lines().skip(1).map(|l| l.parse().unwrap()).collect();
        assert_eq!(listed.len(), 236);
        // Red pixels in the overlay are exactly the listed ones (a pure red
        // source pixel cannot occur in a grayscale image).
        let red: Vec<usize> = bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect();
        assert_eq!(red, listed);
    }
}

#[test]
fn sweep_coverage_is_non_increasing_in_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        sweep_alphas: vec![0.05, 0.1, 0.2],
        sweep_seeds: 20,
        ..synth_config(dir.path())
    };
    let prep = prepare_data(&cfg).unwrap();
    let model = train_backbone(&cfg, &prep).unwrap().model;
    let rows = run_sweep(&cfg, &prep, &model).unwrap();
    assert_eq!(rows.len(), 20 * 3 + 3);
    let means: Vec<f64> = rows.iter().filter(|r| r.seed.is_none()).map(|r| r.coverage).collect();
    assert!(means.windows(2).all(|w| w[0] >= w[1]), "{means:?}");
}

#[test]
fn bench_ratio_is_exact_and_small_pass_counts_fail() {
    let cfg = RunConfig {
        mc_passes: 4,
        bench_n: 64,
        bench_sizes: vec![16, 64],
        ..RunConfig::default()
    };
    let model = MlpModel::init(&[20, 16, 4], &mut Rng::new(1)).unwrap();
    let pool = fednam::numkit::Matrix::new(10, 20, vec![0.5; 200]).unwrap();
    let r = bench_uncertainty(&cfg, &model, &pool).unwrap();
    assert_eq!(r.ratio, r.t_mc / r.t_dla);
    assert!(r.t_dla > 0.0 && r.t_mc > 0.0);
    assert_eq!(r.scaling.iter().map(|p| p.n).collect::<Vec<_>>(), vec![16, 64]);
    let one = RunConfig { mc_passes: 1, ..cfg };
    assert!(matches!(bench_uncertainty(&one, &model, &pool), Err(fednam::Error::Config(_))));
}
