//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.
//!
//! MNIST is read from `$FEDNAM_MNIST_DIR`, else `<workspace>/data/mnist`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use fednam::cli::{
    bench_uncertainty, calibrate_stage, prepare_data, run_experiment, train_backbone, Prepared, RunConfig,
    TrainOutcome, UncertaintyBundle,
};
use fednam::conformal::{calibrate, dla_from_magnitudes, dla_widths, nonconformity, prediction_sets, coverage_audit, DlaConfig};
use fednam::dataio::{partition_iid, synth_classification, SynthSpec};
use fednam::fedsim::{descent_audit, local_train, BatchSize, ClientState, Federation, RoundRecord, TrainConfig};
use fednam::models::{Classifier, ContributionMode, MlpModel, NamModel};
use fednam::numkit::{grad_check_at, Matrix, Rng};

type Outcome = Result<(bool, String), String>;

fn mnist_dir() -> PathBuf {
    std::env::var_os("FEDNAM_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

fn mnist_available() -> bool {
    mnist_dir().join("train-images-idx3-ubyte").exists()
}

/// The default MNIST run, shared by the criteria that need it.
struct MnistRun {
    cfg: RunConfig,
    prep: Prepared,
    train: TrainOutcome,
    bundle: UncertaintyBundle,
    seconds: f64,
}

fn mnist_run() -> Result<MnistRun, String> {
    if !mnist_available() {
        return Err(format!("MNIST IDX files not found under {}", mnist_dir().display()));
    }
    let start = Instant::now();
    let cfg = RunConfig {
        mnist_dir: mnist_dir(),
        ..RunConfig::default()
    };
    let prep = prepare_data(&cfg).map_err(|e| e.to_string())?;
    let train = train_backbone(&cfg, &prep).map_err(|e| e.to_string())?;
    let bundle = calibrate_stage(&cfg, &prep, &train.model, Some(&train)).map_err(|e| e.to_string())?;
    Ok(MnistRun {
        cfg,
        prep,
        train,
        bundle,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn random_batch(rng: &mut Rng, n: usize, d: usize) -> Matrix {
    Matrix::new(n, d, (0..n * d).map(|_| rng.uniform()).collect()).unwrap()
}

// ---------------------------------------------------------------------------

fn coverage_guarantee() -> Outcome {
    let alphas = [0.05, 0.1, 0.2];
    let seeds = 20;
    let mut sums = [0.0; 3];
    let mut mins = [f64::INFINITY; 3];
    let mut acc_sum = 0.0;
    for seed in 0..seeds {
        let (ds, _) = synth_classification(5000, 20, 5, 100 + seed).map_err(|e| e.to_string())?;
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        Rng::new(seed).shuffle(&mut idx);
        let train = ds.subset(&idx[..1000]).unwrap();
        let cal = ds.subset(&idx[1000..3000]).unwrap();
        let test = ds.subset(&idx[3000..5000]).unwrap();
        let model = MlpModel::init(&[20, 32, 5], &mut Rng::new(seed + 1000)).unwrap();
        let mut client = ClientState::new(0, train, model, Rng::new(seed + 2000)).unwrap();
        local_train(&mut client, 20, 0.5, BatchSize::Mini(32)).map_err(|e| e.to_string())?;
        let model = client.model;
        let scores = nonconformity(&model.probabilities(cal.features()).unwrap(), cal.labels()).unwrap();
        let probs = model.probabilities(test.features()).unwrap();
        acc_sum += model.accuracy(test.features(), test.labels()).unwrap();
        for (a, &alpha) in alphas.iter().enumerate() {
            let tau = calibrate(&scores, alpha).map_err(|e| e.to_string())?.tau;
            let cov = coverage_audit(&prediction_sets(&probs, tau, false), test.labels()).unwrap();
            sums[a] += cov;
            mins[a] = mins[a].min(cov);
        }
    }
    let mut ok = true;
    let mut detail = format!("mean test accuracy {:.3};", acc_sum / seeds as f64);
    for (a, &alpha) in alphas.iter().enumerate() {
        let mean = sums[a] / seeds as f64;
        ok &= mean >= 1.0 - alpha - 0.02 && mins[a] >= 1.0 - alpha - 0.05;
        detail += &format!(" alpha {alpha}: mean {mean:.4} (>= {:.2}), min {:.4} (>= {:.2});", 1.0 - alpha - 0.02, mins[a], 1.0 - alpha - 0.05);
    }
    Ok((ok, detail))
}

fn mnist_accuracy(run: &Result<MnistRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let acc = run.bundle.report.accuracy_backbone;
    Ok((
        (0.82..=0.92).contains(&acc),
        format!(
            "{} clients, {} rounds x {} epoch, {} training rows: accuracy {acc:.4} in [0.82, 0.92] (by round {:?}); {:.1}s",
            run.cfg.clients,
            run.cfg.rounds,
            run.cfg.local_epochs,
            run.bundle.report.n_train,
            run.train.test_accuracy.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>(),
            run.seconds
        ),
    ))
}

fn post_hoc_invariance(run: &Result<MnistRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let r = &run.bundle.report;
    // Independent check: predictions straight from the backbone.
    let direct = run.train.model.predict(run.prep.test.features()).unwrap();
    let reported: Vec<usize> = run.bundle.samples.iter().map(|s| s.predicted).collect();
    Ok((
        r.argmax_changes == 0 && r.accuracy_delta == 0.0 && direct == reported,
        format!(
            "argmax changes {}, accuracy before {:.4} after {:.4} (delta {})",
            r.argmax_changes, r.accuracy_backbone, r.accuracy_wrapped, r.accuracy_delta
        ),
    ))
}

/// Straight-line DLA from the raw input-gradient matrix.
fn dla_reference(grads: &Matrix, alpha: f64, beta: f64, eps: f64) -> Vec<f64> {
    let n = grads.rows();
    let d = grads.cols();
    let mut g = Vec::new();
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..d {
            s += grads.get(i, j).abs();
        }
        g.push(s / d as f64);
    }
    let mut lo = g[0];
    let mut hi = g[0];
    for &v in &g {
        if v < lo {
            lo = v;
        }
        if v > hi {
            hi = v;
        }
    }
    for v in g.iter_mut() {
        *v = (*v - lo) / (hi - lo + eps);
        if v.is_nan() {
            *v = 0.0;
        }
    }
    let mut sorted = g.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let threshold = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let mut w = Vec::new();
    for &v in &g {
        if v > threshold {
            w.push(alpha * beta * (1.0 + v));
        } else {
            w.push(alpha * (1.0 + v));
        }
    }
    w
}

fn dla_compliance() -> Outcome {
    let mut rng = Rng::new(4);
    let mut worst_diff = 0.0_f64;
    let mut out_of_bounds = 0usize;
    let mut widths_seen = 0usize;
    for _ in 0..1000 {
        let d = 1 + rng.below(12);
        let k = 2 + rng.below(4);
        let mut dims = vec![d];
        for _ in 0..rng.below(3) {
            dims.push(1 + rng.below(8));
        }
        dims.push(k);
        let n = 1 + rng.below(40);
        let model = MlpModel::init(&dims, &mut rng).unwrap();
        let batch = random_batch(&mut rng, n, d);
        let cfg = DlaConfig {
            alpha: rng.uniform_range(0.01, 0.3),
            beta: rng.uniform_range(1.0, 3.0),
            epsilon: 1e-8,
        };
        let out = dla_widths(&model, &batch, None, &cfg).map_err(|e| e.to_string())?;
        let labels = model.predict(&batch).unwrap();
        let (_, grads) = model.input_gradients(&batch, &labels).unwrap();
        let reference = dla_reference(&grads, cfg.alpha, cfg.beta, cfg.epsilon);
        for (w, r) in out.widths.iter().zip(&reference) {
            worst_diff = worst_diff.max((w - r).abs());
            if !(*w >= cfg.alpha && *w <= 2.0 * cfg.alpha * cfg.beta) {
                out_of_bounds += 1;
            }
            widths_seen += 1;
        }
    }

    // Worked examples.
    let eps = 1e-8;
    let cfg = |alpha, beta| DlaConfig { alpha, beta, epsilon: eps };
    let zero_model = MlpModel::zeros(&[5, 4, 3]).unwrap();
    let constant = dla_widths(&zero_model, &random_batch(&mut rng, 7, 5), None, &cfg(0.1, 1.5)).unwrap();
    let ex1 = constant.widths.iter().all(|&w| w == 0.1);
    let ex2_out = dla_from_magnitudes(&[1.0, 3.0, 2.0], &cfg(0.1, 2.0)).unwrap();
    let exact_eps = [0.1 * (1.0 + 0.0), 0.1 * 2.0 * (1.0 + 2.0 / (2.0 + eps)), 0.1 * (1.0 + 1.0 / (2.0 + eps))];
    let ex2 = ex2_out.threshold == 1.0 / (2.0 + eps)
        && ex2_out.widths.iter().zip(&exact_eps).all(|(a, b)| (a - b).abs() <= 1e-15)
        && ex2_out.widths.iter().zip(&[0.1, 0.4, 0.15]).all(|(a, b)| (a - b).abs() <= 1e-8);
    let single = dla_widths(&MlpModel::init(&[5, 3], &mut rng).unwrap(), &random_batch(&mut rng, 1, 5), None, &cfg(0.1, 1.5)).unwrap();
    let ex3 = single.widths == vec![0.1];

    let ok = out_of_bounds == 0 && worst_diff <= 1e-12 && ex1 && ex2 && ex3;
    Ok((
        ok,
        format!(
            "1000 batches, {widths_seen} widths: {out_of_bounds} outside [alpha, 2 alpha beta], max |diff| vs reference {worst_diff:.2e} (<= 1e-12); \
             worked examples: constant {ex1}, [1,3,2] -> {:?} {ex2}, batch of one {ex3}",
            ex2_out.widths
        ),
    ))
}

fn class_uncertainty(run: &Result<MnistRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let r = &run.bundle.report;
    let alpha = run.cfg.alpha;
    let present: Vec<f64> = r.class_uncertainty.iter().flatten().copied().collect();
    let in_band = present.len() == 10 && present.iter().all(|u| (0.5 * alpha..=3.0 * alpha).contains(u));
    let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ratio = hi / lo;
    Ok((
        in_band && ratio <= 2.5,
        format!(
            "U_c = {:?} (all 10 in [{:.3}, {:.3}]: {in_band}), max/min {ratio:.3} (<= 2.5)",
            present.iter().map(|u| (u * 1e4).round() / 1e4).collect::<Vec<_>>(),
            0.5 * alpha,
            3.0 * alpha
        ),
    ))
}

fn descent_audit_criterion() -> Outcome {
    let start = Instant::now();
    // Logistic regression toy, three clients, one full-batch step per round.
    let (ds, _) = SynthSpec::new(600, 5, 2, 6).generate().map_err(|e| e.to_string())?;
    let plan = partition_iid(ds.len(), 3, 6).unwrap();
    let shards = plan.indices.iter().map(|idx| ds.subset(idx).unwrap()).collect();
    let cfg = TrainConfig {
        lr: 0.01,
        epochs: 1,
        batch: BatchSize::Full,
    };
    let mut fed = Federation::new(MlpModel::zeros(&[5, 2]).unwrap(), shards, cfg, &Rng::new(6)).unwrap();
    fed.run(50).map_err(|e| e.to_string())?;
    let logistic = descent_audit(&fed.server.history, 1e-3).map_err(|e| e.to_string())?;
    let logistic_ok = logistic.fraction_within >= 0.9;

    // Quadratic toy L(w) = ½ wᵀAw with A = diag(a), L = max a = 1, η = 1/L.
    let a = [1.0, 0.5, 0.25, 0.1];
    let eta = 1.0;
    let loss = |w: &[f64]| 0.5 * w.iter().zip(&a).map(|(w, a)| a * w * w).sum::<f64>();
    let mut w = vec![1.0; 4];
    let mut history = Vec::new();
    let mut closed_form_gap = 0.0_f64;
    for t in 0..50 {
        let g: Vec<f64> = w.iter().zip(&a).map(|(w, a)| a * w).collect();
        let gns: f64 = g.iter().map(|v| v * v).sum();
        let next: Vec<f64> = w.iter().zip(&g).map(|(w, g)| w - eta * g).collect();
        let rec = RoundRecord::from_measurements(t, loss(&w), loss(&next), Some(gns), eta, Vec::new());
        // Exact descent identity for quadratics: δ = η²/2 · gᵀAg.
        let gag: f64 = g.iter().zip(&a).map(|(g, a)| a * g * g).sum();
        closed_form_gap = closed_form_gap.max((rec.slack.unwrap() - 0.5 * eta * eta * gag).abs());
        history.push(rec);
        w = next;
    }
    let quad = descent_audit(&history, 1e-9).map_err(|e| e.to_string())?;
    let quad_ok = quad.fraction_within == 1.0;
    Ok((
        logistic_ok && quad_ok,
        format!(
            "logistic: {:.0}% of 50 rounds with slack <= 1e-3 (max {:.2e}) {}; quadratic: {:.0}% of rounds with slack <= 1e-9 {}, \
             first-round slack {:.4} = eta^2/2 g'Ag (max |measured - closed form| {:.1e}); {:.2}s",
            100.0 * logistic.fraction_within,
            logistic.max_slack,
            if logistic_ok { "ok" } else { "FAILED" },
            100.0 * quad.fraction_within,
            if quad_ok { "ok" } else { "FAILED" },
            quad.slacks[0],
            closed_form_gap,
            start.elapsed().as_secs_f64()
        ),
    ))
}

fn complexity_bench(run: &Result<MnistRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let start = Instant::now();
    let cfg = RunConfig {
        mc_passes: 16,
        bench_n: 1024,
        bench_sizes: vec![256, 1024, 4096],
        bench_reps: 5,
        ..run.cfg.clone()
    };
    let report = bench_uncertainty(&cfg, &run.train.model, run.prep.test.features()).map_err(|e| e.to_string())?;
    let mut ok = report.t_mc > report.t_dla;
    let mut steps = Vec::new();
    for pair in report.scaling.windows(2) {
        let dla = pair[1].t_dla / pair[0].t_dla;
        let mc = pair[1].t_mc / pair[0].t_mc;
        ok &= (2.0..=8.0).contains(&dla) && (2.0..=8.0).contains(&mc);
        steps.push(format!("{}->{}: dla x{dla:.2}, mc x{mc:.2}", pair[0].n, pair[1].n));
    }
    Ok((
        ok,
        format!(
            "N=1024 M=16: t_dla {:.4}s, t_mc {:.4}s, ratio {:.2}; scaling (each in [2, 8]) {}; {:.1}s",
            report.t_dla,
            report.t_mc,
            report.ratio,
            steps.join(", "),
            start.elapsed().as_secs_f64()
        ),
    ))
}

fn check_model<M: Classifier>(model: &M, batch: &Matrix, labels: &[usize], rng: &mut Rng) -> (f64, f64) {
    let h = 1e-5;
    let back = model.backward(batch, labels).unwrap();
    let p = model.params().to_vec();
    let coords: Vec<usize> = (0..100).map(|_| rng.below(p.len())).collect();
    let param_err = grad_check_at(
        |q| {
            let mut m = model.clone();
            m.params_mut().copy_from_slice(q);
            m.loss(batch, labels).unwrap()
        },
        &p,
        back.param_grads.values(),
        h,
        &coords,
    )
    .unwrap();
    let x = batch.as_slice().to_vec();
    let coords: Vec<usize> = (0..100).map(|_| rng.below(x.len())).collect();
    let input_err = grad_check_at(
        |v| model.loss(&Matrix::new(batch.rows(), batch.cols(), v.to_vec()).unwrap(), labels).unwrap(),
        &x,
        back.input_grads.as_slice(),
        h,
        &coords,
    )
    .unwrap();
    (param_err, input_err)
}

fn gradient_integrity() -> Outcome {
    let mut rng = Rng::new(8);
    let mut results = BTreeMap::new();
    for dims in [vec![10, 16, 12, 4], vec![784, 128, 64, 10]] {
        let model = MlpModel::init(&dims, &mut rng).unwrap();
        let batch = random_batch(&mut rng, 8, dims[0]);
        let labels: Vec<usize> = (0..8).map(|_| rng.below(*dims.last().unwrap())).collect();
        results.insert(format!("mlp {dims:?}"), check_model(&model, &batch, &labels, &mut rng));
    }
    for (d, k) in [(6, 3), (20, 5)] {
        let model = NamModel::init(d, k, &[16, 16], &mut rng).unwrap();
        let batch = random_batch(&mut rng, 8, d);
        let labels: Vec<usize> = (0..8).map(|_| rng.below(k)).collect();
        results.insert(format!("nam d={d} K={k}"), check_model(&model, &batch, &labels, &mut rng));
    }
    let ok = results.values().all(|&(p, i)| p <= 1e-4 && i <= 1e-4);
    let detail = results
        .iter()
        .map(|(name, (p, i))| format!("{name}: params {p:.1e}, inputs {i:.1e}"))
        .collect::<Vec<_>>()
        .join("; ");
    Ok((ok, format!("100 coordinates each, h = 1e-5, bound 1e-4: {detail}")))
}

fn nam_additivity() -> Outcome {
    let mut rng = Rng::new(9);
    let mut worst_sum = 0.0_f64;
    let mut worst_value = 0.0_f64;
    for _ in 0..1000 {
        let d = 1 + rng.below(10);
        let k = 2 + rng.below(5);
        let hidden: Vec<usize> = (0..1 + rng.below(2)).map(|_| 1 + rng.below(16)).collect();
        let n = 1 + rng.below(20);
        let mut model = NamModel::init(d, k, &hidden, &mut rng).unwrap();
        for b in model.bias_mut() {
            *b = rng.uniform_range(-1.0, 1.0);
        }
        let batch = random_batch(&mut rng, n, d);
        let logits = model.forward(&batch).unwrap();
        let mut explicit = vec![0.0; n * k];
        for i in 0..n {
            explicit[i * k..(i + 1) * k].copy_from_slice(model.bias());
        }
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|i| batch.get(i, j)).collect();
            let out = model.subnet_output(j, &col).unwrap();
            for (e, v) in explicit.iter_mut().zip(out.as_slice()) {
                *e += v;
            }
        }
        for (a, b) in logits.as_slice().iter().zip(&explicit) {
            worst_sum = worst_sum.max((a - b).abs());
        }
        let contrib = model.contributions(&batch, ContributionMode::Value).unwrap();
        for (i, c) in logits.argmax_rows().into_iter().enumerate() {
            let total: f64 = contrib.row(i).iter().sum::<f64>() + model.bias()[c];
            worst_value = worst_value.max((total - logits.get(i, c)).abs());
        }
    }
    Ok((
        worst_sum <= 1e-9 && worst_value <= 1e-9,
        format!("1000 random models: max |forward - (bias + sum of subnets)| {worst_sum:.1e}, max |value contributions + bias - logit| {worst_value:.1e} (<= 1e-9)"),
    ))
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn determinism() -> Outcome {
    let out = std::env::temp_dir().join(format!("fednam-acceptance-{}", std::process::id()));
    let mut cfg = RunConfig {
        rounds: 2,
        nam_rounds: 1,
        nam_subset: 600,
        mc_passes: 4,
        sweep_seeds: 3,
        out: out.clone(),
        ..RunConfig::default()
    };
    if mnist_available() {
        cfg.mnist_dir = mnist_dir();
        cfg.train_subset = 3000;
        cfg.test_subset = 1000;
    } else {
        cfg.set("dataset", "synth").unwrap();
        cfg.synth_n = 2000;
    }
    let mut bundles = Vec::new();
    for _ in 0..2 {
        let _ = fs::remove_dir_all(&out);
        run_experiment(&cfg).map_err(|e| e.to_string())?;
        bundles.push(snapshot(&out));
    }
    let _ = fs::remove_dir_all(&out);
    let bytes: usize = bundles[0].values().map(Vec::len).sum();
    let differing: Vec<String> = bundles[0]
        .iter()
        .filter(|(k, v)| bundles[1].get(*k) != Some(v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let same_set = bundles[0].keys().eq(bundles[1].keys());
    Ok((
        !bundles[0].is_empty() && same_set && differing.is_empty(),
        format!(
            "{} run twice: {} files, {bytes} bytes, differing files {:?}",
            cfg.dataset,
            bundles[0].len(),
            differing
        ),
    ))
}

fn main() -> ExitCode {
    let total = Instant::now();
    let mnist = mnist_run();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("coverage guarantee", Box::new(coverage_guarantee)),
        ("MNIST federated accuracy", Box::new(|| mnist_accuracy(&mnist))),
        ("post-hoc invariance", Box::new(|| post_hoc_invariance(&mnist))),
        ("DLA formula compliance", Box::new(dla_compliance)),
        ("class-wise uncertainty", Box::new(|| class_uncertainty(&mnist))),
        ("descent audit", Box::new(descent_audit_criterion)),
        ("complexity benchmark", Box::new(|| complexity_bench(&mnist))),
        ("gradient integrity", Box::new(gradient_integrity)),
        ("NAM additivity", Box::new(nam_additivity)),
        ("determinism", Box::new(determinism)),
    ];
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (pass, detail) = match check() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        println!("{} {:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" }, i + 1);
        if !pass {
            failed.push(i + 1);
        }
    }
    println!(
        "{}/{} criteria passed in {:.1}s",
        criteria.len() - failed.len(),
        criteria.len(),
        total.elapsed().as_secs_f64()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed: {failed:?}");
        ExitCode::FAILURE
    }
}
