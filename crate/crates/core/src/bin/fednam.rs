use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fednam::cli::{
    bench_backbone, bench_uncertainty, calibrate_stage, configure_threads, create_out_dir, emit_plot_data,
    explain_stage, load_backbone, prepare_data, run_experiment, run_sweep, samples_csv, train_backbone, train_nam,
    write_json, write_sweep, DatasetKind, RunConfig, StageExt, StageResult,
};
use fednam::fedsim::history_csv;
use fednam::models::Classifier;
use fednam::Error;

#[derive(Parser)]
#[command(name = "fednam", version, about = "Federated NAM training with conformal uncertainty")]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: train, calibrate, explain, report.
    Run,
    /// Federated backbone training; writes model.fnpv and round_history.csv.
    Train,
    /// Conformal calibration, DLA widths and MC dropout for a trained backbone.
    Calibrate(ModelArg),
    /// NAM training, contributions and overlay masks.
    Explain(ModelArg),
    /// DLA versus MC-dropout wall-clock benchmark.
    Bench(ModelArg),
    /// Coverage versus alpha over random calibration/test re-splits.
    Sweep(ModelArg),
}

#[derive(Args)]
struct ModelArg {
    /// Backbone checkpoint (default: <out>/model.fnpv).
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct Overrides {
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<String>,
    #[arg(long, global = true)]
    clients: Option<usize>,
    #[arg(long, global = true)]
    rounds: Option<usize>,
    #[arg(long, global = true)]
    alpha: Option<f64>,
    #[arg(long, global = true)]
    beta: Option<f64>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long = "mc-passes", global = true)]
    mc_passes: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Any other config key, as key=value. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn resolve(&self) -> fednam::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects key=value, got {kv:?}")))?;
            cfg.set(k, v)?;
        }
        if let Some(d) = &self.dataset {
            cfg.dataset = d.parse::<DatasetKind>()?;
        }
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field.clone() { cfg.$field = v; })*
            };
        }
        take!(clients, rounds, alpha, beta, epsilon, mc_passes, seed, out);
        cfg.validate()?;
        Ok(cfg)
    }
}

fn model_path(cfg: &RunConfig, arg: &ModelArg) -> PathBuf {
    arg.model.clone().unwrap_or_else(|| cfg.out.join("model.fnpv"))
}

fn execute(cli: &Cli) -> StageResult<()> {
    let cfg = cli.overrides.resolve().stage("config")?;
    configure_threads(cfg.threads);
    let out = cfg.out.as_path();
    match &cli.command {
        Command::Run => {
            let report = run_experiment(&cfg)?;
            let u = &report.uncertainty.report;
            println!(
                "accuracy {:.4}  coverage {:.4}  tau {:.4}  mean set size {:.3}  nam accuracy {:.4}",
                u.accuracy_backbone, u.coverage, u.tau, u.mean_set_size, report.explain.nam_accuracy
            );
            println!("wrote {} files to {}", report.files.len(), out.display());
        }
        Command::Train => {
            let prep = prepare_data(&cfg)?;
            create_out_dir(out).stage("config")?;
            std::fs::write(out.join("config.txt"), cfg.to_text())
                .map_err(|e| Error::Io { path: out.join("config.txt"), source: e })
                .stage("config")?;
            let train = train_backbone(&cfg, &prep).stage("train")?;
            std::fs::write(out.join("round_history.csv"), train.history_csv())
                .map_err(|e| Error::Io { path: out.join("round_history.csv"), source: e })
                .stage("train")?;
            train.model.flatten().save(&out.join("model.fnpv")).stage("train")?;
            println!("test accuracy by round: {:?}", train.test_accuracy);
        }
        Command::Calibrate(arg) => {
            let prep = prepare_data(&cfg)?;
            let model = load_backbone(&cfg, &prep, &model_path(&cfg, arg)).stage("calibrate")?;
            let bundle = calibrate_stage(&cfg, &prep, &model, None).stage("calibrate")?;
            create_out_dir(out).stage("report")?;
            std::fs::write(out.join("samples.csv"), samples_csv(&bundle.samples))
                .map_err(|e| Error::Io { path: out.join("samples.csv"), source: e })
                .stage("report")?;
            emit_plot_data(&bundle, out).stage("report")?;
            write_json(&out.join("uncertainty_report.json"), &bundle.report).stage("report")?;
            let r = &bundle.report;
            println!("tau {:.4}  coverage {:.4}  mean set size {:.3}", r.tau, r.coverage, r.mean_set_size);
        }
        Command::Explain(arg) => {
            let prep = prepare_data(&cfg)?;
            let model = load_backbone(&cfg, &prep, &model_path(&cfg, arg)).stage("explain")?;
            let (nam, history) = train_nam(&cfg, &prep).stage("nam")?;
            create_out_dir(out).stage("report")?;
            nam.flatten().save(&out.join("nam.fnpv")).stage("nam")?;
            std::fs::write(out.join("nam_history.csv"), history_csv(&history))
                .map_err(|e| Error::Io { path: out.join("nam_history.csv"), source: e })
                .stage("nam")?;
            let report = explain_stage(&cfg, &prep, &model, &nam, &history, out).stage("explain")?;
            write_json(&out.join("explain_report.json"), &report).stage("report")?;
            println!("nam accuracy {:.4}, {} samples explained", report.nam_accuracy, report.samples.len());
        }
        Command::Bench(arg) => {
            let prep = prepare_data(&cfg)?;
            let model = bench_backbone(&cfg, &prep, &model_path(&cfg, arg)).stage("bench")?;
            let report = bench_uncertainty(&cfg, &model, prep.test.features()).stage("bench")?;
            create_out_dir(out).stage("report")?;
            write_json(&out.join("bench.json"), &report).stage("report")?;
            println!(
                "N={} M={}: t_dla {:.6}s  t_mc {:.6}s  ratio {:.2}",
                report.n, report.passes, report.t_dla, report.t_mc, report.ratio
            );
        }
        Command::Sweep(arg) => {
            let prep = prepare_data(&cfg)?;
            let model = bench_backbone(&cfg, &prep, &model_path(&cfg, arg)).stage("sweep")?;
            let rows = run_sweep(&cfg, &prep, &model).stage("sweep")?;
            create_out_dir(out).stage("report")?;
            write_sweep(&rows, out).stage("report")?;
            for r in rows.iter().filter(|r| r.seed.is_none()) {
                println!("alpha {:.3}: mean coverage {:.4}, mean set size {:.3}", r.alpha, r.coverage, r.mean_set_size);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
