use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fedmeta::config::{Algorithm, ExperimentConfig};
use fedmeta::cost::CostLedger;
use fedmeta::eval::median;
use fedmeta::experiment::{
    load_theta, run_experiment, write_algorithm_outputs, write_report, AlgorithmResult, Experiment, ExperimentReport,
    TrainedModel,
};
use fedmeta::plot::{emit_svg_plot, PlotKind, PlotLabels, Series};
use fedmeta::{Model, ParamVector};

#[derive(Parser)]
#[command(name = "fedmeta", version, about = "Federated meta-learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one meta-model and write theta.json and its cost ledger.
    Train(Common),
    /// Fine-tune a meta-model on fresh tasks and write eval.csv, cdf.csv and plots.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Previously trained meta-model; trained from scratch when omitted.
        #[arg(long)]
        theta: Option<PathBuf>,
    },
    /// Train and evaluate every configured algorithm on the same trials.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Algorithm, or a comma-separated list for `compare`.
    #[arg(long)]
    algorithm: Option<String>,
    /// Fine-tune trials per algorithm.
    #[arg(long)]
    trials: Option<usize>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut text = match &self.config {
            Some(path) => std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
            None => String::new(),
        };
        // Overrides go through the same parser, so `experiment` may be set here too.
        for o in &self.overrides {
            if !o.contains('=') {
                bail!("--set {o:?} is not KEY=VALUE");
            }
            text.push('\n');
            text.push_str(o);
        }
        let mut cfg = ExperimentConfig::parse(&text).context("invalid configuration")?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        }
        if let Some(a) = &self.algorithm {
            cfg.set("algorithm", a)?;
        }
        if let Some(t) = self.trials {
            cfg.set("trials", &t.to_string())?;
        }
        Ok(cfg)
    }
}

fn single_algorithm(cfg: &ExperimentConfig) -> Result<Algorithm> {
    match cfg.algorithms[..] {
        [a] => Ok(a),
        _ => bail!("pass exactly one --algorithm"),
    }
}

fn summarize(report: &ExperimentReport) {
    for r in &report.results {
        let losses: Vec<f64> = r.records.iter().map(|e| e.loss).collect();
        let totals = r.trained.ledger.totals();
        print!(
            "{:<14} median loss {:>10.5}  comm {:>10.1} J  compute {:>8.3} J  grad evals {:>8}",
            r.trained.algorithm.name(),
            median(&losses),
            totals.comm_energy_j,
            totals.compute_energy_j,
            totals.grad_evals
        );
        let acc: Vec<f64> = r.records.iter().filter_map(|e| e.accuracy).collect();
        if !acc.is_empty() {
            print!("  mean accuracy {:.4}", acc.iter().sum::<f64>() / acc.len() as f64);
        }
        println!();
    }
}

fn train(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let algorithm = single_algorithm(&cfg)?;
    let out = cfg.output_dir.join(algorithm.name());
    let exp = Experiment::prepare(cfg)?;
    let trained = exp.train(algorithm, None)?;
    write_algorithm_outputs(&exp, &trained, None, &out)?;
    let t = trained.ledger.totals();
    println!(
        "{}: {} rounds, {} uplinks, {} downlinks, {:.3} J comm, {} grad evals -> {}",
        algorithm,
        t.rounds,
        t.uplinks,
        t.downlinks,
        t.comm_energy_j,
        t.grad_evals,
        out.join("theta.json").display()
    );
    Ok(())
}

fn eval(common: &Common, theta: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let algorithm = single_algorithm(&cfg)?;
    let out = cfg.output_dir.clone();
    let exp = Experiment::prepare(cfg)?;
    let trained = match theta {
        Some(path) => {
            let file = load_theta(path)?;
            if file.layer_sizes != exp.spec.layer_sizes() {
                bail!(
                    "{} holds a {:?} network, the {} experiment uses {:?}",
                    path.display(),
                    file.layer_sizes,
                    exp.cfg.experiment,
                    exp.spec.layer_sizes()
                );
            }
            if file.params.len() != exp.spec.dim() {
                bail!("{} has {} parameters, expected {}", path.display(), file.params.len(), exp.spec.dim());
            }
            // Training costs of a loaded model are not known here.
            TrainedModel {
                algorithm,
                theta: ParamVector::from_vec(file.params.into_vec()),
                ledger: CostLedger::new(exp.cfg.cost_model(exp.spec.dim())),
                trajectory: None,
            }
        }
        None => exp.train(algorithm, None)?,
    };
    let records = exp.evaluate(&trained.theta)?;
    let report = ExperimentReport {
        experiment: exp.cfg.experiment,
        results: vec![AlgorithmResult { trained, records }],
    };
    write_report(&exp, &report, &out)?;
    summarize(&report);
    Ok(())
}

fn compare(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let out = cfg.output_dir.clone();
    let report = run_experiment(cfg)?;
    summarize(&report);
    // Median loss per algorithm as a bar chart next to the CDFs.
    let series: Vec<Series> = report
        .results
        .iter()
        .map(|r| {
            let losses: Vec<f64> = r.records.iter().map(|e| e.loss).collect();
            Series::new(r.trained.algorithm.name(), vec![(0.0, median(&losses))])
        })
        .collect();
    emit_svg_plot(
        &series,
        PlotKind::GroupedBars,
        &PlotLabels {
            title: "median fine-tuned test loss".into(),
            x_label: String::new(),
            y_label: "loss".into(),
            groups: vec!["median".into()],
        },
        &out.join("plots").join("median_loss.svg"),
    )?;
    println!("outputs in {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(c) => train(c),
        Command::Eval { common, theta } => eval(common, theta.as_deref()),
        Command::Compare(c) => compare(c),
    }
}
