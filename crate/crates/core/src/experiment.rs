//! End-to-end experiments: build the meta-training tasks, produce one
//! meta-model per algorithm, fine-tune each on the same fresh tasks and write
//! the tables and plots.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backward::{run_backward_from, train_local_optima, trajectory_csv, EngineError, LocalOutcome};
use crate::config::{Algorithm, ExperimentConfig, ExperimentKind};
use crate::cost::{CostLedger, RoundUsage};
use crate::data::{
    build_classification_task, sample_finetune_task, sample_sinusoid, ClassificationTask, DataError, FinetuneSource,
    MnistCorpus, Split, TaskDataset,
};
use crate::eval::{cdf_csv, emit_cdf, eval_csv, finetune_and_eval, CdfMetric, EvalError, EvalRecord};
use crate::imaml::{ImamlError, ImamlRunner};
use crate::nn::{Head, MlpSpec, Model, ParamVector};
use crate::plot::{emit_svg_plot, PlotError, PlotKind, PlotLabels, Series};
use crate::{stream_id, stream_rng};

const INIT_STREAM: u16 = 10;
const TASK_STREAM: u16 = 11;
const TRIAL_STREAM: u16 = 12;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("missing data: {0}")]
    MissingData(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("failed to access {path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Imaml(#[from] ImamlError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Plot(#[from] PlotError),
}

fn io_error(path: &Path, err: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io {
        path: path.display().to_string(),
        message: err.to_string(),
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

/// A meta-model with the communication/computation it cost.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub algorithm: Algorithm,
    pub theta: ParamVector,
    pub ledger: CostLedger,
    /// Backward-phase trajectory CSV, for Meta-Backward only.
    pub trajectory: Option<String>,
}

/// Serialized meta-model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaFile {
    pub experiment: String,
    pub algorithm: String,
    pub layer_sizes: Vec<usize>,
    pub params: ParamVector,
}

pub fn save_theta(path: &Path, file: &ThetaFile) -> Result<(), HarnessError> {
    let json = serde_json::to_string(file).map_err(|e| io_error(path, e))?;
    write_file(path, &json)
}

pub fn load_theta(path: &Path) -> Result<ThetaFile, HarnessError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_error(path, e))
}

/// Everything an experiment needs before any algorithm runs.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub spec: MlpSpec,
    /// One meta-training task per agent.
    pub tasks: Vec<TaskDataset>,
    /// Shared initializer of local training and the random baseline.
    pub init: ParamVector,
    finetune_corpus: Option<MnistCorpus>,
}

impl Experiment {
    pub fn prepare(cfg: ExperimentConfig) -> Result<Self, HarnessError> {
        if cfg.trials == 0 {
            return Err(HarnessError::InvalidConfig("trials must be at least 1".into()));
        }
        if cfg.algorithms.is_empty() {
            return Err(HarnessError::InvalidConfig("no algorithm selected".into()));
        }
        let (spec, tasks, finetune_corpus) = match cfg.experiment {
            ExperimentKind::Sinusoid => {
                let s = &cfg.sinusoid;
                let tasks = (0..s.amplitudes.len())
                    .map(|i| {
                        let mut rng = stream_rng(cfg.seed, stream_id(TASK_STREAM, i as u32, 0));
                        let phase = s.phase(&mut rng);
                        sample_sinusoid(&s.training_task(i, phase, rand::RngCore::next_u64(&mut rng)))
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                (MlpSpec::sinusoid(), tasks, None)
            }
            ExperimentKind::Mnist => {
                if cfg.finetune.ways > 10 {
                    return Err(HarnessError::InvalidConfig(format!("{}-way tasks", cfg.finetune.ways)));
                }
                let train = load_corpus(&cfg, Split::Train)?;
                let test = load_corpus(&cfg, Split::Test)?;
                let tasks = cfg
                    .mnist
                    .tasks
                    .iter()
                    .enumerate()
                    .map(|(i, classes)| {
                        let seed = rand::RngCore::next_u64(&mut stream_rng(cfg.seed, stream_id(TASK_STREAM, i as u32, 0)));
                        let task =
                            ClassificationTask::with_totals(classes.clone(), cfg.mnist.train_total, cfg.mnist.test_total, seed);
                        build_classification_task(&train, &task)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                (MlpSpec::mnist(), tasks, Some(test))
            }
        };
        if tasks.is_empty() {
            return Err(HarnessError::InvalidConfig("no meta-training tasks".into()));
        }
        let init = spec.init_params(&mut stream_rng(cfg.seed, stream_id(INIT_STREAM, 0, 0)));
        Ok(Self {
            cfg,
            spec,
            tasks,
            init,
            finetune_corpus,
        })
    }

    fn finetune_source(&self) -> FinetuneSource<'_> {
        match &self.finetune_corpus {
            None => FinetuneSource::Sinusoid(&self.cfg.sinusoid),
            Some(corpus) => FinetuneSource::Classification {
                corpus,
                ways: self.cfg.finetune.ways,
                test_per_class: self.cfg.finetune.test_per_class,
            },
        }
    }

    /// Fresh task of trial `trial`; a pure function of the master seed and
    /// the trial index.
    pub fn finetune_task(&self, trial: usize) -> Result<TaskDataset, HarnessError> {
        let mut rng = stream_rng(self.cfg.seed, stream_id(TRIAL_STREAM, trial as u32, 0));
        Ok(sample_finetune_task(&mut rng, self.finetune_source(), self.cfg.finetune.shots)?)
    }

    pub fn local_optima(&self) -> Result<Vec<LocalOutcome>, HarnessError> {
        Ok(train_local_optima(
            &self.spec,
            &self.tasks,
            &self.init,
            &self.cfg.backward.local,
            self.cfg.seed,
        )?)
    }

    fn cost_ledger(&self) -> CostLedger {
        CostLedger::new(self.cfg.cost_model(self.spec.dim()))
    }

    /// Trains one algorithm. Every algorithm except the random baseline
    /// starts from the local optima; they are computed when `local` is absent.
    pub fn train(&self, algorithm: Algorithm, local: Option<&[LocalOutcome]>) -> Result<TrainedModel, HarnessError> {
        let owned;
        let local = match (algorithm, local) {
            (Algorithm::MetaBackward | Algorithm::Imaml | Algorithm::AvgInit, None) => {
                owned = self.local_optima()?;
                Some(owned.as_slice())
            }
            (_, l) => l,
        };
        let n = self.tasks.len() as u64;
        let trained = match algorithm {
            Algorithm::MetaBackward => {
                let mut bcfg = self.cfg.backward.clone();
                bcfg.seed = self.cfg.seed;
                let local = local.expect("computed above").to_vec();
                let run = run_backward_from(&self.spec, &self.tasks, local, &bcfg, self.cfg.cost_model(self.spec.dim()))?;
                TrainedModel {
                    algorithm,
                    theta: run.theta,
                    ledger: run.ledger,
                    trajectory: Some(trajectory_csv(&run.trajectory)),
                }
            }
            Algorithm::Imaml => {
                let mut runner = self.imaml_runner(local.expect("computed above"))?;
                for _ in 0..self.cfg.imaml.outer_steps {
                    runner.step()?;
                }
                let run = runner.finish();
                TrainedModel {
                    algorithm,
                    theta: run.theta,
                    ledger: run.ledger,
                    trajectory: None,
                }
            }
            Algorithm::AvgInit => {
                let mut ledger = self.cost_ledger();
                ledger.record_round(RoundUsage {
                    uplinks: n,
                    broadcast_receivers: n,
                    ..RoundUsage::default()
                });
                TrainedModel {
                    algorithm,
                    theta: local_average(local.expect("computed above")),
                    ledger,
                    trajectory: None,
                }
            }
            Algorithm::RandomInit => TrainedModel {
                algorithm,
                theta: self.init.clone(),
                ledger: self.cost_ledger(),
                trajectory: None,
            },
        };
        Ok(trained)
    }

    /// iMAML from the average of the local optima, with the upload that
    /// average needs already charged as round 0. Step it to any round count.
    pub fn imaml_runner(&self, local: &[LocalOutcome]) -> Result<ImamlRunner<'_, MlpSpec>, HarnessError> {
        let mut icfg = self.cfg.imaml.clone();
        icfg.seed = self.cfg.seed;
        let mut runner = ImamlRunner::new(
            &self.spec,
            &self.tasks,
            local_average(local),
            icfg,
            self.cfg.cost_model(self.spec.dim()),
        )?;
        runner.charge_initial_upload()?;
        Ok(runner)
    }

    /// Trains every configured algorithm, sharing one set of local optima.
    pub fn train_all(&self) -> Result<Vec<TrainedModel>, HarnessError> {
        let needs_local = self
            .cfg
            .algorithms
            .iter()
            .any(|a| !matches!(a, Algorithm::RandomInit));
        let local = if needs_local { Some(self.local_optima()?) } else { None };
        self.cfg
            .algorithms
            .iter()
            .map(|&a| self.train(a, local.as_deref()))
            .collect()
    }

    /// Fine-tunes `theta` on trials `0..trials`, in parallel.
    pub fn evaluate(&self, theta: &ParamVector) -> Result<Vec<EvalRecord>, HarnessError> {
        if theta.len() != self.spec.dim() {
            return Err(HarnessError::InvalidConfig(format!(
                "meta-model has {} parameters, architecture needs {}",
                theta.len(),
                self.spec.dim()
            )));
        }
        (0..self.cfg.trials)
            .into_par_iter()
            .map(|trial| {
                let task = self.finetune_task(trial)?;
                let e = finetune_and_eval(&self.spec, theta, &task, &self.cfg.finetune)?;
                Ok(EvalRecord {
                    trial,
                    task: task.descriptor.to_string(),
                    loss: e.loss,
                    accuracy: e.accuracy,
                })
            })
            .collect()
    }

    pub fn theta_file(&self, trained: &TrainedModel) -> ThetaFile {
        ThetaFile {
            experiment: self.cfg.experiment.to_string(),
            algorithm: trained.algorithm.to_string(),
            layer_sizes: self.spec.layer_sizes().to_vec(),
            params: trained.theta.clone(),
        }
    }
}

fn local_average(local: &[LocalOutcome]) -> ParamVector {
    let optima: Vec<ParamVector> = local.iter().map(|l| l.params.clone()).collect();
    ParamVector::mean(&optima)
}

fn load_corpus(cfg: &ExperimentConfig, split: Split) -> Result<MnistCorpus, HarnessError> {
    let files = &cfg.mnist.files;
    let names = match split {
        Split::Train => [&files.train_images, &files.train_labels],
        Split::Test => [&files.test_images, &files.test_labels],
    };
    for name in names {
        let path = cfg.data_dir.join(name);
        if !path.is_file() {
            return Err(HarnessError::MissingData(format!(
                "{} not found (see scripts/ for fetching MNIST)",
                path.display()
            )));
        }
    }
    Ok(MnistCorpus::load(&cfg.data_dir, split, files)?)
}

#[derive(Debug, Clone)]
pub struct AlgorithmResult {
    pub trained: TrainedModel,
    pub records: Vec<EvalRecord>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub experiment: ExperimentKind,
    pub results: Vec<AlgorithmResult>,
}

impl ExperimentReport {
    pub fn result(&self, algorithm: Algorithm) -> Option<&AlgorithmResult> {
        self.results.iter().find(|r| r.trained.algorithm == algorithm)
    }
}

/// Trains, evaluates and writes all outputs under `cfg.output_dir`.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    let out = cfg.output_dir.clone();
    let exp = Experiment::prepare(cfg)?;
    let mut results = Vec::new();
    for trained in exp.train_all()? {
        let records = exp.evaluate(&trained.theta)?;
        results.push(AlgorithmResult { trained, records });
    }
    let report = ExperimentReport {
        experiment: exp.cfg.experiment,
        results,
    };
    write_report(&exp, &report, &out)?;
    Ok(report)
}

/// Per algorithm: `eval.csv`, `costs.csv`, `timing.csv`, `theta.json` and
/// for Meta-Backward `trajectory.csv`. Combined: `cdf.csv` (loss),
/// `cdf_accuracy.csv` for classification, and `plots/*.svg`.
pub fn write_report(exp: &Experiment, report: &ExperimentReport, out: &Path) -> Result<(), HarnessError> {
    for r in &report.results {
        write_algorithm_outputs(exp, &r.trained, Some(&r.records), &out.join(r.trained.algorithm.name()))?;
    }
    let classification = exp.spec.head() == Head::Classification;
    let metrics: &[(CdfMetric, &str, &str)] = if classification {
        &[
            (CdfMetric::Loss, "cdf.csv", "cdf_loss.svg"),
            (CdfMetric::Accuracy, "cdf_accuracy.csv", "cdf_accuracy.svg"),
        ]
    } else {
        &[(CdfMetric::Loss, "cdf.csv", "cdf_loss.svg")]
    };
    let plots = out.join("plots");
    fs::create_dir_all(&plots).map_err(|e| io_error(&plots, e))?;
    for &(metric, csv_name, svg_name) in metrics {
        let curves = report
            .results
            .iter()
            .map(|r| Ok((r.trained.algorithm.to_string(), emit_cdf(&r.records, metric)?)))
            .collect::<Result<Vec<_>, EvalError>>()?;
        write_file(&out.join(csv_name), &cdf_csv(&curves))?;
        let series: Vec<Series> = curves
            .iter()
            .map(|(name, pts)| Series::new(name.clone(), pts.iter().map(|p| (p.value, p.fraction)).collect()))
            .collect();
        let label = match metric {
            CdfMetric::Loss => "test loss",
            CdfMetric::Accuracy => "test accuracy",
        };
        let labels = PlotLabels {
            title: format!("{} fine-tuning: CDF of {label}", exp.cfg.experiment),
            x_label: label.into(),
            y_label: "fraction of trials".into(),
            groups: Vec::new(),
        };
        emit_svg_plot(&series, PlotKind::CdfLines, &labels, &plots.join(svg_name))?;
    }
    let trained: Vec<&TrainedModel> = report.results.iter().map(|r| &r.trained).collect();
    write_cost_plots(&trained, &plots)
}

pub fn write_algorithm_outputs(
    exp: &Experiment,
    trained: &TrainedModel,
    records: Option<&[EvalRecord]>,
    dir: &Path,
) -> Result<(), HarnessError> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    if let Some(records) = records {
        write_file(&dir.join("eval.csv"), &eval_csv(records))?;
    }
    write_file(&dir.join("costs.csv"), &trained.ledger.to_csv())?;
    write_file(&dir.join("timing.csv"), &trained.ledger.timing_csv())?;
    if let Some(traj) = &trained.trajectory {
        write_file(&dir.join("trajectory.csv"), traj)?;
    }
    save_theta(&dir.join("theta.json"), &exp.theta_file(trained))
}

/// Grouped bars of communication vs computation time and energy.
pub fn write_cost_plots(trained: &[&TrainedModel], plots: &Path) -> Result<(), HarnessError> {
    let groups = vec!["communication".to_string(), "computation".to_string()];
    let time: Vec<Series> = trained
        .iter()
        .map(|t| {
            let tot = t.ledger.totals();
            Series::new(t.algorithm.name(), vec![(0.0, tot.comm_time_s), (1.0, tot.compute_time_s)])
        })
        .collect();
    let energy: Vec<Series> = trained
        .iter()
        .map(|t| {
            let tot = t.ledger.totals();
            Series::new(t.algorithm.name(), vec![(0.0, tot.comm_energy_j), (1.0, tot.compute_energy_j)])
        })
        .collect();
    emit_svg_plot(
        &time,
        PlotKind::GroupedBars,
        &PlotLabels {
            title: "total time".into(),
            x_label: String::new(),
            y_label: "seconds".into(),
            groups: groups.clone(),
        },
        &plots.join("time.svg"),
    )?;
    emit_svg_plot(
        &energy,
        PlotKind::GroupedBars,
        &PlotLabels {
            title: "total energy".into(),
            x_label: String::new(),
            y_label: "joules".into(),
            groups,
        },
        &plots.join("energy.svg"),
    )?;
    Ok(())
}

/// Reads every regular file under `dir`, relative path first, for
/// comparing output trees.
pub fn read_tree(dir: &Path) -> Result<Vec<(PathBuf, Vec<u8>)>, HarnessError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| io_error(&d, e))? {
            let path = entry.map_err(|e| io_error(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = fs::read(&path).map_err(|e| io_error(&path, e))?;
                out.push((path.strip_prefix(dir).unwrap_or(&path).to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_sinusoid() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::Sinusoid);
        cfg.trials = 3;
        cfg.sinusoid.train_size = 50;
        cfg.sinusoid.test_size = 20;
        cfg.backward.steps = 3;
        cfg.backward.local.max_steps = 20;
        cfg.backward.batch_size = 10;
        cfg.imaml.outer_steps = 2;
        cfg.imaml.inner_steps = 3;
        cfg.imaml.batch_size = 10;
        cfg.finetune.steps = 2;
        cfg
    }

    #[test]
    fn one_trial_one_row() {
        let mut cfg = small_sinusoid();
        cfg.trials = 1;
        let exp = Experiment::prepare(cfg).unwrap();
        let records = exp.evaluate(&exp.init).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(eval_csv(&records).lines().count(), 2);
    }

    #[test]
    fn more_trials_keep_earlier_ones() {
        let exp = Experiment::prepare(small_sinusoid()).unwrap();
        let three = exp.evaluate(&exp.init).unwrap();
        let mut cfg = small_sinusoid();
        cfg.trials = 5;
        let exp5 = Experiment::prepare(cfg).unwrap();
        let five = exp5.evaluate(&exp5.init).unwrap();
        assert_eq!(&five[..3], &three[..]);
    }

    #[test]
    fn mnist_without_data_is_missing_data() {
        let mut cfg = ExperimentConfig::defaults(ExperimentKind::Mnist);
        let dir = tempfile::tempdir().unwrap();
        cfg.data_dir = dir.path().to_path_buf();
        assert!(matches!(Experiment::prepare(cfg), Err(HarnessError::MissingData(_))));
    }

    #[test]
    fn zero_trials_rejected() {
        let mut cfg = small_sinusoid();
        cfg.trials = 0;
        assert!(matches!(Experiment::prepare(cfg), Err(HarnessError::InvalidConfig(_))));
    }

    #[test]
    fn theta_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let file = ThetaFile {
            experiment: "sinusoid".into(),
            algorithm: "imaml".into(),
            layer_sizes: vec![1, 2, 1],
            params: ParamVector::from_vec(vec![0.1, -1.0 / 3.0, 1e-300, 7.0, 2.5, -0.0, 1.0]),
        };
        let path = dir.path().join("t.json");
        save_theta(&path, &file).unwrap();
        assert_eq!(load_theta(&path).unwrap(), file);
    }

    #[test]
    fn run_writes_expected_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_sinusoid();
        cfg.output_dir = dir.path().to_path_buf();
        let report = run_experiment(cfg).unwrap();
        assert_eq!(report.results.len(), 4);
        let files: Vec<String> = read_tree(dir.path())
            .unwrap()
            .into_iter()
            .map(|(p, _)| p.display().to_string())
            .collect();
        for expected in [
            "cdf.csv",
            "meta_backward/eval.csv",
            "meta_backward/costs.csv",
            "meta_backward/trajectory.csv",
            "imaml/costs.csv",
            "avg_init/theta.json",
            "random_init/eval.csv",
            "plots/cdf_loss.svg",
            "plots/time.svg",
            "plots/energy.svg",
        ] {
            assert!(files.contains(&expected.to_string()), "{expected} missing from {files:?}");
        }
        let cdf = fs::read_to_string(dir.path().join("cdf.csv")).unwrap();
        assert_eq!(cdf.lines().count(), 1 + 4 * 3);
    }
}
