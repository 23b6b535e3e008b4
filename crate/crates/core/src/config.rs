//! Experiment configuration and its flat `key = value` file format.
//!
//! ```text
//! # comments start with '#'
//! experiment = sinusoid
//! algorithm = meta_backward, avg_init
//! backward.K = 50
//! channel.broadcast = per_agent
//! ```
//!
//! The `experiment` key selects the defaults every other key overrides, so it
//! is applied first wherever it appears. Unknown keys are errors.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::backward::{AscentMode, BackwardConfig, DeltaSchedule, LocalSolverConfig};
use crate::cost::{BroadcastAccounting, ChannelConfig, ComputeClock, CostModel, EnergyConfig};
use crate::data::mnist::MnistFiles;
use crate::data::sinusoid::{PhaseMode, SinusoidSettings};
use crate::eval::FinetuneSettings;
use crate::imaml::ImamlConfig;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value {value:?} for {key}: {reason}")]
    InvalidValue {
        key: String,
        value: String,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Sinusoid,
    Mnist,
}

impl FromStr for ExperimentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sinusoid" => Ok(Self::Sinusoid),
            "mnist" => Ok(Self::Mnist),
            _ => Err("expected sinusoid or mnist".into()),
        }
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sinusoid => "sinusoid",
            Self::Mnist => "mnist",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Algorithm {
    MetaBackward,
    Imaml,
    /// Plain average of the local optima.
    AvgInit,
    /// The shared random initializer, untrained.
    RandomInit,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [
        Algorithm::MetaBackward,
        Algorithm::Imaml,
        Algorithm::AvgInit,
        Algorithm::RandomInit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::MetaBackward => "meta_backward",
            Self::Imaml => "imaml",
            Self::AvgInit => "avg_init",
            Self::RandomInit => "random_init",
        }
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| "expected meta_backward, imaml, avg_init or random_init".into())
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MnistSettings {
    /// Digit sets of the meta-training tasks, one per agent.
    pub tasks: Vec<Vec<u8>>,
    pub train_total: usize,
    pub test_total: usize,
    pub files: MnistFiles,
}

impl Default for MnistSettings {
    fn default() -> Self {
        Self {
            tasks: vec![vec![0, 1, 2], vec![7, 8, 9]],
            train_total: 400,
            test_total: 100,
            files: MnistFiles::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    pub algorithms: Vec<Algorithm>,
    pub trials: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data_dir: PathBuf,
    pub sinusoid: SinusoidSettings,
    pub mnist: MnistSettings,
    pub finetune: FinetuneSettings,
    pub backward: BackwardConfig,
    pub imaml: ImamlConfig,
    pub channel: ChannelConfig,
    pub broadcast: BroadcastAccounting,
    pub energy: EnergyConfig,
}

impl ExperimentConfig {
    pub fn defaults(experiment: ExperimentKind) -> Self {
        let mut backward = BackwardConfig::default();
        let (trials, finetune) = match experiment {
            ExperimentKind::Sinusoid => (500, FinetuneSettings::sinusoid()),
            ExperimentKind::Mnist => {
                backward.local = LocalSolverConfig {
                    lr: 0.1,
                    ..LocalSolverConfig::default()
                };
                (100, FinetuneSettings::classification())
            }
        };
        Self {
            experiment,
            algorithms: Algorithm::ALL.to_vec(),
            trials,
            seed: 0,
            output_dir: PathBuf::from("out"),
            data_dir: PathBuf::from("data/mnist"),
            sinusoid: SinusoidSettings::default(),
            mnist: MnistSettings::default(),
            finetune,
            backward,
            imaml: ImamlConfig::default(),
            channel: ChannelConfig::default(),
            broadcast: BroadcastAccounting::PerAgent,
            energy: EnergyConfig::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if key.is_empty() {
                return Err(ConfigError::Syntax {
                    line: i + 1,
                    text: raw.to_string(),
                });
            }
            pairs.push((key, value));
        }
        let kind = match pairs.iter().rev().find(|(k, _)| *k == "experiment") {
            Some((k, v)) => parse_value(k, v)?,
            None => ExperimentKind::Sinusoid,
        };
        let mut cfg = Self::defaults(kind);
        for (k, v) in pairs {
            if k != "experiment" {
                cfg.set(k, v)?;
            }
        }
        Ok(cfg)
    }

    /// Applies one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value;
        match key {
            "experiment" => {
                let kind: ExperimentKind = parse_value(key, v)?;
                if kind != self.experiment {
                    return Err(invalid(key, v, "the experiment is fixed once defaults are chosen"));
                }
            }
            "algorithm" => {
                self.algorithms = split_list(v).map(|a| parse_value(key, a)).collect::<Result<_, _>>()?;
                if self.algorithms.is_empty() {
                    return Err(invalid(key, v, "need at least one algorithm"));
                }
            }
            "trials" => {
                self.trials = parse_value(key, v)?;
                if self.trials == 0 {
                    return Err(invalid(key, v, "need at least one trial"));
                }
            }
            "seed" => self.seed = parse_value(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "data_dir" => self.data_dir = PathBuf::from(v),

            "sinusoid.input_range" => self.sinusoid.input_range = parse_range(key, v)?,
            "sinusoid.phase_mode" => {
                self.sinusoid.phase_mode = match v {
                    "random" => PhaseMode::Random,
                    "fixed" => PhaseMode::Fixed(0.0),
                    _ => match v.strip_prefix("fixed:") {
                        Some(p) => PhaseMode::Fixed(parse_value(key, p.trim())?),
                        None => return Err(invalid(key, v, "expected fixed, fixed:<radians> or random")),
                    },
                }
            }
            "sinusoid.train_size" => self.sinusoid.train_size = positive(key, v)?,
            "sinusoid.test_size" => self.sinusoid.test_size = positive(key, v)?,
            "sinusoid.amplitudes" => {
                self.sinusoid.amplitudes = split_list(v).map(|a| parse_value(key, a)).collect::<Result<_, _>>()?;
                if self.sinusoid.amplitudes.is_empty() {
                    return Err(invalid(key, v, "need at least one amplitude"));
                }
            }
            "sinusoid.amplitude_range" => self.sinusoid.amplitude_range = parse_range(key, v)?,

            "mnist.tasks" => {
                self.mnist.tasks = v
                    .split(';')
                    .map(|set| split_list(set).map(|d| parse_value(key, d)).collect::<Result<Vec<u8>, _>>())
                    .collect::<Result<_, _>>()?;
                if self.mnist.tasks.iter().any(Vec::is_empty) {
                    return Err(invalid(key, v, "empty digit set"));
                }
            }
            "mnist.train_total" => self.mnist.train_total = positive(key, v)?,
            "mnist.test_total" => self.mnist.test_total = positive(key, v)?,
            "mnist.train_images" => self.mnist.files.train_images = v.to_string(),
            "mnist.train_labels" => self.mnist.files.train_labels = v.to_string(),
            "mnist.test_images" => self.mnist.files.test_images = v.to_string(),
            "mnist.test_labels" => self.mnist.files.test_labels = v.to_string(),

            "finetune.shots" => self.finetune.shots = positive(key, v)?,
            "finetune.steps" => self.finetune.steps = parse_value(key, v)?,
            "finetune.lr" => self.finetune.lr = positive_real(key, v)?,
            "finetune.ways" => self.finetune.ways = positive(key, v)?,
            "finetune.test_per_class" => self.finetune.test_per_class = positive(key, v)?,

            "local.max_steps" => self.backward.local.max_steps = parse_value(key, v)?,
            "local.lr" => self.backward.local.lr = positive_real(key, v)?,
            "local.grad_tol" => self.backward.local.grad_tol = parse_value(key, v)?,
            "local.batch_size" => self.backward.local.batch_size = positive(key, v)?,
            "local.check_every" => self.backward.local.check_every = positive(key, v)?,

            "backward.K" => self.backward.steps = positive(key, v)?,
            "backward.alpha" => self.backward.alpha = positive_real(key, v)?,
            "backward.batch_size" => self.backward.batch_size = positive(key, v)?,
            "backward.ascent" => {
                self.backward.ascent = match v {
                    "stochastic" => AscentMode::Stochastic,
                    "full_batch" => AscentMode::FullBatch,
                    _ => return Err(invalid(key, v, "expected stochastic or full_batch")),
                }
            }
            "backward.gamma" | "backward.delta_scale" => {
                let (mut gamma, mut scale) = match self.backward.delta {
                    DeltaSchedule::Geometric { gamma, scale } => (gamma, scale),
                    DeltaSchedule::Explicit(_) => (0.85, None),
                };
                if key == "backward.gamma" {
                    gamma = positive_real(key, v)?;
                } else if v == "auto" {
                    scale = None;
                } else {
                    scale = Some(positive_real(key, v)?);
                }
                self.backward.delta = DeltaSchedule::Geometric { gamma, scale };
            }
            "backward.deltas" => {
                let deltas = split_list(v).map(|d| positive_real(key, d)).collect::<Result<Vec<_>, _>>()?;
                self.backward.delta = DeltaSchedule::Explicit(deltas);
            }

            "imaml.X" => self.imaml.outer_steps = parse_value(key, v)?,
            "imaml.Y" => self.imaml.inner_steps = parse_value(key, v)?,
            "imaml.cg_steps" => self.imaml.cg_steps = parse_value(key, v)?,
            "imaml.lambda" => self.imaml.lambda = positive_real(key, v)?,
            "imaml.inner_lr" => self.imaml.inner_lr = positive_real(key, v)?,
            "imaml.outer_lr" => self.imaml.outer_lr = positive_real(key, v)?,
            "imaml.batch_size" => self.imaml.batch_size = positive(key, v)?,
            "imaml.hvp_eps" => self.imaml.hvp_eps = positive_real(key, v)?,

            "channel.bandwidth_hz" | "channel.tx_power_w" | "channel.noise_psd" | "channel.bits_per_element" => {
                let c = self.channel;
                let (mut b, mut p, mut n0, mut bits) =
                    (c.bandwidth_hz(), c.tx_power_w(), c.noise_psd(), c.bits_per_element());
                match key {
                    "channel.bandwidth_hz" => b = parse_value(key, v)?,
                    "channel.tx_power_w" => p = parse_value(key, v)?,
                    "channel.noise_psd" => n0 = parse_value(key, v)?,
                    _ => bits = parse_value(key, v)?,
                }
                self.channel = ChannelConfig::new(b, p, n0, bits).map_err(|e| invalid(key, v, &e.to_string()))?;
            }
            "channel.broadcast" => {
                self.broadcast = match v {
                    "per_agent" => BroadcastAccounting::PerAgent,
                    "single" => BroadcastAccounting::Single,
                    _ => return Err(invalid(key, v, "expected per_agent or single")),
                }
            }
            "energy.device_watts" => self.energy.device_watts = positive_real(key, v)?,
            "energy.clock" => {
                self.energy.clock = match v {
                    "modeled" => ComputeClock::Modeled,
                    "wall" => ComputeClock::Wall,
                    _ => return Err(invalid(key, v, "expected modeled or wall")),
                }
            }
            "energy.flops_per_second" => self.energy.flops_per_second = positive_real(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn cost_model(&self, model_size: usize) -> CostModel {
        CostModel {
            channel: self.channel,
            energy: self.energy,
            broadcast: self.broadcast,
            model_size,
        }
    }
}

fn invalid(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e: T::Err| invalid(key, value, &e.to_string()))
}

fn positive(key: &str, value: &str) -> Result<usize, ConfigError> {
    match parse_value(key, value)? {
        0 => Err(invalid(key, value, "must be positive")),
        n => Ok(n),
    }
}

fn positive_real(key: &str, value: &str) -> Result<f64, ConfigError> {
    let x: f64 = parse_value(key, value)?;
    if x > 0.0 && x.is_finite() {
        Ok(x)
    } else {
        Err(invalid(key, value, "must be positive and finite"))
    }
}

fn parse_range(key: &str, value: &str) -> Result<(f64, f64), ConfigError> {
    let parts: Vec<f64> = split_list(value).map(|p| parse_value(key, p)).collect::<Result<_, _>>()?;
    match parts[..] {
        [lo, hi] if lo < hi => Ok((lo, hi)),
        _ => Err(invalid(key, value, "expected `lo, hi` with lo < hi")),
    }
}

fn split_list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_per_experiment() {
        let s = ExperimentConfig::defaults(ExperimentKind::Sinusoid);
        assert_eq!(s.trials, 500);
        assert_eq!(s.finetune.shots, 40);
        assert_eq!(s.backward.steps, 50);
        let m = ExperimentConfig::defaults(ExperimentKind::Mnist);
        assert_eq!(m.trials, 100);
        assert_eq!((m.finetune.ways, m.finetune.shots), (5, 10));
        assert_eq!(m.mnist.tasks, vec![vec![0, 1, 2], vec![7, 8, 9]]);
    }

    #[test]
    fn parses_every_section() {
        let cfg = ExperimentConfig::parse(
            "# demo\n\
             trials = 7\n\
             experiment = mnist\n\
             algorithm = meta_backward, imaml\n\
             seed = 42  # trailing comment\n\
             sinusoid.input_range = -3, 3\n\
             sinusoid.phase_mode = fixed:0.5\n\
             mnist.tasks = 0,1;5,6,7\n\
             finetune.steps = 0\n\
             local.lr = 0.2\n\
             backward.K = 10\n\
             backward.gamma = 0.9\n\
             backward.delta_scale = 2\n\
             imaml.X = 3\n\
             imaml.Y = 4\n\
             channel.bandwidth_hz = 10000\n\
             channel.broadcast = single\n\
             energy.clock = wall\n",
        )
        .unwrap();
        assert_eq!(cfg.experiment, ExperimentKind::Mnist);
        assert_eq!(cfg.trials, 7);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.algorithms, vec![Algorithm::MetaBackward, Algorithm::Imaml]);
        assert_eq!(cfg.sinusoid.input_range, (-3.0, 3.0));
        assert_eq!(cfg.sinusoid.phase_mode, PhaseMode::Fixed(0.5));
        assert_eq!(cfg.mnist.tasks, vec![vec![0, 1], vec![5, 6, 7]]);
        assert_eq!(cfg.finetune.steps, 0);
        assert_eq!(cfg.backward.local.lr, 0.2);
        assert_eq!(cfg.backward.steps, 10);
        assert_eq!(
            cfg.backward.delta,
            DeltaSchedule::Geometric {
                gamma: 0.9,
                scale: Some(2.0)
            }
        );
        assert_eq!((cfg.imaml.outer_steps, cfg.imaml.inner_steps), (3, 4));
        assert_eq!(cfg.channel.bandwidth_hz(), 10000.0);
        assert_eq!(cfg.broadcast, BroadcastAccounting::Single);
        assert_eq!(cfg.energy.clock, ComputeClock::Wall);
    }

    #[test]
    fn rejects_unknown_and_malformed() {
        assert_eq!(
            ExperimentConfig::parse("backward.k = 3"),
            Err(ConfigError::UnknownKey("backward.k".into()))
        );
        assert!(matches!(ExperimentConfig::parse("trials"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(ExperimentConfig::parse("trials = 0"), Err(ConfigError::InvalidValue { .. })));
        assert!(matches!(ExperimentConfig::parse("algorithm = maml"), Err(ConfigError::InvalidValue { .. })));
        assert!(matches!(
            ExperimentConfig::parse("channel.tx_power_w = 0"),
            Err(ConfigError::InvalidValue { .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("sinusoid.input_range = 5, -5"),
            Err(ConfigError::InvalidValue { .. })
        ));
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
    }
}
