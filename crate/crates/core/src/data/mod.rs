//! Task construction: sinusoid regression, MNIST digit classification and
//! fresh fine-tuning tasks.

pub mod idx;
pub mod mnist;
pub mod sinusoid;

use std::fmt;

use rand::seq::index;
use rand::Rng;
use thiserror::Error;

pub use idx::{parse_idx, IdxError, IdxTensor};
pub use mnist::{build_classification_task, ClassificationTask, MnistCorpus, MnistFiles, Split};
pub use sinusoid::{sample_sinusoid, PhaseMode, SinusoidSettings, SinusoidTask};

use crate::nn::Batch;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DataError {
    #[error(transparent)]
    Idx(#[from] IdxError),
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("invalid task: {0}")]
    InvalidTask(String),
    #[error("digit {digit}: need {needed} samples, corpus has {available}")]
    InsufficientSamples {
        digit: u8,
        needed: usize,
        available: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskDescriptor {
    Sinusoid { amplitude: f64, phase: f64 },
    Digits(Vec<u8>),
}

impl fmt::Display for TaskDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskDescriptor::Sinusoid { amplitude, phase } => {
                write!(f, "amplitude={amplitude:.6} phase={phase:.6}")
            }
            TaskDescriptor::Digits(d) => {
                let digits: Vec<String> = d.iter().map(u8::to_string).collect();
                write!(f, "digits={}", digits.join("-"))
            }
        }
    }
}

/// Corpus positions behind a classification task's splits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Train and held-out samples of a single task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub train: Batch,
    pub test: Batch,
    pub descriptor: TaskDescriptor,
    pub indices: Option<SplitIndices>,
}

/// Where fresh fine-tuning tasks come from.
#[derive(Debug, Clone, Copy)]
pub enum FinetuneSource<'a> {
    Sinusoid(&'a SinusoidSettings),
    Classification {
        corpus: &'a MnistCorpus,
        ways: usize,
        test_per_class: usize,
    },
}

/// Draws a new task for evaluation. Sinusoids get an amplitude uniform in the
/// configured range and `shots` training points; classification tasks get
/// `ways` distinct digits with `shots` training images each.
pub fn sample_finetune_task<R: Rng + ?Sized>(
    rng: &mut R,
    source: FinetuneSource<'_>,
    shots: usize,
) -> Result<TaskDataset, DataError> {
    if shots == 0 {
        return Err(DataError::InvalidTask("shots must be positive".into()));
    }
    match source {
        FinetuneSource::Sinusoid(settings) => {
            let (lo, hi) = settings.amplitude_range;
            let amplitude = rng.random_range(lo..=hi);
            let phase = settings.phase(rng);
            let task = SinusoidTask {
                amplitude,
                phase,
                input_range: settings.input_range,
                train_size: shots,
                test_size: settings.test_size,
                seed: rng.next_u64(),
            };
            sample_sinusoid(&task)
        }
        FinetuneSource::Classification {
            corpus,
            ways,
            test_per_class,
        } => {
            if ways == 0 || ways > 10 {
                return Err(DataError::InvalidTask(format!("{ways}-way task")));
            }
            let mut classes: Vec<u8> = index::sample(rng, 10, ways)
                .into_iter()
                .map(|d| d as u8)
                .collect();
            classes.sort_unstable();
            let task = ClassificationTask::per_class(classes, shots, test_per_class, rng.next_u64());
            build_classification_task(corpus, &task)
        }
    }
}
