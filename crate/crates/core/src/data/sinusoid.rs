use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, TaskDataset, TaskDescriptor};
use crate::nn::Batch;

/// How fresh sinusoid tasks pick their phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhaseMode {
    Fixed(f64),
    /// Uniform in `[0, pi]`.
    Random,
}

/// One sine wave `y = amplitude * sin(x + phase)` with `x` drawn uniformly
/// from `input_range`.
#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidTask {
    pub amplitude: f64,
    pub phase: f64,
    pub input_range: (f64, f64),
    pub train_size: usize,
    pub test_size: usize,
    pub seed: u64,
}

/// Settings shared by every sinusoid task of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SinusoidSettings {
    pub input_range: (f64, f64),
    pub phase_mode: PhaseMode,
    /// Samples per meta-training task.
    pub train_size: usize,
    /// Held-out samples per task, used for meta-training test splits and for
    /// scoring fine-tuned models.
    pub test_size: usize,
    /// Amplitudes of the meta-training tasks, one task per agent.
    pub amplitudes: Vec<f64>,
    /// Range of amplitudes for fresh fine-tuning tasks.
    pub amplitude_range: (f64, f64),
}

impl Default for SinusoidSettings {
    fn default() -> Self {
        Self {
            input_range: (-5.0, 5.0),
            phase_mode: PhaseMode::Fixed(0.0),
            train_size: 1000,
            test_size: 100,
            amplitudes: vec![2.0, 6.0, 10.0],
            amplitude_range: (0.1, 10.0),
        }
    }
}

impl SinusoidSettings {
    pub fn phase<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.phase_mode {
            PhaseMode::Fixed(p) => p,
            PhaseMode::Random => rng.random_range(0.0..=std::f64::consts::PI),
        }
    }

    /// Meta-training task for agent `index`.
    pub fn training_task(&self, index: usize, phase: f64, seed: u64) -> SinusoidTask {
        SinusoidTask {
            amplitude: self.amplitudes[index],
            phase,
            input_range: self.input_range,
            train_size: self.train_size,
            test_size: self.test_size,
            seed,
        }
    }
}

impl SinusoidTask {
    pub fn target(&self, x: f64) -> f64 {
        self.amplitude * (x + self.phase).sin()
    }

    fn validate(&self) -> Result<(), DataError> {
        let (lo, hi) = self.input_range;
        if !(self.amplitude >= 0.0 && self.amplitude.is_finite()) {
            return Err(DataError::InvalidTask(format!("amplitude {}", self.amplitude)));
        }
        if !self.phase.is_finite() || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(DataError::InvalidTask(format!(
                "phase {} / input range [{lo}, {hi}]",
                self.phase
            )));
        }
        if self.train_size == 0 || self.test_size == 0 {
            return Err(DataError::InvalidTask("empty split".into()));
        }
        Ok(())
    }

    fn batch(&self, xs: Vec<f64>) -> Batch {
        let ys: Vec<f64> = xs.iter().map(|&x| self.target(x)).collect();
        let n = xs.len();
        Batch::regression(
            Array2::from_shape_vec((n, 1), xs).unwrap(),
            Array2::from_shape_vec((n, 1), ys).unwrap(),
        )
        .expect("non-empty split")
    }

    /// Samples batches at explicit inputs, bypassing the random draw.
    pub fn batch_at(&self, xs: Vec<f64>) -> Result<Batch, DataError> {
        if xs.is_empty() {
            return Err(DataError::InvalidTask("empty split".into()));
        }
        Ok(self.batch(xs))
    }
}

pub fn sample_sinusoid(task: &SinusoidTask) -> Result<TaskDataset, DataError> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let (lo, hi) = task.input_range;
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..=hi)).collect() };
    let train = draw(task.train_size);
    let test = draw(task.test_size);
    Ok(TaskDataset {
        train: task.batch(train),
        test: task.batch(test),
        descriptor: TaskDescriptor::Sinusoid {
            amplitude: task.amplitude,
            phase: task.phase,
        },
        indices: None,
    })
}
