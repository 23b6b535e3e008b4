//! Fine-tuning a meta-model on a fresh task and summarizing many such trials.

use std::fmt::Write as _;

use thiserror::Error;

use crate::data::{TaskDataset, TaskDescriptor};
use crate::nn::{Batch, Head, MlpSpec, Model, NnError, ParamVector, Targets};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("no records to summarize")]
    EmptyInput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneSettings {
    /// Training samples per task (per class for classification).
    pub shots: usize,
    pub steps: usize,
    pub lr: f64,
    /// Classes per classification task.
    pub ways: usize,
    /// Held-out images per class for classification tasks.
    pub test_per_class: usize,
}

impl FinetuneSettings {
    pub fn sinusoid() -> Self {
        Self {
            shots: 40,
            steps: 32,
            lr: 0.01,
            ways: 1,
            test_per_class: 0,
        }
    }

    pub fn classification() -> Self {
        Self {
            shots: 10,
            steps: 100,
            lr: 0.1,
            ways: 5,
            test_per_class: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    /// Only for classification tasks.
    pub accuracy: Option<f64>,
}

/// One fine-tuning trial.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub trial: usize,
    pub task: String,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// Fraction of samples whose highest-scoring class among `classes` is their
/// label. Restricting the argmax to the task's classes makes chance level
/// `1 / classes.len()`.
pub fn restricted_accuracy(probs: &ndarray::Array2<f64>, labels: &[usize], classes: &[usize]) -> f64 {
    let hits = probs
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &label)| {
            let best = classes
                .iter()
                .copied()
                .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                .expect("at least one class");
            best == label
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Runs `settings.steps` full-batch gradient steps from `theta` on the task's
/// training split, then scores the held-out split.
pub fn finetune_and_eval(
    spec: &MlpSpec,
    theta: &ParamVector,
    task: &TaskDataset,
    settings: &FinetuneSettings,
) -> Result<Evaluation, EvalError> {
    let mut params = theta.clone();
    for _ in 0..settings.steps {
        let grad = spec.grad(&params, &task.train)?;
        params.axpy(-settings.lr, &grad);
    }
    score(spec, &params, task)
}

fn score(spec: &MlpSpec, params: &ParamVector, task: &TaskDataset) -> Result<Evaluation, EvalError> {
    let test: &Batch = &task.test;
    let loss = spec.loss(params, test)?;
    let accuracy = match (spec.head(), test.targets()) {
        (Head::Classification, Targets::Labels(labels)) => {
            let classes: Vec<usize> = match &task.descriptor {
                TaskDescriptor::Digits(d) => d.iter().map(|&c| usize::from(c)).collect(),
                TaskDescriptor::Sinusoid { .. } => (0..spec.output_dim()).collect(),
            };
            let probs = spec.forward(params, test)?;
            Some(restricted_accuracy(&probs, labels, &classes))
        }
        _ => None,
    };
    Ok(Evaluation { loss, accuracy })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CdfMetric {
    Loss,
    Accuracy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdfPoint {
    pub value: f64,
    pub fraction: f64,
}

/// Empirical CDF: values ascending, the `i`-th (1-based) at fraction `i / n`.
pub fn emit_cdf(records: &[EvalRecord], metric: CdfMetric) -> Result<Vec<CdfPoint>, EvalError> {
    let mut values: Vec<f64> = records
        .iter()
        .filter_map(|r| match metric {
            CdfMetric::Loss => Some(r.loss),
            CdfMetric::Accuracy => r.accuracy,
        })
        .collect();
    if values.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    Ok(values
        .into_iter()
        .enumerate()
        .map(|(i, value)| CdfPoint {
            value,
            fraction: (i + 1) as f64 / n,
        })
        .collect())
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `trial,task,loss[,accuracy]`.
pub fn eval_csv(records: &[EvalRecord]) -> String {
    let with_accuracy = records.iter().any(|r| r.accuracy.is_some());
    let mut out = String::from(if with_accuracy {
        "trial,task,loss,accuracy\n"
    } else {
        "trial,task,loss\n"
    });
    for r in records {
        let _ = write!(out, "{},{},{}", r.trial, r.task, r.loss);
        if with_accuracy {
            let _ = write!(out, ",{}", r.accuracy.unwrap_or(f64::NAN));
        }
        out.push('\n');
    }
    out
}

/// `value,fraction,algorithm` rows for several named CDFs.
pub fn cdf_csv(curves: &[(String, Vec<CdfPoint>)]) -> String {
    let mut out = String::from("value,fraction,algorithm\n");
    for (name, points) in curves {
        for p in points {
            let _ = writeln!(out, "{},{},{}", p.value, p.fraction, name);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rec(loss: f64) -> EvalRecord {
        EvalRecord {
            trial: 0,
            task: String::new(),
            loss,
            accuracy: None,
        }
    }

    #[test]
    fn cdf_single_and_three() {
        let one = emit_cdf(&[rec(4.5)], CdfMetric::Loss).unwrap();
        assert_eq!(one, vec![CdfPoint { value: 4.5, fraction: 1.0 }]);
        let three = emit_cdf(&[rec(3.0), rec(1.0), rec(2.0)], CdfMetric::Loss).unwrap();
        let fractions: Vec<f64> = three.iter().map(|p| p.fraction).collect();
        assert_eq!(fractions, vec![1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_eq!(three.iter().map(|p| p.value).collect::<Vec<_>>(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn cdf_duplicates_step_twice() {
        let cdf = emit_cdf(&[rec(1.0), rec(2.0), rec(2.0), rec(3.0)], CdfMetric::Loss).unwrap();
        let at_two: Vec<f64> = cdf.iter().filter(|p| p.value == 2.0).map(|p| p.fraction).collect();
        assert_eq!(at_two, vec![0.5, 0.75]);
        // Jump from the last value below 2 to the last value at 2.
        assert_eq!(at_two.last().unwrap() - cdf[0].fraction, 2.0 / 4.0);
    }

    #[test]
    fn cdf_errors_on_empty_or_missing_metric() {
        assert_eq!(emit_cdf(&[], CdfMetric::Loss), Err(EvalError::EmptyInput));
        assert_eq!(emit_cdf(&[rec(1.0)], CdfMetric::Accuracy), Err(EvalError::EmptyInput));
    }

    #[test]
    fn restricted_argmax() {
        let probs = array![[0.5, 0.1, 0.4], [0.6, 0.3, 0.1]];
        // Class 0 is excluded, so row 0 picks 2 and row 1 picks 1.
        assert_eq!(restricted_accuracy(&probs, &[2, 2], &[1, 2]), 0.5);
        assert_eq!(restricted_accuracy(&probs, &[0, 0], &[0, 1, 2]), 1.0);
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }

    #[test]
    fn csv_headers() {
        assert_eq!(eval_csv(&[rec(1.5)]), "trial,task,loss\n0,,1.5\n");
        let mut r = rec(0.25);
        r.accuracy = Some(0.5);
        assert_eq!(eval_csv(&[r]), "trial,task,loss,accuracy\n0,,0.25,0.5\n");
    }
}
