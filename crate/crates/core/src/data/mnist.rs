use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::idx::{parse_idx, IdxError, IdxTensor};
use super::{DataError, SplitIndices, TaskDataset, TaskDescriptor};
use crate::nn::Batch;
use crate::{stream_id, stream_rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// File names of the four MNIST IDX files inside the data directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MnistFiles {
    pub train_images: String,
    pub train_labels: String,
    pub test_images: String,
    pub test_labels: String,
}

impl Default for MnistFiles {
    fn default() -> Self {
        Self {
            train_images: "train-images-idx3-ubyte".into(),
            train_labels: "train-labels-idx1-ubyte".into(),
            test_images: "t10k-images-idx3-ubyte".into(),
            test_labels: "t10k-labels-idx1-ubyte".into(),
        }
    }
}

/// Images and labels of one MNIST split, kept as raw bytes.
#[derive(Debug, Clone)]
pub struct MnistCorpus {
    images: Vec<u8>,
    labels: Vec<u8>,
    pixels: usize,
    split: Split,
}

impl MnistCorpus {
    pub fn from_idx(images: IdxTensor, labels: IdxTensor, split: Split) -> Result<Self, DataError> {
        if images.dims().len() != 3 || labels.dims().len() != 1 {
            return Err(IdxError::DimensionMismatch("expected 3-d images and 1-d labels".into()).into());
        }
        if images.dims()[0] != labels.dims()[0] {
            return Err(IdxError::DimensionMismatch(format!(
                "{} images but {} labels",
                images.dims()[0],
                labels.dims()[0]
            ))
            .into());
        }
        if let Some(&bad) = labels.data().iter().find(|&&l| l > 9) {
            return Err(DataError::InvalidTask(format!("label {bad} outside 0..=9")));
        }
        let pixels = images.dims()[1] * images.dims()[2];
        Ok(Self {
            images: images.into_data(),
            labels: labels.into_data(),
            pixels,
            split,
        })
    }

    pub fn load(dir: &Path, split: Split, files: &MnistFiles) -> Result<Self, DataError> {
        let (img, lbl) = match split {
            Split::Train => (&files.train_images, &files.train_labels),
            Split::Test => (&files.test_images, &files.test_labels),
        };
        let read = |name: &str| -> Result<IdxTensor, DataError> {
            let path: PathBuf = dir.join(name);
            let bytes = fs::read(&path).map_err(|e| DataError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            Ok(parse_idx(&bytes)?)
        };
        Self::from_idx(read(img)?, read(lbl)?, split)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn pixels(&self) -> usize {
        self.pixels
    }

    pub fn label(&self, index: usize) -> u8 {
        self.labels[index]
    }

    pub fn image(&self, index: usize) -> &[u8] {
        &self.images[index * self.pixels..(index + 1) * self.pixels]
    }

    /// Indices of every sample carrying `digit`, in corpus order.
    pub fn indices_of(&self, digit: u8) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == digit).collect()
    }

    /// Pixels scaled to `[0, 1]`; labels are the digits themselves, indexing
    /// a 10-way output head.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let mut inputs = Array2::zeros((indices.len(), self.pixels));
        for (mut row, &i) in inputs.rows_mut().into_iter().zip(indices) {
            for (dst, &p) in row.iter_mut().zip(self.image(i)) {
                *dst = f64::from(p) / 255.0;
            }
        }
        let labels = indices.iter().map(|&i| usize::from(self.labels[i])).collect();
        Batch::classification(inputs, labels).expect("non-empty selection")
    }
}

/// A digit-classification task drawn from one corpus split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassificationTask {
    pub classes: Vec<u8>,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub seed: u64,
}

impl ClassificationTask {
    pub fn per_class(classes: Vec<u8>, train_per_class: usize, test_per_class: usize, seed: u64) -> Self {
        let n = classes.len();
        Self {
            classes,
            train_counts: vec![train_per_class; n],
            test_counts: vec![test_per_class; n],
            seed,
        }
    }

    /// Spreads the totals as evenly as possible; the first classes absorb the
    /// remainder (400 over three classes gives 134/133/133).
    pub fn with_totals(classes: Vec<u8>, train_total: usize, test_total: usize, seed: u64) -> Self {
        let split = |total: usize, n: usize| -> Vec<usize> {
            (0..n).map(|i| total / n + usize::from(i < total % n)).collect()
        };
        let n = classes.len().max(1);
        Self {
            train_counts: split(train_total, n),
            test_counts: split(test_total, n),
            classes,
            seed,
        }
    }

    fn validate(&self) -> Result<(), DataError> {
        if self.classes.is_empty() {
            return Err(DataError::InvalidTask("empty class set".into()));
        }
        if let Some(&bad) = self.classes.iter().find(|&&c| c > 9) {
            return Err(DataError::InvalidTask(format!("digit {bad} outside 0..=9")));
        }
        let mut sorted = self.classes.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.classes.len() {
            return Err(DataError::InvalidTask(format!(
                "duplicate digits in {:?}",
                self.classes
            )));
        }
        if self.train_counts.len() != self.classes.len() || self.test_counts.len() != self.classes.len() {
            return Err(DataError::InvalidTask("one count per class required".into()));
        }
        if self.train_counts.iter().chain(&self.test_counts).any(|&c| c == 0) {
            return Err(DataError::InvalidTask("every class needs train and test samples".into()));
        }
        Ok(())
    }
}

pub fn build_classification_task(
    corpus: &MnistCorpus,
    task: &ClassificationTask,
) -> Result<TaskDataset, DataError> {
    task.validate()?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (k, &digit) in task.classes.iter().enumerate() {
        let (n_train, n_test) = (task.train_counts[k], task.test_counts[k]);
        let mut pool = corpus.indices_of(digit);
        if pool.len() < n_train + n_test {
            return Err(DataError::InsufficientSamples {
                digit,
                needed: n_train + n_test,
                available: pool.len(),
            });
        }
        let mut rng = stream_rng(task.seed, stream_id(0, u32::from(digit), 0));
        pool.shuffle(&mut rng);
        train.extend_from_slice(&pool[..n_train]);
        test.extend_from_slice(&pool[n_train..n_train + n_test]);
    }
    Ok(TaskDataset {
        train: corpus.batch(&train),
        test: corpus.batch(&test),
        descriptor: TaskDescriptor::Digits(task.classes.clone()),
        indices: Some(SplitIndices { train, test }),
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::nn::Targets;

    /// Tiny synthetic corpus: `per_digit` images of every digit, each image
    /// filled with its own index.
    pub(crate) fn synthetic(per_digit: usize) -> MnistCorpus {
        let n = per_digit * 10;
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let images: Vec<u8> = (0..n).flat_map(|i| std::iter::repeat_n((i % 256) as u8, 4)).collect();
        MnistCorpus::from_idx(
            IdxTensor::new(vec![n, 2, 2], images).unwrap(),
            IdxTensor::new(vec![n], labels).unwrap(),
            Split::Train,
        )
        .unwrap()
    }

    fn labels(b: &Batch) -> Vec<usize> {
        match b.targets() {
            Targets::Labels(l) => l.clone(),
            Targets::Values(_) => unreachable!(),
        }
    }

    #[test]
    fn even_split_with_remainder() {
        let t = ClassificationTask::with_totals(vec![0, 1, 2], 400, 100, 0);
        assert_eq!(t.train_counts, vec![134, 133, 133]);
        assert_eq!(t.test_counts, vec![34, 33, 33]);
    }

    #[test]
    fn single_class_single_sample() {
        let corpus = synthetic(5);
        let ds = build_classification_task(&corpus, &ClassificationTask::per_class(vec![3], 1, 1, 7)).unwrap();
        assert_eq!(labels(&ds.train), vec![3]);
        assert_eq!(labels(&ds.test), vec![3]);
    }

    #[test]
    fn counts_and_disjointness() {
        let corpus = synthetic(30);
        let task = ClassificationTask::with_totals(vec![7, 8, 9], 40, 20, 11);
        let ds = build_classification_task(&corpus, &task).unwrap();
        let train = labels(&ds.train);
        for (k, digit) in [7usize, 8, 9].into_iter().enumerate() {
            assert_eq!(train.iter().filter(|&&l| l == digit).count(), task.train_counts[k]);
        }
        let idx = ds.indices.unwrap();
        assert!(idx.train.iter().all(|i| !idx.test.contains(i)));
        let pixels = ds.train.inputs();
        assert!(pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn rejects_duplicates_and_shortage() {
        let corpus = synthetic(3);
        assert!(matches!(
            build_classification_task(&corpus, &ClassificationTask::per_class(vec![1, 1], 1, 1, 0)),
            Err(DataError::InvalidTask(_))
        ));
        assert_eq!(
            build_classification_task(&corpus, &ClassificationTask::per_class(vec![2], 3, 1, 0))
                .unwrap_err(),
            DataError::InsufficientSamples {
                digit: 2,
                needed: 4,
                available: 3
            }
        );
    }

    #[test]
    fn label_image_count_mismatch() {
        let err = MnistCorpus::from_idx(
            IdxTensor::new(vec![2, 1, 1], vec![0, 0]).unwrap(),
            IdxTensor::new(vec![3], vec![0, 1, 2]).unwrap(),
            Split::Test,
        )
        .unwrap_err();
        assert!(matches!(err, DataError::Idx(IdxError::DimensionMismatch(_))));
    }
}
