//! Dense multilayer perceptron with manual backpropagation.
//!
//! Parameters live in a single flat [`ParamVector`] so that a whole model can
//! be shipped between agents and the parameter server as one message. The
//! layout is layer-major: for every layer, the weight matrix (row-major,
//! `out x in`) followed by its bias vector.

use std::borrow::Cow;
use std::ops::{Add, Mul, Sub};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    InvalidSpec(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("batch must contain at least one sample")]
    EmptyBatch,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("parameters became non-finite")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

/// Output head. `Regression` is an identity output trained with mean squared
/// error; `Classification` is a softmax output trained with cross-entropy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Regression,
    Classification,
}

/// Flat real vector holding every weight and bias of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dist_sq(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Self) {
        debug_assert_eq!(self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.0 {
            *a *= factor;
        }
    }

    /// Arithmetic mean, summed in slice order so the result does not depend
    /// on how the inputs were produced.
    ///
    /// Panics if `items` is empty or the lengths differ.
    pub fn mean(items: &[ParamVector]) -> ParamVector {
        assert!(!items.is_empty(), "mean of zero vectors");
        let dim = items[0].len();
        let mut acc = ParamVector::zeros(dim);
        for item in items {
            assert_eq!(item.len(), dim, "mean of vectors with different lengths");
            acc.axpy(1.0, item);
        }
        acc.scale(1.0 / items.len() as f64);
        acc
    }
}

impl Add for &ParamVector {
    type Output = ParamVector;

    fn add(self, rhs: &ParamVector) -> ParamVector {
        let mut out = self.clone();
        out.axpy(1.0, rhs);
        out
    }
}

impl Sub for &ParamVector {
    type Output = ParamVector;

    fn sub(self, rhs: &ParamVector) -> ParamVector {
        let mut out = self.clone();
        out.axpy(-1.0, rhs);
        out
    }
}

impl Mul<f64> for &ParamVector {
    type Output = ParamVector;

    fn mul(self, rhs: f64) -> ParamVector {
        let mut out = self.clone();
        out.scale(rhs);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Real-valued targets, one row per sample.
    Values(Array2<f64>),
    /// Class indices into the output head.
    Labels(Vec<usize>),
}

/// A set of labeled samples, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    inputs: Array2<f64>,
    targets: Targets,
}

impl Batch {
    pub fn regression(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self, NnError> {
        if inputs.nrows() == 0 {
            return Err(NnError::EmptyBatch);
        }
        if targets.nrows() != inputs.nrows() {
            return Err(NnError::ShapeMismatch(format!(
                "{} input rows but {} target rows",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        Ok(Self {
            inputs,
            targets: Targets::Values(targets),
        })
    }

    pub fn classification(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self, NnError> {
        if inputs.nrows() == 0 {
            return Err(NnError::EmptyBatch);
        }
        if labels.len() != inputs.nrows() {
            return Err(NnError::ShapeMismatch(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Self {
            inputs,
            targets: Targets::Labels(labels),
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn targets(&self) -> &Targets {
        &self.targets
    }

    /// Copies out the rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        let inputs = self.inputs.select(Axis(0), indices);
        let targets = match &self.targets {
            Targets::Values(v) => Targets::Values(v.select(Axis(0), indices)),
            Targets::Labels(l) => Targets::Labels(indices.iter().map(|&i| l[i]).collect()),
        };
        Batch { inputs, targets }
    }
}

/// A differentiable loss over a parameter vector and a batch of samples.
///
/// [`MlpSpec`] is the production implementation; the optimizers below are
/// generic so that they can also run on analytic toy objectives.
pub trait Model: Sync {
    fn dim(&self) -> usize;

    fn loss(&self, params: &ParamVector, batch: &Batch) -> Result<f64, NnError>;

    fn loss_and_grad(&self, params: &ParamVector, batch: &Batch)
        -> Result<(f64, ParamVector), NnError>;

    fn grad(&self, params: &ParamVector, batch: &Batch) -> Result<ParamVector, NnError> {
        Ok(self.loss_and_grad(params, batch)?.1)
    }
}

/// Layer sizes plus activation and head of a fully connected network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
    activation: Activation,
    head: Head,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, head: Head) -> Result<Self, NnError> {
        if layer_sizes.len() < 2 {
            return Err(NnError::InvalidSpec(
                "need at least an input and an output layer".into(),
            ));
        }
        if layer_sizes.contains(&0) {
            return Err(NnError::InvalidSpec("layer sizes must be positive".into()));
        }
        Ok(Self {
            layer_sizes,
            activation: Activation::Relu,
            head,
        })
    }

    /// 1-40-40-1 ReLU regressor used for sinusoid tasks.
    pub fn sinusoid() -> Self {
        Self::new(vec![1, 40, 40, 1], Head::Regression).expect("valid architecture")
    }

    /// 784-8-8-10 ReLU classifier used for MNIST tasks.
    pub fn mnist() -> Self {
        Self::new(vec![784, 8, 8, 10], Head::Classification).expect("valid architecture")
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Weights and biases uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        for w in self.layer_sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] * w[1] + w[1]) {
                values.push(rng.random_range(-bound..=bound));
            }
        }
        ParamVector(values)
    }

    fn layer_views<'a>(&self, params: &'a [f64]) -> Vec<(ArrayView2<'a, f64>, ArrayView1<'a, f64>)> {
        let mut offset = 0;
        self.layer_sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = ArrayView2::from_shape(
                    (fan_out, fan_in),
                    &params[offset..offset + fan_in * fan_out],
                )
                .expect("layout matches param_count");
                offset += fan_in * fan_out;
                let bias = ArrayView1::from(&params[offset..offset + fan_out]);
                offset += fan_out;
                (weights, bias)
            })
            .collect()
    }

    fn check(&self, params: &ParamVector, batch: &Batch) -> Result<(), NnError> {
        if params.len() != self.param_count() {
            return Err(NnError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                params.len()
            )));
        }
        if batch.inputs.ncols() != self.input_dim() {
            return Err(NnError::ShapeMismatch(format!(
                "expected {} input features, got {}",
                self.input_dim(),
                batch.inputs.ncols()
            )));
        }
        match (&batch.targets, self.head) {
            (Targets::Values(t), Head::Regression) if t.ncols() == self.output_dim() => Ok(()),
            (Targets::Labels(l), Head::Classification)
                if l.iter().all(|&c| c < self.output_dim()) =>
            {
                Ok(())
            }
            _ => Err(NnError::ShapeMismatch(
                "targets do not match the output head".into(),
            )),
        }
    }

    /// Hidden activations followed by the output logits.
    fn forward_layers(&self, params: &ParamVector, inputs: &Array2<f64>) -> Vec<Array2<f64>> {
        let views = self.layer_views(params.as_slice());
        let last = views.len() - 1;
        let mut outs: Vec<Array2<f64>> = Vec::with_capacity(views.len());
        for (l, (weights, bias)) in views.iter().enumerate() {
            let input = if l == 0 { inputs } else { &outs[l - 1] };
            let mut z = input.dot(&weights.t()) + bias;
            if l < last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            outs.push(z);
        }
        outs
    }

    /// Network outputs for every sample. Classification heads return softmax
    /// probabilities.
    pub fn forward(&self, params: &ParamVector, batch: &Batch) -> Result<Array2<f64>, NnError> {
        self.check(params, batch)?;
        let mut out = self.forward_layers(params, &batch.inputs).pop().unwrap();
        if self.head == Head::Classification {
            for mut row in out.rows_mut() {
                let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                row.mapv_inplace(|v| (v - max).exp());
                let total = row.sum();
                row.mapv_inplace(|v| v / total);
            }
        }
        Ok(out)
    }

    /// Loss and the gradient of the loss with respect to the network output
    /// (pre-softmax for classification).
    fn head_loss(&self, logits: &Array2<f64>, targets: &Targets) -> (f64, Array2<f64>) {
        let m = logits.nrows() as f64;
        match targets {
            Targets::Values(t) => {
                let count = m * logits.ncols() as f64;
                let diff = logits - t;
                let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
                (loss, diff * (2.0 / count))
            }
            Targets::Labels(labels) => {
                let mut delta = logits.clone();
                let mut loss = 0.0;
                for (mut row, &label) in delta.rows_mut().into_iter().zip(labels) {
                    let max = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
                    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                    loss += lse - row[label];
                    row.mapv_inplace(|v| (v - lse).exp() / m);
                    row[label] -= 1.0 / m;
                }
                (loss / m, delta)
            }
        }
    }
}

impl Model for MlpSpec {
    fn dim(&self) -> usize {
        self.param_count()
    }

    fn loss(&self, params: &ParamVector, batch: &Batch) -> Result<f64, NnError> {
        self.check(params, batch)?;
        let logits = self.forward_layers(params, &batch.inputs).pop().unwrap();
        Ok(self.head_loss(&logits, &batch.targets).0)
    }

    fn loss_and_grad(
        &self,
        params: &ParamVector,
        batch: &Batch,
    ) -> Result<(f64, ParamVector), NnError> {
        self.check(params, batch)?;
        let outs = self.forward_layers(params, &batch.inputs);
        let (loss, mut delta) = self.head_loss(outs.last().unwrap(), &batch.targets);

        let views = self.layer_views(params.as_slice());
        let mut grad = vec![0.0; params.len()];
        let mut offset = params.len();
        for l in (0..views.len()).rev() {
            let (weights, _) = &views[l];
            let (fan_out, fan_in) = weights.dim();
            let input = if l == 0 { &batch.inputs } else { &outs[l - 1] };

            offset -= fan_out;
            let bias_grad = delta.sum_axis(Axis(0));
            grad[offset..offset + fan_out].copy_from_slice(bias_grad.as_slice().unwrap());
            offset -= fan_in * fan_out;
            let weight_grad = delta.t().dot(input);
            for (dst, src) in grad[offset..offset + fan_in * fan_out]
                .iter_mut()
                .zip(weight_grad.iter())
            {
                *dst = *src;
            }

            if l > 0 {
                let mut prev = delta.dot(weights);
                prev.zip_mut_with(input, |d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = prev;
            }
        }
        Ok((loss, ParamVector(grad)))
    }
}

/// Draws mini-batch indices without replacement within an epoch and
/// reshuffles at every epoch boundary. A batch size at least as large as the
/// data yields the full data set, unshuffled.
#[derive(Debug, Clone)]
pub struct MiniBatcher {
    order: Vec<usize>,
    cursor: usize,
    batch_size: usize,
}

impl MiniBatcher {
    pub fn new(len: usize, batch_size: usize) -> Result<Self, NnError> {
        if len == 0 {
            return Err(NnError::EmptyBatch);
        }
        if batch_size == 0 {
            return Err(NnError::InvalidArgument("batch size must be positive".into()));
        }
        Ok(Self {
            order: (0..len).collect(),
            cursor: len,
            batch_size,
        })
    }

    pub fn is_full_batch(&self) -> bool {
        self.batch_size >= self.order.len()
    }

    pub fn next_batch<'a, R: Rng + ?Sized>(&mut self, data: &'a Batch, rng: &mut R) -> Cow<'a, Batch> {
        debug_assert_eq!(data.len(), self.order.len());
        if self.is_full_batch() {
            return Cow::Borrowed(data);
        }
        if self.cursor + self.batch_size > self.order.len() {
            self.order.shuffle(rng);
            self.cursor = 0;
        }
        let picked = &self.order[self.cursor..self.cursor + self.batch_size];
        self.cursor += self.batch_size;
        Cow::Owned(data.select(picked))
    }
}

/// Plain mini-batch SGD from `init`.
pub fn sgd<M: Model + ?Sized, R: Rng + ?Sized>(
    model: &M,
    init: &ParamVector,
    data: &Batch,
    steps: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<ParamVector, NnError> {
    if !(lr > 0.0) {
        return Err(NnError::InvalidArgument(format!("learning rate {lr} must be positive")));
    }
    let mut batcher = MiniBatcher::new(data.len(), batch_size)?;
    let mut params = init.clone();
    for _ in 0..steps {
        let batch = batcher.next_batch(data, rng);
        let grad = model.grad(&params, &batch)?;
        params.axpy(-lr, &grad);
        if !params.is_finite() {
            return Err(NnError::NonFinite);
        }
    }
    Ok(params)
}

/// Default relative step of the finite-difference Hessian-vector product.
pub const HVP_EPS: f64 = 1e-4;

/// Hessian-vector product by central differences of the gradient. Costs two
/// gradient evaluations.
pub fn hvp<M: Model + ?Sized>(
    model: &M,
    params: &ParamVector,
    batch: &Batch,
    v: &ParamVector,
    eps: f64,
) -> Result<ParamVector, NnError> {
    if v.len() != params.len() {
        return Err(NnError::ShapeMismatch(format!(
            "direction has {} entries, parameters have {}",
            v.len(),
            params.len()
        )));
    }
    let h = eps / v.norm().max(1.0);
    let mut plus = params.clone();
    plus.axpy(h, v);
    let mut minus = params.clone();
    minus.axpy(-h, v);
    let mut out = &model.grad(&plus, batch)? - &model.grad(&minus, batch)?;
    out.scale(1.0 / (2.0 * h));
    Ok(out)
}
