//! Fully connected rectifier networks `f = g ∘ φ`: hidden layers with ReLU,
//! then an affine pre-softmax layer producing class logits.

mod gradcheck;
mod kernels;
mod train;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledDataset;
use crate::linalg::{LinalgError, Matrix};
use crate::rng::{Stream, StreamRng};

pub use gradcheck::{grad_check, GradCheckReport};
pub use crate::linalg::Real;
pub use train::{
    batch_gradients, continue_training, dataset_loss, run_training, run_training_with, CheckpointRecord, CheckpointSchedule,
    EpochStats, TrainConfig, TrainError, Trainer,
};

/// Full-size hidden widths.
pub const PAPER_WIDTHS: [usize; 4] = [128, 512, 2048, 2048];
/// Desk-scale hidden widths with the same progression.
pub const DESK_WIDTHS: [usize; 4] = [64, 128, 256, 256];

#[derive(Debug, Error)]
pub enum MlpError {
    #[error("network needs at least one hidden layer and non-zero widths")]
    InvalidSpec,
    #[error("input has {got} features, network expects {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("parameter shapes do not chain: {0}")]
    Shape(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub class_count: usize,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, class_count: usize) -> Result<Self, MlpError> {
        let spec = Self {
            input_dim,
            hidden,
            class_count,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), MlpError> {
        if self.hidden.is_empty()
            || self.input_dim == 0
            || self.class_count == 0
            || self.hidden.iter().any(|w| *w == 0)
        {
            return Err(MlpError::InvalidSpec);
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` per affine layer, pre-softmax layer last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.class_count);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    /// `FC1`, `FC2`, ... for the hidden layers.
    pub fn layer_tags(&self) -> Vec<String> {
        (1..=self.hidden.len()).map(|i| format!("FC{i}")).collect()
    }

    pub fn last_hidden_width(&self) -> usize {
        *self.hidden.last().expect("validated spec has a hidden layer")
    }
}

/// One affine layer, weights row-major `outputs x inputs`.
#[derive(Clone, PartialEq)]
pub struct Dense<T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> Dense<T> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![T::zero(); inputs * outputs],
            bias: vec![T::zero(); outputs],
        }
    }

    #[inline]
    pub fn weight_row(&self, o: usize) -> &[T] {
        &self.weight[o * self.inputs..(o + 1) * self.inputs]
    }

    pub fn cast<U: Real>(&self) -> Dense<U> {
        Dense {
            inputs: self.inputs,
            outputs: self.outputs,
            weight: self.weight.iter().map(|v| U::from_f64(v.as_f64())).collect(),
            bias: self.bias.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }
}

impl<T: fmt::Debug> fmt::Debug for Dense<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Dense({} -> {})", self.inputs, self.outputs)
    }
}

/// Network parameters; `layers.last()` is the pre-softmax layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams<T = f64> {
    pub spec: MlpSpec,
    pub layers: Vec<Dense<T>>,
}

impl<T: Real> MlpParams<T> {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            spec: spec.clone(),
            layers: spec.layer_shapes().into_iter().map(|(i, o)| Dense::zeros(i, o)).collect(),
        }
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in))`, biases zero.
    /// Weights are drawn layer by layer, row-major, from the `Init` stream.
    pub fn init(spec: &MlpSpec, seed: u64) -> Result<Self, MlpError> {
        spec.validate()?;
        let mut rng = StreamRng::new(seed, Stream::Init);
        let mut params = Self::zeros(spec);
        for layer in &mut params.layers {
            let bound = (1.0 / layer.inputs as f64).sqrt();
            for w in &mut layer.weight {
                *w = T::from_f64((2.0 * rng.uniform() - 1.0) * bound);
            }
        }
        Ok(params)
    }

    pub fn head(&self) -> &Dense<T> {
        self.layers.last().expect("at least one layer")
    }

    pub fn head_mut(&mut self) -> &mut Dense<T> {
        self.layers.last_mut().expect("at least one layer")
    }

    pub fn check_shapes(&self) -> Result<(), MlpError> {
        let shapes = self.spec.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(MlpError::Shape(format!(
                "{} layers for a spec with {}",
                self.layers.len(),
                shapes.len()
            )));
        }
        for (k, ((i, o), l)) in shapes.iter().zip(&self.layers).enumerate() {
            if l.inputs != *i || l.outputs != *o || l.weight.len() != i * o || l.bias.len() != *o {
                return Err(MlpError::Shape(format!("layer {k} is not {i} -> {o}")));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(&l.bias).all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> MlpParams<U> {
        MlpParams {
            spec: self.spec.clone(),
            layers: self.layers.iter().map(Dense::cast).collect(),
        }
    }

    /// Flattened view of all parameters, layer by layer (weights then bias).
    pub fn flat(&self) -> Vec<T> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(&l.bias).copied())
            .collect()
    }
}

/// Post-rectifier outputs of every hidden layer for one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationSet {
    pub layer_tags: Vec<String>,
    pub layers: Vec<Matrix>,
    pub source: String,
}

impl ActivationSet {
    pub fn layer(&self, tag: &str) -> Option<&Matrix> {
        self.layer_tags.iter().position(|t| t == tag).map(|i| &self.layers[i])
    }

    pub fn last(&self) -> &Matrix {
        self.layers.last().expect("at least one hidden layer")
    }

    pub fn rows(&self) -> usize {
        self.layers.first().map_or(0, |m| m.rows())
    }
}

/// Rows processed per forward chunk.
const FORWARD_CHUNK: usize = 512;

/// Logits (pre-softmax) for every row of `inputs`, and every hidden layer's
/// rectified output when `keep_activations` is set.
fn forward_impl<T: Real>(
    params: &MlpParams<T>,
    inputs: &Matrix,
    keep_activations: bool,
) -> Result<(Matrix, Vec<Matrix>), MlpError> {
    if inputs.cols() != params.spec.input_dim {
        return Err(MlpError::InputWidth {
            expected: params.spec.input_dim,
            got: inputs.cols(),
        });
    }
    let n = inputs.rows();
    let c = params.spec.class_count;
    let mut logits = Vec::with_capacity(n * c);
    let mut acts: Vec<Vec<f64>> = if keep_activations {
        params.spec.hidden.iter().map(|w| Vec::with_capacity(n * w)).collect()
    } else {
        Vec::new()
    };
    let mut start = 0;
    while start < n {
        let end = (start + FORWARD_CHUNK).min(n);
        let rows = end - start;
        let x: Vec<T> = inputs.as_slice()[start * inputs.cols()..end * inputs.cols()]
            .iter()
            .map(|v| T::from_f64(*v))
            .collect();
        let outs = kernels::forward_batch(params, &x, rows);
        if keep_activations {
            for (store, a) in acts.iter_mut().zip(&outs[..outs.len() - 1]) {
                store.extend(a.iter().map(|v| v.as_f64()));
            }
        }
        logits.extend(outs.last().expect("output layer").iter().map(|v| v.as_f64()));
        start = end;
    }
    let logits = Matrix::from_vec(n, c, logits)?;
    let acts = acts
        .into_iter()
        .zip(&params.spec.hidden)
        .map(|(a, w)| Matrix::from_vec(n, *w, a))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((logits, acts))
}

pub fn forward<T: Real>(
    params: &MlpParams<T>,
    inputs: &Matrix,
    source: &str,
) -> Result<(Matrix, ActivationSet), MlpError> {
    let (logits, layers) = forward_impl(params, inputs, true)?;
    Ok((
        logits,
        ActivationSet {
            layer_tags: params.spec.layer_tags(),
            layers,
            source: source.to_string(),
        },
    ))
}

pub fn logits<T: Real>(params: &MlpParams<T>, inputs: &Matrix) -> Result<Matrix, MlpError> {
    Ok(forward_impl(params, inputs, false)?.0)
}

/// First index of the maximum; NaN never wins.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s > scores[best] {
            best = i;
        }
    }
    best
}

pub fn predict<T: Real>(params: &MlpParams<T>, inputs: &Matrix) -> Result<Vec<usize>, MlpError> {
    let l = logits(params, inputs)?;
    Ok(l.row_iter().map(argmax).collect())
}

/// Per-sample correctness of argmax predictions against `labels`.
pub fn correctness(predictions: &[usize], labels: &[usize]) -> Vec<bool> {
    predictions.iter().zip(labels).map(|(p, l)| p == l).collect()
}

pub fn accuracy_of(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Fraction of samples whose argmax logit equals the label.
pub fn evaluate<T: Real>(params: &MlpParams<T>, data: &LabeledDataset) -> Result<f64, MlpError> {
    Ok(accuracy_of(&predict(params, data.inputs())?, data.labels()))
}

/// Row-wise softmax in the max-subtracted form.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
