//! Softmax logistic-regression probe, the baseline linear probe.
//!
//! Fit with Adam on mini-batches of a layer's activations against the labels
//! the network was trained on; scored like the other probes.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{ByteReader, ByteWriter, Section, TAG_LR_PROBE};
use crate::linalg::{dot, matmul, matmul_transpose_b, Matrix};
use crate::mlp::{argmax, softmax};
use crate::probes::{Probe, ProbeError, ProbeKind, ProbeVerdict};
use crate::rng::{Stream, StreamRng};

type Result<T> = std::result::Result<T, ProbeError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for LrTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 1e-3,
            batch_size: 128,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl LrTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ProbeError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("probe epochs must be at least 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("probe learning rate {} must be finite and non-negative", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("probe batch size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("adam betas must be in [0, 1) and epsilon positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LrProbeParams {
    /// `C x d`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LrProbeParams {
    pub fn zeros(class_count: usize, dim: usize) -> Self {
        Self {
            weight: Matrix::zeros(class_count, dim),
            bias: vec![0.0; class_count],
        }
    }

    pub fn class_count(&self) -> usize {
        self.bias.len()
    }

    fn is_finite(&self) -> bool {
        self.weight.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }

    /// `LRPB` payload: u32 layer, u32 classes, u32 dim, `C x d` f64 weights
    /// (row-major), `C` f64 biases.
    pub fn to_section(&self, layer: usize) -> Section {
        let mut w = ByteWriter::new();
        w.len_u32(layer);
        w.len_u32(self.weight.rows());
        w.len_u32(self.weight.cols());
        w.f64s(self.weight.as_slice());
        w.f64s(&self.bias);
        Section::new(TAG_LR_PROBE, w.into_inner())
    }

    pub fn from_section(section: &Section) -> Result<(usize, Self)> {
        let mut r = ByteReader::new(&section.payload);
        let layer = r.len_u32("LRPB")?;
        let c = r.len_u32("LRPB")?;
        let d = r.len_u32("LRPB")?;
        let weight = Matrix::from_vec(c, d, r.f64s(c * d, "LRPB")?)?;
        let bias = r.f64s(c, "LRPB")?;
        r.finish("LRPB")?;
        Ok((layer, Self { weight, bias }))
    }
}

/// Mean cross-entropy of the probe on `(xs, labels)` and its gradient.
pub fn lr_loss_and_grad(params: &LrProbeParams, xs: &Matrix, labels: &[usize]) -> Result<(f64, LrProbeParams)> {
    if xs.rows() != labels.len() {
        return Err(ProbeError::Unaligned {
            rows: xs.rows(),
            labels: labels.len(),
        });
    }
    let c = params.class_count();
    let n = labels.len();
    let logits = matmul_transpose_b(xs, &params.weight)?;
    let inv = 1.0 / n.max(1) as f64;
    let mut loss = 0.0;
    let mut delta = Matrix::zeros(n, c);
    for (r, &label) in labels.iter().enumerate() {
        let z: Vec<f64> = logits.row(r).iter().zip(&params.bias).map(|(a, b)| a + b).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        loss += s.ln() - (z[label] - m);
        let d = delta.row_mut(r);
        for k in 0..c {
            d[k] = (e[k] / s - if k == label { 1.0 } else { 0.0 }) * inv;
        }
    }
    let gw = matmul(&delta.transpose(), xs)?;
    let mut gb = vec![0.0; c];
    for r in delta.row_iter() {
        for (g, v) in gb.iter_mut().zip(r) {
            *g += v;
        }
    }
    Ok((loss * inv, LrProbeParams { weight: gw, bias: gb }))
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, cfg: &LrTrainConfig, params: &mut [f64], grads: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            *p -= cfg.learning_rate * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
        }
    }
}

/// Fits from zero initialization on `labels` (the corrupted training labels
/// in every experiment). Each epoch visits a fresh shuffle from the probe
/// stream.
pub fn fit_lr(activations: &Matrix, labels: &[usize], class_count: usize, cfg: &LrTrainConfig) -> Result<LrProbeParams> {
    fit_lr_traced(activations, labels, class_count, cfg, |_, _| {})
}

/// [`fit_lr`] reporting `(epoch, mean batch loss)` after every epoch.
pub fn fit_lr_traced(
    activations: &Matrix,
    labels: &[usize],
    class_count: usize,
    cfg: &LrTrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<LrProbeParams> {
    cfg.validate()?;
    if activations.rows() != labels.len() {
        return Err(ProbeError::Unaligned {
            rows: activations.rows(),
            labels: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|l| **l >= class_count) {
        return Err(ProbeError::LabelOutOfRange { label, class_count });
    }
    let d = activations.cols();
    let mut params = LrProbeParams::zeros(class_count, d);
    let mut adam_w = Adam::new(class_count * d);
    let mut adam_b = Adam::new(class_count);
    let mut rng = StreamRng::new(cfg.seed, Stream::Probe);
    let mut order: Vec<usize> = (0..labels.len()).collect();
    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let xs = activations.select_rows(chunk);
            let ys: Vec<usize> = chunk.iter().map(|i| labels[*i]).collect();
            let (loss, grad) = lr_loss_and_grad(&params, &xs, &ys)?;
            if !loss.is_finite() {
                return Err(ProbeError::NonFiniteLoss { epoch, batch: b });
            }
            adam_w.step(cfg, params.weight.as_mut_slice(), grad.weight.as_slice());
            adam_b.step(cfg, &mut params.bias, &grad.bias);
            if !params.is_finite() {
                return Err(ProbeError::NonFiniteLoss { epoch, batch: b });
            }
            total += loss;
            batches += 1;
        }
        on_epoch(epoch, total / batches.max(1) as f64);
    }
    Ok(params)
}

/// Affine scores `W x + b`; the largest wins, ties to the lowest class.
pub fn lr_predict(params: &LrProbeParams, x: &[f64]) -> Result<ProbeVerdict> {
    if x.len() != params.weight.cols() {
        return Err(ProbeError::Dimension {
            expected: params.weight.cols(),
            got: x.len(),
        });
    }
    let scores: Vec<f64> = params.weight.row_iter().zip(&params.bias).map(|(w, b)| dot(w, x) + b).collect();
    let predicted_class = argmax(&scores);
    let best = scores[predicted_class];
    Ok(ProbeVerdict {
        predicted_class,
        tied: scores.iter().filter(|s| **s == best).count() > 1,
        zero_input: x.iter().all(|v| *v == 0.0),
        scores,
        kind: ProbeKind::Lr,
    })
}

/// Class probabilities of the probe.
pub fn lr_probabilities(params: &LrProbeParams, x: &[f64]) -> Result<Vec<f64>> {
    Ok(softmax(&lr_predict(params, x)?.scores))
}

impl Probe for LrProbeParams {
    fn kind(&self) -> ProbeKind {
        ProbeKind::Lr
    }

    fn dim(&self) -> usize {
        self.weight.cols()
    }

    fn predict(&self, x: &[f64]) -> Result<ProbeVerdict> {
        lr_predict(self, x)
    }
}
