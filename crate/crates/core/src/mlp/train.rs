use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::LabeledDataset;
use crate::rng::{Stream, StreamRng};

use super::kernels::{backward_layer, forward_batch};
use super::{argmax, MlpError, MlpParams, MlpSpec, Real};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("invalid checkpoint schedule: {0}")]
    InvalidSchedule(String),
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("non-finite parameter after update in epoch {epoch}, batch {batch}")]
    NonFiniteParams { epoch: usize, batch: usize },
    #[error("dataset has {got} features or {classes} classes, network expects {expected_dim} and {expected_classes}")]
    DataShape {
        expected_dim: usize,
        expected_classes: usize,
        got: usize,
        classes: usize,
    },
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error("checkpoint sink failed: {0}")]
    Sink(#[source] Box<dyn std::error::Error + Send + Sync>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub stop_train_accuracy: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 500,
            stop_train_accuracy: 0.99,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TrainError::InvalidConfig(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.stop_train_accuracy) {
            return Err(TrainError::InvalidConfig(format!(
                "stop accuracy {} not in [0, 1]",
                self.stop_train_accuracy
            )));
        }
        Ok(())
    }
}

/// Strictly increasing epochs, always starting at 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointSchedule {
    epochs: Vec<usize>,
}

impl CheckpointSchedule {
    pub fn new(epochs: Vec<usize>) -> Result<Self, TrainError> {
        if epochs.first() != Some(&0) {
            return Err(TrainError::InvalidSchedule("must start at epoch 0".into()));
        }
        if epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TrainError::InvalidSchedule("epochs must be strictly increasing".into()));
        }
        Ok(Self { epochs })
    }

    /// Every second epoch up to 20, then every fifth, up to `max_epochs`.
    pub fn standard(max_epochs: usize) -> Self {
        let epochs = (0..=max_epochs)
            .filter(|e| if *e <= 20 { e % 2 == 0 } else { e % 5 == 0 })
            .collect();
        Self { epochs }
    }

    pub fn epochs(&self) -> &[usize] {
        &self.epochs
    }

    pub fn contains(&self, epoch: usize) -> bool {
        self.epochs.binary_search(&epoch).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// Epochs completed, counting this one.
    pub epoch: usize,
    /// Accuracy on the (corrupted) training labels after the epoch.
    pub train_accuracy: f64,
    /// Mean cross-entropy over the training set after the epoch.
    pub loss: f64,
    /// Mean of the per-batch losses seen during the epoch.
    pub running_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord<T = f64> {
    pub epoch: usize,
    pub params: MlpParams<T>,
    /// Momentum buffers, kept so that training can resume bit-exactly.
    pub velocity: MlpParams<T>,
    pub rng_position: u128,
    pub train_accuracy: f64,
    pub loss: f64,
    pub wall_seconds: f64,
}

/// Mini-batch SGD with heavy-ball momentum over one network and dataset.
pub struct Trainer<T: Real> {
    params: MlpParams<T>,
    velocity: MlpParams<T>,
    cfg: TrainConfig,
    rng: StreamRng,
    epoch: usize,
    inputs: Vec<T>,
    labels: Vec<usize>,
    elapsed: f64,
}

impl<T: Real> Trainer<T> {
    pub fn new(params: MlpParams<T>, cfg: TrainConfig, data: &LabeledDataset) -> Result<Self, TrainError> {
        cfg.validate()?;
        params.check_shapes()?;
        let spec = &params.spec;
        if data.inputs().cols() != spec.input_dim || data.class_count() > spec.class_count {
            return Err(TrainError::DataShape {
                expected_dim: spec.input_dim,
                expected_classes: spec.class_count,
                got: data.inputs().cols(),
                classes: data.class_count(),
            });
        }
        let velocity = MlpParams::zeros(spec);
        let rng = StreamRng::new(cfg.seed, Stream::Shuffle);
        Ok(Self {
            params,
            velocity,
            rng,
            epoch: 0,
            inputs: data.inputs().as_slice().iter().map(|v| T::from_f64(*v)).collect(),
            labels: data.labels().to_vec(),
            cfg,
            elapsed: 0.0,
        })
    }

    /// Picks up from a checkpoint; subsequent epochs match an uninterrupted run.
    pub fn resume(record: &CheckpointRecord<T>, cfg: TrainConfig, data: &LabeledDataset) -> Result<Self, TrainError> {
        let mut t = Self::new(record.params.clone(), cfg, data)?;
        record.velocity.check_shapes()?;
        t.velocity = record.velocity.clone();
        t.rng.set_position(record.rng_position);
        t.epoch = record.epoch;
        t.elapsed = record.wall_seconds;
        Ok(t)
    }

    pub fn params(&self) -> &MlpParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut MlpParams<T> {
        &mut self.params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Zeroes the pre-softmax layer's momentum, e.g. after its weights were
    /// replaced from outside.
    pub fn reset_head_velocity(&mut self) {
        let head = self.velocity.head_mut();
        head.weight.iter_mut().for_each(|v| *v = T::zero());
        head.bias.iter_mut().for_each(|v| *v = T::zero());
    }

    fn sample_count(&self) -> usize {
        self.labels.len()
    }

    /// One pass over a fresh shuffle of the data.
    pub fn train_epoch(&mut self) -> Result<EpochStats, TrainError> {
        let start = Instant::now();
        let n = self.sample_count();
        let dim = self.params.spec.input_dim;
        let mut order: Vec<usize> = (0..n).collect();
        self.rng.shuffle(&mut order);
        let epoch = self.epoch + 1;
        let lr = T::from_f64(self.cfg.learning_rate);
        let mu = T::from_f64(self.cfg.momentum);
        let mut running = 0.0;
        let mut batches = 0usize;
        let mut x = Vec::with_capacity(self.cfg.batch_size * dim);
        let mut y = Vec::with_capacity(self.cfg.batch_size);
        for (b, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            x.clear();
            y.clear();
            for &i in chunk {
                x.extend_from_slice(&self.inputs[i * dim..(i + 1) * dim]);
                y.push(self.labels[i]);
            }
            let (loss, grads) = batch_gradients(&self.params, &x, &y);
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: b });
            }
            running += loss;
            batches += 1;
            for ((w, v), g) in self.params.layers.iter_mut().zip(&mut self.velocity.layers).zip(&grads.layers) {
                momentum_step(&mut w.weight, &mut v.weight, &g.weight, lr, mu);
                momentum_step(&mut w.bias, &mut v.bias, &g.bias, lr, mu);
            }
            if !self.params.is_finite() {
                return Err(TrainError::NonFiniteParams { epoch, batch: b });
            }
        }
        self.epoch = epoch;
        let (train_accuracy, loss) = self.measure();
        self.elapsed += start.elapsed().as_secs_f64();
        Ok(EpochStats {
            epoch,
            train_accuracy,
            loss,
            running_loss: if batches == 0 { 0.0 } else { running / batches as f64 },
        })
    }

    /// Accuracy and mean loss of the current params on the training labels.
    pub fn measure(&self) -> (f64, f64) {
        accuracy_and_loss(&self.params, &self.inputs, &self.labels)
    }

    pub fn snapshot(&self, train_accuracy: f64, loss: f64) -> CheckpointRecord<T> {
        CheckpointRecord {
            epoch: self.epoch,
            params: self.params.clone(),
            velocity: self.velocity.clone(),
            rng_position: self.rng.position(),
            train_accuracy,
            loss,
            wall_seconds: self.elapsed,
        }
    }
}

#[inline]
fn momentum_step<T: Real>(w: &mut [T], v: &mut [T], g: &[T], lr: T, mu: T) {
    for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
        *vi = mu * *vi - lr * *gi;
        *wi += *vi;
    }
}

/// Mean cross-entropy and its gradient for one batch of row-major inputs.
pub fn batch_gradients<T: Real>(params: &MlpParams<T>, x: &[T], labels: &[usize]) -> (f64, MlpParams<T>) {
    let rows = labels.len();
    let c = params.spec.class_count;
    let outs = forward_batch(params, x, rows);
    let logits = outs.last().expect("output layer");
    let inv = 1.0 / rows as f64;
    let mut loss = 0.0;
    let mut delta = vec![T::zero(); rows * c];
    for r in 0..rows {
        let z: Vec<f64> = logits[r * c..(r + 1) * c].iter().map(|v| v.as_f64()).collect();
        let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let sum: f64 = e.iter().sum();
        loss += sum.ln() - (z[labels[r]] - m);
        for k in 0..c {
            let p = e[k] / sum;
            let target = if k == labels[r] { 1.0 } else { 0.0 };
            delta[r * c + k] = T::from_f64((p - target) * inv);
        }
    }
    let mut grads = MlpParams::zeros(&params.spec);
    for k in (0..params.layers.len()).rev() {
        let input = if k == 0 { x } else { &outs[k - 1][..] };
        let dx = backward_layer(&params.layers[k], &mut grads.layers[k], input, &delta, rows, k > 0);
        if let Some(mut dx) = dx {
            // rectifier: no gradient where the unit was off
            for (d, a) in dx.iter_mut().zip(&outs[k - 1]) {
                if !(*a > T::zero()) {
                    *d = T::zero();
                }
            }
            delta = dx;
        }
    }
    (loss * inv, grads)
}

const EVAL_CHUNK: usize = 512;

fn accuracy_and_loss<T: Real>(params: &MlpParams<T>, inputs: &[T], labels: &[usize]) -> (f64, f64) {
    let n = labels.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let dim = params.spec.input_dim;
    let c = params.spec.class_count;
    let mut hits = 0usize;
    let mut loss = 0.0;
    for start in (0..n).step_by(EVAL_CHUNK) {
        let end = (start + EVAL_CHUNK).min(n);
        let outs = forward_batch(params, &inputs[start * dim..end * dim], end - start);
        let logits = outs.last().expect("output layer");
        for (r, label) in labels[start..end].iter().enumerate() {
            let z: Vec<f64> = logits[r * c..(r + 1) * c].iter().map(|v| v.as_f64()).collect();
            if argmax(&z) == *label {
                hits += 1;
            }
            let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - m).exp()).sum();
            loss += sum.ln() - (z[*label] - m);
        }
    }
    (hits as f64 / n as f64, loss / n as f64)
}

/// Mean cross-entropy of `params` on `data`.
pub fn dataset_loss<T: Real>(params: &MlpParams<T>, data: &LabeledDataset) -> Result<f64, MlpError> {
    if data.inputs().cols() != params.spec.input_dim {
        return Err(MlpError::InputWidth {
            expected: params.spec.input_dim,
            got: data.inputs().cols(),
        });
    }
    let x: Vec<T> = data.inputs().as_slice().iter().map(|v| T::from_f64(*v)).collect();
    Ok(accuracy_and_loss(params, &x, data.labels()).1)
}

/// Trains from a fresh initialization, collecting every checkpoint.
pub fn run_training<T: Real>(
    spec: &MlpSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    schedule: &CheckpointSchedule,
) -> Result<Vec<CheckpointRecord<T>>, TrainError> {
    let mut records = Vec::new();
    run_training_with(spec, data, cfg, schedule, |r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok(records)
}

/// Trains from a fresh initialization and hands each checkpoint to `sink`.
///
/// Checkpoints are taken at every scheduled epoch and at the epoch training
/// stops, whether through the accuracy threshold or `max_epochs`. A sink error
/// aborts training; checkpoints already delivered stay delivered.
pub fn run_training_with<T: Real, F>(
    spec: &MlpSpec,
    data: &LabeledDataset,
    cfg: &TrainConfig,
    schedule: &CheckpointSchedule,
    sink: F,
) -> Result<usize, TrainError>
where
    F: FnMut(&CheckpointRecord<T>) -> Result<(), TrainError>,
{
    let params = MlpParams::init(spec, cfg.seed)?;
    let trainer = Trainer::new(params, cfg.clone(), data)?;
    continue_training(trainer, schedule, cfg.max_epochs, None, sink)
}

/// Drives `trainer` until the stop rule or `max_epochs`. When `initial` holds
/// the stats of the trainer's current epoch, that epoch is not re-emitted.
pub fn continue_training<T: Real, F>(
    mut trainer: Trainer<T>,
    schedule: &CheckpointSchedule,
    max_epochs: usize,
    initial: Option<(f64, f64)>,
    mut sink: F,
) -> Result<usize, TrainError>
where
    F: FnMut(&CheckpointRecord<T>) -> Result<(), TrainError>,
{
    let stop = trainer.config().stop_train_accuracy;
    let (mut acc, mut loss) = match initial {
        Some(v) => v,
        None => {
            let (acc, loss) = trainer.measure();
            sink(&trainer.snapshot(acc, loss))?;
            (acc, loss)
        }
    };
    let mut emitted_last = true;
    while trainer.epoch() < max_epochs && !(trainer.epoch() > 0 && acc >= stop) {
        let stats = trainer.train_epoch()?;
        acc = stats.train_accuracy;
        loss = stats.loss;
        emitted_last = false;
        log::debug!(
            "epoch {} train acc {:.4} loss {:.4}",
            stats.epoch,
            stats.train_accuracy,
            stats.loss
        );
        if schedule.contains(stats.epoch) {
            sink(&trainer.snapshot(acc, loss))?;
            emitted_last = true;
        }
    }
    if !emitted_last {
        sink(&trainer.snapshot(acc, loss))?;
    }
    Ok(trainer.epoch())
}

#[cfg(test)]
impl<T: Real> super::Dense<T> {
    fn axpy_from(&mut self, alpha: T, other: &super::Dense<T>) {
        for (a, b) in self.weight.iter_mut().zip(&other.weight) {
            *a += alpha * *b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += alpha * *b;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_mixture;

    fn two_class() -> LabeledDataset {
        synth_mixture(2, 6, 60, 0.05, 11).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                learning_rate: -1.0,
                ..Default::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..Default::default()
            },
            TrainConfig {
                batch_size: 0,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(cfg.validate(), Err(TrainError::InvalidConfig(_))));
        }
    }

    #[test]
    fn schedule_shapes() {
        let s = CheckpointSchedule::standard(40);
        assert_eq!(
            s.epochs(),
            &[0, 2, 4, 6, 8, 10, 12, 14, 16, 18, 20, 25, 30, 35, 40]
        );
        assert!(CheckpointSchedule::new(vec![1, 2]).is_err());
        assert!(CheckpointSchedule::new(vec![0, 2, 2]).is_err());
    }

    #[test]
    fn zero_learning_rate_leaves_params_unchanged() {
        let d = two_class();
        let spec = MlpSpec::new(6, vec![5, 4], 2).unwrap();
        let p = MlpParams::<f32>::init(&spec, 1).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let mut t = Trainer::new(p.clone(), cfg, &d).unwrap();
        t.train_epoch().unwrap();
        assert_eq!(t.params(), &p);
    }

    #[test]
    fn empty_training_yields_single_record() {
        let d = two_class();
        let spec = MlpSpec::new(6, vec![5], 2).unwrap();
        let cfg = TrainConfig {
            max_epochs: 0,
            ..Default::default()
        };
        let recs: Vec<CheckpointRecord<f32>> =
            run_training(&spec, &d, &cfg, &CheckpointSchedule::standard(0)).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].epoch, 0);
        assert_eq!(recs[0].params, MlpParams::init(&spec, 0).unwrap());
    }

    #[test]
    fn schedule_is_echoed() {
        let d = two_class();
        let spec = MlpSpec::new(6, vec![5], 2).unwrap();
        let cfg = TrainConfig {
            max_epochs: 4,
            stop_train_accuracy: 1.0,
            learning_rate: 1e-6,
            ..Default::default()
        };
        let sched = CheckpointSchedule::new(vec![0, 2, 4]).unwrap();
        let recs: Vec<CheckpointRecord<f32>> = run_training(&spec, &d, &cfg, &sched).unwrap();
        assert_eq!(recs.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 2, 4]);
    }

    #[test]
    fn stop_epoch_is_always_recorded() {
        let d = two_class();
        let spec = MlpSpec::new(6, vec![5], 2).unwrap();
        let cfg = TrainConfig {
            max_epochs: 3,
            stop_train_accuracy: 1.0,
            learning_rate: 1e-6,
            ..Default::default()
        };
        let sched = CheckpointSchedule::new(vec![0, 2]).unwrap();
        let recs: Vec<CheckpointRecord<f32>> = run_training(&spec, &d, &cfg, &sched).unwrap();
        assert_eq!(recs.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 2, 3]);
    }

    #[test]
    fn resume_matches_uninterrupted_training() {
        let d = two_class();
        let spec = MlpSpec::new(6, vec![7, 5], 2).unwrap();
        let cfg = TrainConfig {
            batch_size: 7,
            learning_rate: 0.05,
            ..Default::default()
        };
        let p = MlpParams::<f32>::init(&spec, 3).unwrap();
        let mut a = Trainer::new(p.clone(), cfg.clone(), &d).unwrap();
        for _ in 0..2 {
            a.train_epoch().unwrap();
        }
        let (acc, loss) = a.measure();
        let rec = a.snapshot(acc, loss);
        a.train_epoch().unwrap();
        let mut b = Trainer::resume(&rec, cfg, &d).unwrap();
        b.train_epoch().unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(a.epoch(), 3);
    }

    #[test]
    fn nan_input_reports_batch() {
        let spec = MlpSpec::new(2, vec![3], 2).unwrap();
        let mut p = MlpParams::<f64>::init(&spec, 1).unwrap();
        p.layers[0].bias[0] = f64::INFINITY;
        p.layers[0].bias[1] = f64::INFINITY;
        p.layers[0].bias[2] = f64::INFINITY;
        let d = synth_mixture(2, 2, 10, 0.1, 1).unwrap();
        let mut t = Trainer::new(p, TrainConfig::default(), &d).unwrap();
        let err = t.train_epoch().unwrap_err();
        assert!(matches!(err, TrainError::NonFiniteLoss { epoch: 1, batch: 0 }), "{err}");
        assert!(err.to_string().contains("batch 0"));
    }

    #[test]
    fn reset_head_velocity_only_touches_head() {
        let d = two_class();
        let spec = MlpSpec::new(6, vec![5], 2).unwrap();
        let p = MlpParams::<f64>::init(&spec, 1).unwrap();
        let mut t = Trainer::new(p, TrainConfig::default(), &d).unwrap();
        t.train_epoch().unwrap();
        t.reset_head_velocity();
        assert!(t.velocity.head().weight.iter().all(|v| *v == 0.0));
        assert!(t.velocity.layers[0].weight.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn gradient_step_descends() {
        let d = two_class();
        let spec = MlpSpec::new(6, vec![8], 2).unwrap();
        let p = MlpParams::<f64>::init(&spec, 2).unwrap();
        let x: Vec<f64> = d.inputs().as_slice().to_vec();
        let (l0, g) = batch_gradients(&p, &x, d.labels());
        let mut q = p.clone();
        for (a, b) in q.layers.iter_mut().zip(&g.layers) {
            a.axpy_from(-1e-2, b);
        }
        let (l1, _) = batch_gradients(&q, &x, d.labels());
        assert!(l1 < l0);
    }
}
