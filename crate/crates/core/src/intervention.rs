//! Editing a trained network's output layer with class vectors fitted on its
//! last hidden layer, then optionally training on.
//!
//! With zero bias the edited network's logits are exactly the class-vector
//! scores, so its predictions match the probe's on every input.

use std::path::Path;

use thiserror::Error;

use crate::harness::{
    cell_data, checkpoint_rows, probe_checkpoint, CellData, ExperimentData, HarnessError, Intervention,
    MetricsRow, ProbeSettings,
};
use crate::config::ExperimentConfig;
use crate::mlp::{evaluate, forward, CheckpointRecord, MlpError, MlpParams, TrainError, Trainer};
use crate::probes::{fit_velpic, probe_accuracy, Probe, ProbeError, ProbeKind, VelpicVectors};

#[derive(Debug, Error)]
pub enum InterventionError {
    #[error("cannot transfer: {0}")]
    Mismatch(String),
    #[error("trigger epoch {trigger} is past the {max}-epoch cap")]
    TriggerPastCap { trigger: usize, max: usize },
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

type Result<T> = std::result::Result<T, InterventionError>;

/// Copy of `params` whose output layer holds one class vector per row and a
/// zero bias. Hidden layers are untouched.
pub fn transfer_weights(params: &MlpParams<f64>, vectors: &VelpicVectors) -> Result<MlpParams<f64>> {
    let width = params.spec.last_hidden_width();
    let classes = params.spec.class_count;
    if vectors.dim != width {
        return Err(InterventionError::Mismatch(format!(
            "vectors have dimension {}, last hidden layer has width {width}",
            vectors.dim
        )));
    }
    if vectors.classes.len() != classes {
        return Err(InterventionError::Mismatch(format!(
            "{} class vectors for {classes} output units",
            vectors.classes.len()
        )));
    }
    let mut out = params.clone();
    let head = out.head_mut();
    for (c, v) in vectors.classes.iter().enumerate() {
        if v.class_id != c || v.unit.len() != width {
            return Err(InterventionError::Mismatch(format!("class vector {c} is out of order or malformed")));
        }
        head.weight[c * width..(c + 1) * width].copy_from_slice(&v.unit);
    }
    head.bias.iter_mut().for_each(|b| *b = 0.0);
    Ok(out)
}

/// Fits class vectors on the last hidden layer over the corrupted training
/// data.
pub fn fit_head_vectors(params: &MlpParams<f64>, cell: &CellData) -> Result<VelpicVectors> {
    let (_, acts) = forward(params, cell.fit.inputs(), "train")?;
    Ok(fit_velpic(acts.last(), cell.fit.labels(), params.spec.class_count)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferPoint {
    pub epoch: usize,
    pub model_test: f64,
    /// Class-vector probe on the last hidden layer.
    pub velpic_test: f64,
    /// The edited network.
    pub transferred_test: f64,
    /// Test points where the probe and the edited network disagree on
    /// correctness. Zero unless something is broken.
    pub disagreements: usize,
}

pub const TRANSFER_HEADER: &str = "seed,degree,epoch,model_test,velpic_test,transferred_test";

/// Transfer accuracy at each stored checkpoint.
pub fn evaluate_transfer_curve(records: &[CheckpointRecord<f64>], cell: &CellData) -> Result<Vec<TransferPoint>> {
    records
        .iter()
        .map(|rec| {
            let vectors = fit_head_vectors(&rec.params, cell)?;
            let edited = transfer_weights(&rec.params, &vectors)?;
            let (_, test_acts) = forward(&rec.params, cell.test.inputs(), "test")?;
            let probe_pred = vectors.predict_classes(test_acts.last())?;
            let model_pred = crate::mlp::predict(&edited, cell.test.inputs())?;
            let labels = cell.test.labels();
            let disagreements = probe_pred
                .iter()
                .zip(&model_pred)
                .zip(labels)
                .filter(|((p, m), y)| (*p == *y) != (*m == *y))
                .count();
            Ok(TransferPoint {
                epoch: rec.epoch,
                model_test: evaluate(&rec.params, &cell.test)?,
                velpic_test: probe_accuracy(&probe_pred, labels)?,
                transferred_test: probe_accuracy(&model_pred, labels)?,
                disagreements,
            })
        })
        .collect()
}

pub fn format_transfer_rows(seed: u64, degree: f64, points: &[TransferPoint]) -> String {
    points
        .iter()
        .map(|p| {
            format!(
                "{seed},{degree},{},{:.6},{:.6},{:.6}\n",
                p.epoch, p.model_test, p.velpic_test, p.transferred_test
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterventionPlan {
    pub trigger_epoch: usize,
    pub continue_epochs: usize,
}

#[derive(Debug, Clone)]
pub struct InterventionOutcome {
    /// Un-edited rows up to and including the trigger, then transfer-only
    /// rows, then transfer-continue rows. Probe rows are VeLPIC on every layer.
    pub rows: Vec<MetricsRow>,
    /// Training loss of each continued epoch.
    pub continued_losses: Vec<f64>,
    pub final_params: MlpParams<f64>,
}

impl InterventionOutcome {
    pub fn model_rows(&self, intervention: Intervention) -> impl Iterator<Item = &MetricsRow> {
        self.rows.iter().filter(move |r| r.is_model() && r.intervention == intervention)
    }
}

/// Trains a fixed `trigger_epoch` epochs (no early stop), swaps in the class
/// vectors, resets the output layer's momentum and trains `continue_epochs`
/// more. Probes run at scheduled epochs before the trigger, at the trigger and
/// at scheduled or final continued epochs.
pub fn intervene_and_continue(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    seed: u64,
    degree: f64,
    plan: InterventionPlan,
) -> Result<InterventionOutcome> {
    if plan.trigger_epoch > cfg.max_epochs {
        return Err(InterventionError::TriggerPastCap {
            trigger: plan.trigger_epoch,
            max: cfg.max_epochs,
        });
    }
    let cell = cell_data(data, seed, degree)?;
    let spec = cfg.mlp_spec(data.input_dim(), data.class_count())?;
    let mut trainer = Trainer::new(MlpParams::init(&spec, seed)?, cfg.train_config(seed), &cell.fit)?;
    let schedule = cfg.checkpoint_schedule();
    let settings = ProbeSettings {
        probes: vec![ProbeKind::Velpic],
        store_artifacts: false,
        ..ProbeSettings::from_config(cfg, seed)
    };
    let mut rows = Vec::new();
    let snapshot = |trainer: &Trainer<f64>, intervention: Intervention, probe: bool| -> Result<Vec<MetricsRow>> {
        let params = trainer.params();
        let (train_acc, _) = trainer.measure();
        let scores = if probe { probe_checkpoint(params, &cell, &settings)?.0 } else { Vec::new() };
        let test_acc = evaluate(params, &cell.test)?;
        Ok(checkpoint_rows(&cell, trainer.epoch(), test_acc, train_acc, &scores, intervention))
    };

    for epoch in 0..plan.trigger_epoch {
        if schedule.contains(epoch) {
            rows.extend(snapshot(&trainer, Intervention::None, true)?);
        }
        trainer.train_epoch()?;
    }
    let before = snapshot(&trainer, Intervention::None, true)?;
    let vectors = fit_head_vectors(trainer.params(), &cell)?;
    *trainer.params_mut() = transfer_weights(trainer.params(), &vectors)?;
    trainer.reset_head_velocity();
    // hidden layers are unchanged, so their probe rows carry over
    let mut after = snapshot(&trainer, Intervention::TransferOnly, false)?;
    after.extend(before.iter().filter(|r| !r.is_model()).map(|r| MetricsRow {
        intervention: Intervention::TransferOnly,
        ..r.clone()
    }));
    rows.extend(before);
    rows.extend(after);

    let mut continued_losses = Vec::with_capacity(plan.continue_epochs);
    for i in 1..=plan.continue_epochs {
        let stats = trainer.train_epoch()?;
        continued_losses.push(stats.loss);
        let probe = schedule.contains(i) || i == plan.continue_epochs;
        rows.extend(snapshot(&trainer, Intervention::TransferContinue, probe)?);
    }
    Ok(InterventionOutcome {
        rows,
        continued_losses,
        final_params: trainer.params().clone(),
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let err = |source| InterventionError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(err)?;
    }
    std::fs::write(path, text).map_err(err)
}
