//! Experiment driver: corruption sweeps over seeds, per-checkpoint probing of
//! every hidden layer, the metrics file, and the tables built from it.
//!
//! Probes are always fit on the corrupted training labels and scored on the
//! true test labels. The metrics file is append-only and flushed after each
//! checkpoint, so an interrupted sweep resumes from the last checkpoint
//! whose rows were written.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, Section};
use crate::config::{ConfigError, DatasetKind, ExperimentConfig};
use crate::data::{self, corrupt_labels, CorruptionSpec, DataError, LabeledDataset};
use crate::linalg::Matrix;
use crate::lr_probe::{fit_lr, LrTrainConfig};
use crate::mlp::{
    self, evaluate, forward, CheckpointRecord, MlpError, MlpParams, MlpSpec, TrainError, Trainer,
};
use crate::probes::{
    class_spectra, probe_accuracy, subspaces_from_spectra, velpic_from_spectra, Probe, ProbeError, ProbeKind,
};

pub const METRICS_HEADER: &str = "seed,degree,epoch,layer,probe,test_acc,train_acc,intervention";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("metrics row {row}: {message}")]
    Malformed { row: usize, message: String },
    #[error("probe `{0}` has no rows")]
    MissingProbe(String),
    #[error("cannot resume: {0}")]
    Resume(String),
}

type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Intervention {
    None,
    TransferOnly,
    TransferContinue,
}

impl Intervention {
    pub fn name(self) -> &'static str {
        match self {
            Intervention::None => "none",
            Intervention::TransferOnly => "transfer-only",
            Intervention::TransferContinue => "transfer-continue",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::None, Self::TransferOnly, Self::TransferContinue]
            .into_iter()
            .find(|i| i.name() == s)
    }
}

/// One accuracy cell. `layer` and `probe` are `None` for the model itself.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub seed: u64,
    pub degree: f64,
    pub epoch: usize,
    pub layer: Option<String>,
    pub probe: Option<ProbeKind>,
    /// Against the true test labels.
    pub test_acc: f64,
    /// Against the corrupted training labels.
    pub train_acc: f64,
    pub intervention: Intervention,
}

impl MetricsRow {
    pub fn model(seed: u64, degree: f64, epoch: usize, test_acc: f64, train_acc: f64) -> Self {
        Self {
            seed,
            degree,
            epoch,
            layer: None,
            probe: None,
            test_acc,
            train_acc,
            intervention: Intervention::None,
        }
    }

    pub fn layer_name(&self) -> &str {
        self.layer.as_deref().unwrap_or("model")
    }

    pub fn probe_name(&self) -> &str {
        self.probe.map_or("model", ProbeKind::name)
    }

    pub fn is_model(&self) -> bool {
        self.probe.is_none()
    }
}

impl fmt::Display for MetricsRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{},{:.6},{:.6},{}",
            self.seed,
            self.degree,
            self.epoch,
            self.layer_name(),
            self.probe_name(),
            self.test_acc,
            self.train_acc,
            self.intervention.name()
        )
    }
}

/// Parses one data line; `row` is the 1-based line number for errors.
pub fn parse_metrics_line(line: &str, row: usize) -> Result<MetricsRow> {
    let bad = |message: String| HarnessError::Malformed { row, message };
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != 8 {
        return Err(bad(format!("expected 8 fields, found {}", fields.len())));
    }
    let num = |i: usize, name: &str| -> Result<f64> {
        fields[i]
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| bad(format!("{name} `{}` is not a number", fields[i])))
    };
    let seed = fields[0].parse().map_err(|_| bad(format!("seed `{}` is not an integer", fields[0])))?;
    let degree = num(1, "degree")?;
    let epoch = fields[2].parse().map_err(|_| bad(format!("epoch `{}` is not an integer", fields[2])))?;
    let layer = match fields[3] {
        "" => return Err(bad("empty layer".into())),
        "model" => None,
        l => Some(l.to_string()),
    };
    let probe = match fields[4] {
        "model" => None,
        p => Some(ProbeKind::parse(p).ok_or_else(|| bad(format!("unknown probe `{p}`")))?),
    };
    if layer.is_none() != probe.is_none() {
        return Err(bad("layer and probe must both be `model` or neither".into()));
    }
    let test_acc = num(5, "test_acc")?;
    let train_acc = num(6, "train_acc")?;
    for (name, v) in [("test_acc", test_acc), ("train_acc", train_acc)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(bad(format!("{name} {v} outside [0, 1]")));
        }
    }
    let intervention =
        Intervention::parse(fields[7]).ok_or_else(|| bad(format!("unknown intervention `{}`", fields[7])))?;
    Ok(MetricsRow {
        seed,
        degree,
        epoch,
        layer,
        probe,
        test_acc,
        train_acc,
        intervention,
    })
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        _ => {
            return Err(HarnessError::Malformed {
                row: 1,
                message: format!("header must be `{METRICS_HEADER}`"),
            })
        }
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| parse_metrics_line(l, i + 2))
        .collect()
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    parse_metrics(&fs::read_to_string(path).map_err(io_err(path))?)
}

pub fn format_metrics(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_string());
        s.push('\n');
    }
    s
}

/// Append-only metrics file. Opening drops a trailing partial line left by
/// an interrupted write.
pub struct MetricsSink {
    file: File,
    path: PathBuf,
}

impl MetricsSink {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(path))?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(io_err(path))?;
        let mut text = String::new();
        file.read_to_string(&mut text).map_err(io_err(path))?;
        if text.is_empty() {
            file.write_all(format!("{METRICS_HEADER}\n").as_bytes()).map_err(io_err(path))?;
        } else if !text.ends_with('\n') {
            let keep = text.rfind('\n').map_or(0, |i| i + 1);
            file.set_len(keep as u64).map_err(io_err(path))?;
            file.seek(SeekFrom::End(0)).map_err(io_err(path))?;
            if keep == 0 {
                file.write_all(format!("{METRICS_HEADER}\n").as_bytes()).map_err(io_err(path))?;
            }
        }
        file.flush().map_err(io_err(path))?;
        Ok(Self {
            file,
            path: path.to_path_buf(),
        })
    }

    /// Writes all rows in one call, then syncs.
    pub fn append(&mut self, rows: &[MetricsRow]) -> Result<()> {
        let mut buf = String::new();
        for r in rows {
            buf.push_str(&r.to_string());
            buf.push('\n');
        }
        self.file.write_all(buf.as_bytes()).map_err(io_err(&self.path))?;
        self.file.sync_data().map_err(io_err(&self.path))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Clean training data and true-label test data for a sweep.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
}

impl ExperimentData {
    pub fn class_count(&self) -> usize {
        self.train.class_count().max(self.test.class_count())
    }

    pub fn input_dim(&self) -> usize {
        self.train.feature_count()
    }
}

fn limit(d: LabeledDataset, k: usize, seed: u64) -> LabeledDataset {
    if k == 0 || k >= d.len() {
        d
    } else {
        d.take_shuffled(k, seed)
    }
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<ExperimentData> {
    match cfg.dataset {
        DatasetKind::Mnist => {
            let train = data::load_mnist_split(&cfg.data_dir, "train")?;
            let test = data::load_mnist_split(&cfg.data_dir, "t10k")?;
            Ok(ExperimentData {
                train: limit(train, cfg.train_limit, cfg.subset_seed),
                test: limit(test, cfg.test_limit, cfg.subset_seed),
            })
        }
        DatasetKind::Synthetic => {
            // one draw so that both splits share the class means
            let per = cfg.synthetic_train_per_class + cfg.synthetic_test_per_class;
            let all = data::synth_mixture(
                cfg.synthetic_classes,
                cfg.synthetic_dim,
                per,
                cfg.synthetic_spread,
                cfg.subset_seed,
            )?;
            let cut = cfg.synthetic_train_per_class * cfg.synthetic_classes;
            let idx: Vec<usize> = (0..all.len()).collect();
            Ok(ExperimentData {
                train: all.subset(&idx[..cut]),
                test: all.subset(&idx[cut..]),
            })
        }
    }
}

/// The datasets one (seed, degree) run sees.
#[derive(Debug, Clone)]
pub struct CellData {
    pub seed: u64,
    pub degree: f64,
    /// Training inputs with corrupted labels: what the model and probes fit.
    pub fit: LabeledDataset,
    /// True-label test set: what every accuracy is scored on.
    pub test: LabeledDataset,
}

pub fn cell_data(data: &ExperimentData, seed: u64, degree: f64) -> Result<CellData> {
    let spec = CorruptionSpec::new(degree, seed)?;
    Ok(CellData {
        seed,
        degree,
        fit: corrupt_labels(&data.train, &spec),
        test: data.test.clone(),
    })
}

pub fn cell_dir(out: &Path, seed: u64, degree: f64) -> PathBuf {
    out.join("ckpt").join(format!("seed{seed}_p{degree:.2}"))
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:04}.mpck"))
}

/// Accuracy of one fitted probe on one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerScore {
    pub layer_index: usize,
    pub layer: String,
    pub probe: ProbeKind,
    pub test_acc: f64,
    pub train_acc: f64,
}

/// Settings shared by every probe fit.
#[derive(Debug, Clone)]
pub struct ProbeSettings {
    pub probes: Vec<ProbeKind>,
    pub threshold: f64,
    pub lr: LrTrainConfig,
    pub store_artifacts: bool,
}

impl ProbeSettings {
    pub fn from_config(cfg: &ExperimentConfig, seed: u64) -> Self {
        Self {
            probes: cfg.probes.clone(),
            threshold: cfg.threshold,
            lr: cfg.lr_config(seed),
            store_artifacts: cfg.store_probe_artifacts,
        }
    }
}

fn score<P: Probe>(probe: &P, train_act: &Matrix, fit_labels: &[usize], test_act: &Matrix, test_labels: &[usize]) -> Result<(f64, f64)> {
    let test_acc = probe_accuracy(&probe.predict_classes(test_act)?, test_labels)?;
    let train_acc = probe_accuracy(&probe.predict_classes(train_act)?, fit_labels)?;
    Ok((test_acc, train_acc))
}

/// Fits every configured probe on every hidden layer of `params`.
/// Probes are fit on `cell.fit` and test accuracy is against `cell.test`.
pub fn probe_checkpoint(
    params: &MlpParams<f64>,
    cell: &CellData,
    settings: &ProbeSettings,
) -> Result<(Vec<LayerScore>, Vec<Section>)> {
    let mut scores = Vec::new();
    let mut sections = Vec::new();
    if settings.probes.is_empty() {
        return Ok((scores, sections));
    }
    let class_count = params.spec.class_count;
    let (_, train_acts) = forward(params, cell.fit.inputs(), "train")?;
    let (_, test_acts) = forward(params, cell.test.inputs(), "test")?;
    let fit_labels = cell.fit.labels();
    let test_labels = cell.test.labels();
    let wants = |k: ProbeKind| settings.probes.contains(&k);
    for (l, tag) in train_acts.layer_tags.iter().enumerate() {
        let (tr, te) = (&train_acts.layers[l], &test_acts.layers[l]);
        let mut push = |probe, (test_acc, train_acc)| {
            scores.push(LayerScore {
                layer_index: l,
                layer: tag.clone(),
                probe,
                test_acc,
                train_acc,
            })
        };
        let spectral = wants(ProbeKind::Masc) || wants(ProbeKind::MascQuadratic) || wants(ProbeKind::Velpic);
        let spectra = if spectral { Some(class_spectra(tr, fit_labels, class_count)?) } else { None };
        for kind in &settings.probes {
            match kind {
                ProbeKind::Masc | ProbeKind::MascQuadratic => {
                    let set = subspaces_from_spectra(spectra.as_ref().expect("spectra computed"), settings.threshold)?;
                    push(*kind, score(&set, tr, fit_labels, te, test_labels)?);
                    if settings.store_artifacts {
                        sections.push(set.to_section(l));
                    }
                }
                ProbeKind::Velpic => {
                    let v = velpic_from_spectra(spectra.as_ref().expect("spectra computed"));
                    push(*kind, score(&v, tr, fit_labels, te, test_labels)?);
                    if settings.store_artifacts {
                        sections.push(v.to_section(l));
                    }
                }
                ProbeKind::Lr => {
                    let p = fit_lr(tr, fit_labels, class_count, &settings.lr)?;
                    push(*kind, score(&p, tr, fit_labels, te, test_labels)?);
                    if settings.store_artifacts {
                        sections.push(p.to_section(l));
                    }
                }
            }
        }
    }
    Ok((scores, sections))
}

/// Model row plus one row per (layer, probe) for one checkpoint.
pub fn checkpoint_rows(
    cell: &CellData,
    epoch: usize,
    model_test: f64,
    model_train: f64,
    scores: &[LayerScore],
    intervention: Intervention,
) -> Vec<MetricsRow> {
    let mut rows = vec![MetricsRow {
        intervention,
        ..MetricsRow::model(cell.seed, cell.degree, epoch, model_test, model_train)
    }];
    rows.extend(scores.iter().map(|s| MetricsRow {
        seed: cell.seed,
        degree: cell.degree,
        epoch,
        layer: Some(s.layer.clone()),
        probe: Some(s.probe),
        test_acc: s.test_acc,
        train_acc: s.train_acc,
        intervention,
    }));
    rows
}

#[derive(Debug)]
pub struct CellError {
    pub seed: u64,
    pub degree: f64,
    pub error: HarnessError,
}

#[derive(Debug, Default)]
pub struct ExperimentOutcome {
    /// Rows written by this invocation.
    pub rows: Vec<MetricsRow>,
    pub errors: Vec<CellError>,
    /// Cells found already complete and skipped.
    pub skipped_cells: usize,
}

fn cell_key(seed: u64, degree: f64) -> (u64, u64) {
    (seed, degree.to_bits())
}

/// Last epoch with rows in the metrics file, per cell.
fn completed_epochs(rows: &[MetricsRow]) -> HashMap<(u64, u64), usize> {
    let mut done: HashMap<(u64, u64), usize> = HashMap::new();
    for r in rows.iter().filter(|r| r.intervention == Intervention::None) {
        let e = done.entry(cell_key(r.seed, r.degree)).or_insert(r.epoch);
        *e = (*e).max(r.epoch);
    }
    done
}

/// Runs the full (seed x degree) cross product, appending to
/// `out_dir/metrics.csv`. Failing cells are recorded and skipped.
pub fn run_experiment(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let metrics_path = cfg.out_dir.join(METRICS_FILE);
    let mut sink = MetricsSink::open(&metrics_path)?;
    let done = completed_epochs(&read_metrics(&metrics_path)?);
    let spec = cfg.mlp_spec(data.input_dim(), data.class_count())?;
    let mut outcome = ExperimentOutcome::default();
    for &seed in &cfg.seeds {
        for &degree in &cfg.degrees {
            let resume_from = done.get(&cell_key(seed, degree)).copied();
            match run_cell(cfg, data, &spec, seed, degree, resume_from, &mut sink) {
                Ok(CellRun::Skipped) => outcome.skipped_cells += 1,
                Ok(CellRun::Rows(rows)) => outcome.rows.extend(rows),
                Err(error) => {
                    log::error!("seed {seed} degree {degree}: {error}");
                    outcome.errors.push(CellError { seed, degree, error });
                }
            }
        }
    }
    Ok(outcome)
}

enum CellRun {
    Skipped,
    Rows(Vec<MetricsRow>),
}

fn run_cell(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    spec: &MlpSpec,
    seed: u64,
    degree: f64,
    resume_from: Option<usize>,
    sink: &mut MetricsSink,
) -> Result<CellRun> {
    let cell = cell_data(data, seed, degree)?;
    let dir = cell_dir(&cfg.out_dir, seed, degree);
    let train_cfg = cfg.train_config(seed);
    let schedule = cfg.checkpoint_schedule();
    let settings = ProbeSettings::from_config(cfg, seed);

    let (trainer, initial) = match resume_from {
        None => (Trainer::new(MlpParams::init(spec, seed)?, train_cfg.clone(), &cell.fit)?, None),
        Some(epoch) => {
            let path = checkpoint_path(&dir, epoch);
            let (record, _) = checkpoint::read_file::<f64>(&path)
                .map_err(|e| HarnessError::Resume(format!("checkpoint for epoch {epoch}: {e}")))?;
            if &record.params.spec != spec {
                return Err(HarnessError::Resume(format!("{} was written for another network", path.display())));
            }
            if epoch >= cfg.max_epochs || record.train_accuracy >= cfg.stop_train_accuracy {
                log::info!("seed {seed} degree {degree}: complete at epoch {epoch}, skipping");
                return Ok(CellRun::Skipped);
            }
            log::info!("seed {seed} degree {degree}: resuming after epoch {epoch}");
            let acc_loss = (record.train_accuracy, record.loss);
            (Trainer::resume(&record, train_cfg.clone(), &cell.fit)?, Some(acc_loss))
        }
    };

    let mut written = Vec::new();
    let result = mlp::continue_training(trainer, &schedule, cfg.max_epochs, initial, |record: &CheckpointRecord<f64>| {
        let mut step = || -> Result<()> {
            let model_test = evaluate(&record.params, &cell.test)?;
            let (scores, sections) = probe_checkpoint(&record.params, &cell, &settings)?;
            checkpoint::write_file(&checkpoint_path(&dir, record.epoch), record, &sections)?;
            let rows = checkpoint_rows(&cell, record.epoch, model_test, record.train_accuracy, &scores, Intervention::None);
            sink.append(&rows)?;
            log::info!(
                "seed {seed} degree {degree} epoch {}: train {:.4} test {:.4}",
                record.epoch,
                record.train_accuracy,
                model_test
            );
            written.extend(rows);
            Ok(())
        };
        step().map_err(|e| TrainError::Sink(Box::new(e)))
    });
    result?;
    Ok(CellRun::Rows(written))
}

/// Checkpoint files in `dir`, ordered by epoch. A missing directory is
/// empty.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, PathBuf)>> {
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(dir)(e)),
    };
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(io_err(dir))?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_"))
            .and_then(|n| n.strip_suffix(".mpck"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(epoch) = epoch {
            out.push((epoch, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Fits `cfg.probes` on checkpoints already on disk and appends their rows.
/// (epoch, layer, probe) cells that already have rows are left alone.
pub fn probe_existing(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let metrics_path = cfg.out_dir.join(METRICS_FILE);
    let mut sink = MetricsSink::open(&metrics_path)?;
    let existing = read_metrics(&metrics_path)?;
    let mut outcome = ExperimentOutcome::default();
    for &seed in &cfg.seeds {
        for &degree in &cfg.degrees {
            let have = |epoch: usize, probe: ProbeKind| {
                existing.iter().any(|r| {
                    r.seed == seed
                        && r.degree == degree
                        && r.epoch == epoch
                        && r.probe == Some(probe)
                        && r.intervention == Intervention::None
                })
            };
            let mut run = || -> Result<()> {
                let cell = cell_data(data, seed, degree)?;
                let checkpoints = list_checkpoints(&cell_dir(&cfg.out_dir, seed, degree))?;
                if checkpoints.is_empty() {
                    return Err(HarnessError::Resume("no checkpoints; run `train` first".into()));
                }
                for (epoch, path) in checkpoints {
                    let mut settings = ProbeSettings::from_config(cfg, seed);
                    settings.probes.retain(|p| !have(epoch, *p));
                    settings.store_artifacts = false;
                    if settings.probes.is_empty() {
                        continue;
                    }
                    let (record, _) = checkpoint::read_file::<f64>(&path)?;
                    let (scores, _) = probe_checkpoint(&record.params, &cell, &settings)?;
                    let rows: Vec<MetricsRow> =
                        checkpoint_rows(&cell, epoch, 0.0, 0.0, &scores, Intervention::None).split_off(1);
                    sink.append(&rows)?;
                    log::info!("seed {seed} degree {degree} epoch {epoch}: {} probe rows", rows.len());
                    outcome.rows.extend(rows);
                }
                Ok(())
            };
            if let Err(error) = run() {
                log::error!("seed {seed} degree {degree}: {error}");
                outcome.errors.push(CellError { seed, degree, error });
            }
        }
    }
    Ok(outcome)
}

/// Mean and range of test accuracy across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub degree: f64,
    pub epoch: usize,
    pub layer: Option<String>,
    pub probe: Option<ProbeKind>,
    pub intervention: Intervention,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

type GroupKey = (u64, usize, Option<String>, Option<ProbeKind>, Intervention);

fn group_key(r: &MetricsRow) -> GroupKey {
    (r.degree.to_bits(), r.epoch, r.layer.clone(), r.probe, r.intervention)
}

/// Groups by (degree, epoch, layer, probe, intervention). Values are sorted
/// before summing so the result does not depend on row order. Non-finite
/// accuracies are dropped with a warning.
pub fn aggregate(rows: &[MetricsRow]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<GroupKey, Vec<f64>> = BTreeMap::new();
    for r in rows {
        if !r.test_acc.is_finite() {
            log::warn!("dropping non-finite accuracy for {r}");
            continue;
        }
        groups.entry(group_key(r)).or_default().push(r.test_acc);
    }
    groups
        .into_iter()
        .map(|((deg, epoch, layer, probe, intervention), mut v)| {
            v.sort_by(f64::total_cmp);
            AggregateRow {
                degree: f64::from_bits(deg),
                epoch,
                layer,
                probe,
                intervention,
                mean: v.iter().sum::<f64>() / v.len() as f64,
                min: v[0],
                max: v[v.len() - 1],
                count: v.len(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffRow {
    pub degree: f64,
    pub epoch: usize,
    pub layer: String,
    /// Mean accuracy of probe A minus that of probe B.
    pub diff: f64,
}

/// Per (degree, epoch, layer): mean accuracy of `a` minus that of `b`, over
/// rows without intervention.
pub fn difference_table(rows: &[MetricsRow], a: ProbeKind, b: ProbeKind) -> Result<Vec<DiffRow>> {
    for p in [a, b] {
        if !rows.iter().any(|r| r.probe == Some(p)) {
            return Err(HarnessError::MissingProbe(p.name().to_string()));
        }
    }
    let agg = aggregate(rows);
    let mean_of = |p: ProbeKind| -> BTreeMap<(u64, usize, String), f64> {
        agg.iter()
            .filter(|r| r.probe == Some(p) && r.intervention == Intervention::None)
            .map(|r| ((r.degree.to_bits(), r.epoch, r.layer.clone().unwrap_or_default()), r.mean))
            .collect()
    };
    let (ma, mb) = (mean_of(a), mean_of(b));
    Ok(ma
        .iter()
        .filter_map(|(k, va)| {
            mb.get(k).map(|vb| DiffRow {
                degree: f64::from_bits(k.0),
                epoch: k.1,
                layer: k.2.clone(),
                diff: va - vb,
            })
        })
        .collect())
}

pub fn format_difference_table(rows: &[DiffRow]) -> String {
    let mut s = String::from("degree,epoch,layer,diff\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:.6}\n", r.degree, r.epoch, r.layer, r.diff));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, epoch: usize, probe: Option<ProbeKind>, acc: f64) -> MetricsRow {
        MetricsRow {
            seed,
            degree: 0.6,
            epoch,
            layer: probe.map(|_| "FC1".to_string()),
            probe,
            test_acc: acc,
            train_acc: 0.5,
            intervention: Intervention::None,
        }
    }

    #[test]
    fn metrics_line_format() {
        let r = row(1, 4, Some(ProbeKind::Velpic), 0.5);
        assert_eq!(r.to_string(), "1,0.6,4,FC1,velpic,0.500000,0.500000,none");
        let m = MetricsRow::model(0, 1.0, 0, 0.1, 0.25);
        assert_eq!(m.to_string(), "0,1,0,model,model,0.100000,0.250000,none");
        assert_eq!(parse_metrics_line(&r.to_string(), 2).unwrap(), r);
    }

    #[test]
    fn malformed_rows_name_the_row() {
        let text = format!("{METRICS_HEADER}\n0,0.6,0,model,model,0.1,0.1,none\n0,0.6,x,model,model,0.1,0.1,none\n");
        match parse_metrics(&text) {
            Err(HarnessError::Malformed { row: 3, message }) => assert!(message.contains("epoch")),
            other => panic!("{other:?}"),
        }
        assert!(parse_metrics("bad header\n").is_err());
        let text = format!("{METRICS_HEADER}\n0,0.6,0,FC1,model,0.1,0.1,none\n");
        assert!(parse_metrics(&text).is_err());
        let text = format!("{METRICS_HEADER}\n0,0.6,0,model,model,1.5,0.1,none\n");
        assert!(parse_metrics(&text).is_err());
    }

    #[test]
    fn sink_appends_and_heals_partial_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut sink = MetricsSink::open(&path).unwrap();
        sink.append(&[row(0, 0, None, 0.1)]).unwrap();
        drop(sink);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"0,0.6,2,mod").unwrap();
        drop(f);
        let mut sink = MetricsSink::open(&path).unwrap();
        sink.append(&[row(0, 2, None, 0.2)]).unwrap();
        let rows = read_metrics(&path).unwrap();
        assert_eq!(rows.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn aggregate_mean_and_range() {
        let rows = vec![row(0, 2, None, 0.5), row(1, 2, None, 0.7)];
        let agg = aggregate(&rows);
        assert_eq!(agg.len(), 1);
        assert!((agg[0].mean - 0.6).abs() < 1e-15);
        assert_eq!((agg[0].min, agg[0].max, agg[0].count), (0.5, 0.7, 2));
        let single = aggregate(&rows[..1]);
        assert_eq!((single[0].mean, single[0].min, single[0].max), (0.5, 0.5, 0.5));
    }

    #[test]
    fn difference_of_known_rows() {
        let rows = vec![row(0, 2, Some(ProbeKind::Velpic), 0.8), row(0, 2, Some(ProbeKind::Masc), 0.6)];
        let t = difference_table(&rows, ProbeKind::Velpic, ProbeKind::Masc).unwrap();
        assert_eq!(t.len(), 1);
        assert!((t[0].diff - 0.2).abs() < 1e-12);
        let same = difference_table(&rows, ProbeKind::Masc, ProbeKind::Masc).unwrap();
        assert_eq!(same[0].diff, 0.0);
        match difference_table(&rows, ProbeKind::Lr, ProbeKind::Masc) {
            Err(HarnessError::MissingProbe(p)) => assert_eq!(p, "lr"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cell_paths() {
        let d = cell_dir(Path::new("out"), 3, 0.6);
        assert_eq!(d, Path::new("out/ckpt/seed3_p0.60"));
        assert_eq!(checkpoint_path(&d, 25), Path::new("out/ckpt/seed3_p0.60/epoch_0025.mpck"));
    }
}
