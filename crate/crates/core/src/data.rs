//! Labeled datasets: IDX (MNIST) loading, synthetic class mixtures, seeded
//! subsetting and the uniform label-corruption protocol.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::linalg::{LinalgError, Matrix};
use crate::rng::{Stream, StreamRng};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("reading {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },
    #[error("{path}: truncated, expected {expected} bytes but found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    #[error("image file holds {images} samples but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
    #[error("{0} labels for {1} input rows")]
    LabelCount(usize, usize),
    #[error("label {label} at index {index} is outside 0..{class_count}")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        class_count: usize,
    },
    #[error("input entry ({row}, {col}) = {value} is outside [0, 1]")]
    NotNormalized { row: usize, col: usize, value: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Inputs (one sample per row, entries in `[0, 1]`) with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Matrix,
    labels: Vec<usize>,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(DataError::LabelCount(labels.len(), inputs.rows()));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, l)| **l >= class_count) {
            return Err(DataError::LabelOutOfRange {
                index,
                label,
                class_count,
            });
        }
        if let Some(i) = inputs.as_slice().iter().position(|v| !(0.0..=1.0).contains(v)) {
            let cols = inputs.cols();
            return Err(DataError::NotNormalized {
                row: i / cols,
                col: i % cols,
                value: inputs.as_slice()[i],
            });
        }
        Ok(Self {
            inputs,
            labels,
            class_count,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_count(&self) -> usize {
        self.inputs.cols()
    }

    /// Same inputs, different labels (used to pair true and corrupted labels).
    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.inputs.clone(), labels, self.class_count)
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// The first `k` samples after a seeded Fisher-Yates shuffle of the
    /// sample indices.
    pub fn take_shuffled(&self, k: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..self.len()).collect();
        StreamRng::new(seed, Stream::Subset).shuffle(&mut order);
        order.truncate(k.min(self.len()));
        self.subset(&order)
    }

    /// Sample indices grouped by label.
    pub fn class_indices(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.class_count];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    degree: f64,
    seed: u64,
}

impl CorruptionSpec {
    pub fn new(degree: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&degree) {
            return Err(DataError::InvalidParameter(format!(
                "corruption degree {degree} outside [0, 1]"
            )));
        }
        Ok(Self { degree, seed })
    }

    pub fn degree(&self) -> f64 {
        self.degree
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

/// With probability `degree`, each label is replaced by a uniform draw over
/// all classes (which may reproduce the original label). One uniform real is
/// drawn per sample, and one uniform class only when it falls below the
/// degree, in sample order.
pub fn corrupt_labels(data: &LabeledDataset, spec: &CorruptionSpec) -> LabeledDataset {
    let mut rng = StreamRng::new(spec.seed, Stream::Corruption);
    let c = data.class_count as u64;
    let labels = data
        .labels
        .iter()
        .map(|&l| {
            if rng.uniform() < spec.degree {
                rng.below(c) as usize
            } else {
                l
            }
        })
        .collect();
    LabeledDataset {
        inputs: data.inputs.clone(),
        labels,
        class_count: data.class_count,
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| DataError::Truncated {
            path: path.to_path_buf(),
            expected: offset + 4,
            actual: bytes.len(),
        })
}

/// Loads an IDX image/label file pair. Pixels are divided by 255; the class
/// count is one more than the largest label present.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = read_file(ip)?;
    let labels = read_file(lp)?;

    let magic = be_u32(&images, 0, ip)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            path: ip.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(&images, 4, ip)? as usize;
    let rows = be_u32(&images, 8, ip)? as usize;
    let cols = be_u32(&images, 12, ip)? as usize;
    let features = rows * cols;
    let expected = 16 + count * features;
    if images.len() < expected {
        return Err(DataError::Truncated {
            path: ip.to_path_buf(),
            expected,
            actual: images.len(),
        });
    }

    let magic = be_u32(&labels, 0, lp)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            path: lp.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let label_count = be_u32(&labels, 4, lp)? as usize;
    if label_count != count {
        return Err(DataError::CountMismatch {
            images: count,
            labels: label_count,
        });
    }
    if labels.len() < 8 + label_count {
        return Err(DataError::Truncated {
            path: lp.to_path_buf(),
            expected: 8 + label_count,
            actual: labels.len(),
        });
    }

    let pixels: Vec<f64> = images[16..expected].iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = labels[8..8 + label_count].iter().map(|&l| l as usize).collect();
    let class_count = labels.iter().copied().max().map_or(0, |m| m + 1);
    LabeledDataset::new(Matrix::from_vec(count, features, pixels)?, labels, class_count)
}

/// Loads `<prefix>-images-idx3-ubyte` / `<prefix>-labels-idx1-ubyte` from a
/// directory, the standard MNIST file names (`train` or `t10k`).
pub fn load_mnist_split(dir: impl AsRef<Path>, prefix: &str) -> Result<LabeledDataset> {
    let dir = dir.as_ref();
    load_idx(
        dir.join(format!("{prefix}-images-idx3-ubyte")),
        dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )
}

pub fn write_idx_images(path: impl AsRef<Path>, rows: u32, cols: u32, pixels: &[u8]) -> std::io::Result<()> {
    let per = (rows * cols) as usize;
    assert!(per > 0 && pixels.len() % per == 0, "pixel buffer is not a whole number of images");
    let mut f = fs::File::create(path)?;
    f.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    f.write_all(&((pixels.len() / per) as u32).to_be_bytes())?;
    f.write_all(&rows.to_be_bytes())?;
    f.write_all(&cols.to_be_bytes())?;
    f.write_all(pixels)
}

pub fn write_idx_labels(path: impl AsRef<Path>, labels: &[u8]) -> std::io::Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    f.write_all(&(labels.len() as u32).to_be_bytes())?;
    f.write_all(labels)
}

/// Gaussian class clusters around uniformly drawn means, rescaled as a whole
/// into `[0, 1]` by one global affine map (which preserves the geometry up to
/// scale). Samples are interleaved by class: 0, 1, ..., C-1, 0, 1, ...
pub fn synth_mixture(
    class_count: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if class_count == 0 || dim == 0 || per_class == 0 {
        return Err(DataError::InvalidParameter(
            "class count, dimension and samples per class must be at least 1".into(),
        ));
    }
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(DataError::InvalidParameter(format!("spread {spread} must be positive")));
    }
    let mut rng = StreamRng::new(seed, Stream::Synth);
    let means: Vec<Vec<f64>> = (0..class_count)
        .map(|_| (0..dim).map(|_| rng.uniform()).collect())
        .collect();
    let n = class_count * per_class;
    let mut raw = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..per_class {
        for (c, mean) in means.iter().enumerate() {
            raw.extend(mean.iter().map(|m| m + spread * rng.normal()));
            labels.push(c);
        }
    }
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    let scaled = raw
        .into_iter()
        .map(|v| if range > 0.0 { ((v - lo) / range).clamp(0.0, 1.0) } else { 0.5 })
        .collect();
    LabeledDataset::new(Matrix::from_vec(n, dim, scaled)?, labels, class_count)
}

/// Fraction of positions where two label vectors differ.
pub fn changed_fraction(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(m: usize, classes: usize) -> LabeledDataset {
        let inputs = Matrix::from_fn(m, 3, |r, c| ((r * 7 + c) % 11) as f64 / 10.0);
        LabeledDataset::new(inputs, (0..m).map(|i| i % classes).collect(), classes).unwrap()
    }

    fn nearest_mean_accuracy(train: &LabeledDataset, test: &LabeledDataset) -> f64 {
        let d = train.feature_count();
        let mut means = vec![vec![0.0; d]; train.class_count()];
        let mut counts = vec![0usize; train.class_count()];
        for (row, &l) in train.inputs().row_iter().zip(train.labels()) {
            counts[l] += 1;
            for (m, v) in means[l].iter_mut().zip(row) {
                *m += v;
            }
        }
        for (m, c) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= *c as f64);
        }
        let mut correct = 0;
        for (row, &l) in test.inputs().row_iter().zip(test.labels()) {
            let best = (0..means.len())
                .min_by(|&a, &b| {
                    let da: f64 = row.iter().zip(&means[a]).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = row.iter().zip(&means[b]).map(|(x, y)| (x - y).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            correct += (best == l) as usize;
        }
        correct as f64 / test.len() as f64
    }

    #[test]
    fn zero_degree_keeps_labels() {
        let d = balanced(1000, 10);
        let c = corrupt_labels(&d, &CorruptionSpec::new(0.0, 5).unwrap());
        assert_eq!(c.labels(), d.labels());
    }

    fn change_rate_within_three_sigma(p: f64, seed: u64) {
        let d = balanced(10_000, 10);
        let c = corrupt_labels(&d, &CorruptionSpec::new(p, seed).unwrap());
        let q = p * (1.0 - 0.1);
        let sigma = (q * (1.0 - q) / 10_000.0).sqrt();
        let frac = changed_fraction(d.labels(), c.labels());
        assert!((frac - q).abs() <= 3.0 * sigma, "p={p}: {frac} vs {q} ± {}", 3.0 * sigma);
        assert_eq!(c.inputs(), d.inputs());
    }

    #[test]
    fn full_corruption_changes_ninety_percent() {
        change_rate_within_three_sigma(1.0, 11);
    }

    #[test]
    fn sixty_percent_corruption_changes_fifty_four_percent() {
        change_rate_within_three_sigma(0.6, 12);
    }

    #[test]
    fn corruption_is_reproducible() {
        let d = balanced(500, 10);
        let spec = CorruptionSpec::new(0.4, 99).unwrap();
        assert_eq!(corrupt_labels(&d, &spec), corrupt_labels(&d, &spec));
    }

    #[test]
    fn corruption_degree_is_validated() {
        assert!(CorruptionSpec::new(1.5, 0).is_err());
        assert!(CorruptionSpec::new(-0.1, 0).is_err());
    }

    #[test]
    fn dataset_invariants() {
        let inputs = Matrix::zeros(2, 2);
        assert!(matches!(
            LabeledDataset::new(inputs.clone(), vec![0], 2),
            Err(DataError::LabelCount(1, 2))
        ));
        assert!(matches!(
            LabeledDataset::new(inputs.clone(), vec![0, 2], 2),
            Err(DataError::LabelOutOfRange { index: 1, .. })
        ));
        let big = Matrix::from_vec(1, 1, vec![1.5]).unwrap();
        assert!(matches!(
            LabeledDataset::new(big, vec![0], 1),
            Err(DataError::NotNormalized { .. })
        ));
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_mixture(3, 5, 10, 0.3, 17).unwrap();
        let b = synth_mixture(3, 5, 10, 0.3, 17).unwrap();
        assert_eq!(a, b);
        let c = synth_mixture(3, 5, 10, 0.3, 18).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tight_two_class_clusters_are_perfectly_separable() {
        let d = synth_mixture(2, 4, 50, 1e-9, 3).unwrap();
        assert_eq!(nearest_mean_accuracy(&d, &d), 1.0);
    }

    #[test]
    fn ten_class_mixture_nearest_mean_oracle() {
        // fit means on one draw, score a fresh draw with the same class means
        let all = synth_mixture(10, 64, 400, 0.5, 21).unwrap();
        let train_idx: Vec<usize> = (0..2000).collect();
        let test_idx: Vec<usize> = (2000..4000).collect();
        let acc = nearest_mean_accuracy(&all.subset(&train_idx), &all.subset(&test_idx));
        assert!(acc > 0.95, "nearest-mean accuracy {acc}");
    }

    #[test]
    fn synth_rejects_bad_parameters() {
        assert!(synth_mixture(0, 2, 2, 0.1, 0).is_err());
        assert!(synth_mixture(2, 2, 2, 0.0, 0).is_err());
    }

    #[test]
    fn take_shuffled_is_seeded_prefix() {
        let d = balanced(100, 10);
        let a = d.take_shuffled(10, 1);
        assert_eq!(a.len(), 10);
        assert_eq!(a, d.take_shuffled(10, 1));
        assert_ne!(a, d.take_shuffled(10, 2));
        assert_eq!(d.take_shuffled(1000, 1).len(), 100);
    }

    fn fixture(dir: &Path, images: &[u8], labels: &[u8]) -> (PathBuf, PathBuf) {
        let ip = dir.join("img");
        let lp = dir.join("lbl");
        write_idx_images(&ip, 28, 28, images).unwrap();
        write_idx_labels(&lp, labels).unwrap();
        (ip, lp)
    }

    #[test]
    fn idx_fixture_loads_and_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        let mut pixels: Vec<u8> = (0..4 * 784).map(|i| (i % 256) as u8).collect();
        pixels[3 * 784..].fill(255);
        let (ip, lp) = fixture(dir.path(), &pixels, &[3, 1, 4, 1]);
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.inputs().shape(), (4, 784));
        assert_eq!(d.labels(), &[3, 1, 4, 1]);
        assert_eq!(d.class_count(), 5);
        assert!(d.inputs().as_slice().iter().all(|v| *v <= 1.0));
        assert!(d.inputs().row(3).iter().all(|v| *v == 1.0));
        assert_eq!(d.inputs().get(0, 1), 1.0 / 255.0);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let pixels = vec![0u8; 2 * 784];
        let (ip, lp) = fixture(dir.path(), &pixels, &[0, 1]);

        // swapped files: bad magic
        assert!(matches!(load_idx(&lp, &ip), Err(DataError::BadMagic { .. })));

        // truncated image payload
        let bytes = fs::read(&ip).unwrap();
        let short = dir.path().join("short");
        fs::write(&short, &bytes[..bytes.len() - 10]).unwrap();
        assert!(matches!(load_idx(&short, &lp), Err(DataError::Truncated { .. })));

        // label count disagrees with image count
        let lp3 = dir.path().join("lbl3");
        write_idx_labels(&lp3, &[0, 1, 2]).unwrap();
        assert!(matches!(
            load_idx(&ip, &lp3),
            Err(DataError::CountMismatch { images: 2, labels: 3 })
        ));

        assert!(matches!(
            load_idx(dir.path().join("missing"), &lp),
            Err(DataError::Io { .. })
        ));
    }
}
