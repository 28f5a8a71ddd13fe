//! Class-conditional probes on hidden-layer activations.
//!
//! Both probes start from the same per-class spectrum: the class's activation
//! rows augmented with their negatives, so that the PCA is over origin-passing
//! subspaces, decomposed by SVD.
//!
//! * MASC keeps the leading principal directions up to a variance threshold
//!   and predicts the class whose subspace makes the smallest angle with the
//!   input.
//! * VeLPIC keeps only the top direction per class, signed so that the class
//!   points project positively on average, and predicts the largest
//!   projection.

use std::f64::consts::FRAC_PI_2;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{ByteReader, ByteWriter, CheckpointError, Section, TAG_SUBSPACES, TAG_VELPIC};
use crate::linalg::{self, dot, norm, right_svd, LinalgError, Matrix};
use crate::mlp::argmax;

pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.99;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("class {class} has no samples")]
    EmptyClass { class: usize },
    #[error("degenerate class subspace: class {class} data is all zero")]
    DegenerateClass { class: usize },
    #[error("input has {got} features, probe expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("{rows} activation rows for {labels} labels")]
    Unaligned { rows: usize, labels: usize },
    #[error("label {label} outside 0..{class_count}")]
    LabelOutOfRange { label: usize, class_count: usize },
    #[error("variance threshold {0} not in (0, 1]")]
    InvalidThreshold(f64),
    #[error("non-finite loss in probe epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid probe config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Format(#[from] CheckpointError),
}

type Result<T> = std::result::Result<T, ProbeError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    /// MASC, smallest angle.
    Masc,
    /// MASC through the normalized quadratic score.
    MascQuadratic,
    Velpic,
    Lr,
}

impl ProbeKind {
    pub fn name(self) -> &'static str {
        match self {
            ProbeKind::Masc => "masc",
            ProbeKind::MascQuadratic => "masc-quadratic",
            ProbeKind::Velpic => "velpic",
            ProbeKind::Lr => "lr",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Masc, Self::MascQuadratic, Self::Velpic, Self::Lr]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

impl fmt::Display for ProbeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeVerdict {
    pub predicted_class: usize,
    /// Angles for MASC (lower wins), scores otherwise (higher wins).
    pub scores: Vec<f64>,
    pub kind: ProbeKind,
    /// Set when the input was the zero vector and every class scored alike.
    pub zero_input: bool,
    /// Set when more than one class attains the optimum.
    pub tied: bool,
}

/// First index of the minimum.
fn argmin(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, s) in scores.iter().enumerate().skip(1) {
        if *s < scores[best] {
            best = i;
        }
    }
    best
}

fn verdict(kind: ProbeKind, scores: Vec<f64>, lower_wins: bool, zero_input: bool) -> ProbeVerdict {
    let predicted_class = if lower_wins { argmin(&scores) } else { argmax(&scores) };
    let best = scores[predicted_class];
    let tied = scores.iter().filter(|s| **s == best).count() > 1;
    ProbeVerdict {
        predicted_class,
        scores,
        kind,
        zero_input,
        tied,
    }
}

/// A fitted classifier over one layer's activations.
pub trait Probe {
    fn kind(&self) -> ProbeKind;
    fn dim(&self) -> usize;
    fn predict(&self, x: &[f64]) -> Result<ProbeVerdict>;

    /// Predicted classes for every row.
    fn predict_classes(&self, xs: &Matrix) -> Result<Vec<usize>> {
        xs.row_iter().map(|x| self.predict(x).map(|v| v.predicted_class)).collect()
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(ProbeError::Dimension { expected, got });
    }
    Ok(())
}

/// Fraction of predictions equal to `labels`. Callers pass the true labels.
pub fn probe_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(ProbeError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    Ok(crate::mlp::accuracy_of(predictions, labels))
}

/// Rows `[x1, -x1, x2, -x2, ...]`. Each column sums to exactly zero when
/// added in row order, since every partial sum after a pair is zero.
pub fn augment_with_negatives(rows: &Matrix) -> Matrix {
    let d = rows.cols();
    let mut data = Vec::with_capacity(2 * rows.rows() * d);
    for r in rows.row_iter() {
        data.extend_from_slice(r);
        data.extend(r.iter().map(|v| -v));
    }
    Matrix::from_vec(2 * rows.rows(), d, data).expect("finite input stays finite")
}

/// Per-class spectral summary shared by both probes.
#[derive(Debug, Clone)]
pub struct ClassSpectrum {
    pub class_id: usize,
    /// Singular values of the augmented class matrix, descending.
    pub singular_values: Vec<f64>,
    /// Right singular vectors as columns, `d x r`.
    pub directions: Matrix,
    /// Mean over the class's (un-augmented) rows of their projection onto
    /// the top direction.
    pub top_projection_mean: f64,
    pub sample_count: usize,
}

fn check_aligned(activations: &Matrix, labels: &[usize], class_count: usize) -> Result<()> {
    if activations.rows() != labels.len() {
        return Err(ProbeError::Unaligned {
            rows: activations.rows(),
            labels: labels.len(),
        });
    }
    if let Some(&label) = labels.iter().find(|l| **l >= class_count) {
        return Err(ProbeError::LabelOutOfRange { label, class_count });
    }
    Ok(())
}

/// One SVD per class of the negative-augmented rows labelled with it.
pub fn class_spectra(activations: &Matrix, labels: &[usize], class_count: usize) -> Result<Vec<ClassSpectrum>> {
    check_aligned(activations, labels, class_count)?;
    let mut members = vec![Vec::new(); class_count];
    for (i, l) in labels.iter().enumerate() {
        members[*l].push(i);
    }
    members
        .iter()
        .enumerate()
        .map(|(class, idx)| {
            if idx.is_empty() {
                return Err(ProbeError::EmptyClass { class });
            }
            let rows = activations.select_rows(idx);
            if rows.as_slice().iter().all(|v| *v == 0.0) {
                return Err(ProbeError::DegenerateClass { class });
            }
            let svd = right_svd(&augment_with_negatives(&rows))?;
            let top = svd.right.column(0);
            let top_projection_mean = rows.row_iter().map(|x| dot(x, &top)).sum::<f64>() / idx.len() as f64;
            Ok(ClassSpectrum {
                class_id: class,
                singular_values: svd.singular_values,
                directions: svd.right,
                top_projection_mean,
                sample_count: idx.len(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSubspace {
    pub class_id: usize,
    /// `d x k`, orthonormal columns.
    pub basis: Matrix,
    pub explained_variance_ratio: f64,
}

impl ClassSubspace {
    pub fn kept_components(&self) -> usize {
        self.basis.cols()
    }
}

/// Smallest `k >= 1` whose leading squared singular values reach
/// `threshold` of the total, and the ratio attained.
pub fn components_for_threshold(singular_values: &[f64], threshold: f64) -> (usize, f64) {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    let mut cum = 0.0;
    for (i, s) in singular_values.iter().enumerate() {
        cum += s * s;
        if cum / total >= threshold {
            return (i + 1, cum / total);
        }
    }
    (singular_values.len(), cum / total)
}

/// MASC subspaces, one per class.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceSet {
    pub dim: usize,
    pub subspaces: Vec<ClassSubspace>,
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(ProbeError::InvalidThreshold(threshold));
    }
    Ok(())
}

pub fn subspaces_from_spectra(spectra: &[ClassSpectrum], threshold: f64) -> Result<SubspaceSet> {
    check_threshold(threshold)?;
    let dim = spectra.first().map_or(0, |s| s.directions.rows());
    let subspaces = spectra
        .iter()
        .map(|s| {
            let (k, ratio) = components_for_threshold(&s.singular_values, threshold);
            ClassSubspace {
                class_id: s.class_id,
                basis: s.directions.leading_columns(k),
                explained_variance_ratio: ratio,
            }
        })
        .collect();
    Ok(SubspaceSet { dim, subspaces })
}

/// Fits MASC subspaces from activations and the labels they were trained on.
pub fn estimate_subspaces(
    activations: &Matrix,
    labels: &[usize],
    class_count: usize,
    threshold: f64,
) -> Result<SubspaceSet> {
    check_threshold(threshold)?;
    subspaces_from_spectra(&class_spectra(activations, labels, class_count)?, threshold)
}

/// Cosine between `x` and its projection `x_c`; 0 when either is zero.
fn cosine(x_dot_xc: f64, norm_x: f64, norm_xc: f64) -> f64 {
    if norm_x == 0.0 || norm_xc == 0.0 {
        0.0
    } else {
        (x_dot_xc / (norm_x * norm_xc)).clamp(-1.0, 1.0)
    }
}

/// Angle form: explicit projection onto each subspace, then the angle
/// between input and projection. Zero projections count as `pi/2`.
pub fn masc_predict(set: &SubspaceSet, x: &[f64]) -> Result<ProbeVerdict> {
    check_dim(set.dim, x.len())?;
    let nx = norm(x);
    let angles = set
        .subspaces
        .iter()
        .map(|s| {
            let xc = linalg::project_onto_basis(x, &s.basis)?;
            Ok(cosine(dot(x, &xc), nx, norm(&xc)).acos())
        })
        .collect::<Result<Vec<_>>>()?;
    let zero = nx == 0.0;
    let angles = if zero { vec![FRAC_PI_2; angles.len()] } else { angles };
    Ok(verdict(ProbeKind::Masc, angles, true, zero))
}

/// Quadratic form: `sum_i (x . p_i)^2` per class, divided by `|x_c| |x|`
/// with `|x_c|` taken from the same coefficients. This is the cosine of the
/// MASC angle, so the argmax matches the angle form's argmin.
pub fn masc_predict_quadratic(set: &SubspaceSet, x: &[f64]) -> Result<ProbeVerdict> {
    check_dim(set.dim, x.len())?;
    let nx = norm(x);
    let scores = set
        .subspaces
        .iter()
        .map(|s| {
            let c = linalg::basis_coefficients(x, &s.basis);
            let q = dot(&c, &c);
            cosine(q, nx, q.sqrt())
        })
        .collect();
    Ok(verdict(ProbeKind::MascQuadratic, scores, false, nx == 0.0))
}

impl Probe for SubspaceSet {
    fn kind(&self) -> ProbeKind {
        ProbeKind::Masc
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, x: &[f64]) -> Result<ProbeVerdict> {
        masc_predict(self, x)
    }

    /// Batch path through one matrix product with all bases side by side,
    /// scoring with the quadratic form.
    fn predict_classes(&self, xs: &Matrix) -> Result<Vec<usize>> {
        check_dim(self.dim, xs.cols())?;
        let widths: Vec<usize> = self.subspaces.iter().map(|s| s.basis.cols()).collect();
        let total: usize = widths.iter().sum();
        let stacked = Matrix::from_fn(self.dim, total, |r, c| {
            let mut c = c;
            for s in &self.subspaces {
                if c < s.basis.cols() {
                    return s.basis.get(r, c);
                }
                c -= s.basis.cols();
            }
            unreachable!("column within stacked width")
        });
        let coeffs = linalg::matmul(xs, &stacked)?;
        Ok(coeffs
            .row_iter()
            .zip(xs.row_iter())
            .map(|(c, x)| {
                let nx = norm(x);
                let mut scores = Vec::with_capacity(widths.len());
                let mut start = 0;
                for w in &widths {
                    let part = &c[start..start + w];
                    let q = dot(part, part);
                    scores.push(cosine(q, nx, q.sqrt()));
                    start += w;
                }
                argmax(&scores)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassVector {
    pub class_id: usize,
    /// Sign-corrected class vector, unit length.
    pub unit: Vec<f64>,
    /// The top principal direction as returned by the SVD.
    pub principal: Vec<f64>,
    /// Mean projection of the class rows onto `principal`.
    pub projection_mean: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelpicVectors {
    pub dim: usize,
    pub classes: Vec<ClassVector>,
}

impl VelpicVectors {
    /// The vectors stacked as rows, `C x d`.
    pub fn as_matrix(&self) -> Matrix {
        Matrix::from_rows(&self.classes.iter().map(|c| c.unit.clone()).collect::<Vec<_>>())
            .expect("fitted vectors are finite")
    }
}

/// Sign rule: `unit` is `principal` flipped when the class's mean
/// projection onto it is negative; a zero mean keeps it. The `invert`
/// switch exists only so the self-test can show it catches a broken rule.
pub(crate) fn velpic_from_spectra_with(spectra: &[ClassSpectrum], invert: bool) -> VelpicVectors {
    let dim = spectra.first().map_or(0, |s| s.directions.rows());
    let classes = spectra
        .iter()
        .map(|s| {
            let principal = s.directions.column(0);
            let flip = (s.top_projection_mean < 0.0) != invert;
            let unit = if flip { principal.iter().map(|v| -v).collect() } else { principal.clone() };
            ClassVector {
                class_id: s.class_id,
                unit,
                principal,
                projection_mean: s.top_projection_mean,
            }
        })
        .collect();
    VelpicVectors { dim, classes }
}

pub fn velpic_from_spectra(spectra: &[ClassSpectrum]) -> VelpicVectors {
    velpic_from_spectra_with(spectra, false)
}

pub fn fit_velpic(activations: &Matrix, labels: &[usize], class_count: usize) -> Result<VelpicVectors> {
    Ok(velpic_from_spectra(&class_spectra(activations, labels, class_count)?))
}

/// Scores `x . unit` per class; the largest wins.
pub fn velpic_predict(vectors: &VelpicVectors, x: &[f64]) -> Result<ProbeVerdict> {
    check_dim(vectors.dim, x.len())?;
    let scores = vectors.classes.iter().map(|c| dot(x, &c.unit)).collect();
    Ok(verdict(ProbeKind::Velpic, scores, false, x.iter().all(|v| *v == 0.0)))
}

impl Probe for VelpicVectors {
    fn kind(&self) -> ProbeKind {
        ProbeKind::Velpic
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn predict(&self, x: &[f64]) -> Result<ProbeVerdict> {
        velpic_predict(self, x)
    }
}

impl SubspaceSet {
    /// `SUBS` payload: u32 layer, u32 dim, u32 classes, then per class
    /// u32 class id, u32 k, f64 explained ratio, `dim x k` f64 basis
    /// (row-major).
    pub fn to_section(&self, layer: usize) -> Section {
        let mut w = ByteWriter::new();
        w.len_u32(layer);
        w.len_u32(self.dim);
        w.len_u32(self.subspaces.len());
        for s in &self.subspaces {
            w.len_u32(s.class_id);
            w.len_u32(s.basis.cols());
            w.f64(s.explained_variance_ratio);
            w.f64s(s.basis.as_slice());
        }
        Section::new(TAG_SUBSPACES, w.into_inner())
    }

    pub fn from_section(section: &Section) -> Result<(usize, Self)> {
        let mut r = ByteReader::new(&section.payload);
        let layer = r.len_u32("SUBS")?;
        let dim = r.len_u32("SUBS")?;
        let count = r.len_u32("SUBS")?;
        let mut subspaces = Vec::new();
        for _ in 0..count {
            let class_id = r.len_u32("SUBS")?;
            let k = r.len_u32("SUBS")?;
            let explained_variance_ratio = r.f64("SUBS")?;
            let basis = Matrix::from_vec(dim, k, r.f64s(dim * k, "SUBS")?)?;
            subspaces.push(ClassSubspace {
                class_id,
                basis,
                explained_variance_ratio,
            });
        }
        r.finish("SUBS")?;
        Ok((layer, Self { dim, subspaces }))
    }
}

impl VelpicVectors {
    /// `VELP` payload: u32 layer, u32 dim, u32 classes, then per class
    /// u32 class id, f64 projection mean, `dim` f64 unit, `dim` f64 principal.
    pub fn to_section(&self, layer: usize) -> Section {
        let mut w = ByteWriter::new();
        w.len_u32(layer);
        w.len_u32(self.dim);
        w.len_u32(self.classes.len());
        for c in &self.classes {
            w.len_u32(c.class_id);
            w.f64(c.projection_mean);
            w.f64s(&c.unit);
            w.f64s(&c.principal);
        }
        Section::new(TAG_VELPIC, w.into_inner())
    }

    pub fn from_section(section: &Section) -> Result<(usize, Self)> {
        let mut r = ByteReader::new(&section.payload);
        let layer = r.len_u32("VELP")?;
        let dim = r.len_u32("VELP")?;
        let count = r.len_u32("VELP")?;
        let mut classes = Vec::new();
        for _ in 0..count {
            let class_id = r.len_u32("VELP")?;
            let projection_mean = r.f64("VELP")?;
            let unit = r.f64s(dim, "VELP")?;
            let principal = r.f64s(dim, "VELP")?;
            classes.push(ClassVector {
                class_id,
                unit,
                principal,
                projection_mean,
            });
        }
        r.finish("VELP")?;
        Ok((layer, Self { dim, classes }))
    }
}
