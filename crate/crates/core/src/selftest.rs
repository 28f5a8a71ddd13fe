//! Built-in checks that run in seconds without a dataset on disk. The
//! `selftest` subcommand runs them, and so does the acceptance suite.

use crate::data::synth_mixture;
use crate::intervention::transfer_weights;
use crate::linalg::{dot, svd, Matrix};
use crate::mlp::{forward, grad_check, predict, MlpParams, MlpSpec};
use crate::probes::{
    class_spectra, fit_velpic, masc_predict, masc_predict_quadratic, velpic_from_spectra_with, ClassSubspace,
    Probe, SubspaceSet,
};
use crate::rng::{Stream, StreamRng};

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> CheckResult {
    CheckResult { name, passed, detail }
}

fn gaussian(rng: &mut StreamRng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

/// `d x k` with orthonormal columns.
pub fn random_basis(rng: &mut StreamRng, d: usize, k: usize) -> Matrix {
    svd(&gaussian(rng, d, k)).expect("gaussian matrix has an SVD").left
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgreementReport {
    pub instances: usize,
    /// Angle and quadratic forms picked different classes with a clear gap.
    pub disagreements: usize,
    /// Picks differed only because the top two scores agree to 1e-12.
    pub near_ties: usize,
}

/// Draws `instances` random problems (dimension 4 to 64, 2 to 6 classes,
/// each with its own rank in 1..=d) and compares the two MASC forms.
pub fn masc_agreement(instances: usize, seed: u64) -> AgreementReport {
    let mut rng = StreamRng::new(seed, Stream::Synth);
    let mut report = AgreementReport {
        instances,
        disagreements: 0,
        near_ties: 0,
    };
    for _ in 0..instances {
        let d = 4 + rng.below(61) as usize;
        let classes = 2 + rng.below(5) as usize;
        let subspaces = (0..classes)
            .map(|c| {
                let k = 1 + rng.below(d as u64) as usize;
                ClassSubspace {
                    class_id: c,
                    basis: random_basis(&mut rng, d, k),
                    explained_variance_ratio: 1.0,
                }
            })
            .collect();
        let set = SubspaceSet { dim: d, subspaces };
        let x: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let a = masc_predict(&set, &x).expect("dimensions match");
        let q = masc_predict_quadratic(&set, &x).expect("dimensions match");
        if a.predicted_class != q.predicted_class {
            let gap = (q.scores[q.predicted_class] - q.scores[a.predicted_class]).abs();
            if gap <= 1e-12 {
                report.near_ties += 1;
            } else {
                report.disagreements += 1;
            }
        }
    }
    report
}

/// Non-negative activations in a few classes, the kind a rectifier layer
/// produces.
fn activation_like(seed: u64) -> (Matrix, Vec<usize>) {
    let data = synth_mixture(4, 12, 40, 0.2, seed).expect("valid parameters");
    (data.inputs().clone(), data.labels().to_vec())
}

/// Every class vector must have a non-negative mean projection over its
/// own class. `invert` applies the deliberately broken sign rule.
pub fn orientation_holds(invert: bool, seed: u64) -> bool {
    let (acts, labels) = activation_like(seed);
    let spectra = class_spectra(&acts, &labels, 4).expect("classes are populated");
    let v = velpic_from_spectra_with(&spectra, invert);
    v.classes.iter().all(|cv| {
        let rows: Vec<&[f64]> = (0..acts.rows()).filter(|&i| labels[i] == cv.class_id).map(|i| acts.row(i)).collect();
        rows.iter().map(|x| dot(x, &cv.unit)).sum::<f64>() / rows.len() as f64 >= 0.0
    })
}

/// Correctness bit-vector of the edited network against that of the probe.
pub fn transfer_mismatches(seed: u64) -> usize {
    let data = synth_mixture(5, 10, 60, 0.15, seed).expect("valid parameters");
    let spec = MlpSpec::new(10, vec![16, 8], 5).expect("valid spec");
    let params = MlpParams::init(&spec, seed).expect("valid spec");
    let (_, acts) = forward(&params, data.inputs(), "train").expect("shapes match");
    let v = fit_velpic(acts.last(), data.labels(), 5).expect("classes are populated");
    let edited = transfer_weights(&params, &v).expect("vectors fit the head");
    let probe = v.predict_classes(acts.last()).expect("dimensions match");
    let model = predict(&edited, data.inputs()).expect("shapes match");
    probe
        .iter()
        .zip(&model)
        .zip(data.labels())
        .filter(|((p, m), y)| (p == y) != (m == y))
        .count()
}

pub fn run_all() -> Vec<CheckResult> {
    let mut out = Vec::new();

    let r = masc_agreement(2000, 1);
    out.push(check(
        "masc forms agree",
        r.disagreements == 0,
        format!("{} instances, {} disagreements, {} near ties", r.instances, r.disagreements, r.near_ties),
    ));

    let good = orientation_holds(false, 3);
    out.push(check("class vectors face their class", good, format!("sign rule holds: {good}")));
    let caught = !orientation_holds(true, 3);
    out.push(check(
        "broken sign rule is caught",
        caught,
        format!("inverted rule rejected: {caught}"),
    ));

    let m = transfer_mismatches(5);
    out.push(check("transfer matches probe", m == 0, format!("{m} mismatched test points")));

    let spec = MlpSpec::new(6, vec![5, 4], 3).expect("valid spec");
    let params = MlpParams::init(&spec, 9).expect("valid spec");
    let data = synth_mixture(3, 6, 4, 0.3, 9).expect("valid parameters");
    match grad_check(&params, data.inputs(), data.labels()) {
        Ok(g) => out.push(check(
            "gradients match finite differences",
            g.max_relative_error < 1e-5,
            format!("max relative error {:.3e} over {} parameters", g.max_relative_error, g.checked),
        )),
        Err(e) => out.push(check("gradients match finite differences", false, e.to_string())),
    }
    out
}
