use crate::linalg::Matrix;

use super::train::batch_gradients;
use super::{forward, MlpError, MlpParams};

/// Central-difference step.
const STEP: f64 = 1e-4;

/// Each retry divides the step by 10 when the two probes straddle a ReLU
/// kink, where the difference quotient is meaningless.
const KINK_RETRIES: usize = 3;

/// Magnitude below which a gradient entry is compared absolutely.
const FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Entries that still crossed a kink at the smallest step; not compared.
    pub skipped_kinks: usize,
}

fn relu_pattern(p: &MlpParams<f64>, inputs: &Matrix) -> Result<Vec<bool>, MlpError> {
    let (_, acts) = forward(p, inputs, "gradcheck")?;
    Ok(acts.layers.iter().flat_map(|m| m.as_slice().iter().map(|v| *v > 0.0)).collect())
}

/// Compares backpropagated gradients with central finite differences over
/// every parameter. Meant for small networks; the cost is two batch losses
/// per parameter.
///
/// The relative error of an entry is `|a - n| / max(|a|, |n|, FLOOR)`.
/// Steps that change which hidden units are active are shrunk first.
pub fn grad_check(params: &MlpParams<f64>, inputs: &Matrix, labels: &[usize]) -> Result<GradCheckReport, MlpError> {
    params.check_shapes()?;
    if inputs.cols() != params.spec.input_dim {
        return Err(MlpError::InputWidth {
            expected: params.spec.input_dim,
            got: inputs.cols(),
        });
    }
    let x = inputs.as_slice();
    let (_, analytic) = batch_gradients(params, x, labels);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        skipped_kinks: 0,
    };
    for k in 0..params.layers.len() {
        let n_w = params.layers[k].weight.len();
        for idx in 0..n_w + params.layers[k].bias.len() {
            let (orig, a) = if idx < n_w {
                (params.layers[k].weight[idx], analytic.layers[k].weight[idx])
            } else {
                (params.layers[k].bias[idx - n_w], analytic.layers[k].bias[idx - n_w])
            };
            let mut step = STEP;
            let mut smooth = false;
            for _ in 0..=KINK_RETRIES {
                set_entry(&mut probe, k, idx, n_w, orig + step);
                let up = relu_pattern(&probe, inputs)?;
                set_entry(&mut probe, k, idx, n_w, orig - step);
                let down = relu_pattern(&probe, inputs)?;
                if up == down {
                    smooth = true;
                    break;
                }
                step /= 10.0;
            }
            if !smooth {
                set_entry(&mut probe, k, idx, n_w, orig);
                report.skipped_kinks += 1;
                continue;
            }
            set_entry(&mut probe, k, idx, n_w, orig + step);
            let plus = batch_gradients(&probe, x, labels).0;
            set_entry(&mut probe, k, idx, n_w, orig - step);
            let minus = batch_gradients(&probe, x, labels).0;
            set_entry(&mut probe, k, idx, n_w, orig);
            let numeric = (plus - minus) / (2.0 * step);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(FLOOR);
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_relative_error = report.max_relative_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

fn set_entry(p: &mut MlpParams<f64>, k: usize, idx: usize, n_w: usize, v: f64) {
    if idx < n_w {
        p.layers[k].weight[idx] = v;
    } else {
        p.layers[k].bias[idx - n_w] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{softmax, MlpSpec};

    #[test]
    fn steps_across_a_kink_are_shrunk() {
        // at the default step one difference straddles a kink in FC2
        let spec = MlpSpec::new(8, vec![12, 10], 4).unwrap();
        let p = MlpParams::<f64>::init(&spec, 13).unwrap();
        let data = crate::data::synth_mixture(4, 8, 5, 0.3, 13).unwrap();
        let r = grad_check(&p, data.inputs(), data.labels()).unwrap();
        assert_eq!((r.checked, r.skipped_kinks), (spec.parameter_count(), 0));
        assert!(r.max_relative_error < 1e-5, "{r:?}");
    }

    #[test]
    fn zero_input_bias_gradient_is_closed_form() {
        let spec = MlpSpec::new(3, vec![4], 5).unwrap();
        let p = MlpParams::<f64>::init(&spec, 1).unwrap();
        let (_, g) = batch_gradients(&p, &[0.0; 3], &[2]);
        let mut expected = softmax(&[0.0; 5]);
        expected[2] -= 1.0;
        assert_eq!(g.head().bias, expected);
    }
}
