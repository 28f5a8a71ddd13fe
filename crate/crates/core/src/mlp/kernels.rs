//! Batch forward and backward passes over row-major buffers.
//!
//! Hidden layers go through a single-threaded GEMM. The pre-softmax layer is
//! evaluated with [`dot_t`] per logit, so that a head whose rows are probe
//! vectors scores exactly as the probe does.

use crate::linalg::{dot_t, gemm, Real, View};

use super::{Dense, MlpParams};

/// `out[r, o] = <x[r, :], W[o, :]> + b[o]`, rectified when `relu` is set.
/// With `exact_dots` every entry is a [`dot_t`].
pub(crate) fn affine<T: Real>(layer: &Dense<T>, x: &[T], rows: usize, relu: bool, exact_dots: bool, out: &mut Vec<T>) {
    let (ni, no) = (layer.inputs, layer.outputs);
    assert_eq!(x.len(), rows * ni);
    out.clear();
    out.resize(rows * no, T::zero());
    if exact_dots {
        for (r, zr) in out.chunks_exact_mut(no).enumerate() {
            let xr = &x[r * ni..(r + 1) * ni];
            for (o, z) in zr.iter_mut().enumerate() {
                *z = dot_t(xr, layer.weight_row(o));
            }
        }
    } else {
        let w = View::row_major(&layer.weight, no, ni).t();
        gemm(T::one(), View::row_major(x, rows, ni), w, T::zero(), out);
    }
    for zr in out.chunks_exact_mut(no) {
        for (z, b) in zr.iter_mut().zip(&layer.bias) {
            *z += *b;
            if relu && !(*z > T::zero()) {
                *z = T::zero();
            }
        }
    }
}

/// Outputs of every layer for `rows` inputs: rectified hidden activations,
/// then the logits.
pub(crate) fn forward_batch<T: Real>(params: &MlpParams<T>, x: &[T], rows: usize) -> Vec<Vec<T>> {
    let last = params.layers.len() - 1;
    let mut outs: Vec<Vec<T>> = Vec::with_capacity(params.layers.len());
    for (k, layer) in params.layers.iter().enumerate() {
        let mut out = Vec::new();
        let input = if k == 0 { x } else { &outs[k - 1] };
        affine(layer, input, rows, k < last, k == last, &mut out);
        outs.push(out);
    }
    outs
}

/// Accumulates the layer gradient from output deltas `delta` (`rows x outputs`)
/// and layer input `input` (`rows x inputs`), and returns the delta with
/// respect to the input when `want_input_delta` is set.
pub(crate) fn backward_layer<T: Real>(
    layer: &Dense<T>,
    grad: &mut Dense<T>,
    input: &[T],
    delta: &[T],
    rows: usize,
    want_input_delta: bool,
) -> Option<Vec<T>> {
    let (ni, no) = (layer.inputs, layer.outputs);
    let d = View::row_major(delta, rows, no);
    // dW += delta^T X
    gemm(T::one(), d.t(), View::row_major(input, rows, ni), T::one(), &mut grad.weight);
    for dr in delta.chunks_exact(no) {
        for (g, v) in grad.bias.iter_mut().zip(dr) {
            *g += *v;
        }
    }
    if !want_input_delta {
        return None;
    }
    // dX = delta W
    let mut dx = vec![T::zero(); rows * ni];
    gemm(T::one(), d, View::row_major(&layer.weight, no, ni), T::zero(), &mut dx);
    Some(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Stream, StreamRng};

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = StreamRng::new(seed, Stream::Synth);
        (0..n).map(|_| rng.uniform() - 0.5).collect()
    }

    fn layer(ni: usize, no: usize, seed: u64) -> Dense<f64> {
        Dense {
            inputs: ni,
            outputs: no,
            weight: random(ni * no, seed),
            bias: random(no, seed + 100),
        }
    }

    #[test]
    fn exact_head_equals_plain_dots_bitwise() {
        let (rows, ni, no) = (5, 19, 7);
        let l = layer(ni, no, 1);
        let x = random(rows * ni, 2);
        let mut out = Vec::new();
        affine(&l, &x, rows, false, true, &mut out);
        for r in 0..rows {
            for o in 0..no {
                assert_eq!(out[r * no + o], dot_t(&x[r * ni..(r + 1) * ni], l.weight_row(o)) + l.bias[o]);
            }
        }
    }

    #[test]
    fn gemm_affine_matches_naive_sums() {
        let (rows, ni, no) = (9, 23, 6);
        let l = layer(ni, no, 3);
        let x = random(rows * ni, 4);
        let mut out = Vec::new();
        affine(&l, &x, rows, true, false, &mut out);
        for r in 0..rows {
            for o in 0..no {
                let s: f64 = (0..ni).map(|j| x[r * ni + j] * l.weight[o * ni + j]).sum::<f64>() + l.bias[o];
                assert!((out[r * no + o] - s.max(0.0)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn backward_matches_naive_sums() {
        let (rows, ni, no) = (6, 21, 5);
        let l = layer(ni, no, 5);
        let x = random(rows * ni, 6);
        let delta = random(rows * no, 7);
        let mut g = Dense::zeros(ni, no);
        let dx = backward_layer(&l, &mut g, &x, &delta, rows, true).unwrap();
        for o in 0..no {
            for j in 0..ni {
                let s: f64 = (0..rows).map(|r| delta[r * no + o] * x[r * ni + j]).sum();
                assert!((g.weight[o * ni + j] - s).abs() < 1e-14);
            }
            let sb: f64 = (0..rows).map(|r| delta[r * no + o]).sum();
            assert!((g.bias[o] - sb).abs() < 1e-14);
        }
        for r in 0..rows {
            for j in 0..ni {
                let s: f64 = (0..no).map(|o| delta[r * no + o] * l.weight[o * ni + j]).sum();
                assert!((dx[r * ni + j] - s).abs() < 1e-14);
            }
        }
    }
}
