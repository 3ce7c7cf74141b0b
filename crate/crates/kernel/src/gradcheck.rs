//! Central finite-difference checking of hand-written gradients.

use crate::error::Result;
use crate::layer::Layer;
use crate::net::FeedforwardNet;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-4;
/// Parameter coordinates probed per tensor; inputs are always probed in full.
const PARAM_PROBES: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub input_error: f64,
    pub param_error: f64,
    pub passed: bool,
}

/// `|analytic - numeric| / max(1, |numeric|)`, maximised over coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / n.abs().max(1.0))
        .fold(0.0, f64::max)
}

/// Central differences of `f` at `x` for the given coordinates. `f_batch`
/// evaluates the scalar function on every row of an `[m, len(x)]` matrix.
pub fn central_differences(
    f_batch: impl Fn(&Tensor) -> Vec<f64>,
    x: &[f64],
    coords: &[usize],
    step: f64,
) -> Vec<f64> {
    if coords.is_empty() {
        return Vec::new();
    }
    let w = x.len();
    let mut rows = Vec::with_capacity(2 * coords.len() * w);
    for &c in coords {
        for sign in [1.0, -1.0] {
            let start = rows.len();
            rows.extend_from_slice(x);
            rows[start + c] += sign * step;
        }
    }
    let batch = Tensor::new(vec![2 * coords.len(), w], rows).expect("finite probes");
    let values = f_batch(&batch);
    values
        .chunks(2)
        .map(|pair| (pair[0] - pair[1]) / (2.0 * step))
        .collect()
}

/// Projection weights turning a vector output into a scalar test loss.
fn projection(width: usize) -> Vec<f64> {
    (0..width).map(|j| ((j + 1) as f64).cos()).collect()
}

fn probe_coords(len: usize, max: usize) -> Vec<usize> {
    if len <= max {
        (0..len).collect()
    } else {
        let stride = len as f64 / max as f64;
        (0..max).map(|i| (i as f64 * stride) as usize).collect()
    }
}

fn has_relu_input_at_zero(net: &FeedforwardNet, x: &Tensor) -> Result<bool> {
    let batch = x.clone().reshape(vec![1, x.len()])?;
    let mut act = batch.into_data();
    for layer in net.layers() {
        if matches!(layer, Layer::Relu { .. }) && act.iter().any(|&v| v == 0.0) {
            return Ok(true);
        }
        act = layer.forward_batch(&act, 1);
    }
    Ok(false)
}

/// Compare the analytic gradients of `L(x) = sum_j r_j y_j(x)` (fixed
/// projection `r`) against central differences, for the input and for a
/// strided sample of every parameter tensor.
pub fn finite_diff_check(net: &FeedforwardNet, x: &Tensor, tolerance: f64) -> Result<GradCheckReport> {
    let mut x = x.clone();
    if has_relu_input_at_zero(net, &x)? {
        x = x.map(|v| v + 1e-7);
    }
    let r = projection(net.output_width());
    let loss_grad = Tensor::new(vec![1, r.len()], r.clone())?;
    let (param_grads, input_grad) = net.grad(&x, &loss_grad)?;

    let scalar_rows = |out: Tensor| -> Vec<f64> {
        let w = r.len();
        out.data()
            .chunks(w)
            .map(|row| row.iter().zip(&r).map(|(a, b)| a * b).sum())
            .collect()
    };

    let coords: Vec<usize> = (0..x.len()).collect();
    let numeric = central_differences(
        |b| scalar_rows(net.forward_batch(b).expect("checked shape")),
        x.data(),
        &coords,
        DEFAULT_STEP,
    );
    let input_error = max_relative_error(input_grad.data(), &numeric);

    let mut param_error: f64 = 0.0;
    let x_row = x.clone().reshape(vec![1, x.len()])?;
    for (p, analytic) in param_grads.iter().enumerate() {
        let coords = probe_coords(analytic.len(), PARAM_PROBES);
        let mut numeric = Vec::with_capacity(coords.len());
        for &c in &coords {
            let mut vals = [0.0; 2];
            for (slot, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut perturbed = net.clone();
                perturbed.params_mut()[p].data_mut()[c] += sign * DEFAULT_STEP;
                vals[slot] = scalar_rows(perturbed.forward_batch(&x_row)?)[0];
            }
            numeric.push((vals[0] - vals[1]) / (2.0 * DEFAULT_STEP));
        }
        let picked: Vec<f64> = coords.iter().map(|&c| analytic.data()[c]).collect();
        param_error = param_error.max(max_relative_error(&picked, &numeric));
    }

    let max_relative_error = input_error.max(param_error);
    Ok(GradCheckReport {
        max_relative_error,
        input_error,
        param_error,
        passed: max_relative_error < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_net_has_zero_error() {
        let net = FeedforwardNet::new(vec![4], vec![]).unwrap();
        let x = Tensor::vector(vec![0.1, 0.2, -0.3, 0.4]).unwrap();
        let report = finite_diff_check(&net, &x, 1e-5).unwrap();
        assert!(report.max_relative_error < 1e-10, "{report:?}");
        assert!(report.passed);
    }

    #[test]
    fn detects_a_corrupted_gradient() {
        // f(x) = sum x_i^3, true gradient 3 x_i^2; corrupt one coordinate.
        let x = [0.5, -1.0, 2.0];
        let f = |b: &Tensor| -> Vec<f64> {
            b.data().chunks(3).map(|r| r.iter().map(|v| v * v * v).sum()).collect()
        };
        let numeric = central_differences(f, &x, &[0, 1, 2], DEFAULT_STEP);
        let mut analytic: Vec<f64> = x.iter().map(|v| 3.0 * v * v).collect();
        assert!(max_relative_error(&analytic, &numeric) < 1e-7);
        analytic[1] *= 1.1;
        assert!(max_relative_error(&analytic, &numeric) > 1e-2);
    }
}
