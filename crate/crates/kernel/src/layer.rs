//! The closed set of layer kinds, each with a hand-written backward pass.
//!
//! All batched entry points take row-major `[n, width]` buffers.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{shape_err, Result};
use crate::gemm::{gemm, MatRef};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Affine,
    Relu,
    Tanh,
    Softmax,
    AvgPool,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Affine => "affine",
            LayerKind::Relu => "relu",
            LayerKind::Tanh => "tanh",
            LayerKind::Softmax => "softmax",
            LayerKind::AvgPool => "avgpool",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    /// `y = W x + b` with `weight` shaped `[out, in]` and `bias` `[out]`.
    Affine { weight: Tensor, bias: Tensor },
    Relu { width: usize },
    Tanh { width: usize },
    Softmax { width: usize },
    /// Non-overlapping `window x window` spatial mean over an HWC image.
    AvgPool {
        height: usize,
        width: usize,
        channels: usize,
        window: usize,
    },
}

impl Layer {
    pub fn affine(weight: Tensor, bias: Tensor) -> Result<Self> {
        if weight.rank() != 2 || bias.rank() != 1 || weight.dims()[0] != bias.len() {
            return shape_err(format!(
                "affine weight {:?} incompatible with bias {:?}",
                weight.dims(),
                bias.dims()
            ));
        }
        Ok(Layer::Affine { weight, bias })
    }

    /// He-normal weights, zero bias.
    pub fn affine_init(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / inputs as f64).sqrt()).expect("valid std");
        let weight = Tensor::from_fn(&[outputs, inputs], |_| normal.sample(rng)).expect("dims");
        Layer::Affine {
            weight,
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn avg_pool(height: usize, width: usize, channels: usize, window: usize) -> Result<Self> {
        if window == 0 || height % window != 0 || width % window != 0 || channels == 0 {
            return shape_err(format!(
                "pool window {window} does not tile {height}x{width}x{channels}"
            ));
        }
        Ok(Layer::AvgPool {
            height,
            width,
            channels,
            window,
        })
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Affine { .. } => LayerKind::Affine,
            Layer::Relu { .. } => LayerKind::Relu,
            Layer::Tanh { .. } => LayerKind::Tanh,
            Layer::Softmax { .. } => LayerKind::Softmax,
            Layer::AvgPool { .. } => LayerKind::AvgPool,
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            Layer::Affine { weight, .. } => weight.dims()[1],
            Layer::Relu { width } | Layer::Tanh { width } | Layer::Softmax { width } => *width,
            Layer::AvgPool {
                height,
                width,
                channels,
                ..
            } => height * width * channels,
        }
    }

    pub fn output_width(&self) -> usize {
        match self {
            Layer::Affine { weight, .. } => weight.dims()[0],
            Layer::AvgPool {
                height,
                width,
                channels,
                window,
            } => (height / window) * (width / window) * channels,
            _ => self.input_width(),
        }
    }

    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Layer::Affine { weight, bias } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Affine { weight, bias } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    /// Forward pass over `n` rows.
    pub fn forward_batch(&self, input: &[f64], n: usize) -> Vec<f64> {
        let win = self.input_width();
        let wout = self.output_width();
        debug_assert_eq!(input.len(), n * win);
        match self {
            Layer::Affine { weight, bias } => {
                let mut out = Vec::with_capacity(n * wout);
                for _ in 0..n {
                    out.extend_from_slice(bias.data());
                }
                gemm(
                    MatRef::row_major(input, n, win),
                    MatRef::row_major(weight.data(), wout, win).t(),
                    1.0,
                    &mut out,
                );
                out
            }
            Layer::Relu { .. } => input.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
            Layer::Tanh { .. } => input.iter().map(|v| v.tanh()).collect(),
            Layer::Softmax { .. } => {
                let mut out = input.to_vec();
                for row in out.chunks_mut(win) {
                    softmax_in_place(row);
                }
                out
            }
            Layer::AvgPool {
                height,
                width,
                channels,
                window,
            } => {
                let (oh, ow, c) = (height / window, width / window, *channels);
                let norm = 1.0 / (window * window) as f64;
                let mut out = vec![0.0; n * wout];
                for r in 0..n {
                    let src = &input[r * win..(r + 1) * win];
                    let dst = &mut out[r * wout..(r + 1) * wout];
                    for i in 0..*height {
                        for j in 0..*width {
                            let o = ((i / window) * ow + j / window) * c;
                            let s = (i * width + j) * c;
                            for ch in 0..c {
                                dst[o + ch] += src[s + ch] * norm;
                            }
                        }
                    }
                    debug_assert_eq!(oh * ow * c, wout);
                }
                out
            }
        }
    }

    /// Backward pass over `n` rows given this layer's `input` and `output`.
    ///
    /// Returns parameter gradients summed over the batch (empty when
    /// `want_params` is false or the layer has none) and the input gradient.
    pub fn backward_batch(
        &self,
        input: &[f64],
        output: &[f64],
        grad_out: &[f64],
        n: usize,
        want_params: bool,
    ) -> (Vec<Tensor>, Vec<f64>) {
        let win = self.input_width();
        let wout = self.output_width();
        debug_assert_eq!(grad_out.len(), n * wout);
        match self {
            Layer::Affine { weight, .. } => {
                let mut grad_in = vec![0.0; n * win];
                gemm(
                    MatRef::row_major(grad_out, n, wout),
                    MatRef::row_major(weight.data(), wout, win),
                    0.0,
                    &mut grad_in,
                );
                let params = if want_params {
                    let mut gw = vec![0.0; wout * win];
                    gemm(
                        MatRef::row_major(grad_out, n, wout).t(),
                        MatRef::row_major(input, n, win),
                        0.0,
                        &mut gw,
                    );
                    let mut gb = vec![0.0; wout];
                    for row in grad_out.chunks(wout) {
                        for (b, g) in gb.iter_mut().zip(row) {
                            *b += g;
                        }
                    }
                    vec![
                        Tensor::new(vec![wout, win], gw).expect("finite grads"),
                        Tensor::new(vec![wout], gb).expect("finite grads"),
                    ]
                } else {
                    Vec::new()
                };
                (params, grad_in)
            }
            // Subgradient 0 at exactly 0.
            Layer::Relu { .. } => (
                Vec::new(),
                input
                    .iter()
                    .zip(grad_out)
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect(),
            ),
            Layer::Tanh { .. } => (
                Vec::new(),
                output
                    .iter()
                    .zip(grad_out)
                    .map(|(&y, &g)| (1.0 - y * y) * g)
                    .collect(),
            ),
            Layer::Softmax { .. } => {
                let mut grad_in = Vec::with_capacity(n * win);
                for (y, g) in output.chunks(win).zip(grad_out.chunks(win)) {
                    let inner: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    grad_in.extend(y.iter().zip(g).map(|(yi, gi)| yi * (gi - inner)));
                }
                (Vec::new(), grad_in)
            }
            Layer::AvgPool {
                height,
                width,
                channels,
                window,
            } => {
                let (ow, c) = (width / window, *channels);
                let norm = 1.0 / (window * window) as f64;
                let mut grad_in = vec![0.0; n * win];
                for r in 0..n {
                    let g = &grad_out[r * wout..(r + 1) * wout];
                    let dst = &mut grad_in[r * win..(r + 1) * win];
                    for i in 0..*height {
                        for j in 0..*width {
                            let o = ((i / window) * ow + j / window) * c;
                            let s = (i * width + j) * c;
                            for ch in 0..c {
                                dst[s + ch] = g[o + ch] * norm;
                            }
                        }
                    }
                }
                (Vec::new(), grad_in)
            }
        }
    }
}

/// Numerically stable softmax.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
