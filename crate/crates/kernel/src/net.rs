use rand::Rng;

use crate::error::{shape_err, KernelError, Result};
use crate::layer::{Layer, LayerKind};
use crate::tensor::Tensor;

/// An ordered stack of layers applied to a flattened input.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedforwardNet {
    input_dims: Vec<usize>,
    layers: Vec<Layer>,
}

/// Activations recorded by a batched forward pass, needed for backward.
#[derive(Debug, Clone)]
pub struct Trace {
    rows: usize,
    /// `activations[0]` is the input, `activations[i + 1]` the output of layer `i`.
    activations: Vec<Vec<f64>>,
}

impl Trace {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("trace holds the input")
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    /// One entry per parameter tensor, in `params()` order; empty if not requested.
    pub params: Vec<Tensor>,
    /// `[n, input_width]`
    pub input: Tensor,
}

impl FeedforwardNet {
    pub fn new(input_dims: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let mut width = input_dims.iter().product::<usize>();
        if input_dims.is_empty() || width == 0 {
            return Err(KernelError::InvalidNet(format!(
                "bad input dims {input_dims:?}"
            )));
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.input_width() != width {
                return Err(KernelError::InvalidNet(format!(
                    "layer {i} ({}) expects width {} but receives {width}",
                    layer.kind().name(),
                    layer.input_width()
                )));
            }
            if layer.kind() == LayerKind::Softmax && i + 1 != layers.len() {
                return Err(KernelError::InvalidNet(
                    "softmax may only be the final layer".into(),
                ));
            }
            width = layer.output_width();
        }
        Ok(Self { input_dims, layers })
    }

    /// `affine -> relu` per hidden width, then `affine(outputs)`, optionally softmax.
    pub fn mlp(
        input_dims: Vec<usize>,
        hidden: &[usize],
        outputs: usize,
        softmax: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut width: usize = input_dims.iter().product();
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(Layer::affine_init(width, h, rng));
            layers.push(Layer::Relu { width: h });
            width = h;
        }
        layers.push(Layer::affine_init(width, outputs, rng));
        if softmax {
            layers.push(Layer::Softmax { width: outputs });
        }
        Self::new(input_dims, layers)
    }

    pub fn input_dims(&self) -> &[usize] {
        &self.input_dims
    }

    pub fn input_width(&self) -> usize {
        self.input_dims.iter().product()
    }

    pub fn output_width(&self) -> usize {
        self.layers
            .last()
            .map(|l| l.output_width())
            .unwrap_or_else(|| self.input_width())
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn is_classifier(&self) -> bool {
        matches!(self.layers.last(), Some(Layer::Softmax { .. }))
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.dims() != self.input_dims.as_slice() && x.dims() != [self.input_width()] {
            return shape_err(format!(
                "net expects input {:?}, got {:?}",
                self.input_dims,
                x.dims()
            ));
        }
        Ok(())
    }

    fn check_batch(&self, xs: &Tensor) -> Result<usize> {
        if xs.rank() < 2 || xs.len() / xs.dims()[0] != self.input_width() {
            return shape_err(format!(
                "net expects batch rows of width {}, got {:?}",
                self.input_width(),
                xs.dims()
            ));
        }
        Ok(xs.dims()[0])
    }

    /// Single-sample forward pass; output is rank-1.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let out = self.run(x.data().to_vec(), 1);
        Tensor::new(vec![self.output_width()], out)
            .map_err(|_| KernelError::NonFinite("net forward"))
    }

    /// Forward pass over the rows of an `[n, ...]` batch; output is `[n, out]`.
    pub fn forward_batch(&self, xs: &Tensor) -> Result<Tensor> {
        let n = self.check_batch(xs)?;
        let out = self.run(xs.data().to_vec(), n);
        Tensor::new(vec![n, self.output_width()], out)
            .map_err(|_| KernelError::NonFinite("net forward"))
    }

    fn run(&self, mut act: Vec<f64>, n: usize) -> Vec<f64> {
        for layer in &self.layers {
            act = layer.forward_batch(&act, n);
        }
        act
    }

    pub fn trace_batch(&self, xs: &Tensor) -> Result<Trace> {
        let n = self.check_batch(xs)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(xs.data().to_vec());
        for layer in &self.layers {
            let next = layer.forward_batch(activations.last().unwrap(), n);
            activations.push(next);
        }
        if activations.last().unwrap().iter().any(|v| !v.is_finite()) {
            return Err(KernelError::NonFinite("net forward"));
        }
        Ok(Trace {
            rows: n,
            activations,
        })
    }

    /// Reverse-mode pass for a scalar loss whose gradient w.r.t. the net's
    /// outputs is `loss_grad` (`[n, out]`). Parameter gradients are summed
    /// over the batch.
    pub fn backward_batch(
        &self,
        trace: &Trace,
        loss_grad: &Tensor,
        want_params: bool,
    ) -> Result<Gradients> {
        let n = trace.rows;
        if loss_grad.len() != n * self.output_width() {
            return shape_err(format!(
                "loss gradient {:?} does not match {n} outputs of width {}",
                loss_grad.dims(),
                self.output_width()
            ));
        }
        let mut grad = loss_grad.data().to_vec();
        let mut param_grads: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let (pg, gi) = layer.backward_batch(
                &trace.activations[i],
                &trace.activations[i + 1],
                &grad,
                n,
                want_params,
            );
            param_grads.push(pg);
            grad = gi;
        }
        param_grads.reverse();
        let input = Tensor::new(vec![n, self.input_width()], grad)
            .map_err(|_| KernelError::NonFinite("net backward"))?;
        Ok(Gradients {
            params: param_grads.into_iter().flatten().collect(),
            input,
        })
    }

    /// Gradients of a scalar loss for one sample: `(param_grads, input_grad)`.
    /// The input gradient has the same dims as `x`.
    pub fn grad(&self, x: &Tensor, loss_grad: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        self.check_input(x)?;
        let batch = x.clone().reshape(vec![1, self.input_width()])?;
        let trace = self.trace_batch(&batch)?;
        let g = self.backward_batch(&trace, loss_grad, true)?;
        Ok((g.params, g.input.reshape(x.dims().to_vec())?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn identity_net_returns_input() {
        let net = FeedforwardNet::new(vec![3], vec![]).unwrap();
        let x = Tensor::vector(vec![0.1, -0.2, 0.3]).unwrap();
        assert_eq!(net.forward(&x).unwrap(), x);
    }

    #[test]
    fn rejects_broken_chains() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(0);
        let a = Layer::affine_init(4, 3, &mut rng);
        assert!(FeedforwardNet::new(vec![5], vec![a.clone()]).is_err());
        let bad = vec![a, Layer::Softmax { width: 3 }, Layer::Relu { width: 3 }];
        assert!(FeedforwardNet::new(vec![4], bad).is_err());
    }

    #[test]
    fn classifier_outputs_a_distribution() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        let net = FeedforwardNet::mlp(vec![2, 2, 3], &[8], 5, true, &mut rng).unwrap();
        let x = Tensor::from_fn(&[2, 2, 3], |i| (i as f64 * 0.37).sin()).unwrap();
        let y = net.forward(&x).unwrap();
        assert!((y.sum() - 1.0).abs() < 1e-12);
        assert!(y.data().iter().all(|&p| p > 0.0 && p <= 1.0));
        assert!(net.forward(&Tensor::zeros(&[4])).is_err());
    }
}
