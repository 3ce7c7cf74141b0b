//! Siamese similarity encoder: one tower embeds both members of a pair, and
//! training minimises the contrastive loss so that same-class inputs land
//! close together.

use std::path::Path;

use rand::seq::SliceRandom;
use reprog_kernel::{FeedforwardNet, OptimizerKind, OptimizerState, Tensor};

use crate::data::PairDataset;
use crate::error::{config_err, CoreError, Result};
use crate::{seeded_rng, streams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveSpec {
    pub margin: f64,
}

impl Default for ContrastiveSpec {
    fn default() -> Self {
        Self { margin: 1.0 }
    }
}

impl ContrastiveSpec {
    pub fn new(margin: f64) -> Result<Self> {
        if !(margin.is_finite() && margin > 0.0) {
            return config_err(format!("contrastive margin {margin} must be > 0"));
        }
        Ok(Self { margin })
    }
}

/// The two summands of the contrastive loss for one pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveTerms {
    /// `(1 - l) * DS^2 / 2`
    pub similar: f64,
    /// `l * max(0, z - DS)^2 / 2`
    pub dissimilar: f64,
}

impl ContrastiveTerms {
    pub fn total(&self) -> f64 {
        self.similar + self.dissimilar
    }
}

pub fn contrastive_terms(distance: f64, label: u8, spec: &ContrastiveSpec) -> Result<ContrastiveTerms> {
    match label {
        0 => Ok(ContrastiveTerms {
            similar: 0.5 * distance * distance,
            dissimilar: 0.0,
        }),
        1 => {
            let hinge = (spec.margin - distance).max(0.0);
            Ok(ContrastiveTerms {
                similar: 0.0,
                dissimilar: 0.5 * hinge * hinge,
            })
        }
        _ => Err(CoreError::InvalidInput(format!("pair label {label} is not 0 or 1"))),
    }
}

/// `d loss / d DS`
fn contrastive_slope(distance: f64, label: u8, spec: &ContrastiveSpec) -> f64 {
    if label == 0 {
        distance
    } else {
        -(spec.margin - distance).max(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderArch {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for EncoderArch {
    fn default() -> Self {
        Self {
            hidden: vec![256],
            embed_dim: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Coefficient `lambda` of the `lambda/2 * |theta|^2` term added to the loss.
    pub weight_decay: f64,
    pub optimizer: OptimizerKind,
    pub contrastive: ContrastiveSpec,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 32,
            lr: 1e-4,
            weight_decay: 1e-6,
            optimizer: OptimizerKind::rmsprop(),
            contrastive: ContrastiveSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderEpochLog {
    pub epoch: usize,
    /// Mean per-pair contrastive loss (without the decay term).
    pub loss: f64,
    pub mean_similar: f64,
    pub mean_dissimilar: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityEncoder {
    pub net: FeedforwardNet,
    pub contrastive: ContrastiveSpec,
    pub seed: u64,
    pub log: Vec<EncoderEpochLog>,
}

impl SimilarityEncoder {
    pub fn new(net: FeedforwardNet, contrastive: ContrastiveSpec) -> Result<Self> {
        if net.is_classifier() || net.output_width() == 0 {
            return Err(CoreError::InvalidInput(
                "encoder tower must end in an unnormalised embedding".into(),
            ));
        }
        Ok(Self {
            net,
            contrastive,
            seed: 0,
            log: Vec::new(),
        })
    }

    /// Untrained tower with the given architecture.
    pub fn init(input_dims: &[usize], arch: &EncoderArch, seed: u64) -> Result<Self> {
        if arch.embed_dim == 0 {
            return config_err("embedding dimension must be positive");
        }
        let mut rng = seeded_rng(seed, streams::ENCODER_INIT);
        let net = FeedforwardNet::mlp(input_dims.to_vec(), &arch.hidden, arch.embed_dim, false, &mut rng)?;
        let mut enc = Self::new(net, ContrastiveSpec::default())?;
        enc.seed = seed;
        Ok(enc)
    }

    pub fn embed_dim(&self) -> usize {
        self.net.output_width()
    }

    pub fn input_dims(&self) -> &[usize] {
        self.net.input_dims()
    }

    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.net.forward(x)?)
    }

    /// `[n, e]` embeddings of `xs`, one GEMM per layer.
    pub fn embed_batch<'a>(&self, xs: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
        let xs: Vec<&Tensor> = xs.into_iter().collect();
        for x in &xs {
            if x.dims() != self.input_dims() {
                return Err(CoreError::InvalidInput(format!(
                    "encoder expects {:?}, got {:?}",
                    self.input_dims(),
                    x.dims()
                )));
            }
        }
        if xs.is_empty() {
            return Err(CoreError::InvalidInput("nothing to embed".into()));
        }
        Ok(self.net.forward_batch(&Tensor::stack(xs)?)?)
    }

    pub fn pair_distance(&self, a: &Tensor, b: &Tensor) -> Result<f64> {
        if a.dims() != b.dims() {
            return Err(CoreError::InvalidInput("pair members differ in shape".into()));
        }
        let e = self.embed_batch([a, b])?;
        Ok(euclidean(e.row_slice(0), e.row_slice(1)))
    }

    pub fn contrastive_loss(&self, a: &Tensor, b: &Tensor, label: u8) -> Result<f64> {
        Ok(contrastive_terms(self.pair_distance(a, b)?, label, &self.contrastive)?.total())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.net.save_weights(path)?)
    }

    pub fn load(path: impl AsRef<Path>, contrastive: ContrastiveSpec) -> Result<Self> {
        Self::new(FeedforwardNet::load_weights(path)?, contrastive)
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Distances of every pair in `pairs`, embedding in chunks.
pub fn pair_distances(enc: &SimilarityEncoder, pairs: &PairDataset) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    let idx: Vec<usize> = (0..pairs.len()).collect();
    for chunk in idx.chunks(128) {
        let firsts = enc.embed_batch(chunk.iter().map(|&j| pairs.get(j).0))?;
        let seconds = enc.embed_batch(chunk.iter().map(|&j| pairs.get(j).1))?;
        for r in 0..chunk.len() {
            out.push(euclidean(firsts.row_slice(r), seconds.row_slice(r)));
        }
    }
    Ok(out)
}

/// Mean contrastive loss over `batch` plus `lambda/2 * |theta|^2`, and its
/// gradient w.r.t. every parameter tensor of `net`.
pub fn contrastive_objective(
    net: &FeedforwardNet,
    pairs: &PairDataset,
    batch: &[usize],
    spec: &ContrastiveSpec,
    weight_decay: f64,
) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(CoreError::InvalidInput("empty pair batch".into()));
    }
    let n = batch.len();
    let members = batch
        .iter()
        .map(|&j| pairs.get(j).0)
        .chain(batch.iter().map(|&j| pairs.get(j).1));
    let trace = net.trace_batch(&Tensor::stack(members)?)?;
    let e = net.output_width();
    let out = trace.output();
    let mut grad = vec![0.0; 2 * n * e];
    let mut loss = 0.0;
    for (r, &j) in batch.iter().enumerate() {
        let label = pairs.get(j).2;
        let (ea, eb) = (&out[r * e..(r + 1) * e], &out[(n + r) * e..(n + r + 1) * e]);
        let ds = euclidean(ea, eb);
        loss += contrastive_terms(ds, label, spec)?.total();
        let slope = contrastive_slope(ds, label, spec);
        // subgradient 0 at coincident embeddings
        if ds > 0.0 && slope != 0.0 {
            let s = slope / (ds * n as f64);
            for k in 0..e {
                let diff = ea[k] - eb[k];
                grad[r * e + k] = s * diff;
                grad[(n + r) * e + k] = -s * diff;
            }
        }
    }
    let mut g = net
        .backward_batch(&trace, &Tensor::new(vec![2 * n, e], grad)?, true)?
        .params;
    let mut decay = 0.0;
    for (gp, p) in g.iter_mut().zip(net.params()) {
        decay += p.data().iter().map(|v| v * v).sum::<f64>();
        gp.axpy(weight_decay, p)?;
    }
    Ok((loss / n as f64 + 0.5 * weight_decay * decay, g))
}

/// Trains one tower on both members of every pair.
pub fn train_encoder(
    pairs: &PairDataset,
    arch: &EncoderArch,
    cfg: &EncoderTrainConfig,
    seed: u64,
) -> Result<SimilarityEncoder> {
    if pairs.is_empty() {
        return config_err("encoder training needs at least one pair");
    }
    if cfg.batch == 0 {
        return config_err("batch size must be positive");
    }
    let dims = pairs.get(0).0.dims().to_vec();
    let mut enc = SimilarityEncoder::init(&dims, arch, seed)?;
    enc.contrastive = cfg.contrastive;
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr);
    let mut rng = seeded_rng(seed, streams::ENCODER_SHUFFLE);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let (loss, grads) =
                contrastive_objective(&enc.net, pairs, chunk, &cfg.contrastive, cfg.weight_decay)?;
            if !loss.is_finite() {
                return Err(CoreError::Numeric(format!("encoder loss {loss} at epoch {epoch}")));
            }
            opt.step(enc.net.params_mut(), &grads)
                .map_err(|e| CoreError::Numeric(format!("encoder training diverged: {e}")))?;
        }
        let summary = summarize(&enc, pairs)?;
        enc.log.push(EncoderEpochLog { epoch, ..summary });
    }
    Ok(enc)
}

fn summarize(enc: &SimilarityEncoder, pairs: &PairDataset) -> Result<EncoderEpochLog> {
    let ds = pair_distances(enc, pairs)?;
    let (mut loss, mut sim, mut dis) = (0.0, (0.0, 0usize), (0.0, 0usize));
    for (j, &d) in ds.iter().enumerate() {
        let label = pairs.get(j).2;
        loss += contrastive_terms(d, label, &enc.contrastive)?.total();
        let slot = if label == 0 { &mut sim } else { &mut dis };
        slot.0 += d;
        slot.1 += 1;
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { f64::NAN } else { s / n as f64 };
    Ok(EncoderEpochLog {
        epoch: 0,
        loss: loss / ds.len() as f64,
        mean_similar: mean(sim),
        mean_dissimilar: mean(dis),
    })
}

/// Mean distance over similar pairs and over dissimilar pairs.
pub fn mean_distances(enc: &SimilarityEncoder, pairs: &PairDataset) -> Result<(f64, f64)> {
    let s = summarize(enc, pairs)?;
    Ok((s.mean_similar, s.mean_dissimilar))
}

/// Fraction of pairs classified correctly by "similar iff DS < z/2".
pub fn encoder_pair_accuracy(enc: &SimilarityEncoder, pairs: &PairDataset, spec: &ContrastiveSpec) -> Result<f64> {
    if pairs.is_empty() {
        return Err(CoreError::InvalidInput("pair accuracy of an empty set".into()));
    }
    let ds = pair_distances(enc, pairs)?;
    let correct = ds
        .iter()
        .enumerate()
        .filter(|(j, &d)| (d < spec.margin / 2.0) == (pairs.get(*j).2 == 0))
        .count();
    Ok(correct as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn contrastive_cases() {
        let z = ContrastiveSpec::default();
        assert_eq!(contrastive_terms(0.0, 0, &z).unwrap().total(), 0.0);
        assert_eq!(contrastive_terms(1.0, 1, &z).unwrap().total(), 0.0);
        assert_eq!(contrastive_terms(2.5, 1, &z).unwrap().total(), 0.0);
        assert_eq!(contrastive_terms(0.0, 1, &z).unwrap().total(), 0.5);
        assert!(contrastive_terms(0.3, 2, &z).is_err());
        assert!(ContrastiveSpec::new(0.0).is_err());
    }

    #[test]
    fn terms_vanish_by_label() {
        let z = ContrastiveSpec::new(1.5).unwrap();
        for d in [0.0, 0.2, 1.0, 1.4, 3.0] {
            assert_eq!(contrastive_terms(d, 0, &z).unwrap().dissimilar, 0.0);
            assert_eq!(contrastive_terms(d, 1, &z).unwrap().similar, 0.0);
        }
    }
}
