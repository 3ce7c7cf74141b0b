//! The adversarial program `delta = tanh(W) * M`, multiple label mapping,
//! focal loss, and the white-box reprogramming loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use reprog_kernel::io::{load_tensors, save_tensors};
use reprog_kernel::Tensor;

use crate::data::{LabeledDataset, PaddingSpec};
use crate::error::{config_err, CoreError, Result};
use crate::models::{Classifier, QueryChannel, QueryObserver};
use crate::{seeded_rng, streams};

/// Adversarial program parameters `W` with the binary frame mask `M`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialProgram {
    w: Tensor,
    mask: Tensor,
}

impl AdversarialProgram {
    pub fn new(w: Tensor, mask: Tensor) -> Result<Self> {
        w.same_shape(&mask)?;
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(CoreError::InvalidInput("program mask is not binary".into()));
        }
        Ok(Self { w, mask })
    }

    /// `W ~ U[-0.01, 0.01]` drawn from the run seed.
    pub fn random(spec: &PaddingSpec, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, streams::PROGRAM_INIT);
        let w = Tensor::from_fn(&spec.outer_dims(), |_| rng.random_range(-0.01..=0.01)).unwrap();
        Self {
            w,
            mask: spec.mask(),
        }
    }

    pub fn w(&self) -> &Tensor {
        &self.w
    }

    pub fn mask(&self) -> &Tensor {
        &self.mask
    }

    pub fn dims(&self) -> &[usize] {
        self.w.dims()
    }

    /// `delta = tanh(W) * M`, recomputed on every call.
    pub fn delta(&self) -> Tensor {
        self.w
            .zip_map(&self.mask, |w, m| w.tanh() * m)
            .expect("shapes checked at construction")
    }

    /// Gradient w.r.t. `W` from a gradient w.r.t. the programmed input.
    pub fn chain_rule(&self, input_grad: &Tensor) -> Result<Tensor> {
        input_grad.same_shape(&self.w)?;
        let data = input_grad
            .data()
            .iter()
            .zip(self.w.data())
            .zip(self.mask.data())
            .map(|((g, w), m)| {
                let t = w.tanh();
                g * m * (1.0 - t * t)
            })
            .collect();
        Ok(Tensor::new(self.w.dims().to_vec(), data)?)
    }

    /// `W -= lr * grad`
    pub fn step(&mut self, grad: &Tensor, lr: f64) -> Result<()> {
        reprog_kernel::sgd_step(&mut self.w, grad, lr)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_tensors(
            path,
            &[("W".to_string(), self.w.clone()), ("M".to_string(), self.mask.clone())],
        )?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let tensors = load_tensors(path)?;
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| CoreError::InvalidInput(format!("program file lacks tensor {name}")))
        };
        Self::new(find("W")?, find("M")?)
    }
}

pub fn program_delta(prog: &AdversarialProgram) -> Tensor {
    prog.delta()
}

/// Zero-pad a target sample and add the program.
pub fn apply_program(x: &Tensor, prog: &AdversarialProgram, spec: &PaddingSpec) -> Result<Tensor> {
    if prog.dims() != spec.outer_dims() {
        return Err(CoreError::InvalidInput(format!(
            "program dims {:?} do not match padding {:?}",
            prog.dims(),
            spec.outer_dims()
        )));
    }
    Ok(spec.pad(x)?.add(&prog.delta())?)
}

fn apply_with_delta(x: &Tensor, delta: &Tensor, spec: &PaddingSpec) -> Result<Tensor> {
    Ok(spec.pad(x)?.add(delta)?)
}

/// Each target label owns a disjoint group of source labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMapping {
    groups: Vec<Vec<usize>>,
    num_source: usize,
}

impl LabelMapping {
    pub fn new(groups: Vec<Vec<usize>>, num_source: usize) -> Result<Self> {
        let size = groups.first().map(Vec::len).unwrap_or(0);
        if groups.is_empty() || size == 0 {
            return config_err("label mapping needs at least one non-empty group");
        }
        let mut seen = vec![false; num_source];
        for g in &groups {
            if g.len() != size {
                return config_err("label mapping groups must share one size");
            }
            for &k in g {
                if k >= num_source || std::mem::replace(&mut seen[k], true) {
                    return config_err(format!("source label {k} repeated or out of range"));
                }
            }
        }
        Ok(Self { groups, num_source })
    }

    /// Consecutive blocks: target `y` owns `y*size .. (y+1)*size`.
    pub fn consecutive(num_source: usize, num_target: usize, group_size: usize) -> Result<Self> {
        if num_target * group_size > num_source {
            return config_err(format!(
                "{num_target} groups of {group_size} exceed {num_source} source labels"
            ));
        }
        let groups = (0..num_target)
            .map(|y| (y * group_size..(y + 1) * group_size).collect())
            .collect();
        Self::new(groups, num_source)
    }

    pub fn num_target(&self) -> usize {
        self.groups.len()
    }

    pub fn num_source(&self) -> usize {
        self.num_source
    }

    pub fn group_size(&self) -> usize {
        self.groups[0].len()
    }

    pub fn group(&self, y: usize) -> &[usize] {
        &self.groups[y]
    }

    /// `(target_label, source_label)` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("target_label,source_label\n");
        for (y, g) in self.groups.iter().enumerate() {
            for k in g {
                out.push_str(&format!("{y},{k}\n"));
            }
        }
        out
    }

    pub fn from_csv(text: &str, num_source: usize) -> Result<Self> {
        let mut groups: Vec<Vec<usize>> = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let bad = || CoreError::InvalidInput(format!("mapping line {}: {line:?}", i + 1));
            let (y, k) = line.split_once(',').ok_or_else(bad)?;
            let y: usize = y.trim().parse().map_err(|_| bad())?;
            let k: usize = k.trim().parse().map_err(|_| bad())?;
            if groups.len() <= y {
                groups.resize(y + 1, Vec::new());
            }
            groups[y].push(k);
        }
        Self::new(groups, num_source)
    }
}

/// Mean source score over the group of target label `y`.
pub fn mlm_score(scores: &Tensor, mapping: &LabelMapping, y: usize) -> Result<f64> {
    if y >= mapping.num_target() {
        return Err(CoreError::InvalidInput(format!(
            "target label {y} outside 0..{}",
            mapping.num_target()
        )));
    }
    if scores.len() != mapping.num_source() {
        return Err(CoreError::InvalidInput(format!(
            "{} scores for {} source labels",
            scores.len(),
            mapping.num_source()
        )));
    }
    let g = mapping.group(y);
    Ok(g.iter().map(|&k| scores.data()[k]).sum::<f64>() / g.len() as f64)
}

pub const FOCAL_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FocalLoss {
    pub gamma: f64,
}

impl Default for FocalLoss {
    fn default() -> Self {
        Self { gamma: 2.0 }
    }
}

impl FocalLoss {
    pub fn new(gamma: f64) -> Result<Self> {
        if !gamma.is_finite() || gamma < 0.0 {
            return config_err(format!("focal exponent {gamma} must be finite and >= 0"));
        }
        Ok(Self { gamma })
    }

    fn check(p: f64) -> Result<f64> {
        if !(p <= 1.0) {
            return Err(CoreError::InvalidInput(format!("probability {p} > 1")));
        }
        Ok(p.max(FOCAL_CLAMP))
    }

    /// `-(1 - p)^gamma * ln p`, with `p` clamped to at least 1e-12.
    pub fn loss(&self, p: f64) -> Result<f64> {
        let p = Self::check(p)?;
        Ok(-(1.0 - p).powf(self.gamma) * p.ln())
    }

    /// `d loss / d p`; zero inside the clamped region.
    pub fn derivative(&self, p: f64) -> Result<f64> {
        let raw = p;
        let p = Self::check(p)?;
        if raw < FOCAL_CLAMP {
            return Ok(0.0);
        }
        let q = 1.0 - p;
        let focus = if self.gamma == 0.0 || q == 0.0 {
            0.0
        } else {
            self.gamma * q.powf(self.gamma - 1.0) * p.ln()
        };
        Ok(focus - q.powf(self.gamma) / p)
    }
}

pub fn focal_loss(p: f64, spec: &FocalLoss) -> Result<f64> {
    spec.loss(p)
}

/// Anything that answers score queries for a batch of programmed inputs.
pub trait ScoreOracle {
    fn scores(&mut self, xs: &[Tensor]) -> Result<Vec<Tensor>>;
}

impl ScoreOracle for &Classifier {
    fn scores(&mut self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        self.scores_many(xs)
    }
}

/// A channel bound to one account; fails if the account gets blocked.
pub struct AccountOracle<'c, 'm, O: QueryObserver> {
    pub channel: &'c mut QueryChannel<'m, O>,
    pub account: crate::models::AccountId,
}

impl<O: QueryObserver> ScoreOracle for AccountOracle<'_, '_, O> {
    fn scores(&mut self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        let answer = self.channel.predict_batch(self.account, xs)?;
        if answer.scores.len() < xs.len() {
            return Err(CoreError::Blocked(self.account));
        }
        Ok(answer.scores)
    }
}

/// Focal loss of one score vector under the mapping.
pub fn sample_loss(scores: &Tensor, mapping: &LabelMapping, y: usize, focal: &FocalLoss) -> Result<f64> {
    focal.loss(mlm_score(scores, mapping, y)?)
}

/// Mean focal loss over a batch of `(target sample, label)`.
pub fn reprogram_loss(
    prog: &AdversarialProgram,
    batch: &LabeledDataset,
    mapping: &LabelMapping,
    focal: &FocalLoss,
    spec: &PaddingSpec,
    oracle: &mut impl ScoreOracle,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(CoreError::InvalidInput("reprogramming loss of an empty batch".into()));
    }
    let delta = prog.delta();
    let mut total = 0.0;
    for (xs, ys) in batch.samples.chunks(256).zip(batch.labels.chunks(256)) {
        let inputs = xs
            .iter()
            .map(|x| apply_with_delta(x, &delta, spec))
            .collect::<Result<Vec<_>>>()?;
        for (s, &y) in oracle.scores(&inputs)?.iter().zip(ys) {
            total += sample_loss(s, mapping, y, focal)?;
        }
    }
    Ok(total / batch.len() as f64)
}

/// Mean loss and mean input gradient `(1/B) sum_i grad_x loss_i` at the
/// programmed inputs of `samples`.
pub fn loss_and_input_grad(
    clf: &Classifier,
    prog: &AdversarialProgram,
    samples: &[(&Tensor, usize)],
    mapping: &LabelMapping,
    focal: &FocalLoss,
    spec: &PaddingSpec,
) -> Result<(f64, Tensor)> {
    if samples.is_empty() {
        return Err(CoreError::InvalidInput("empty batch".into()));
    }
    let delta = prog.delta();
    let inputs = samples
        .iter()
        .map(|(x, _)| apply_with_delta(x, &delta, spec))
        .collect::<Result<Vec<_>>>()?;
    let trace = clf.net.trace_batch(&Tensor::stack(&inputs)?)?;
    let s = clf.num_classes;
    let probs = trace.output();
    let n = samples.len();
    let mut loss = 0.0;
    let mut out_grad = vec![0.0; n * s];
    for (r, &(_, y)) in samples.iter().enumerate() {
        let scores = Tensor::vector(probs[r * s..(r + 1) * s].to_vec())?;
        let p = mlm_score(&scores, mapping, y)?;
        loss += focal.loss(p)?;
        let dp = focal.derivative(p)? / (mapping.group_size() as f64 * n as f64);
        for &k in mapping.group(y) {
            out_grad[r * s + k] = dp;
        }
    }
    let grads = clf
        .net
        .backward_batch(&trace, &Tensor::new(vec![n, s], out_grad)?, false)?;
    let width = clf.net.input_width();
    let mut mean = vec![0.0; width];
    for row in grads.input.data().chunks(width) {
        for (m, g) in mean.iter_mut().zip(row) {
            *m += g;
        }
    }
    Ok((loss / n as f64, Tensor::new(prog.dims().to_vec(), mean)?))
}

/// How an input-space gradient updates `W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateRule {
    /// `W -= lr * (g * M * (1 - tanh(W)^2))`
    #[default]
    ChainRule,
    /// `W -= lr * g`, the gradient w.r.t. the input applied to `W` as is.
    Raw,
}

impl UpdateRule {
    pub fn direction(self, prog: &AdversarialProgram, input_grad: &Tensor) -> Result<Tensor> {
        match self {
            UpdateRule::ChainRule => prog.chain_rule(input_grad),
            UpdateRule::Raw => Ok(input_grad.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReprogramConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub focal: FocalLoss,
    pub update: UpdateRule,
}

impl Default for ReprogramConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            epochs: 10,
            batch: 20,
            seed: 0,
            focal: FocalLoss::default(),
            update: UpdateRule::ChainRule,
        }
    }
}

impl ReprogramConfig {
    pub fn validate(&self, train: &LabeledDataset) -> Result<()> {
        if self.batch == 0 || self.batch > train.len() {
            return config_err(format!(
                "batch size {} must be in 1..={}",
                self.batch,
                train.len()
            ));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return config_err(format!("bad step size {}", self.lr));
        }
        Ok(())
    }
}

/// Per-epoch losses of the full training set and the running best.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossCurve {
    /// Loss of the initial program, when it was evaluated.
    pub initial: Option<f64>,
    pub epochs: Vec<f64>,
    pub best: Vec<f64>,
}

impl LossCurve {
    pub fn record(&mut self, loss: f64) -> bool {
        let prev = self.best.last().copied().unwrap_or(f64::INFINITY);
        self.epochs.push(loss);
        self.best.push(prev.min(loss));
        loss < prev
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best.last().copied().or(self.initial)
    }
}

/// Epoch-wise shuffled minibatches of sample indices; `floor(n / B)` per epoch.
pub(crate) fn epoch_batches(n: usize, batch: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks_exact(batch)
        .map(|c| c.to_vec())
        .collect()
}

/// White-box reprogramming by gradient descent on `W`, keeping the program
/// with the lowest full-training-set loss seen at any epoch end.
pub fn whitebox_reprogram(
    clf: &Classifier,
    train: &LabeledDataset,
    mapping: &LabelMapping,
    cfg: &ReprogramConfig,
    spec: &PaddingSpec,
) -> Result<(AdversarialProgram, LossCurve)> {
    cfg.validate(train)?;
    let mut prog = AdversarialProgram::random(spec, cfg.seed);
    let mut oracle = clf;
    let mut curve = LossCurve {
        initial: Some(reprogram_loss(&prog, train, mapping, &cfg.focal, spec, &mut oracle)?),
        ..LossCurve::default()
    };
    let mut best = prog.clone();
    let mut shuffle_rng = seeded_rng(cfg.seed, streams::SHUFFLE);
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(train.len(), cfg.batch, &mut shuffle_rng) {
            let samples: Vec<(&Tensor, usize)> = batch
                .iter()
                .map(|&i| (&train.samples[i], train.labels[i]))
                .collect();
            let (_, g) = loss_and_input_grad(clf, &prog, &samples, mapping, &cfg.focal, spec)?;
            let dir = cfg.update.direction(&prog, &g)?;
            prog.step(&dir, cfg.lr)?;
        }
        let loss = reprogram_loss(&prog, train, mapping, &cfg.focal, spec, &mut oracle)?;
        if !loss.is_finite() {
            return Err(CoreError::Numeric(format!(
                "reprogramming loss {loss} at epoch {epoch}"
            )));
        }
        if curve.record(loss) {
            best = prog.clone();
        }
    }
    Ok((best, curve))
}

/// Fraction of samples whose highest-scoring target label is the true one.
pub fn reprogram_accuracy(
    prog: &AdversarialProgram,
    test: &LabeledDataset,
    mapping: &LabelMapping,
    spec: &PaddingSpec,
    oracle: &mut impl ScoreOracle,
) -> Result<f64> {
    if test.is_empty() {
        return Err(CoreError::InvalidInput("accuracy of an empty dataset".into()));
    }
    let delta = prog.delta();
    let mut correct = 0;
    for (xs, ys) in test.samples.chunks(256).zip(test.labels.chunks(256)) {
        let inputs = xs
            .iter()
            .map(|x| apply_with_delta(x, &delta, spec))
            .collect::<Result<Vec<_>>>()?;
        for (s, &y) in oracle.scores(&inputs)?.iter().zip(ys) {
            let target_scores = (0..mapping.num_target())
                .map(|t| mlm_score(s, mapping, t))
                .collect::<Result<Vec<_>>>()?;
            if reprog_kernel::tensor::argmax(&target_scores) == y {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_w_gives_zero_delta_and_saturation_gives_one() {
        let spec = PaddingSpec::new(2, 4, 2).unwrap();
        let zero = AdversarialProgram::new(Tensor::zeros(&[4, 4, 2]), spec.mask()).unwrap();
        assert_eq!(zero.delta().max_abs(), 0.0);
        let big = AdversarialProgram::new(Tensor::full(&[4, 4, 2], 40.0), spec.mask()).unwrap();
        let d = big.delta();
        for (v, m) in d.data().iter().zip(spec.mask().data()) {
            assert_eq!(*v, *m);
        }
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let m = Tensor::full(&[2], 0.5);
        assert!(AdversarialProgram::new(Tensor::zeros(&[2]), m).is_err());
    }

    #[test]
    fn mlm_score_examples() {
        let mapping = LabelMapping::consecutive(12, 2, 6).unwrap();
        let uniform = Tensor::full(&[12], 1.0 / 12.0);
        assert!((mlm_score(&uniform, &mapping, 1).unwrap() - 1.0 / 12.0).abs() < 1e-15);
        let one_hot = Tensor::from_fn(&[12], |i| if i == 3 { 1.0 } else { 0.0 }).unwrap();
        assert!((mlm_score(&one_hot, &mapping, 0).unwrap() - 1.0 / 6.0).abs() < 1e-15);
        assert_eq!(mlm_score(&one_hot, &mapping, 1).unwrap(), 0.0);
        assert!(mlm_score(&one_hot, &mapping, 2).is_err());
        // hand computation: scores 0.01 * (1..=12) normalised by their sum 0.78
        let s = Tensor::from_fn(&[12], |i| 0.01 * (i + 1) as f64 / 0.78).unwrap();
        let want0 = (0.01 + 0.02 + 0.03 + 0.04 + 0.05 + 0.06) / 0.78 / 6.0;
        let want1 = (0.07 + 0.08 + 0.09 + 0.10 + 0.11 + 0.12) / 0.78 / 6.0;
        assert!((mlm_score(&s, &mapping, 0).unwrap() - want0).abs() < 1e-15);
        assert!((mlm_score(&s, &mapping, 1).unwrap() - want1).abs() < 1e-15);
    }

    #[test]
    fn mapping_rejects_overlap_and_overflow() {
        assert!(LabelMapping::consecutive(12, 3, 6).is_err());
        assert!(LabelMapping::new(vec![vec![0, 1], vec![1, 2]], 4).is_err());
        let m = LabelMapping::consecutive(12, 2, 6).unwrap();
        assert_eq!(LabelMapping::from_csv(&m.to_csv(), 12).unwrap(), m);
    }

    #[test]
    fn focal_loss_values() {
        let f2 = FocalLoss::new(2.0).unwrap();
        assert_eq!(f2.loss(1.0).unwrap(), 0.0);
        assert!((f2.loss(0.5).unwrap() - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((f2.loss(0.5).unwrap() - 0.17329).abs() < 1e-5);
        let f0 = FocalLoss::new(0.0).unwrap();
        for p in [0.1, 0.5, 0.9] {
            assert_eq!(f0.loss(p).unwrap(), -f64::ln(p));
        }
        assert!(f2.loss(1.5).is_err());
        assert!(f2.loss(0.0).unwrap().is_finite());
        assert!(FocalLoss::new(-1.0).is_err());
    }

    #[test]
    fn focal_derivative_matches_differences() {
        for gamma in [0.0, 0.5, 1.0, 2.0, 3.5] {
            let f = FocalLoss::new(gamma).unwrap();
            for p in [0.05, 0.3, 0.5, 0.8, 0.97] {
                let h = 1e-6;
                let num = (f.loss(p + h).unwrap() - f.loss(p - h).unwrap()) / (2.0 * h);
                assert!((f.derivative(p).unwrap() - num).abs() < 1e-6, "{gamma} {p}");
            }
        }
    }

    #[test]
    fn loss_curve_tracks_running_minimum() {
        let mut c = LossCurve::default();
        for l in [3.0, 2.0, 2.5, 1.0, 1.5] {
            c.record(l);
        }
        assert_eq!(c.best, vec![3.0, 2.0, 2.0, 1.0, 1.0]);
        assert_eq!(c.best_loss(), Some(1.0));
    }
}
