//! Source-domain classifiers and the query channel every black-box
//! evaluation goes through.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use reprog_kernel::{FeedforwardNet, OptimizerKind, OptimizerState, Tensor};

use crate::data::LabeledDataset;
use crate::error::{config_err, CoreError, Result};
use crate::seeded_rng;

pub type AccountId = u32;

#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    /// Widths of the hidden `affine -> relu` blocks.
    pub hidden: Vec<usize>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self { hidden: vec![512] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Fraction of the dataset held out for the reported accuracy.
    pub holdout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            batch: 32,
            lr: 1e-3,
            optimizer: OptimizerKind::rmsprop(),
            holdout: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub heldout_accuracy: f64,
    pub log: Vec<EpochLog>,
}

#[derive(Debug, Clone)]
pub struct Classifier {
    pub net: FeedforwardNet,
    pub num_classes: usize,
    pub meta: TrainingMeta,
}

impl Classifier {
    pub fn from_net(net: FeedforwardNet, meta: TrainingMeta) -> Result<Self> {
        if !net.is_classifier() {
            return config_err("classifier net must end in softmax");
        }
        let num_classes = net.output_width();
        Ok(Self {
            net,
            num_classes,
            meta,
        })
    }

    pub fn input_dims(&self) -> &[usize] {
        self.net.input_dims()
    }

    pub fn scores(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.net.forward(x)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.net.save_weights(path)?)
    }

    /// Training metadata is not persisted; the loaded meta records only
    /// the epoch count 0 and an unknown (NaN) held-out accuracy.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_net(
            FeedforwardNet::load_weights(path)?,
            TrainingMeta {
                seed: 0,
                epochs: 0,
                heldout_accuracy: f64::NAN,
                log: Vec::new(),
            },
        )
    }

    /// Scores for each tensor in `xs`, evaluated as one batch.
    pub fn scores_many(&self, xs: &[Tensor]) -> Result<Vec<Tensor>> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        for x in xs {
            if x.dims() != self.net.input_dims() {
                return Err(CoreError::InvalidInput(format!(
                    "classifier expects {:?}, got {:?}",
                    self.net.input_dims(),
                    x.dims()
                )));
            }
        }
        let out = self.net.forward_batch(&Tensor::stack(xs)?)?;
        Ok((0..xs.len()).map(|i| out.row(i)).collect())
    }
}

/// Cross-entropy training of `flatten -> [affine -> relu]* -> affine(s) -> softmax`.
pub fn train_source_classifier(
    ds: &LabeledDataset,
    arch: &ArchConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Classifier> {
    let dims = ds
        .sample_dims()
        .ok_or_else(|| CoreError::InvalidInput("empty training set".into()))?
        .to_vec();
    if cfg.batch == 0 {
        return config_err("batch size must be positive");
    }
    let shuffled = ds.shuffled(seed);
    let n_hold = ((ds.len() as f64) * cfg.holdout).round() as usize;
    let n_hold = n_hold.min(ds.len().saturating_sub(1));
    let (heldout, train) = shuffled.split_at(n_hold);

    let mut rng = seeded_rng(seed, 0x11);
    let mut net = FeedforwardNet::mlp(dims, &arch.hidden, ds.num_classes, true, &mut rng)?;
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total_loss = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let xs = Tensor::stack(chunk.iter().map(|&i| &train.samples[i]))?;
            let trace = net.trace_batch(&xs)?;
            let probs = trace.output();
            let s = ds.num_classes;
            let mut grad = vec![0.0; chunk.len() * s];
            for (r, &i) in chunk.iter().enumerate() {
                let y = train.labels[i];
                let row = &probs[r * s..(r + 1) * s];
                let p = row[y].max(1e-12);
                total_loss -= p.ln();
                if reprog_kernel::tensor::argmax(row) == y {
                    correct += 1;
                }
                grad[r * s + y] = -1.0 / (p * chunk.len() as f64);
            }
            let g = net.backward_batch(&trace, &Tensor::new(vec![chunk.len(), s], grad)?, true)?;
            opt.step(net.params_mut(), &g.params)
                .map_err(|e| CoreError::Numeric(format!("classifier training diverged: {e}")))?;
        }
        let loss = total_loss / train.len().max(1) as f64;
        if !loss.is_finite() {
            return Err(CoreError::Numeric(format!("training loss {loss} at epoch {epoch}")));
        }
        log.push(EpochLog {
            epoch,
            loss,
            accuracy: correct as f64 / train.len().max(1) as f64,
        });
    }

    let mut clf = Classifier::from_net(
        net,
        TrainingMeta {
            seed,
            epochs: cfg.epochs,
            heldout_accuracy: f64::NAN,
            log,
        },
    )?;
    let eval_set = if heldout.is_empty() { &train } else { &heldout };
    clf.meta.heldout_accuracy = accuracy(&clf, eval_set)?;
    Ok(clf)
}

/// Fraction of argmax-correct predictions. Empty datasets are an error.
pub fn accuracy(clf: &Classifier, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(CoreError::InvalidInput("accuracy of an empty dataset".into()));
    }
    if ds.num_classes > clf.num_classes {
        return Err(CoreError::InvalidInput(format!(
            "dataset has {} classes, classifier {}",
            ds.num_classes, clf.num_classes
        )));
    }
    let mut correct = 0;
    for (chunk, labels) in ds.samples.chunks(256).zip(ds.labels.chunks(256)) {
        let scores = clf.scores_many(chunk)?;
        correct += scores
            .iter()
            .zip(labels)
            .filter(|(s, &y)| s.argmax() == y)
            .count();
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// One query as seen by an observer.
#[derive(Debug, Clone, Copy)]
pub struct QueryRecord<'a> {
    pub account: AccountId,
    /// Per-account, starting at 0, strictly increasing.
    pub seq: u64,
    pub input: &'a Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    Flagged,
}

/// Interception point for every accepted query.
pub trait QueryObserver {
    fn observe(&mut self, record: &QueryRecord<'_>) -> Verdict;

    /// Whether a flagged query bans its account.
    fn bans_on_detect(&self) -> bool {
        false
    }

    /// Observe records in order. When `stop_on_flag` is set, processing ends
    /// right after the first flagged record and later records are not seen.
    fn observe_batch(&mut self, records: &[QueryRecord<'_>], stop_on_flag: bool) -> Vec<Verdict> {
        let mut out = Vec::with_capacity(records.len());
        for r in records {
            let v = self.observe(r);
            out.push(v);
            if stop_on_flag && v == Verdict::Flagged {
                break;
            }
        }
        out
    }
}

/// Observer that never flags.
#[derive(Debug, Default, Clone, Copy)]
pub struct NoObserver;

impl QueryObserver for NoObserver {
    fn observe(&mut self, _record: &QueryRecord<'_>) -> Verdict {
        Verdict::Pass
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct AccountCounters {
    pub queries: u64,
    pub detections: u64,
    pub blocked: bool,
}

/// Answers of a batch call. `blocked` means the account was banned during
/// the batch and only the first `scores.len()` queries were answered.
#[derive(Debug, Clone)]
pub struct BatchAnswer {
    pub scores: Vec<Tensor>,
    pub blocked: bool,
}

/// Score-only access to a target classifier, with per-account accounting.
///
/// The channel never exposes the classifier itself, so callers holding only
/// a channel cannot reach its gradients.
pub struct QueryChannel<'m, O: QueryObserver = NoObserver> {
    target: &'m Classifier,
    observer: O,
    accounts: BTreeMap<AccountId, AccountCounters>,
}

impl<'m> QueryChannel<'m, NoObserver> {
    pub fn unobserved(target: &'m Classifier) -> Self {
        Self::new(target, NoObserver)
    }
}

impl<'m, O: QueryObserver> QueryChannel<'m, O> {
    pub fn new(target: &'m Classifier, observer: O) -> Self {
        Self {
            target,
            observer,
            accounts: BTreeMap::new(),
        }
    }

    pub fn input_dims(&self) -> &[usize] {
        self.target.input_dims()
    }

    pub fn num_classes(&self) -> usize {
        self.target.num_classes
    }

    pub fn observer(&self) -> &O {
        &self.observer
    }

    pub fn observer_mut(&mut self) -> &mut O {
        &mut self.observer
    }

    pub fn into_observer(self) -> O {
        self.observer
    }

    pub fn counters(&self, account: AccountId) -> AccountCounters {
        self.accounts.get(&account).copied().unwrap_or_default()
    }

    pub fn accounts(&self) -> impl Iterator<Item = (AccountId, AccountCounters)> + '_ {
        self.accounts.iter().map(|(&a, &c)| (a, c))
    }

    pub fn total_queries(&self) -> u64 {
        self.accounts.values().map(|c| c.queries).sum()
    }

    pub fn total_detections(&self) -> u64 {
        self.accounts.values().map(|c| c.detections).sum()
    }

    pub fn is_blocked(&self, account: AccountId) -> bool {
        self.counters(account).blocked
    }

    pub fn predict_scores(&mut self, account: AccountId, x: &Tensor) -> Result<Tensor> {
        let mut answer = self.predict_batch(account, std::slice::from_ref(x))?;
        Ok(answer.scores.pop().expect("one query answered"))
    }

    /// Submit queries in order. Fails only if the account is already blocked.
    pub fn predict_batch(&mut self, account: AccountId, xs: &[Tensor]) -> Result<BatchAnswer> {
        if self.is_blocked(account) {
            return Err(CoreError::Blocked(account));
        }
        for x in xs {
            if x.dims() != self.target.input_dims() {
                return Err(CoreError::InvalidInput(format!(
                    "query dims {:?}, model expects {:?}",
                    x.dims(),
                    self.target.input_dims()
                )));
            }
        }
        let counters = self.accounts.entry(account).or_default();
        let records: Vec<QueryRecord<'_>> = xs
            .iter()
            .enumerate()
            .map(|(i, input)| QueryRecord {
                account,
                seq: counters.queries + i as u64,
                input,
            })
            .collect();
        let ban = self.observer.bans_on_detect();
        let verdicts = self.observer.observe_batch(&records, ban);
        let accepted = verdicts.len();
        let flagged = verdicts.iter().filter(|v| **v == Verdict::Flagged).count() as u64;
        counters.queries += accepted as u64;
        counters.detections += flagged;
        let blocked = ban && flagged > 0;
        counters.blocked |= blocked;
        let scores = self.target.scores_many(&xs[..accepted])?;
        Ok(BatchAnswer { scores, blocked })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_source_dataset, Domain};
    use reprog_kernel::Layer;

    fn toy_classifier() -> Classifier {
        let mut rng = seeded_rng(0, 0);
        let net = FeedforwardNet::mlp(vec![2, 2, 1], &[6], 3, true, &mut rng).unwrap();
        Classifier::from_net(
            net,
            TrainingMeta {
                seed: 0,
                epochs: 0,
                heldout_accuracy: 0.0,
                log: vec![],
            },
        )
        .unwrap()
    }

    #[test]
    fn one_class_dataset_is_learned_perfectly() {
        let ds = gen_source_dataset(2, 1, 20, 4, 1).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let clf = train_source_classifier(&ds, &ArchConfig { hidden: vec![4] }, &cfg, 1).unwrap();
        assert_eq!(clf.meta.heldout_accuracy, 1.0);
        assert_eq!(accuracy(&clf, &ds).unwrap(), 1.0);
    }

    #[test]
    fn training_is_seed_deterministic() {
        let ds = gen_source_dataset(2, 3, 10, 4, 1).unwrap();
        let arch = ArchConfig { hidden: vec![8] };
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let a = train_source_classifier(&ds, &arch, &cfg, 5).unwrap();
        let b = train_source_classifier(&ds, &arch, &cfg, 5).unwrap();
        assert_eq!(a.net, b.net);
    }

    #[test]
    fn accuracy_of_empty_dataset_is_an_error() {
        let clf = toy_classifier();
        let empty = LabeledDataset::new(vec![], vec![], 3, Domain::Source).unwrap();
        assert!(accuracy(&clf, &empty).is_err());
    }

    #[test]
    fn memorised_toy_set_scores_one() {
        // Identity-like net: logits = input, so argmax recovers the hot index.
        let w = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let net = FeedforwardNet::new(
            vec![3],
            vec![
                Layer::affine(w, Tensor::zeros(&[3])).unwrap(),
                Layer::Softmax { width: 3 },
            ],
        )
        .unwrap();
        let clf = Classifier::from_net(
            net,
            TrainingMeta {
                seed: 0,
                epochs: 0,
                heldout_accuracy: 1.0,
                log: vec![],
            },
        )
        .unwrap();
        let samples: Vec<Tensor> = (0..3)
            .map(|k| Tensor::from_fn(&[3], |i| if i == k { 0.9 } else { -0.9 }).unwrap())
            .collect();
        let ds = LabeledDataset::new(samples, vec![0, 1, 2], 3, Domain::Source).unwrap();
        assert_eq!(accuracy(&clf, &ds).unwrap(), 1.0);
    }

    #[test]
    fn channel_counts_and_answers_identical_inputs_identically() {
        let clf = toy_classifier();
        let mut ch = QueryChannel::unobserved(&clf);
        let x = Tensor::full(&[2, 2, 1], 0.3);
        let a = ch.predict_scores(7, &x).unwrap();
        let b = ch.predict_scores(7, &x).unwrap();
        assert_eq!(a, b);
        assert!((a.sum() - 1.0).abs() < 1e-12);
        assert_eq!(ch.counters(7).queries, 2);
        assert_eq!(ch.counters(8).queries, 0);
        assert!(ch.predict_scores(7, &Tensor::zeros(&[3])).is_err());
    }
}
