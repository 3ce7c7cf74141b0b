//! Stateful query detection: each account keeps a buffer of query
//! embeddings, and a query whose mean distance to its `k` nearest buffered
//! neighbours is below `rho` is flagged, after which the buffer is cleared.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use reprog_kernel::Tensor;

use crate::data::LabeledDataset;
use crate::encoder::{euclidean, SimilarityEncoder};
use crate::error::{config_err, CoreError, Result};
use crate::models::{AccountId, QueryObserver, QueryRecord, Verdict};
use crate::{seeded_rng, streams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub k: usize,
    /// Distance threshold; 0 disables detection since distances are >= 0.
    pub rho: f64,
    pub ban_on_detect: bool,
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return config_err("detector k must be >= 1");
        }
        if !(self.rho.is_finite() && self.rho >= 0.0) {
            return config_err(format!("detector threshold {} must be finite and >= 0", self.rho));
        }
        Ok(())
    }
}

/// Outcome of one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub verdict: Verdict,
    pub buffer_before: usize,
    /// Mean k-NN distance; `None` during warm-up.
    pub mean_distance: Option<f64>,
}

/// Mean of the `k` smallest distances from `e` to the rows of `buffer`
/// (flat, row width `e.len()`). Requires at least `k` rows.
pub fn mean_knn_distance(buffer: &[f64], e: &[f64], k: usize) -> f64 {
    let mut d: Vec<f64> = buffer.chunks_exact(e.len()).map(|row| euclidean(row, e)).collect();
    debug_assert!(d.len() >= k && k > 0);
    if d.len() > k {
        d.select_nth_unstable_by(k - 1, f64::total_cmp);
        d.truncate(k);
    }
    d.sort_by(f64::total_cmp);
    d.iter().sum::<f64>() / k as f64
}

/// Per-account detector state. The buffer is unbounded.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectorState {
    buffer: Vec<f64>,
    width: usize,
    pub queries: u64,
    pub detections: u64,
}

impl DetectorState {
    pub fn buffer_len(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.buffer.len() / self.width
        }
    }

    pub fn observe_embedding(&mut self, e: &[f64], cfg: &DetectorConfig) -> Observation {
        if self.width == 0 {
            self.width = e.len();
        }
        assert_eq!(e.len(), self.width, "embedding width changed");
        let before = self.buffer_len();
        self.queries += 1;
        let obs = if before < cfg.k {
            self.buffer.extend_from_slice(e);
            Observation {
                verdict: Verdict::Pass,
                buffer_before: before,
                mean_distance: None,
            }
        } else {
            let mean = mean_knn_distance(&self.buffer, e, cfg.k);
            let verdict = if mean < cfg.rho {
                self.detections += 1;
                self.buffer.clear();
                Verdict::Flagged
            } else {
                self.buffer.extend_from_slice(e);
                Verdict::Pass
            };
            Observation {
                verdict,
                buffer_before: before,
                mean_distance: Some(mean),
            }
        };
        assert!(
            self.detections <= self.queries / (cfg.k as u64 + 1),
            "detection bound violated: D={} Q={} k={}",
            self.detections,
            self.queries,
            cfg.k
        );
        obs
    }

    /// Empties the buffer; counters are zeroed unless `preserve_counters`.
    pub fn reset(&mut self, preserve_counters: bool) {
        self.buffer.clear();
        if !preserve_counters {
            self.queries = 0;
            self.detections = 0;
        }
    }

    pub fn stats(&self, k: usize) -> Result<DetectionStats> {
        stats(self.detections, self.queries, k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionStats {
    pub queries: u64,
    pub detections: u64,
    pub k: usize,
    /// `D / Q`
    pub sigma: f64,
    /// `(k + 1) * D / Q`
    pub sigma_star: f64,
}

pub fn stats(detections: u64, queries: u64, k: usize) -> Result<DetectionStats> {
    if queries == 0 {
        return Err(CoreError::UndefinedStats("no queries observed"));
    }
    let sigma = detections as f64 / queries as f64;
    Ok(DetectionStats {
        queries,
        detections,
        k,
        sigma,
        sigma_star: (k as f64 + 1.0) * detections as f64 / queries as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionLogRow {
    pub account: AccountId,
    pub query_index: u64,
    pub buffer_before: usize,
    pub mean_distance: Option<f64>,
    pub verdict: Verdict,
}

/// Detector attached to a query channel; keeps one state per account.
#[derive(Debug, Clone)]
pub struct StatefulDetector<'e> {
    encoder: &'e SimilarityEncoder,
    pub cfg: DetectorConfig,
    states: BTreeMap<AccountId, DetectorState>,
    log: Option<Vec<DetectionLogRow>>,
}

impl<'e> StatefulDetector<'e> {
    pub fn new(encoder: &'e SimilarityEncoder, cfg: DetectorConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            encoder,
            cfg,
            states: BTreeMap::new(),
            log: None,
        })
    }

    pub fn with_log(mut self) -> Self {
        self.log = Some(Vec::new());
        self
    }

    pub fn log(&self) -> &[DetectionLogRow] {
        self.log.as_deref().unwrap_or(&[])
    }

    pub fn state(&self, account: AccountId) -> Option<&DetectorState> {
        self.states.get(&account)
    }

    pub fn states(&self) -> impl Iterator<Item = (AccountId, &DetectorState)> {
        self.states.iter().map(|(&a, s)| (a, s))
    }

    pub fn reset(&mut self, account: AccountId, preserve_counters: bool) {
        if let Some(s) = self.states.get_mut(&account) {
            s.reset(preserve_counters);
        }
    }

    /// Stats pooled over all accounts.
    pub fn stats(&self) -> Result<DetectionStats> {
        let (d, q) = self
            .states
            .values()
            .fold((0, 0), |(d, q), s| (d + s.detections, q + s.queries));
        stats(d, q, self.cfg.k)
    }

    fn observe_row(&mut self, account: AccountId, seq: u64, e: &[f64]) -> Verdict {
        let obs = self
            .states
            .entry(account)
            .or_default()
            .observe_embedding(e, &self.cfg);
        if let Some(log) = self.log.as_mut() {
            log.push(DetectionLogRow {
                account,
                query_index: seq,
                buffer_before: obs.buffer_before,
                mean_distance: obs.mean_distance,
                verdict: obs.verdict,
            });
        }
        obs.verdict
    }
}

impl QueryObserver for StatefulDetector<'_> {
    fn observe(&mut self, record: &QueryRecord<'_>) -> Verdict {
        let e = self
            .encoder
            .embed(record.input)
            .expect("channel checked query dims");
        self.observe_row(record.account, record.seq, e.data())
    }

    fn bans_on_detect(&self) -> bool {
        self.cfg.ban_on_detect
    }

    fn observe_batch(&mut self, records: &[QueryRecord<'_>], stop_on_flag: bool) -> Vec<Verdict> {
        let mut out = Vec::with_capacity(records.len());
        for chunk in records.chunks(512) {
            let emb = self
                .encoder
                .embed_batch(chunk.iter().map(|r| r.input))
                .expect("channel checked query dims");
            for (i, r) in chunk.iter().enumerate() {
                let v = self.observe_row(r.account, r.seq, emb.row_slice(i));
                out.push(v);
                if stop_on_flag && v == Verdict::Flagged {
                    return out;
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub k: usize,
    pub target_fpr: f64,
    pub rho: f64,
    /// Mean k-NN distance at every stream position with at least `k` predecessors.
    pub distances: Vec<f64>,
    /// Fraction of `distances` strictly below `rho`.
    pub achieved_fpr: f64,
}

/// No-reset mean k-NN distances of a stream of embeddings (`[n, e]`).
pub fn stream_distances(embeddings: &Tensor, k: usize) -> Vec<f64> {
    let n = embeddings.dims()[0];
    let w = embeddings.len() / n;
    let data = embeddings.data();
    (k..n)
        .map(|i| mean_knn_distance(&data[..i * w], &data[i * w..(i + 1) * w], k))
        .collect()
}

/// Threshold such that streaming `benign` in a seeded random order through
/// a detector that never resets flags a `target_fpr` fraction of the
/// eligible queries.
pub fn calibrate_threshold(
    encoder: &SimilarityEncoder,
    benign: &LabeledDataset,
    k: usize,
    target_fpr: f64,
    seed: u64,
) -> Result<Calibration> {
    if k == 0 {
        return config_err("detector k must be >= 1");
    }
    if benign.len() <= k {
        return config_err(format!(
            "calibration needs more than k = {k} samples, got {}",
            benign.len()
        ));
    }
    if !(0.0..=1.0).contains(&target_fpr) {
        return config_err(format!("target FPR {target_fpr} outside [0, 1]"));
    }
    let mut order: Vec<usize> = (0..benign.len()).collect();
    order.shuffle(&mut seeded_rng(seed, streams::CALIBRATION));
    let mut rows = Vec::with_capacity(benign.len() * encoder.embed_dim());
    for chunk in order.chunks(512) {
        let e = encoder.embed_batch(chunk.iter().map(|&i| &benign.samples[i]))?;
        rows.extend_from_slice(e.data());
    }
    let embeddings = Tensor::new(vec![benign.len(), encoder.embed_dim()], rows)?;
    let distances = stream_distances(&embeddings, k);
    let rho = threshold_for(&distances, target_fpr);
    let achieved_fpr = fraction_below(&distances, rho);
    Ok(Calibration {
        k,
        target_fpr,
        rho,
        distances,
        achieved_fpr,
    })
}

/// Lower-tail quantile: the value at sorted position `floor(fpr * n)`, so
/// that exactly that many recorded values lie strictly below it (up to ties).
/// Past the end, the next float above the maximum.
pub fn threshold_for(distances: &[f64], target_fpr: f64) -> f64 {
    let mut sorted = distances.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = (target_fpr * sorted.len() as f64).floor() as usize;
    match sorted.get(idx) {
        Some(&v) => v,
        None => sorted.last().map_or(f64::MIN_POSITIVE, |m| m.next_up()),
    }
}

pub fn fraction_below(distances: &[f64], rho: f64) -> f64 {
    if distances.is_empty() {
        return 0.0;
    }
    distances.iter().filter(|&&d| d < rho).count() as f64 / distances.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(k: usize, rho: f64) -> DetectorConfig {
        DetectorConfig {
            k,
            rho,
            ban_on_detect: false,
        }
    }

    #[test]
    fn four_identical_queries() {
        let c = cfg(3, 0.5);
        let mut s = DetectorState::default();
        let v: Vec<Verdict> = (0..4).map(|_| s.observe_embedding(&[1.0, 2.0], &c).verdict).collect();
        assert_eq!(v, [Verdict::Pass, Verdict::Pass, Verdict::Pass, Verdict::Flagged]);
        assert_eq!((s.detections, s.buffer_len()), (1, 0));
    }

    #[test]
    fn far_apart_queries_pass() {
        let c = cfg(3, 0.5);
        let mut s = DetectorState::default();
        for i in 0..10 {
            assert_eq!(s.observe_embedding(&[10.0 * i as f64], &c).verdict, Verdict::Pass);
        }
        assert_eq!(s.detections, 0);
    }

    #[test]
    fn tie_at_threshold_passes() {
        let c = cfg(1, 1.0);
        let mut s = DetectorState::default();
        s.observe_embedding(&[0.0], &c);
        assert_eq!(s.observe_embedding(&[1.0], &c).verdict, Verdict::Pass);
    }

    #[test]
    fn stats_values() {
        let st = stats(1810, 110400, 50).unwrap();
        assert!((st.sigma_star * 100.0 - 83.61).abs() < 0.01);
        assert_eq!(stats(0, 10, 3).unwrap().sigma_star, 0.0);
        assert!(stats(0, 0, 3).is_err());
    }

    #[test]
    fn reset_variants() {
        let c = cfg(2, 0.5);
        let mut s = DetectorState::default();
        for _ in 0..5 {
            s.observe_embedding(&[0.0], &c);
        }
        let (q, d) = (s.queries, s.detections);
        s.reset(true);
        assert_eq!((s.queries, s.detections, s.buffer_len()), (q, d, 0));
        s.reset(false);
        assert_eq!((s.queries, s.detections), (0, 0));
        assert!(s.observe_embedding(&[0.0], &c).mean_distance.is_none());
        assert!(s.observe_embedding(&[0.0], &c).mean_distance.is_none());
        assert!(s.observe_embedding(&[0.0], &c).mean_distance.is_some());
    }

    #[test]
    fn threshold_extremes() {
        let d = [0.3, 0.1, 0.2, 0.5];
        assert_eq!(threshold_for(&d, 0.0), 0.1);
        assert_eq!(fraction_below(&d, threshold_for(&d, 0.0)), 0.0);
        assert_eq!(fraction_below(&d, threshold_for(&d, 1.0)), 1.0);
        assert_eq!(threshold_for(&d, 0.5), 0.3);
    }
}
