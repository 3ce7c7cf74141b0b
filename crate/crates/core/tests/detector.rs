use rand::Rng;
use reprog_core::data::gen_source_dataset;
use reprog_core::detector::{
    calibrate_threshold, fraction_below, stats, stream_distances, DetectorConfig, DetectorState,
    StatefulDetector,
};
use reprog_core::encoder::{ContrastiveSpec, EncoderArch, SimilarityEncoder};
use reprog_core::models::{Classifier, QueryChannel, TrainingMeta, Verdict};
use reprog_core::{seeded_rng, CoreError};
use reprog_kernel::{FeedforwardNet, Layer, Tensor};

fn cfg(k: usize, rho: f64) -> DetectorConfig {
    DetectorConfig {
        k,
        rho,
        ban_on_detect: false,
    }
}

/// Embedding = input, for scripting distances directly.
fn identity_encoder(width: usize) -> SimilarityEncoder {
    let eye = Tensor::from_fn(&[width, width], |i| if i / width == i % width { 1.0 } else { 0.0 }).unwrap();
    let net = FeedforwardNet::new(vec![width], vec![Layer::affine(eye, Tensor::zeros(&[width])).unwrap()]).unwrap();
    SimilarityEncoder::new(net, ContrastiveSpec::default()).unwrap()
}

fn identity_classifier(width: usize) -> Classifier {
    let eye = Tensor::from_fn(&[width, width], |i| if i / width == i % width { 1.0 } else { 0.0 }).unwrap();
    let net = FeedforwardNet::new(
        vec![width],
        vec![Layer::affine(eye, Tensor::zeros(&[width])).unwrap(), Layer::Softmax { width }],
    )
    .unwrap();
    Classifier::from_net(
        net,
        TrainingMeta {
            seed: 0,
            epochs: 0,
            heldout_accuracy: f64::NAN,
            log: vec![],
        },
    )
    .unwrap()
}

fn run(script: &[f64], c: &DetectorConfig) -> (Vec<Verdict>, DetectorState) {
    let mut s = DetectorState::default();
    let v = script.iter().map(|&x| s.observe_embedding(&[x], c).verdict).collect();
    (v, s)
}

#[test]
fn ten_query_walkthrough() {
    use Verdict::{Flagged as F, Pass as P};
    let c = cfg(3, 0.5);
    // a..j all alike: d flagged, buffer cleared, then h flagged
    let (v, s) = run(&[0.0; 10], &c);
    assert_eq!(v, [P, P, P, F, P, P, P, F, P, P]);
    assert_eq!(s.detections, 2);
    // d is far from a, b, c; e is close to its 3 nearest among a..d
    let (v, s) = run(&[0.0, 0.1, 0.2, 5.0, 0.15, 9.0, 9.1, 9.2, 9.15, 20.0], &c);
    assert_eq!(v, [P, P, P, P, F, P, P, P, F, P]);
    assert_eq!(s.detections, 2);
    // no script of ten queries can exceed floor(10 / 4) = 2 detections
    let mut rng = seeded_rng(3, 1);
    for _ in 0..5000 {
        let script: Vec<f64> = (0..10).map(|_| rng.random_range(0..4) as f64 * 0.4).collect();
        assert!(run(&script, &c).1.detections <= 2);
    }
}

#[test]
fn four_identical_queries_through_the_channel() {
    let enc = identity_encoder(2);
    let clf = identity_classifier(2);
    let det = StatefulDetector::new(&enc, cfg(3, 0.5)).unwrap().with_log();
    let mut ch = QueryChannel::new(&clf, det);
    let x = Tensor::vector(vec![0.3, -0.2]).unwrap();
    for _ in 0..4 {
        ch.predict_scores(1, &x).unwrap();
    }
    let det = ch.observer();
    let s = det.state(1).unwrap();
    assert_eq!((s.queries, s.detections, s.buffer_len()), (4, 1, 0));
    let verdicts: Vec<Verdict> = det.log().iter().map(|r| r.verdict).collect();
    assert_eq!(verdicts[3], Verdict::Flagged);
    assert!(det.log()[..3].iter().all(|r| r.mean_distance.is_none()));
    assert_eq!(ch.counters(1).detections, 1);
}

#[test]
fn ban_blocks_the_account_after_answering_the_flagged_query() {
    let enc = identity_encoder(2);
    let clf = identity_classifier(2);
    let det = StatefulDetector::new(
        &enc,
        DetectorConfig {
            k: 2,
            rho: 0.5,
            ban_on_detect: true,
        },
    )
    .unwrap();
    let mut ch = QueryChannel::new(&clf, det);
    let x = Tensor::vector(vec![1.0, 1.0]).unwrap();
    let answer = ch.predict_batch(4, &vec![x.clone(); 5]).unwrap();
    assert_eq!(answer.scores.len(), 3);
    assert!(answer.blocked);
    assert!(matches!(ch.predict_scores(4, &x), Err(CoreError::Blocked(4))));
    assert_eq!(ch.counters(4).queries, 3);
    // other accounts are unaffected and start with an empty buffer
    assert!(ch.predict_scores(5, &x).is_ok());
    assert_eq!(ch.observer().state(5).unwrap().buffer_len(), 1);
}

#[test]
fn disabled_threshold_never_flags() {
    let c = cfg(2, 0.0);
    let (v, s) = run(&[0.0; 50], &c);
    assert!(v.iter().all(|&v| v == Verdict::Pass));
    assert_eq!(s.stats(2).unwrap().sigma_star, 0.0);
}

#[test]
fn warm_up_follows_every_detection() {
    let c = cfg(4, 0.5);
    let mut s = DetectorState::default();
    let mut since_flag = None;
    for _ in 0..60 {
        let obs = s.observe_embedding(&[0.0], &c);
        if let Some(n) = since_flag {
            if n < 4 {
                assert!(obs.mean_distance.is_none());
            }
        }
        since_flag = match obs.verdict {
            Verdict::Flagged => Some(0),
            Verdict::Pass => since_flag.map(|n| n + 1),
        };
    }
    // every window of k + 1 alike queries is caught: sigma* = 1
    assert_eq!(s.stats(4).unwrap().sigma_star, 1.0);
}

#[test]
fn first_k_verdicts_ignore_order() {
    let c = cfg(5, 100.0);
    let mut rng = seeded_rng(5, 5);
    let mut base: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
    for _ in 0..20 {
        use rand::seq::SliceRandom;
        base.shuffle(&mut rng);
        assert!(run(&base, &c).0.iter().all(|&v| v == Verdict::Pass));
    }
}

#[test]
fn detection_bound_survives_fuzzing() {
    let mut rng = seeded_rng(11, 0);
    let mut steps = 0;
    while steps < 100_000 {
        let k = rng.random_range(1..8);
        let c = cfg(k, rng.random_range(0.0..2.0));
        let mut s = DetectorState::default();
        let len = rng.random_range(1..3000);
        for _ in 0..len {
            let e = [rng.random_range(0..5) as f64 * 0.3, rng.random_range(-1.0..1.0)];
            s.observe_embedding(&e, &c);
            assert!(s.detections <= s.queries / (k as u64 + 1));
            let st = s.stats(k).unwrap();
            assert!((0.0..=1.0).contains(&st.sigma_star));
            assert!(st.sigma <= 1.0 / (k as f64 + 1.0));
            if rng.random_range(0..500) == 0 {
                s.reset(true);
            }
            steps += 1;
        }
    }
}

#[test]
fn reference_detection_rates() {
    let cases = [
        (1810, 110_400, 83.61),
        (980, 51_480, 97.09),
        (2266, 134_400, 85.99),
        (1794, 110_400, 82.875),
    ];
    for (d, q, want) in cases {
        let st = stats(d, q, 50).unwrap();
        assert!((st.sigma_star * 100.0 - want).abs() <= 0.01, "{d}/{q}");
    }
}

#[test]
fn calibration_extremes_and_target() {
    let enc = SimilarityEncoder::init(&[4, 4, 3], &EncoderArch::default(), 1).unwrap();
    let benign = gen_source_dataset(4, 10, 500, 4, 3).unwrap();
    let k = 10;
    let lo = calibrate_threshold(&enc, &benign, k, 0.0, 7).unwrap();
    let hi = calibrate_threshold(&enc, &benign, k, 1.0, 7).unwrap();
    assert_eq!(lo.distances.len(), benign.len() - k);
    // re-streaming in the same order reproduces the recorded distances
    assert_eq!(fraction_below(&lo.distances, lo.rho), 0.0);
    assert_eq!(fraction_below(&hi.distances, hi.rho), 1.0);
    let mid = calibrate_threshold(&enc, &benign, k, 0.001, 7).unwrap();
    assert!(mid.achieved_fpr <= 0.003);
    // a re-stream in a fresh order stays within the discreteness bound
    let other = calibrate_threshold(&enc, &benign, k, 0.001, 8).unwrap();
    let fpr = fraction_below(&other.distances, mid.rho);
    assert!(fpr <= 0.003, "re-stream FPR {fpr}");
    assert!(calibrate_threshold(&enc, &benign.subset(&[0, 1, 2]), k, 0.001, 7).is_err());
}

#[test]
fn stream_distances_use_all_predecessors() {
    let e = Tensor::new(vec![4, 1], vec![0.0, 1.0, 3.0, 10.0]).unwrap();
    let d = stream_distances(&e, 2);
    // position 2: |3-0|, |3-1| -> 2.5 ; position 3: nearest 3 and 1 -> (7 + 9) / 2
    assert_eq!(d, vec![2.5, 8.0]);
}
