use reprog_core::data::{gen_source_dataset, gen_target_dataset, make_pairs, PaddingSpec};
use reprog_core::models::{
    accuracy, train_source_classifier, ArchConfig, Classifier, QueryChannel, QueryObserver,
    QueryRecord, TrainConfig, TrainingMeta, Verdict,
};
use reprog_core::seeded_rng;
use reprog_kernel::{FeedforwardNet, Tensor};

#[test]
fn linear_classifier_separates_source_classes() {
    let ds = gen_source_dataset(11, 12, 100, 16, 3).unwrap();
    let cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };
    let clf = train_source_classifier(&ds, &ArchConfig { hidden: vec![] }, &cfg, 3).unwrap();
    assert!(clf.meta.heldout_accuracy > 0.8, "{}", clf.meta.heldout_accuracy);
}

#[test]
fn default_classifier_reaches_ninety_percent() {
    let ds = gen_source_dataset(12, 12, 50, 32, 3).unwrap();
    let clf = train_source_classifier(&ds, &ArchConfig::default(), &TrainConfig::default(), 4).unwrap();
    assert!(clf.meta.heldout_accuracy >= 0.9, "{}", clf.meta.heldout_accuracy);
}

#[test]
fn target_class_means_are_far_apart() {
    let ds = gen_target_dataset(5, 2, 200, 16, 3).unwrap();
    // feature: mean of channel 0 minus mean of channel 2
    let feature = |x: &Tensor| {
        let (mut a, mut b) = (0.0, 0.0);
        for px in x.data().chunks(3) {
            a += px[0];
            b += px[2];
        }
        (a - b) / (x.len() / 3) as f64
    };
    let stats = |class: usize| {
        let v: Vec<f64> = ds
            .samples
            .iter()
            .zip(&ds.labels)
            .filter(|(_, &l)| l == class)
            .map(|(x, _)| feature(x))
            .collect();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64;
        (m, var.sqrt())
    };
    let ((m0, s0), (m1, s1)) = (stats(0), stats(1));
    assert!((m0 - m1).abs() > 5.0 * s0.max(s1), "{m0} {m1} {s0} {s1}");
}

#[test]
fn generated_values_stay_in_range() {
    let s = gen_source_dataset(1, 3, 5, 8, 3).unwrap();
    let t = gen_target_dataset(1, 2, 5, 4, 3).unwrap();
    for x in s.samples.iter().chain(&t.samples) {
        assert!(x.max_abs() <= 1.0);
    }
}

#[test]
fn pair_labels_agree_with_classes() {
    let ds = gen_source_dataset(2, 4, 10, 4, 1).unwrap();
    let pairs = make_pairs(&ds, 9, 100, 0.5).unwrap();
    assert_eq!(pairs.count_label(0), 50);
    for p in &pairs.pairs {
        let same = ds.labels[p.first] == ds.labels[p.second];
        assert_eq!(p.label == 0, same);
        assert_ne!(p.first, p.second);
    }
    let all_same = make_pairs(&ds, 9, 30, 1.0).unwrap();
    assert_eq!(all_same.count_label(0), 30);
}

#[test]
fn padding_leaves_frame_zero_and_mask_disjoint() {
    let spec = PaddingSpec::new(4, 10, 3).unwrap();
    let mut rng = seeded_rng(1, 1);
    for _ in 0..10 {
        let x = Tensor::from_fn(&[4, 4, 3], |_| rand::Rng::random_range(&mut rng, -1.0..1.0)).unwrap();
        let padded = spec.pad(&x).unwrap();
        assert_eq!(padded.hadamard(&spec.mask()).unwrap().max_abs(), 0.0);
        assert!((padded.sum() - x.sum()).abs() < 1e-12);
    }
}

fn random_classifier(seed: u64) -> Classifier {
    let net = FeedforwardNet::mlp(vec![6, 6, 3], &[32], 4, true, &mut seeded_rng(seed, 9)).unwrap();
    Classifier::from_net(
        net,
        TrainingMeta {
            seed,
            epochs: 0,
            heldout_accuracy: f64::NAN,
            log: vec![],
        },
    )
    .unwrap()
}

#[test]
fn random_network_is_near_chance() {
    let ds = gen_source_dataset(3, 4, 150, 6, 3).unwrap();
    let mut total = 0.0;
    for seed in 0..8 {
        total += accuracy(&random_classifier(seed), &ds).unwrap();
    }
    let mean = total / 8.0;
    assert!((mean - 0.25).abs() <= 0.05, "mean accuracy {mean}");
}

#[derive(Default)]
struct Recorder(Vec<(u32, u64)>);

impl QueryObserver for Recorder {
    fn observe(&mut self, r: &QueryRecord<'_>) -> Verdict {
        self.0.push((r.account, r.seq));
        Verdict::Pass
    }
}

#[test]
fn observer_sees_calls_in_order_and_scores_are_account_independent() {
    let clf = random_classifier(1);
    let x = Tensor::full(&[6, 6, 3], 0.2);
    let y = Tensor::full(&[6, 6, 3], -0.4);
    let mut ch = QueryChannel::new(&clf, Recorder::default());
    let a = ch.predict_scores(7, &x).unwrap();
    ch.predict_batch(3, &[y.clone(), x.clone()]).unwrap();
    let b = ch.predict_scores(7, &x).unwrap();
    ch.predict_scores(3, &y).unwrap();
    assert_eq!(a, b);
    assert!((a.sum() - 1.0).abs() < 1e-12);
    assert_eq!(ch.observer().0, vec![(7, 0), (3, 0), (3, 1), (7, 1), (3, 2)]);
    assert_eq!(ch.counters(7).queries, 2);
    assert_eq!(ch.total_queries(), 5);
    assert!(ch.predict_scores(1, &Tensor::zeros(&[2])).is_err());
}
