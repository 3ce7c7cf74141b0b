use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reprog_kernel::{
    finite_diff_check, layer::softmax_in_place, rmsprop_step, sgd_step, FeedforwardNet, Layer,
    LayerKind, Tensor,
};

fn random_tensor(dims: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0)).unwrap()
}

/// Straight triple-loop evaluation of `softmax(W2 relu(W1 x + b1) + b2)`.
fn naive_two_layer(net: &FeedforwardNet, x: &[f64]) -> Vec<f64> {
    let affine = |layer: &Layer, v: &[f64]| -> Vec<f64> {
        let Layer::Affine { weight, bias } = layer else {
            panic!("expected affine")
        };
        let (out, inp) = (weight.dims()[0], weight.dims()[1]);
        (0..out)
            .map(|o| {
                let mut acc = bias.data()[o];
                for i in 0..inp {
                    acc += weight.data()[o * inp + i] * v[i];
                }
                acc
            })
            .collect()
    };
    let l = net.layers();
    let h: Vec<f64> = affine(&l[0], x).into_iter().map(|v| v.max(0.0)).collect();
    let z = affine(&l[2], &h);
    let m = z.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[test]
fn forward_matches_naive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..10 {
        let net = FeedforwardNet::mlp(vec![4, 4, 3], &[17], 6, true, &mut rng).unwrap();
        let x = random_tensor(&[4, 4, 3], &mut rng);
        let got = net.forward(&x).unwrap();
        for (a, b) in got.data().iter().zip(naive_two_layer(&net, x.data())) {
            assert!((a - b).abs() < 1e-12);
        }
        // batched rows agree with the single-sample path bit-for-bit
        let batch = Tensor::stack([&x, &x]).unwrap();
        let rows = net.forward_batch(&batch).unwrap();
        assert_eq!(rows.row(1), got);
    }
}

fn net_for(kind: LayerKind, rng: &mut impl Rng) -> FeedforwardNet {
    let head = Layer::affine_init(12, 12, rng);
    let layer = match kind {
        LayerKind::Affine => Layer::affine_init(12, 5, rng),
        LayerKind::Relu => Layer::Relu { width: 12 },
        LayerKind::Tanh => Layer::Tanh { width: 12 },
        LayerKind::Softmax => Layer::Softmax { width: 12 },
        LayerKind::AvgPool => Layer::avg_pool(2, 2, 3, 2).unwrap(),
    };
    FeedforwardNet::new(vec![2, 2, 3], vec![head, layer]).unwrap()
}

#[test]
fn every_layer_kind_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for kind in [
        LayerKind::Affine,
        LayerKind::Relu,
        LayerKind::Tanh,
        LayerKind::Softmax,
        LayerKind::AvgPool,
    ] {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let net = net_for(kind, &mut rng);
            let x = random_tensor(&[2, 2, 3], &mut rng);
            let report = finite_diff_check(&net, &x, 1e-5).unwrap();
            worst = worst.max(report.max_relative_error);
        }
        assert!(worst < 1e-5, "{kind:?}: worst relative error {worst:e}");
    }
}

#[test]
fn deep_classifier_gradients_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let net = FeedforwardNet::mlp(vec![6, 6, 3], &[32, 16], 12, true, &mut rng).unwrap();
    let x = random_tensor(&[6, 6, 3], &mut rng);
    let report = finite_diff_check(&net, &x, 1e-5).unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn forward_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let net = FeedforwardNet::mlp(vec![8, 8, 3], &[64], 12, true, &mut rng).unwrap();
    let x = random_tensor(&[8, 8, 3], &mut rng);
    let a = net.forward(&x).unwrap();
    let b = net.forward(&x).unwrap();
    assert!(a
        .data()
        .iter()
        .zip(b.data())
        .all(|(p, q)| p.to_bits() == q.to_bits()));
}

/// Reference RMSprop written independently of the library.
fn reference_rmsprop(v: &mut [f64], p: &mut [f64], g: &[f64], lr: f64) {
    for i in 0..p.len() {
        v[i] = 0.9 * v[i] + 0.1 * g[i] * g[i];
        p[i] -= lr * g[i] / (v[i] + 1e-8).sqrt();
    }
}

#[test]
fn rmsprop_matches_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut v = Tensor::zeros(&[50]);
    let mut p = random_tensor(&[50], &mut rng);
    let (mut rv, mut rp) = (vec![0.0; 50], p.data().to_vec());
    for _ in 0..20 {
        let g = random_tensor(&[50], &mut rng);
        rmsprop_step(&mut v, &mut p, &g, 1e-3, 0.9, 1e-8).unwrap();
        reference_rmsprop(&mut rv, &mut rp, g.data(), 1e-3);
    }
    for (a, b) in p.data().iter().zip(&rp) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!(v.data().iter().all(|&a| a >= 0.0));
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..20)) {
        let mut row = logits.clone();
        softmax_in_place(&mut row);
        let total: f64 = row.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(row.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn optimizer_steps_stay_finite(
        p in prop::collection::vec(-1e3f64..1e3, 1..16),
        lr in 0.0f64..1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = p.len();
        let g = Tensor::from_fn(&[n], |_| rng.random_range(-1e3..1e3)).unwrap();
        let mut a = Tensor::vector(p.clone()).unwrap();
        sgd_step(&mut a, &g, lr).unwrap();
        let mut b = Tensor::vector(p).unwrap();
        let mut v = Tensor::zeros(&[n]);
        rmsprop_step(&mut v, &mut b, &g, lr, 0.9, 1e-8).unwrap();
        prop_assert!(a.is_finite() && b.is_finite() && v.is_finite());
    }
}
