//! Quick consistency checks run by `reprog selftest`: seconds, no artifacts.

use reprog_core::data::{gen_target_dataset, PaddingSpec};
use reprog_core::detector::{stats, DetectorConfig, DetectorState};
use reprog_core::models::{Classifier, TrainingMeta, Verdict};
use reprog_core::reprogram::{loss_and_input_grad, reprogram_loss, AdversarialProgram, FocalLoss, LabelMapping};
use reprog_core::seeded_rng;
use reprog_kernel::{finite_diff_check, FeedforwardNet, Layer, Tensor};

type Check = (&'static str, fn() -> Result<(), String>);

const CHECKS: [Check; 4] = [
    ("network gradients match central differences", network_gradients),
    ("program gradient matches central differences", program_gradient),
    ("detection rate arithmetic", sigma_arithmetic),
    ("identical queries are caught once per k+1", identical_queries),
];

/// Runs every check, printing one line each; fails if any check fails.
pub fn run() -> Result<(), String> {
    let mut failed = Vec::new();
    for (name, check) in CHECKS {
        match check() {
            Ok(()) => println!("ok    {name}"),
            Err(e) => {
                println!("FAIL  {name}: {e}");
                failed.push(name);
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(format!("{} selftest check(s) failed", failed.len()))
    }
}

fn e(err: impl std::fmt::Display) -> String {
    err.to_string()
}

fn network_gradients() -> Result<(), String> {
    let mut rng = seeded_rng(1, 0);
    let net = FeedforwardNet::new(
        vec![2, 3, 2],
        vec![
            Layer::affine_init(12, 8, &mut rng),
            Layer::Tanh { width: 8 },
            Layer::affine_init(8, 5, &mut rng),
            Layer::Softmax { width: 5 },
        ],
    )
    .map_err(e)?;
    let x = Tensor::from_fn(&[2, 3, 2], |i| (i as f64 * 0.7).sin()).map_err(e)?;
    let report = finite_diff_check(&net, &x, 1e-4).map_err(e)?;
    if report.passed {
        Ok(())
    } else {
        Err(format!("relative error {:e}", report.max_relative_error))
    }
}

fn program_gradient() -> Result<(), String> {
    let spec = PaddingSpec::new(2, 4, 2).map_err(e)?;
    let mut rng = seeded_rng(2, 0);
    let net = FeedforwardNet::new(
        vec![4, 4, 2],
        vec![
            Layer::affine_init(32, 10, &mut rng),
            Layer::Tanh { width: 10 },
            Layer::affine_init(10, 4, &mut rng),
            Layer::Softmax { width: 4 },
        ],
    )
    .map_err(e)?;
    let meta = TrainingMeta {
        seed: 2,
        epochs: 0,
        heldout_accuracy: f64::NAN,
        log: vec![],
    };
    let clf = Classifier::from_net(net, meta).map_err(e)?;
    let mapping = LabelMapping::consecutive(4, 2, 2).map_err(e)?;
    let ds = gen_target_dataset(5, 2, 3, 2, 2).map_err(e)?;
    let focal = FocalLoss::new(2.0).map_err(e)?;
    let w = Tensor::from_fn(&spec.outer_dims(), |i| 1.5 * (i as f64 * 1.3).cos()).map_err(e)?;
    let prog = AdversarialProgram::new(w, spec.mask()).map_err(e)?;
    let samples: Vec<(&Tensor, usize)> = ds.samples.iter().zip(ds.labels.iter().copied()).collect();
    let (_, g) = loss_and_input_grad(&clf, &prog, &samples, &mapping, &focal, &spec).map_err(e)?;
    let analytic = prog.chain_rule(&g).map_err(e)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..prog.w().len() {
        let at = |s: f64| -> Result<f64, String> {
            let mut w = prog.w().clone();
            w.data_mut()[i] += s;
            let p = AdversarialProgram::new(w, spec.mask()).map_err(e)?;
            reprogram_loss(&p, &ds, &mapping, &focal, &spec, &mut &clf).map_err(e)
        };
        let numeric = (at(h)? - at(-h)?) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7));
    }
    if worst < 1e-4 {
        Ok(())
    } else {
        Err(format!("relative error {worst:e}"))
    }
}

fn sigma_arithmetic() -> Result<(), String> {
    for (d, q, want) in [(1810, 110_400, 0.8361), (980, 51_480, 0.9709)] {
        let got = stats(d, q, 50).map_err(e)?.sigma_star;
        if (got - want).abs() > 1e-4 {
            return Err(format!("D={d} Q={q}: {got}"));
        }
    }
    Ok(())
}

fn identical_queries() -> Result<(), String> {
    let cfg = DetectorConfig {
        k: 3,
        rho: 0.5,
        ban_on_detect: false,
    };
    let mut s = DetectorState::default();
    let verdicts: Vec<Verdict> = (0..4).map(|_| s.observe_embedding(&[0.2, 0.1], &cfg).verdict).collect();
    if verdicts[3] == Verdict::Flagged && s.detections == 1 && s.buffer_len() == 0 {
        Ok(())
    } else {
        Err(format!("verdicts {verdicts:?}, D = {}, buffer {}", s.detections, s.buffer_len()))
    }
}
