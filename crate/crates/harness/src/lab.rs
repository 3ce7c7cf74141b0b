//! Scenario artifacts: datasets, the target and surrogate classifiers, the
//! similarity encoder and the detector calibration. Each is built once on
//! first use; with a store directory attached, trained artifacts are reused
//! across commands when their fingerprint matches.

use std::cell::OnceCell;
use std::path::{Path, PathBuf};

use reprog_core::data::{gen_source_dataset, gen_target_dataset, make_pairs, LabeledDataset, PaddingSpec, PairDataset};
use reprog_core::detector::{calibrate_threshold, fraction_below, Calibration, DetectorConfig};
use reprog_core::encoder::{
    encoder_pair_accuracy, mean_distances, train_encoder, ContrastiveSpec, EncoderArch, EncoderTrainConfig, SimilarityEncoder,
};
use reprog_core::models::{train_source_classifier, ArchConfig, Classifier, TrainConfig};
use reprog_core::reprogram::{FocalLoss, LabelMapping, ReprogramConfig, UpdateRule};
use reprog_core::zoattack::ZoConfig;
use reprog_core::{CoreError, Result};
use reprog_kernel::OptimizerKind;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, Auto, Config};

pub struct Lab {
    pub cfg: Config,
    pub seed: u64,
    store: Option<PathBuf>,
    source: OnceCell<LabeledDataset>,
    benign: OnceCell<LabeledDataset>,
    classifier: OnceCell<Classifier>,
    surrogate: OnceCell<Classifier>,
    encoder: OnceCell<SimilarityEncoder>,
    calibration: OnceCell<Calibration>,
    test: OnceCell<LabeledDataset>,
}

fn cached<'c, T>(cell: &'c OnceCell<T>, build: impl FnOnce() -> Result<T>) -> Result<&'c T> {
    if let Some(v) = cell.get() {
        return Ok(v);
    }
    let v = build()?;
    Ok(cell.get_or_init(|| v))
}

impl Lab {
    pub fn new(cfg: Config, seed: u64) -> Self {
        Self {
            cfg,
            seed,
            store: None,
            source: OnceCell::new(),
            benign: OnceCell::new(),
            classifier: OnceCell::new(),
            surrogate: OnceCell::new(),
            encoder: OnceCell::new(),
            calibration: OnceCell::new(),
            test: OnceCell::new(),
        }
    }

    pub fn with_store(mut self, dir: impl Into<PathBuf>) -> Self {
        self.store = Some(dir.into());
        self
    }

    pub fn seed_for(&self, tag: &str, index: u64) -> u64 {
        derive_seed(self.seed, tag, index)
    }

    pub fn spec(&self) -> Result<PaddingSpec> {
        let d = &self.cfg.data;
        PaddingSpec::new(d.target_size, d.image_size, d.channels)
    }

    pub fn mapping(&self) -> Result<LabelMapping> {
        let d = &self.cfg.data;
        LabelMapping::consecutive(d.source_classes, d.target_classes, self.cfg.attack.group_size)
    }

    fn source_set(&self, tag: &str, per_class: usize) -> Result<LabeledDataset> {
        let d = &self.cfg.data;
        gen_source_dataset(self.seed_for(tag, 0), d.source_classes, per_class, d.image_size, d.channels)
    }

    pub fn source_data(&self) -> Result<&LabeledDataset> {
        cached(&self.source, || self.source_set("source-data", self.cfg.data.source_per_class))
    }

    /// Held-out source-domain traffic for calibration.
    pub fn benign_data(&self) -> Result<&LabeledDataset> {
        let d = &self.cfg.data;
        cached(&self.benign, || self.source_set("benign-data", d.benign_size / d.source_classes))
    }

    pub fn target_train(&self, size: usize) -> Result<LabeledDataset> {
        let d = &self.cfg.data;
        gen_target_dataset(
            self.seed_for("target-train", size as u64),
            d.target_classes,
            size / d.target_classes,
            d.target_size,
            d.channels,
        )
    }

    pub fn target_test(&self) -> Result<&LabeledDataset> {
        let d = &self.cfg.data;
        cached(&self.test, || {
            gen_target_dataset(
                self.seed_for("target-test", 0),
                d.target_classes,
                d.test_size / d.target_classes,
                d.target_size,
                d.channels,
            )
        })
    }

    fn train_config(&self, epochs: usize) -> TrainConfig {
        let s = &self.cfg.source;
        TrainConfig {
            epochs,
            batch: s.train_batch,
            lr: s.train_lr,
            optimizer: match s.optimizer.as_str() {
                "sgd" => OptimizerKind::Sgd,
                _ => OptimizerKind::rmsprop(),
            },
            holdout: s.holdout,
        }
    }

    /// The model under attack.
    pub fn classifier(&self) -> Result<&Classifier> {
        cached(&self.classifier, || {
            let key = self.fingerprint(&[&section(&self.cfg.data), &section(&self.cfg.source)]);
            self.stored("classifier", &key, |p| Classifier::load(p), |c, p| c.save(p), || {
                let arch = ArchConfig {
                    hidden: self.cfg.source.hidden.clone(),
                };
                let tc = self.train_config(self.cfg.source.train_epochs);
                train_source_classifier(self.source_data()?, &arch, &tc, self.seed_for("classifier", 0))
            })
        })
    }

    /// A second classifier on the same source data, with its own
    /// architecture and seed.
    pub fn surrogate(&self) -> Result<&Classifier> {
        cached(&self.surrogate, || {
            let key = self.fingerprint(&[
                &section(&self.cfg.data),
                &section(&self.cfg.source),
                &section(&self.cfg.surrogate),
            ]);
            self.stored("surrogate", &key, |p| Classifier::load(p), |c, p| c.save(p), || {
                let arch = ArchConfig {
                    hidden: self.cfg.surrogate.surrogate_hidden.clone(),
                };
                let tc = self.train_config(self.cfg.surrogate.surrogate_epochs);
                train_source_classifier(self.source_data()?, &arch, &tc, self.seed_for("surrogate", 0))
            })
        })
    }

    pub fn contrastive(&self) -> Result<ContrastiveSpec> {
        ContrastiveSpec::new(self.cfg.encoder.margin)
    }

    pub fn encoder_train_config(&self) -> Result<EncoderTrainConfig> {
        let e = &self.cfg.encoder;
        Ok(EncoderTrainConfig {
            epochs: e.encoder_epochs,
            batch: e.encoder_batch,
            lr: e.encoder_lr,
            weight_decay: e.weight_decay,
            contrastive: self.contrastive()?,
            ..EncoderTrainConfig::default()
        })
    }

    pub fn encoder(&self) -> Result<&SimilarityEncoder> {
        cached(&self.encoder, || {
            let key = self.fingerprint(&[&section(&self.cfg.data), &section(&self.cfg.encoder)]);
            let spec = self.contrastive()?;
            self.stored(
                "encoder",
                &key,
                |p| SimilarityEncoder::load(p, spec),
                |e, p| e.save(p),
                || {
                    let e = &self.cfg.encoder;
                    let pairs = make_pairs(self.source_data()?, self.seed_for("pairs", 0), e.pairs, e.pair_balance)?;
                    let arch = EncoderArch {
                        hidden: e.encoder_hidden.clone(),
                        embed_dim: e.embed_dim,
                    };
                    train_encoder(&pairs, &arch, &self.encoder_train_config()?, self.seed_for("encoder", 0))
                },
            )
        })
    }

    /// Pairs drawn from source data the encoder never saw.
    pub fn encoder_heldout_pairs(&self) -> Result<PairDataset> {
        let e = &self.cfg.encoder;
        let held = self.source_set("encoder-heldout", self.cfg.data.source_per_class)?;
        make_pairs(&held, self.seed_for("heldout-pairs", 0), e.pairs / 2, e.pair_balance)
    }

    pub fn encoder_heldout_distances(&self) -> Result<(f64, f64)> {
        mean_distances(self.encoder()?, &self.encoder_heldout_pairs()?)
    }

    pub fn encoder_heldout_accuracy(&self) -> Result<f64> {
        encoder_pair_accuracy(self.encoder()?, &self.encoder_heldout_pairs()?, &self.contrastive()?)
    }

    pub fn calibration(&self) -> Result<&Calibration> {
        cached(&self.calibration, || {
            let key = self.fingerprint(&[
                &section(&self.cfg.data),
                &section(&self.cfg.encoder),
                &section(&self.cfg.detector),
            ]);
            self.stored("calibration", &key, load_calibration, save_calibration, || {
                let det = &self.cfg.detector;
                calibrate_threshold(
                    self.encoder()?,
                    self.benign_data()?,
                    det.k,
                    det.target_fpr,
                    self.seed_for("calibration", 0),
                )
            })
        })
    }

    /// False-positive rate of the calibrated threshold on a fresh ordering
    /// of the benign stream.
    pub fn restream_fpr(&self) -> Result<f64> {
        let cal = self.calibration()?;
        let det = &self.cfg.detector;
        let again = calibrate_threshold(
            self.encoder()?,
            self.benign_data()?,
            det.k,
            det.target_fpr,
            self.seed_for("calibration", 1),
        )?;
        Ok(fraction_below(&again.distances, cal.rho))
    }

    pub fn detector_config(&self) -> Result<DetectorConfig> {
        let det = &self.cfg.detector;
        let rho = match det.rho {
            Auto::Auto => self.calibration()?.rho,
            Auto::Value(r) => r,
        };
        let cfg = DetectorConfig {
            k: det.k,
            rho,
            ban_on_detect: det.ban_on_detect,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn reprogram_config(&self, seed: u64, epochs: usize) -> Result<ReprogramConfig> {
        let a = &self.cfg.attack;
        Ok(ReprogramConfig {
            lr: a.lr,
            epochs,
            batch: a.batch,
            seed,
            focal: FocalLoss::new(a.gamma)?,
            update: match a.update.as_str() {
                "raw" => UpdateRule::Raw,
                _ => UpdateRule::ChainRule,
            },
        })
    }

    pub fn zo_config(&self, q: usize, seed: u64) -> ZoConfig {
        let a = &self.cfg.attack;
        ZoConfig {
            q,
            mu: a.mu,
            b: match a.b {
                Auto::Auto => None,
                Auto::Value(b) => Some(b),
            },
            seed,
            mask_directions: a.mask_directions,
        }
    }

    fn fingerprint(&self, parts: &[&str]) -> String {
        let mut key = format!("seed = {}\n", self.seed);
        for p in parts {
            key.push_str(p);
        }
        key
    }

    /// Loads `name` from the store when its recorded fingerprint equals
    /// `key`; otherwise builds it and, with a store attached, saves it.
    fn stored<T>(
        &self,
        name: &str,
        key: &str,
        load: impl FnOnce(&Path) -> Result<T>,
        save: impl FnOnce(&T, &Path) -> Result<()>,
        build: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        let Some(dir) = &self.store else {
            return build();
        };
        let path = dir.join(format!("{name}.bin"));
        let key_path = dir.join(format!("{name}.key"));
        if std::fs::read_to_string(&key_path).is_ok_and(|k| k == key) {
            if let Ok(v) = load(&path) {
                return Ok(v);
            }
        }
        let v = build()?;
        std::fs::create_dir_all(dir)?;
        save(&v, &path)?;
        std::fs::write(&key_path, key)?;
        Ok(v)
    }
}

fn section<T: Serialize>(body: &T) -> String {
    toml::to_string(body).expect("config sections serialize")
}

#[derive(Serialize, Deserialize)]
struct StoredCalibration {
    k: usize,
    target_fpr: f64,
    rho: f64,
    achieved_fpr: f64,
    distances: Vec<f64>,
}

fn save_calibration(c: &Calibration, path: &Path) -> Result<()> {
    let s = StoredCalibration {
        k: c.k,
        target_fpr: c.target_fpr,
        rho: c.rho,
        achieved_fpr: c.achieved_fpr,
        distances: c.distances.clone(),
    };
    let text = toml::to_string(&s).map_err(|e| CoreError::InvalidInput(e.to_string()))?;
    Ok(std::fs::write(path, text)?)
}

fn load_calibration(path: &Path) -> Result<Calibration> {
    let text = std::fs::read_to_string(path)?;
    let s: StoredCalibration = toml::from_str(&text).map_err(|e| CoreError::InvalidInput(e.to_string()))?;
    Ok(Calibration {
        k: s.k,
        target_fpr: s.target_fpr,
        rho: s.rho,
        distances: s.distances,
        achieved_fpr: s.achieved_fpr,
    })
}
