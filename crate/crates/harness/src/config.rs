//! Scenario configuration: flat `key = value` sections, file overrides on
//! top of the defaults, then per-key command-line overrides.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use toml::{Table, Value};

#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct ConfigError(pub String);

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

/// A number, or `"auto"` to let the scenario derive it.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Auto {
    #[default]
    Auto,
    Value(f64),
}

impl Serialize for Auto {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Auto::Auto => s.serialize_str("auto"),
            Auto::Value(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Auto {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Auto::Value(v)),
            Raw::Text(t) if t == "auto" => Ok(Auto::Auto),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"auto\", got {t:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source_classes: usize,
    pub source_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub target_classes: usize,
    pub target_size: usize,
    pub train_sizes: Vec<usize>,
    /// Training-set size for the detection and surrogate scenarios.
    pub attack_train_size: usize,
    pub test_size: usize,
    pub benign_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source_classes: 12,
            source_per_class: 100,
            image_size: 32,
            channels: 3,
            target_classes: 2,
            target_size: 16,
            train_sizes: vec![200, 400],
            attack_train_size: 100,
            test_size: 200,
            benign_size: 1200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    pub hidden: Vec<usize>,
    pub train_epochs: usize,
    pub train_batch: usize,
    pub train_lr: f64,
    pub optimizer: String,
    pub holdout: f64,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            hidden: vec![512],
            train_epochs: 15,
            train_batch: 32,
            train_lr: 1e-3,
            optimizer: "rmsprop".into(),
            holdout: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub surrogate_hidden: Vec<usize>,
    pub surrogate_epochs: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            surrogate_hidden: vec![256],
            surrogate_epochs: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub encoder_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub pairs: usize,
    pub pair_balance: f64,
    pub encoder_epochs: usize,
    pub encoder_batch: usize,
    pub encoder_lr: f64,
    pub weight_decay: f64,
    pub margin: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![256],
            embed_dim: 32,
            pairs: 1500,
            pair_balance: 0.5,
            encoder_epochs: 30,
            encoder_batch: 32,
            encoder_lr: 1e-4,
            weight_decay: 1e-6,
            margin: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorSection {
    pub k: usize,
    pub target_fpr: f64,
    /// `auto` calibrates on the benign stream; `0` disables detection.
    pub rho: Auto,
    pub ban_on_detect: bool,
    pub accounts: usize,
}

impl Default for DetectorSection {
    fn default() -> Self {
        Self {
            k: 10,
            target_fpr: 0.001,
            rho: Auto::Auto,
            ban_on_detect: false,
            accounts: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub group_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub gamma: f64,
    /// `chain` or `raw`.
    pub update: String,
    pub q: usize,
    pub q_grid: Vec<usize>,
    pub finetune_q: Vec<usize>,
    pub finetune_epochs: usize,
    pub mu: f64,
    /// `auto` uses the input dimension.
    pub b: Auto,
    pub mask_directions: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            group_size: 6,
            lr: 2.0,
            epochs: 10,
            batch: 20,
            gamma: 2.0,
            update: "chain".into(),
            q: 15,
            q_grid: vec![5, 15, 30],
            finetune_q: vec![5, 15],
            finetune_epochs: 2,
            mu: 0.1,
            b: Auto::Auto,
            mask_directions: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub repeats: usize,
    /// Also run the black-box counterpart in `attack-whitebox`.
    pub compare: bool,
    pub artifacts: String,
    pub out: String,
    /// `csv` or `console`.
    pub format: String,
    pub trace: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            repeats: 5,
            compare: true,
            artifacts: "artifacts".into(),
            out: "runs".into(),
            format: "console".into(),
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub data: DataConfig,
    pub source: SourceConfig,
    pub surrogate: SurrogateConfig,
    pub encoder: EncoderConfig,
    pub detector: DetectorSection,
    pub attack: AttackConfig,
    pub run: RunConfig,
}

/// Where each key lives and what its default looks like.
#[derive(Debug, Clone)]
pub struct KeyInfo {
    pub section: String,
    pub default: Value,
}

impl Config {
    fn to_table(&self) -> Table {
        match Value::try_from(self).expect("config serializes") {
            Value::Table(t) => t,
            _ => unreachable!("config is a table"),
        }
    }

    fn from_table(t: Table) -> Result<Self, ConfigError> {
        let cfg: Config = Value::Table(t).try_into().map_err(|e: toml::de::Error| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key of every section; key names are unique across sections.
    pub fn keys() -> BTreeMap<String, KeyInfo> {
        let mut out = BTreeMap::new();
        for (section, body) in Config::default().to_table() {
            let Value::Table(body) = body else { continue };
            for (key, default) in body {
                let prev = out.insert(
                    key.clone(),
                    KeyInfo {
                        section: section.clone(),
                        default,
                    },
                );
                assert!(prev.is_none(), "duplicate config key {key}");
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        Self::default().merge_text(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies a config file's sections on top of `self`.
    pub fn merge_text(&self, text: &str) -> Result<Self, ConfigError> {
        let file: Table = text.parse().map_err(|e: toml::de::Error| ConfigError(e.to_string()))?;
        let keys = Self::keys();
        let mut table = self.to_table();
        for (section, body) in file {
            let Value::Table(body) = body else {
                return err(format!("top-level entry {section:?} must be a [section]"));
            };
            for (key, value) in body {
                match keys.get(&key) {
                    Some(info) if info.section == section => {
                        let value = coerce(value, &info.default);
                        section_mut(&mut table, &section).insert(key, value);
                    }
                    Some(info) => return err(format!("key {key:?} belongs in [{}], not [{section}]", info.section)),
                    None => return err(format!("unknown key {key:?} in [{section}]")),
                }
            }
        }
        Self::from_table(table)
    }

    /// Applies `key = raw` overrides as given on the command line.
    pub fn with_overrides<'a>(&self, overrides: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self, ConfigError> {
        let keys = Self::keys();
        let mut table = self.to_table();
        for (key, raw) in overrides {
            let Some(info) = keys.get(key) else {
                return err(format!("unknown config key {key:?}"));
            };
            let value = coerce(parse_flag(raw, &info.default), &info.default);
            section_mut(&mut table, &info.section).insert(key.to_string(), value);
        }
        Self::from_table(table)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.data;
        if d.target_size > d.image_size {
            return err(format!("target_size {} exceeds image_size {}", d.target_size, d.image_size));
        }
        if d.target_classes == 0 || d.source_classes == 0 || d.channels == 0 || d.target_size == 0 {
            return err("class counts and sizes must be positive");
        }
        let sizes = d.train_sizes.iter().chain([&d.attack_train_size, &d.test_size]);
        for &n in sizes {
            if n == 0 || n % d.target_classes != 0 {
                return err(format!("target set size {n} must be a positive multiple of target_classes"));
            }
        }
        if d.benign_size % d.source_classes != 0 || d.benign_size <= self.detector.k {
            return err("benign_size must be a multiple of source_classes and exceed k");
        }
        if self.attack.group_size * d.target_classes > d.source_classes {
            return err("group_size * target_classes exceeds source_classes");
        }
        if !["rmsprop", "sgd"].contains(&self.source.optimizer.as_str()) {
            return err(format!("optimizer must be rmsprop or sgd, got {:?}", self.source.optimizer));
        }
        if !["chain", "raw"].contains(&self.attack.update.as_str()) {
            return err(format!("update must be chain or raw, got {:?}", self.attack.update));
        }
        if !["csv", "console"].contains(&self.run.format.as_str()) {
            return err(format!("format must be csv or console, got {:?}", self.run.format));
        }
        let qs = self.attack.q_grid.iter().chain(&self.attack.finetune_q).chain([&self.attack.q]);
        if qs.into_iter().any(|&q| q == 0) {
            return err("q must be >= 1 for black-box scenarios");
        }
        if let Auto::Value(r) = self.detector.rho {
            if !(r.is_finite() && r >= 0.0) {
                return err(format!("rho must be finite and >= 0, got {r}"));
            }
        }
        if let Auto::Value(b) = self.attack.b {
            if !(b.is_finite() && b > 0.0) {
                return err(format!("b must be positive, got {b}"));
            }
        }
        if !(0.0..=1.0).contains(&self.detector.target_fpr) {
            return err("target_fpr must lie in [0, 1]");
        }
        if self.detector.k == 0 {
            return err("k must be >= 1");
        }
        if self.detector.accounts == 0 || self.run.repeats == 0 {
            return err("accounts and repeats must be >= 1");
        }
        Ok(())
    }
}

impl fmt::Display for Config {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_toml())
    }
}

fn section_mut<'t>(table: &'t mut Table, section: &str) -> &'t mut Table {
    match table.get_mut(section) {
        Some(Value::Table(t)) => t,
        _ => unreachable!("default config has section {section}"),
    }
}

/// Reads a flag value as a TOML literal; bare words become strings and a
/// comma list fills an array-valued key.
fn parse_flag(raw: &str, default: &Value) -> Value {
    let literal = |s: &str| {
        format!("v = {s}")
            .parse::<Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
    };
    if let Value::Array(_) = default {
        let bracketed = if raw.trim_start().starts_with('[') {
            raw.to_string()
        } else {
            format!("[{raw}]")
        };
        if let Some(v) = literal(&bracketed) {
            return v;
        }
    }
    literal(raw).unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Integers are accepted where the default is a float.
fn coerce(value: Value, default: &Value) -> Value {
    match (value, default) {
        (Value::Integer(i), Value::Float(_)) => Value::Float(i as f64),
        (Value::Array(items), Value::Array(d)) if d.first().is_some_and(Value::is_float) => {
            Value::Array(items.into_iter().map(|v| coerce(v, &d[0])).collect())
        }
        (v, _) => v,
    }
}

/// Seed for one named artifact or run, derived from the scenario seed.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(splitmix(seed ^ h).wrapping_add(index))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
