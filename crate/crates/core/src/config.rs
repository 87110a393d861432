//! Flat key=value configuration with dotted namespaces. Unknown keys are
//! hard errors so typos cannot silently fall back to defaults.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::augment::AugmentConfig;
use crate::mixup::{DomainLabelMode, MixupConfig, TaskLossKind};
use crate::trainer::{AdamParams, TrainConfig, Variant};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected key=value, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value for {key}: {msg}")]
    BadValue { key: String, msg: String },
}

#[derive(Clone, Debug)]
pub struct AppConfig {
    pub seed: u64,
    pub variant: Variant,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub task_loss: TaskLossKind,
    pub mixup: MixupConfig,
    pub dann_xi: f64,
    pub dann_kappa: f64,
    pub dann_literal: bool,
    pub domain_labels: DomainLabelMode,
    pub adam: AdamParams,
    pub augment: AugmentConfig,
    pub data_k_domains: usize,
    pub data_n_per_domain: usize,
    pub data_height: usize,
    pub data_width: usize,
    pub data_pgm: bool,
    pub experiment_seeds: usize,
    pub probe_folds: usize,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            seed: 0,
            variant: Variant::MixDann,
            lr: 2e-4,
            epochs: 60,
            batch_size: 16,
            base_channels: 8,
            in_channels: 1,
            task_loss: TaskLossKind::Dice,
            mixup: MixupConfig::default(),
            dann_xi: 0.1,
            dann_kappa: 3.0,
            dann_literal: false,
            domain_labels: DomainLabelMode::Mixed,
            adam: AdamParams::default(),
            augment: AugmentConfig::default(),
            data_k_domains: 3,
            data_n_per_domain: 60,
            data_height: 64,
            data_width: 64,
            data_pgm: false,
            experiment_seeds: 1,
            probe_folds: 5,
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64, ConfigError> {
    v.parse().map_err(|_| ConfigError::BadValue { key: key.into(), msg: format!("{v:?} is not a number") })
}

fn parse_usize(key: &str, v: &str) -> Result<usize, ConfigError> {
    v.parse().map_err(|_| ConfigError::BadValue { key: key.into(), msg: format!("{v:?} is not a non-negative integer") })
}

fn parse_u64(key: &str, v: &str) -> Result<u64, ConfigError> {
    v.parse().map_err(|_| ConfigError::BadValue { key: key.into(), msg: format!("{v:?} is not a non-negative integer") })
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(ConfigError::BadValue { key: key.into(), msg: format!("{v:?} is not a boolean") }),
    }
}

impl AppConfig {
    pub fn parse(text: &str) -> Result<AppConfig, ConfigError> {
        let mut cfg = AppConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::Syntax { line: lineno + 1, text: raw.to_string() })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        match key {
            "seed" => self.seed = parse_u64(key, v)?,
            "variant" => {
                self.variant = Variant::parse(v).ok_or_else(|| ConfigError::BadValue {
                    key: key.into(),
                    msg: format!("{v:?} is not one of DeepAll, DANN, Mixup, MixDANN"),
                })?
            }
            "lr" => self.lr = parse_f64(key, v)?,
            "epochs" => self.epochs = parse_usize(key, v)?,
            "batch_size" => self.batch_size = parse_usize(key, v)?,
            "base_channels" => self.base_channels = parse_usize(key, v)?,
            "in_channels" => self.in_channels = parse_usize(key, v)?,
            "task_loss" => {
                self.task_loss = match v {
                    "dice" => TaskLossKind::Dice,
                    "bce" => TaskLossKind::Bce,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            msg: format!("{v:?} is not one of dice, bce"),
                        })
                    }
                }
            }
            "mixup.alpha" => self.mixup.alpha = parse_f64(key, v)?,
            "mixup.apply_prob" => self.mixup.apply_prob = parse_f64(key, v)?,
            "dann.xi" => self.dann_xi = parse_f64(key, v)?,
            "dann.kappa" => self.dann_kappa = parse_f64(key, v)?,
            "dann.literal_gamma" => self.dann_literal = parse_bool(key, v)?,
            "dann.domain_labels" => {
                self.domain_labels = match v {
                    "mixed" => DomainLabelMode::Mixed,
                    "dominant" => DomainLabelMode::Dominant,
                    _ => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            msg: format!("{v:?} is not one of mixed, dominant"),
                        })
                    }
                }
            }
            "adam.beta1" => self.adam.beta1 = parse_f64(key, v)?,
            "adam.beta2" => self.adam.beta2 = parse_f64(key, v)?,
            "adam.eps" => self.adam.eps = parse_f64(key, v)?,
            "augment.rotation" => self.augment.rotation = parse_bool(key, v)?,
            "augment.scale" => self.augment.scale = parse_bool(key, v)?,
            "augment.shear" => self.augment.shear = parse_bool(key, v)?,
            "data.k_domains" => self.data_k_domains = parse_usize(key, v)?,
            "data.n_per_domain" => self.data_n_per_domain = parse_usize(key, v)?,
            "data.height" => self.data_height = parse_usize(key, v)?,
            "data.width" => self.data_width = parse_usize(key, v)?,
            "data.pgm" => self.data_pgm = parse_bool(key, v)?,
            "experiment.seeds" => self.experiment_seeds = parse_usize(key, v)?,
            "probe.folds" => self.probe_folds = parse_usize(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, msg: &str| {
            Err(ConfigError::BadValue { key: key.into(), msg: msg.into() })
        };
        if self.lr <= 0.0 {
            return bad("lr", "must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        if self.mixup.alpha <= 0.0 {
            return bad("mixup.alpha", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.mixup.apply_prob) {
            return bad("mixup.apply_prob", "must be in [0, 1]");
        }
        if self.dann_xi < 0.0 {
            return bad("dann.xi", "must be non-negative");
        }
        if self.data_height % 4 != 0 || self.data_width % 4 != 0 {
            return bad("data.height", "spatial dims must be divisible by 4");
        }
        if self.probe_folds < 2 {
            return bad("probe.folds", "need at least 2 folds");
        }
        if self.experiment_seeds == 0 {
            return bad("experiment.seeds", "need at least 1 seed repetition");
        }
        Ok(())
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            variant: self.variant,
            lr: self.lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            base_channels: self.base_channels,
            in_channels: self.in_channels,
            mixup: self.mixup,
            dann_xi: self.dann_xi,
            dann_kappa: self.dann_kappa,
            dann_literal: self.dann_literal,
            domain_labels: self.domain_labels,
            adam: self.adam,
            augment: self.augment,
            task_loss: self.task_loss,
            dice_eps: 1.0,
        }
    }

    /// Resolved key=value snapshot (sorted keys) for manifests.
    pub fn snapshot(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        put("seed", self.seed.to_string());
        put("variant", self.variant.as_str().to_string());
        put("lr", format!("{}", self.lr));
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("base_channels", self.base_channels.to_string());
        put("in_channels", self.in_channels.to_string());
        put(
            "task_loss",
            match self.task_loss {
                TaskLossKind::Dice => "dice".to_string(),
                TaskLossKind::Bce => "bce".to_string(),
            },
        );
        put("mixup.alpha", format!("{}", self.mixup.alpha));
        put("mixup.apply_prob", format!("{}", self.mixup.apply_prob));
        put("dann.xi", format!("{}", self.dann_xi));
        put("dann.kappa", format!("{}", self.dann_kappa));
        put("dann.literal_gamma", self.dann_literal.to_string());
        put(
            "dann.domain_labels",
            match self.domain_labels {
                DomainLabelMode::Mixed => "mixed".to_string(),
                DomainLabelMode::Dominant => "dominant".to_string(),
            },
        );
        put("adam.beta1", format!("{}", self.adam.beta1));
        put("adam.beta2", format!("{}", self.adam.beta2));
        put("adam.eps", format!("{}", self.adam.eps));
        put("augment.rotation", self.augment.rotation.to_string());
        put("augment.scale", self.augment.scale.to_string());
        put("augment.shear", self.augment.shear.to_string());
        put("data.k_domains", self.data_k_domains.to_string());
        put("data.n_per_domain", self.data_n_per_domain.to_string());
        put("data.height", self.data_height.to_string());
        put("data.width", self.data_width.to_string());
        put("data.pgm", self.data_pgm.to_string());
        put("experiment.seeds", self.experiment_seeds.to_string());
        put("probe.folds", self.probe_folds.to_string());
        m
    }

    pub fn snapshot_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.snapshot() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_snapshot() {
        let cfg = AppConfig::default();
        let text = cfg.snapshot_text();
        let parsed = AppConfig::parse(&text).unwrap();
        assert_eq!(parsed.snapshot(), cfg.snapshot());
    }

    #[test]
    fn parses_dotted_keys_and_comments() {
        let cfg = AppConfig::parse(
            "# comment\n\nvariant = DANN\nmixup.alpha=0.9\n  dann.xi = 0.2\nepochs=5\n",
        )
        .unwrap();
        assert_eq!(cfg.variant, Variant::Dann);
        assert_eq!(cfg.mixup.alpha, 0.9);
        assert_eq!(cfg.dann_xi, 0.2);
        assert_eq!(cfg.epochs, 5);
    }

    #[test]
    fn unknown_key_is_a_hard_error() {
        let err = AppConfig::parse("mixup.alhpa=0.7\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey(k) if k == "mixup.alhpa"));
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(AppConfig::parse("epochs=zero\n").is_err());
        assert!(AppConfig::parse("variant=Mixdann\n").is_err());
        assert!(AppConfig::parse("mixup.apply_prob=1.5\n").is_err());
        assert!(AppConfig::parse("data.height=30\n").is_err());
        assert!(AppConfig::parse("epochs\n").is_err());
    }
}
