use std::fmt::Write as _;
use std::path::Path;

use crate::agreement::LossKind;

use super::TrainError;

/// Hyper-parameters of a training run. The text form is flat `key = value`
/// lines; `#` starts a comment.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub lambda: f64,
    /// `None` trains without an agreement term.
    pub agreement_loss: Option<LossKind>,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Epochs between validation runs; the last epoch is always validated.
    pub validation_interval: usize,
    pub max_len: usize,
    pub vocab_cap: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lambda: 1.0,
            agreement_loss: Some(LossKind::Mul),
            embed_dim: 32,
            hidden_dim: 64,
            batch_size: 32,
            max_epochs: 30,
            learning_rate: 0.002,
            clip_norm: 5.0,
            seed: 1,
            validation_interval: 1,
            max_len: 50,
            vocab_cap: 30000,
        }
    }
}

pub const CONFIG_KEYS: [&str; 12] = [
    "lambda",
    "agreement_loss",
    "embed_dim",
    "hidden_dim",
    "batch_size",
    "max_epochs",
    "learning_rate",
    "clip_norm",
    "seed",
    "validation_interval",
    "max_len",
    "vocab_cap",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, TrainError> {
    value.parse().map_err(|_| TrainError::Config(format!("{key}: cannot parse {value:?}")))
}

impl TrainingConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        let value = value.trim();
        match key.trim() {
            "lambda" => self.lambda = parse(key, value)?,
            "agreement_loss" => {
                self.agreement_loss =
                    LossKind::parse_optional(value).map_err(|e| TrainError::Config(e.to_string()))?
            }
            "embed_dim" => self.embed_dim = parse(key, value)?,
            "hidden_dim" => self.hidden_dim = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "clip_norm" => self.clip_norm = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "validation_interval" => self.validation_interval = parse(key, value)?,
            "max_len" => self.max_len = parse(key, value)?,
            "vocab_cap" => self.vocab_cap = parse(key, value)?,
            other => return Err(TrainError::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "lambda" => self.lambda.to_string(),
            "agreement_loss" => self.agreement_loss.map_or("none", LossKind::name).to_string(),
            "embed_dim" => self.embed_dim.to_string(),
            "hidden_dim" => self.hidden_dim.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "max_epochs" => self.max_epochs.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "clip_norm" => self.clip_norm.to_string(),
            "seed" => self.seed.to_string(),
            "validation_interval" => self.validation_interval.to_string(),
            "max_len" => self.max_len.to_string(),
            "vocab_cap" => self.vocab_cap.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), TrainError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TrainError::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, TrainError> {
        let mut c = TrainingConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in CONFIG_KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("known key"));
        }
        s
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |what: &str| Err(TrainError::Config(what.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive");
        }
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("batch_size", self.batch_size),
            ("validation_interval", self.validation_interval),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_cap <= crate::corpus::NUM_RESERVED {
            return bad("vocab_cap must exceed the number of reserved tokens");
        }
        Ok(())
    }
}
