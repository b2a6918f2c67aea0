//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::heads::{HeadMode, LossWeights};
use crate::model::{AttentionMode, ModelConfig};
use crate::objective::{RegressionLoss, TukeyConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Tukey,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Mse => "mse",
            LossKind::Tukey => "tukey",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub blocks: usize,
    pub attention_mode: AttentionMode,
    pub head_mode: HeadMode,
    pub loss: LossKind,
    pub alpha: f64,
    pub beta: f64,
    pub c: f64,
    pub n_dim: usize,
    pub n_cat: usize,
    pub embed_d: usize,
    pub rnn_u: usize,
    pub channels: [usize; 3],
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub plateau_patience: usize,
    pub min_delta: f64,
    pub max_lr_reductions: usize,
    /// Epochs of linear learning-rate ramp before the plateau rule starts.
    pub warmup_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let w = LossWeights::default();
        TrainConfig {
            blocks: m.blocks,
            attention_mode: m.attention_mode,
            head_mode: m.head_mode,
            loss: LossKind::Tukey,
            alpha: w.alpha,
            beta: w.beta,
            c: TukeyConfig::DEFAULT_C,
            n_dim: m.n_dim,
            n_cat: m.n_cat,
            embed_d: m.embed_d,
            rnn_u: m.rnn_u,
            channels: m.channels,
            lr: 1e-3,
            batch_size: 32,
            epochs: 30,
            seed: 0,
            plateau_patience: 1,
            min_delta: 1e-4,
            max_lr_reductions: 2,
            warmup_epochs: 0,
        }
    }
}

/// Every key accepted by [`TrainConfig::set`], in serialization order.
pub const KEYS: [&str; 20] = [
    "blocks",
    "attention_mode",
    "head_mode",
    "loss",
    "alpha",
    "beta",
    "c",
    "n_dim",
    "n_cat",
    "embed_d",
    "rnn_u",
    "channels",
    "lr",
    "batch_size",
    "epochs",
    "seed",
    "plateau_patience",
    "min_delta",
    "max_lr_reductions",
    "warmup_epochs",
];

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

impl TrainConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            blocks: self.blocks,
            attention_mode: self.attention_mode,
            head_mode: self.head_mode,
            n_dim: self.n_dim,
            n_cat: self.n_cat,
            embed_d: self.embed_d,
            rnn_u: self.rnn_u,
            channels: self.channels,
            input_size: crate::data::CROP_SIZE,
        }
    }

    pub fn regression_loss(&self) -> Result<RegressionLoss> {
        Ok(match self.loss {
            LossKind::Mse => RegressionLoss::Mse,
            LossKind::Tukey => RegressionLoss::Tukey(TukeyConfig::new(self.c)?),
        })
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.loss_weights().validate()?;
        self.regression_loss()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::Config(format!("min_delta must be non-negative, got {}", self.min_delta)));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "blocks" => self.blocks = parse(key, value)?,
            "attention_mode" => self.attention_mode = value.parse()?,
            "head_mode" => self.head_mode = value.parse()?,
            "loss" => {
                self.loss = match value {
                    "mse" => LossKind::Mse,
                    "tukey" => LossKind::Tukey,
                    other => {
                        return Err(Error::Unknown {
                            what: "loss",
                            value: other.into(),
                        })
                    }
                }
            }
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "c" => self.c = parse(key, value)?,
            "n_dim" => self.n_dim = parse(key, value)?,
            "n_cat" => self.n_cat = parse(key, value)?,
            "embed_d" => self.embed_d = parse(key, value)?,
            "rnn_u" => self.rnn_u = parse(key, value)?,
            "channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|p| parse(key, p.trim()))
                    .collect::<Result<_>>()?;
                self.channels = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("channels: expected three values, got `{value}`")))?;
            }
            "lr" => self.lr = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "plateau_patience" => self.plateau_patience = parse(key, value)?,
            "min_delta" => self.min_delta = parse(key, value)?,
            "max_lr_reductions" => self.max_lr_reductions = parse(key, value)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, value)?,
            other => {
                return Err(Error::Unknown {
                    what: "config key",
                    value: other.into(),
                })
            }
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "blocks" => self.blocks.to_string(),
            "attention_mode" => self.attention_mode.to_string(),
            "head_mode" => self.head_mode.to_string(),
            "loss" => self.loss.as_str().into(),
            "alpha" => self.alpha.to_string(),
            "beta" => self.beta.to_string(),
            "c" => self.c.to_string(),
            "n_dim" => self.n_dim.to_string(),
            "n_cat" => self.n_cat.to_string(),
            "embed_d" => self.embed_d.to_string(),
            "rnn_u" => self.rnn_u.to_string(),
            "channels" => {
                let [a, b, c] = self.channels;
                format!("{a},{b},{c}")
            }
            "lr" => self.lr.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "epochs" => self.epochs.to_string(),
            "seed" => self.seed.to_string(),
            "plateau_patience" => self.plateau_patience.to_string(),
            "min_delta" => self.min_delta.to_string(),
            "max_lr_reductions" => self.max_lr_reductions.to_string(),
            "warmup_epochs" => self.warmup_epochs.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("known key"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_best_configuration() {
        let c = TrainConfig::default();
        assert_eq!(c.blocks, 2);
        assert_eq!(c.attention_mode, AttentionMode::Level2);
        assert_eq!(c.head_mode, HeadMode::TwoStage);
        assert_eq!(c.loss, LossKind::Tukey);
        assert_eq!((c.alpha, c.beta, c.c), (0.5, 0.3, 4.685));
        assert_eq!((c.n_dim, c.n_cat, c.lr), (256, 128, 1e-3));
        c.validate().unwrap();
    }

    #[test]
    fn text_round_trip() {
        let mut c = TrainConfig::default();
        c.set("channels", "8, 16,32").unwrap();
        c.set("head_mode", "single_a").unwrap();
        c.set("lr", "0.00025").unwrap();
        assert_eq!(TrainConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_errors() {
        let c = TrainConfig::from_text("# comment\n\nepochs = 7  # trailing\nloss=mse\n").unwrap();
        assert_eq!(c.epochs, 7);
        assert_eq!(c.loss, LossKind::Mse);
        assert!(TrainConfig::from_text("epochs 7").is_err());
        assert!(TrainConfig::from_text("nope = 1").is_err());
        assert!(TrainConfig::from_text("head_mode = both").is_err());
        assert!(TrainConfig::from_text("channels = 1,2").is_err());
    }
}
