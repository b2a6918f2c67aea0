//! Model, optimizer and schedule state in one [`TensorArchive`].
//!
//! All randomness in training is derived from `(seed, epoch, index)`, so the
//! seed in the config snapshot plus the epoch counter is the full RNG state.

use std::path::Path;

use super::config::{TrainConfig, KEYS};
use super::optim::{PlateauSchedule, RmsProp};
use crate::diffcore::{Tensor, TensorArchive};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::nn::Module;

const FORMAT: &str = "emoattn-checkpoint-1";
const PARAM: &str = "param/";
const RMS: &str = "rmsprop/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub network: Network,
    pub optimizer: RmsProp,
    pub schedule: PlateauSchedule,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Validation mean CCC of this snapshot, NaN if never evaluated.
    pub metric: f64,
}

fn parse_meta<T: std::str::FromStr>(archive: &TensorArchive, key: &str) -> Result<T> {
    let raw = archive.meta(key)?;
    raw.parse()
        .map_err(|_| Error::Checkpoint(format!("metadata `{key}`: cannot parse `{raw}`")))
}

impl Checkpoint {
    /// A fresh, untrained state for `config`.
    pub fn initial(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Checkpoint {
            network: Network::new(config.model_config(), config.seed)?,
            optimizer: RmsProp::new(),
            schedule: PlateauSchedule::new(
                config.lr,
                config.plateau_patience,
                config.min_delta,
                config.max_lr_reductions,
            ),
            config: config.clone(),
            epoch: 0,
            metric: f64::NAN,
        })
    }

    pub fn to_archive(&self) -> TensorArchive {
        let mut a = TensorArchive::new();
        let mut meta = |k: &str, v: String| {
            a.meta.insert(k.to_string(), v);
        };
        meta("format", FORMAT.into());
        for key in KEYS {
            meta(&format!("config.{key}"), self.config.get(key).expect("known key"));
        }
        meta("epoch", self.epoch.to_string());
        meta("metric", self.metric.to_string());
        meta("schedule.lr", self.schedule.lr.to_string());
        meta("schedule.best", self.schedule.best.to_string());
        meta("schedule.wait", self.schedule.wait.to_string());
        meta("schedule.reductions", self.schedule.reductions.to_string());
        for p in self.network.named_params() {
            a.insert(format!("{PARAM}{}", p.name), p.value.clone());
        }
        for (name, v) in &self.optimizer.state {
            a.insert(format!("{RMS}{name}"), Tensor::from_vec(v.clone()));
        }
        a
    }

    pub fn from_archive(a: &TensorArchive) -> Result<Self> {
        let format = a.meta("format")?;
        if format != FORMAT {
            return Err(Error::Checkpoint(format!("unsupported format `{format}`")));
        }
        let mut config = TrainConfig::default();
        for key in KEYS {
            config.set(key, a.meta(&format!("config.{key}"))?)?;
        }
        let mut state = Checkpoint::initial(&config)?;
        state.epoch = parse_meta(a, "epoch")?;
        state.metric = parse_meta(a, "metric")?;
        state.schedule.lr = parse_meta(a, "schedule.lr")?;
        state.schedule.best = parse_meta(a, "schedule.best")?;
        state.schedule.wait = parse_meta(a, "schedule.wait")?;
        state.schedule.reductions = parse_meta(a, "schedule.reductions")?;

        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        state.network.visit_mut(&mut |p| match a.tensors.get(&format!("{PARAM}{}", p.name)) {
            None => missing.push(p.name.clone()),
            Some(t) if t.shape() != p.value.shape() => {
                mismatched.push(format!("{} {:?} vs {:?}", p.name, t.shape(), p.value.shape()))
            }
            Some(t) => p.value = t.clone(),
        });
        if !missing.is_empty() || !mismatched.is_empty() {
            return Err(Error::Incompatible(format!(
                "missing {missing:?}, mismatched {mismatched:?}"
            )));
        }
        let known: std::collections::BTreeSet<&str> =
            state.network.named_params().iter().map(|p| p.name.as_str()).collect();
        for (name, t) in &a.tensors {
            if let Some(param) = name.strip_prefix(PARAM) {
                if !known.contains(param) {
                    return Err(Error::Incompatible(format!("unexpected parameter `{param}`")));
                }
            } else if let Some(param) = name.strip_prefix(RMS) {
                if !known.contains(param) {
                    return Err(Error::Checkpoint(format!("optimizer state for unknown `{param}`")));
                }
                state.optimizer.state.insert(param.to_string(), t.data().to_vec());
            } else {
                return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
            }
        }
        Ok(state)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&TensorArchive::load(path)?)
    }
}
