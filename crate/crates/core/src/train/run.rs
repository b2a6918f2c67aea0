//! The epoch loop and its on-disk outputs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::eval::{evaluate, fmt_opt, write_metrics_csv, MetricReport, MetricRow};
use crate::attention::MaskMode;
use crate::data::{make_batch, CropSpec, Dataset, Sample};
use crate::diffcore::Graph;
use crate::error::{Error, Result};
use crate::heads::total_loss;
use crate::rng;

const SHUFFLE_STREAM: u64 = 0x7472_0001;
const AUGMENT_STREAM: u64 = 0x7472_0002;

/// Per-epoch training summary.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Learning rate used during the epoch.
    pub lr: f64,
    /// Sample-weighted mean of the combined objective.
    pub train_loss: f64,
    pub clf_loss: Option<f64>,
    pub valence_loss: Option<f64>,
    pub arousal_loss: Option<f64>,
    pub val: Option<MetricReport>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Highest validation mean CCC, or the last state without validation data.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub history: Vec<EpochRecord>,
}

/// Crop for sample `index` in `epoch`; a pure function of the three numbers.
pub fn augmentation_crop(seed: u64, epoch: usize, index: usize) -> CropSpec {
    CropSpec::sample(&mut rng::stream(seed, &[AUGMENT_STREAM, epoch as u64, index as u64]))
}

/// Sample order for `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[SHUFFLE_STREAM, epoch as u64]));
    order
}

/// Learning rate for 0-based `epoch`: a linear ramp `lr * (e + 1) / (w + 1)`
/// through the warm-up epochs, then whatever the plateau schedule says.
pub fn epoch_lr(state: &Checkpoint, epoch: usize) -> f64 {
    let w = state.config.warmup_epochs;
    if epoch < w {
        state.config.lr * (epoch + 1) as f64 / (w + 1) as f64
    } else {
        state.schedule.lr
    }
}

/// One optimizer step on `indices` of `data`. Returns the loss terms.
fn train_step(state: &mut Checkpoint, data: &Dataset, indices: &[usize], epoch: usize, lr: f64) -> Result<[Option<f64>; 4]> {
    let cfg = &state.config;
    let samples: Vec<&Sample> = indices.iter().map(|&i| &data.samples[i]).collect();
    let crops: Vec<CropSpec> = indices.iter().map(|&i| augmentation_crop(cfg.seed, epoch, i)).collect();
    let batch = make_batch(&samples, &crops)?;

    let mut g = Graph::new();
    let x = g.constant(batch.images);
    let out = state.network.forward(&mut g, x, MaskMode::Learned)?;
    let terms = total_loss(
        &mut g,
        &out.heads,
        &batch.labels,
        cfg.loss_weights(),
        cfg.head_mode,
        cfg.regression_loss()?,
    )?;
    if !g.value(terms.total).is_finite() {
        g.check_finite()?;
        return Err(Error::NonFinite {
            op: "total_loss",
            node: terms.total.index(),
        });
    }
    g.backward(terms.total)?;
    state.optimizer.step(&mut state.network, g.param_grads(), lr)?;
    let item = |v: Option<crate::diffcore::Var>| v.map(|v| g.value(v).item());
    Ok([Some(g.value(terms.total).item()), item(terms.clf), item(terms.valence), item(terms.arousal)])
}

/// Runs one epoch and returns its record (without validation).
pub fn train_epoch(state: &mut Checkpoint, data: &Dataset) -> Result<EpochRecord> {
    if data.is_empty() {
        return Err(Error::invalid("train", "empty training set"));
    }
    let epoch = state.epoch;
    let lr = epoch_lr(state, epoch);
    let order = epoch_order(state.config.seed, epoch, data.len());
    let mut sums = [0.0; 4];
    let mut seen = [false; 4];
    for chunk in order.chunks(state.config.batch_size) {
        let terms = train_step(state, data, chunk, epoch, lr)?;
        for (k, t) in terms.iter().enumerate() {
            if let Some(t) = t {
                sums[k] += t * chunk.len() as f64;
                seen[k] = true;
            }
        }
    }
    state.epoch += 1;
    let n = data.len() as f64;
    let mean = |k: usize| seen[k].then(|| sums[k] / n);
    let record = EpochRecord {
        epoch: state.epoch,
        lr,
        train_loss: sums[0] / n,
        clf_loss: mean(1),
        valence_loss: mean(2),
        arousal_loss: mean(3),
        val: None,
    };
    if epoch >= state.config.warmup_epochs {
        state.schedule.observe(record.train_loss);
    }
    Ok(record)
}

/// Trains from `state` until `state.config.epochs` epochs are complete,
/// evaluating on `val` after every epoch when given.
pub fn train_from(
    mut state: Checkpoint,
    train: &Dataset,
    val: Option<&Dataset>,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    let mut best: Option<Checkpoint> = None;
    let mut history = Vec::new();
    while state.epoch < state.config.epochs {
        let mut record = train_epoch(&mut state, train)?;
        if let Some(val) = val {
            let report = evaluate(&state.network, val)?;
            state.metric = report.ccc_mean().unwrap_or(f64::NAN);
            record.val = Some(report);
            // ties keep the earlier epoch; a NaN metric never replaces a number
            let improves = match &best {
                None => true,
                Some(b) => !state.metric.is_nan() && (b.metric.is_nan() || state.metric > b.metric),
            };
            if improves {
                best = Some(state.clone());
            }
        }
        progress(&record);
        history.push(record);
    }
    let best = best.unwrap_or_else(|| state.clone());
    Ok(TrainOutcome {
        best,
        last: state,
        history,
    })
}

pub fn train(
    config: &TrainConfig,
    train: &Dataset,
    val: Option<&Dataset>,
    progress: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    train_from(Checkpoint::initial(config)?, train, val, progress)
}

/// Validation metric rows, one per epoch.
pub fn metric_rows(history: &[EpochRecord]) -> Vec<MetricRow> {
    history
        .iter()
        .filter_map(|r| {
            r.val.map(|report| MetricRow {
                split: "val".into(),
                epoch: r.epoch,
                report,
            })
        })
        .collect()
}

pub fn write_learning_curve(w: impl Write, history: &[EpochRecord]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    out.write_record([
        "epoch",
        "lr",
        "train_loss",
        "clf_loss",
        "valence_loss",
        "arousal_loss",
        "val_ccc_mean",
        "val_rmse_mean",
    ])
    .map_err(csv_err)?;
    for r in history {
        out.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            fmt_opt(r.clf_loss),
            fmt_opt(r.valence_loss),
            fmt_opt(r.arousal_loss),
            fmt_opt(r.val.and_then(|v| v.ccc_mean())),
            fmt_opt(r.val.and_then(|v| v.rmse_mean())),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Paths of everything [`write_run`] produces.
#[derive(Clone, Debug)]
pub struct RunFiles {
    pub metrics: PathBuf,
    pub learning_curve: PathBuf,
    pub best: PathBuf,
    pub last: PathBuf,
    pub config: PathBuf,
}

impl RunFiles {
    pub fn in_dir(dir: &Path) -> Self {
        RunFiles {
            metrics: dir.join("metrics.csv"),
            learning_curve: dir.join("learning_curve.csv"),
            best: dir.join("best.ckpt"),
            last: dir.join("last.ckpt"),
            config: dir.join("config.txt"),
        }
    }
}

/// Writes metrics, learning curve, both checkpoints and the config snapshot.
pub fn write_run(dir: impl AsRef<Path>, outcome: &TrainOutcome) -> Result<RunFiles> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let files = RunFiles::in_dir(dir);
    let mode = outcome.last.config.head_mode;
    write_metrics_csv(BufWriter::new(File::create(&files.metrics)?), mode, &metric_rows(&outcome.history))?;
    write_learning_curve(BufWriter::new(File::create(&files.learning_curve)?), &outcome.history)?;
    outcome.best.save(&files.best)?;
    outcome.last.save(&files.last)?;
    fs::write(&files.config, outcome.last.config.to_text())?;
    Ok(files)
}
