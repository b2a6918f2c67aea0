//! Flip-averaged inference, regression metrics and classification accuracy.

use std::io::Write;

use crate::data::{make_batch, CropSpec, Dataset, Sample};
use crate::error::{Error, Result};
use crate::heads::{HeadMode, NUM_CLASSES};
use crate::model::{Network, Predictions};
use crate::objective::{ccc, rmse, PredictionPair};

/// Samples per inference forward pass (each contributes two crops).
const EVAL_CHUNK: usize = 32;

/// Center crop and its mirror for every sample, outputs averaged per sample.
/// Logits are averaged too.
pub fn tta_predict(net: &Network, samples: &[&Sample]) -> Result<Predictions> {
    let mut out = Predictions::default();
    for chunk in samples.chunks(EVAL_CHUNK) {
        let n = chunk.len();
        let doubled: Vec<&Sample> = chunk.iter().chain(chunk.iter()).copied().collect();
        let crops: Vec<CropSpec> = (0..2 * n)
            .map(|i| if i < n { CropSpec::CENTER } else { CropSpec::CENTER.mirrored() })
            .collect();
        let batch = make_batch(&doubled, &crops)?;
        let p = net.predict(&batch.images)?;
        let fold = |v: Option<Vec<f64>>, width: usize, dst: &mut Option<Vec<f64>>| {
            if let Some(v) = v {
                let (plain, mirror) = v.split_at(n * width);
                dst.get_or_insert_with(Vec::new)
                    .extend(plain.iter().zip(mirror).map(|(a, b)| 0.5 * (a + b)));
            }
        };
        fold(p.valence, 1, &mut out.valence);
        fold(p.arousal, 1, &mut out.arousal);
        fold(p.logits, NUM_CLASSES, &mut out.logits);
    }
    Ok(out)
}

pub fn tta_predict_dataset(net: &Network, data: &Dataset) -> Result<Predictions> {
    let refs: Vec<&Sample> = data.samples.iter().collect();
    tta_predict(net, &refs)
}

/// CCC and RMSE for whichever targets a model predicts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub ccc_valence: Option<f64>,
    pub ccc_arousal: Option<f64>,
    pub rmse_valence: Option<f64>,
    pub rmse_arousal: Option<f64>,
    /// Set when a CCC denominator vanished (constant predictions and truth).
    pub degenerate: bool,
}

fn mean_of(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(0.5 * (x + y)),
        (x, None) => x,
        (None, y) => y,
    }
}

impl MetricReport {
    pub fn ccc_mean(&self) -> Option<f64> {
        mean_of(self.ccc_valence, self.ccc_arousal)
    }

    pub fn rmse_mean(&self) -> Option<f64> {
        mean_of(self.rmse_valence, self.rmse_arousal)
    }

    pub fn from_predictions(pred: &Predictions, truth_v: &[f64], truth_a: &[f64]) -> Result<Self> {
        let mut r = MetricReport::default();
        if let Some(v) = &pred.valence {
            let c = ccc(PredictionPair::new(truth_v, v)?)?;
            r.ccc_valence = Some(c.value);
            r.rmse_valence = Some(rmse(PredictionPair::new(truth_v, v)?));
            r.degenerate |= c.degenerate;
        }
        if let Some(a) = &pred.arousal {
            let c = ccc(PredictionPair::new(truth_a, a)?)?;
            r.ccc_arousal = Some(c.value);
            r.rmse_arousal = Some(rmse(PredictionPair::new(truth_a, a)?));
            r.degenerate |= c.degenerate;
        }
        Ok(r)
    }

    /// Element-wise mean over reports with the same targets.
    pub fn average(reports: &[MetricReport]) -> Option<MetricReport> {
        let n = reports.len() as f64;
        let first = reports.first()?;
        let avg = |get: fn(&MetricReport) -> Option<f64>| -> Option<f64> {
            get(first)?;
            Some(reports.iter().map(|r| get(r).unwrap_or(f64::NAN)).sum::<f64>() / n)
        };
        Some(MetricReport {
            ccc_valence: avg(|r| r.ccc_valence),
            ccc_arousal: avg(|r| r.ccc_arousal),
            rmse_valence: avg(|r| r.rmse_valence),
            rmse_arousal: avg(|r| r.rmse_arousal),
            degenerate: reports.iter().any(|r| r.degenerate),
        })
    }
}

/// Flip-averaged CCC and RMSE of `net` on `data`.
pub fn evaluate(net: &Network, data: &Dataset) -> Result<MetricReport> {
    let pred = tta_predict_dataset(net, data)?;
    MetricReport::from_predictions(&pred, &data.valence(), &data.arousal())
}

/// Share of labeled rows whose first-maximum logit matches the label.
/// Returns `(accuracy, labeled_count)`; accuracy is 0 with no labeled rows.
pub fn accuracy(logits: &[f64], labels: &[Option<usize>]) -> Result<(f64, usize)> {
    if logits.len() != labels.len() * NUM_CLASSES {
        return Err(Error::shape("accuracy", "logit count", labels.len() * NUM_CLASSES, logits.len()));
    }
    let pred = Predictions {
        logits: Some(logits.to_vec()),
        ..Default::default()
    }
    .predicted_classes()
    .expect("logits present");
    let (mut hits, mut labeled) = (0usize, 0usize);
    for (p, l) in pred.iter().zip(labels) {
        if let Some(l) = l {
            labeled += 1;
            hits += usize::from(p == l);
        }
    }
    let acc = if labeled == 0 { 0.0 } else { hits as f64 / labeled as f64 };
    Ok((acc, labeled))
}

/// Expression accuracy of the categorical head on flip-averaged logits.
pub fn classify_eval(net: &Network, data: &Dataset) -> Result<(f64, usize)> {
    if !net.config.head_mode.has_classifier() {
        return Err(Error::Incompatible(format!(
            "head mode `{}` has no expression classifier",
            net.config.head_mode
        )));
    }
    let pred = tta_predict_dataset(net, data)?;
    accuracy(pred.logits.as_deref().expect("classifier present"), &data.expressions())
}

/// Metric CSV columns for a head mode; targets the mode lacks are omitted.
pub fn metric_columns(mode: HeadMode) -> Vec<&'static str> {
    let mut cols = vec!["split", "epoch"];
    for (v, a, mean) in [
        ("ccc_valence", "ccc_arousal", "ccc_mean"),
        ("rmse_valence", "rmse_arousal", "rmse_mean"),
    ] {
        if mode.has_valence() {
            cols.push(v);
        }
        if mode.has_arousal() {
            cols.push(a);
        }
        cols.push(mean);
    }
    cols
}

/// One row of a metric report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub split: String,
    pub epoch: usize,
    pub report: MetricReport,
}

pub(crate) fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_metrics_csv(w: impl Write, mode: HeadMode, rows: &[MetricRow]) -> Result<()> {
    let cols = metric_columns(mode);
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    out.write_record(&cols).map_err(csv_err)?;
    for row in rows {
        let r = &row.report;
        let record: Vec<String> = cols
            .iter()
            .map(|c| match *c {
                "split" => row.split.clone(),
                "epoch" => row.epoch.to_string(),
                "ccc_valence" => fmt_opt(r.ccc_valence),
                "ccc_arousal" => fmt_opt(r.ccc_arousal),
                "ccc_mean" => fmt_opt(r.ccc_mean()),
                "rmse_valence" => fmt_opt(r.rmse_valence),
                "rmse_arousal" => fmt_opt(r.rmse_arousal),
                _ => fmt_opt(r.rmse_mean()),
            })
            .collect();
        out.write_record(&record).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}
