//! Grid ablations over [`TrainConfig`] keys on a seeded synthetic dataset.
//!
//! Every configuration sees the same data. Runs for the same seed share
//! their initial values for every parameter they have in common, so
//! differences between rows come from the configuration, not the draw.
//!
//! `head_mode = single` is a composite: one `single_v` and one `single_a`
//! run whose valence and arousal metrics are reported together.

use std::io::Write;

use super::config::TrainConfig;
use super::eval::{fmt_opt, MetricReport};
use super::run::{train, EpochRecord};
use crate::data::{corrupt_labels, synth_dataset, Dataset};
use crate::error::{Error, Result};
use crate::heads::HeadMode;

pub const SINGLE: &str = "single";

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSpec {
    pub base: TrainConfig,
    /// `(config key, values)`; the grid is their cartesian product.
    pub axes: Vec<(String, Vec<String>)>,
    pub seeds: Vec<u64>,
    /// Total synthetic samples, split into train and validation.
    pub samples: usize,
    pub val_fraction: f64,
    /// Share of training samples whose regression labels are sign-flipped.
    pub corruption: f64,
    pub data_seed: u64,
}

impl Default for AblationSpec {
    fn default() -> Self {
        AblationSpec {
            base: TrainConfig::default(),
            axes: Vec::new(),
            seeds: vec![0, 1, 2],
            samples: 2000,
            val_fraction: 0.2,
            corruption: 0.1,
            data_seed: 2024,
        }
    }
}

/// Parses `key=v1,v2;key2=v3` (whitespace allowed). Empty input is an empty grid.
pub fn parse_grid(text: &str) -> Result<Vec<(String, Vec<String>)>> {
    let mut axes = Vec::new();
    for part in text.split(';').map(str::trim).filter(|p| !p.is_empty()) {
        let (key, values) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis `{part}`: expected key=v1,v2")))?;
        let key = key.trim().to_string();
        let values: Vec<String> = values
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(Error::Config(format!("grid axis `{key}` has no values")));
        }
        let mut probe = TrainConfig::default();
        for v in &values {
            if key == "head_mode" && v == SINGLE {
                continue;
            }
            probe.set(&key, v)?;
        }
        axes.push((key, values));
    }
    Ok(axes)
}

/// Cartesian product of the axes, first axis varying slowest. No axes, no points.
pub fn grid_points(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    if axes.is_empty() {
        return Vec::new();
    }
    let mut points = vec![Vec::new()];
    for (key, values) in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q: Vec<(String, String)> = p.clone();
                    q.push((key.clone(), v.clone()));
                    q
                })
            })
            .collect();
    }
    points
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub settings: Vec<(String, String)>,
    /// `ok`, or `failed: <reason>`.
    pub status: String,
    /// Seed-averaged validation metrics of the final epoch.
    pub report: Option<MetricReport>,
    pub runs: usize,
}

/// Training and clean validation splits for an ablation.
pub fn ablation_data(spec: &AblationSpec) -> (Dataset, Dataset) {
    let all = synth_dataset(spec.samples, spec.data_seed);
    let n_val = ((spec.samples as f64) * spec.val_fraction).round() as usize;
    let (mut train, val) = all.split_at(spec.samples - n_val.min(spec.samples));
    corrupt_labels(&mut train, spec.corruption, spec.data_seed);
    (train, val)
}

/// Progress notifications: `(row index, seed, head mode run, epoch record)`.
pub type AblationProgress<'a> = dyn FnMut(usize, u64, HeadMode, &EpochRecord) + 'a;

fn run_point(
    spec: &AblationSpec,
    point: &[(String, String)],
    row: usize,
    train_set: &Dataset,
    val_set: &Dataset,
    progress: &mut AblationProgress<'_>,
) -> Result<MetricReport> {
    let mut cfg = spec.base.clone();
    let mut modes = vec![];
    for (k, v) in point {
        if k == "head_mode" && v == SINGLE {
            modes = vec![HeadMode::SingleValence, HeadMode::SingleArousal];
        } else {
            cfg.set(k, v)?;
        }
    }
    if modes.is_empty() {
        modes.push(cfg.head_mode);
    }
    let mut per_seed = Vec::new();
    for &seed in &spec.seeds {
        let mut merged = MetricReport::default();
        for &mode in &modes {
            let mut run_cfg = cfg.clone();
            run_cfg.seed = seed;
            run_cfg.head_mode = mode;
            let outcome = train(&run_cfg, train_set, Some(val_set), &mut |r| progress(row, seed, mode, r))?;
            let report = outcome
                .history
                .last()
                .and_then(|r| r.val)
                .ok_or_else(|| Error::Config("ablation runs need at least one epoch".into()))?;
            if mode.has_valence() {
                merged.ccc_valence = report.ccc_valence;
                merged.rmse_valence = report.rmse_valence;
            }
            if mode.has_arousal() {
                merged.ccc_arousal = report.ccc_arousal;
                merged.rmse_arousal = report.rmse_arousal;
            }
            merged.degenerate |= report.degenerate;
        }
        per_seed.push(merged);
    }
    MetricReport::average(&per_seed).ok_or_else(|| Error::Config("ablation needs at least one seed".into()))
}

/// Trains every grid point for every seed. A failing point yields a row
/// with a `failed` status; the others still run.
pub fn ablate(spec: &AblationSpec, progress: &mut AblationProgress<'_>) -> Result<Vec<AblationRow>> {
    let points = grid_points(&spec.axes);
    if points.is_empty() {
        return Ok(Vec::new());
    }
    let (train_set, val_set) = ablation_data(spec);
    let mut rows = Vec::with_capacity(points.len());
    for (i, point) in points.into_iter().enumerate() {
        let row = match run_point(spec, &point, i, &train_set, &val_set, progress) {
            Ok(report) => AblationRow {
                settings: point,
                status: "ok".into(),
                report: Some(report),
                runs: spec.seeds.len(),
            },
            Err(e) => AblationRow {
                settings: point,
                status: format!("failed: {e}"),
                report: None,
                runs: 0,
            },
        };
        rows.push(row);
    }
    Ok(rows)
}

const METRIC_COLUMNS: [&str; 6] = [
    "ccc_valence",
    "ccc_arousal",
    "ccc_mean",
    "rmse_valence",
    "rmse_arousal",
    "rmse_mean",
];

/// One row per configuration: the axis values, run count, status, then the metrics.
pub fn write_ablation_csv(w: impl Write, axes: &[(String, Vec<String>)], rows: &[AblationRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut header: Vec<&str> = axes.iter().map(|(k, _)| k.as_str()).collect();
    header.extend(["runs", "status"]);
    header.extend(METRIC_COLUMNS);
    out.write_record(&header).map_err(csv_err)?;
    for row in rows {
        let mut record: Vec<String> = row.settings.iter().map(|(_, v)| v.clone()).collect();
        record.push(row.runs.to_string());
        record.push(row.status.clone());
        let r = row.report.unwrap_or_default();
        record.extend([
            fmt_opt(r.ccc_valence),
            fmt_opt(r.ccc_arousal),
            fmt_opt(r.ccc_mean()),
            fmt_opt(r.rmse_valence),
            fmt_opt(r.rmse_arousal),
            fmt_opt(r.rmse_mean()),
        ]);
        out.write_record(&record).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing_and_product() {
        let axes = parse_grid("blocks=1,2,3; loss = mse,tukey").unwrap();
        assert_eq!(axes.len(), 2);
        let pts = grid_points(&axes);
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[1], vec![("blocks".into(), "1".into()), ("loss".into(), "tukey".into())]);
        assert!(parse_grid("blocks=").is_err());
        assert!(parse_grid("blocks=7x").is_err());
        assert!(parse_grid("nope=1").is_err());
        assert!(parse_grid("head_mode=2mt,mt,single").is_ok());
        assert!(grid_points(&parse_grid("").unwrap()).is_empty());
    }

    #[test]
    fn empty_grid_is_header_only() {
        let rows = ablate(&AblationSpec::default(), &mut |_, _, _, _| {}).unwrap();
        assert!(rows.is_empty());
        let mut buf = Vec::new();
        write_ablation_csv(&mut buf, &[], &rows).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "runs,status,ccc_valence,ccc_arousal,ccc_mean,rmse_valence,rmse_arousal,rmse_mean\n"
        );
    }

    #[test]
    fn failing_point_is_marked() {
        let spec = AblationSpec {
            base: TrainConfig::from_text("channels=2,3,4\nn_dim=4\nn_cat=3\nembed_d=3\nrnn_u=2\nepochs=1\nbatch_size=8")
                .unwrap(),
            axes: parse_grid("alpha=0.5,2").unwrap(),
            seeds: vec![0],
            samples: 10,
            ..Default::default()
        };
        let rows = ablate(&spec, &mut |_, _, _, _| {}).unwrap();
        assert_eq!(rows[0].status, "ok");
        assert!(rows[1].status.starts_with("failed"), "{:?}", rows[1]);
        assert!(rows[0].report.unwrap().ccc_mean().is_some());
    }
}
