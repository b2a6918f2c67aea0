//! CSV manifests: `image_path,valence,arousal,expression`.

use std::fs::File;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::heads::NUM_CLASSES;

const COLUMNS: [&str; 4] = ["image_path", "valence", "arousal", "expression"];

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    /// As written in the manifest; relative paths resolve against the manifest's directory.
    pub image_path: PathBuf,
    pub valence: f64,
    pub arousal: f64,
    pub expression: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowError {
    /// 1-based line number in the file, header included.
    pub line: u64,
    pub message: String,
}

#[derive(Clone, Debug, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    pub rejected: Vec<RowError>,
    /// Directory used to resolve relative image paths.
    pub root: PathBuf,
}

impl Manifest {
    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.image_path.is_absolute() {
            entry.image_path.clone()
        } else {
            self.root.join(&entry.image_path)
        }
    }
}

/// Reads and validates a manifest. Malformed rows are reported in
/// [`Manifest::rejected`]; a missing file or header column is an error.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let manifest_err = |msg: String| Error::Manifest {
        path: path.to_path_buf(),
        msg,
    };
    let file = File::open(path).map_err(|e| manifest_err(e.to_string()))?;
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(file);
    let headers = reader.headers().map_err(|e| manifest_err(e.to_string()))?.clone();
    let mut index = [0usize; 4];
    for (slot, column) in index.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == column)
            .ok_or_else(|| manifest_err(format!("missing column `{column}`")))?;
    }

    let mut manifest = Manifest {
        root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        ..Default::default()
    };
    for record in reader.records() {
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                manifest.rejected.push(RowError {
                    line,
                    message: e.to_string(),
                });
                continue;
            }
        };
        let line = record.position().map_or(0, |p| p.line());
        match parse_row(&record, &index) {
            Ok(entry) => manifest.entries.push(entry),
            Err(message) => manifest.rejected.push(RowError { line, message }),
        }
    }
    Ok(manifest)
}

fn parse_row(record: &csv::StringRecord, index: &[usize; 4]) -> std::result::Result<ManifestEntry, String> {
    let field = |i: usize| record.get(index[i]).ok_or_else(|| format!("missing field `{}`", COLUMNS[i]));
    let image_path = field(0)?;
    if image_path.is_empty() {
        return Err("empty image_path".into());
    }
    let label = |i: usize| -> std::result::Result<f64, String> {
        let raw = field(i)?;
        let v: f64 = raw.parse().map_err(|_| format!("{}: cannot parse `{raw}`", COLUMNS[i]))?;
        if !(-1.0..=1.0).contains(&v) {
            return Err(format!("{}: {v} outside [-1, 1]", COLUMNS[i]));
        }
        Ok(v)
    };
    let valence = label(1)?;
    let arousal = label(2)?;
    let raw = field(3)?;
    let expression = match raw {
        "" | "unlabeled" => None,
        s => {
            let c: usize = s.parse().map_err(|_| format!("expression: cannot parse `{s}`"))?;
            if c >= NUM_CLASSES {
                return Err(format!("expression: {c} outside 0..{}", NUM_CLASSES - 1));
            }
            Some(c)
        }
    };
    Ok(ManifestEntry {
        image_path: PathBuf::from(image_path),
        valence,
        arousal,
        expression,
    })
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |e: csv::Error| Error::Manifest {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(COLUMNS).map_err(csv_err)?;
    for e in entries {
        let expression = e.expression.map_or_else(|| "unlabeled".to_string(), |c| c.to_string());
        w.write_record([
            e.image_path.to_string_lossy().as_ref(),
            &e.valence.to_string(),
            &e.arousal.to_string(),
            &expression,
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
