//! Manifests, image preprocessing, augmentation, batching and the synthetic
//! face generator used for desk-scale experiments.
//!
//! Samples keep the full 56x56 preprocessed image; the 48x48 network input is
//! cut out per batch, randomly during training and centrally at evaluation.

mod image_ops;
mod manifest;
mod synth;

pub use image_ops::{
    augment, crop, hflip, load_image, preprocess, resize_bilinear, save_png, CropSpec, CROP_SIZE, MAX_OFFSET,
    SOURCE_SIZE,
};
pub use manifest::{load_manifest, write_manifest, Manifest, ManifestEntry, RowError};
pub use synth::{
    corrupt_labels, export_dataset, expression_for, render_face, sample_latents, synth_dataset, synth_sample,
    FaceLatents,
};

use std::path::Path;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::heads::Labels;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[1,56,56]`, values in [0,1].
    pub image: Tensor,
    pub valence: f64,
    pub arousal: f64,
    pub expression: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Dataset { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Loads every image listed in a manifest. Rows rejected by validation
    /// are returned alongside; an unreadable image is an error.
    pub fn from_manifest(path: impl AsRef<Path>) -> Result<(Dataset, Vec<RowError>)> {
        let manifest = load_manifest(path)?;
        let samples = manifest
            .entries
            .iter()
            .map(|e| {
                Ok(Sample {
                    image: load_image(manifest.resolve(e))?,
                    valence: e.valence,
                    arousal: e.arousal,
                    expression: e.expression,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((Dataset { samples }, manifest.rejected))
    }

    /// First `n` samples and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.len());
        (
            Dataset::new(self.samples[..n].to_vec()),
            Dataset::new(self.samples[n..].to_vec()),
        )
    }

    pub fn valence(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.valence).collect()
    }

    pub fn arousal(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.arousal).collect()
    }

    pub fn expressions(&self) -> Vec<Option<usize>> {
        self.samples.iter().map(|s| s.expression).collect()
    }
}

/// Network input plus supervision for a group of samples.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[N,1,48,48]`.
    pub images: Tensor,
    pub labels: Labels,
}

/// Crops each sample with its own spec and stacks the results.
pub fn make_batch(samples: &[&Sample], crops: &[CropSpec]) -> Result<Batch> {
    if samples.len() != crops.len() {
        return Err(Error::shape("make_batch", "crop specs", samples.len(), crops.len()));
    }
    if samples.is_empty() {
        return Err(Error::invalid("make_batch", "empty batch"));
    }
    let mut data = Vec::with_capacity(samples.len() * CROP_SIZE * CROP_SIZE);
    for (s, spec) in samples.iter().zip(crops) {
        let c = crop(&s.image, *spec)?;
        // standardized per image, so brightness and contrast do not dominate early features
        let d = c.data();
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let sd = (d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / d.len() as f64).sqrt().max(1e-3);
        data.extend(d.iter().map(|v| (v - m) / sd));
    }
    Ok(Batch {
        images: Tensor::new(&[samples.len(), 1, CROP_SIZE, CROP_SIZE], data)?,
        labels: Labels {
            valence: Some(samples.iter().map(|s| s.valence).collect()),
            arousal: Some(samples.iter().map(|s| s.arousal).collect()),
            expression: Some(samples.iter().map(|s| s.expression).collect()),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_shapes_and_labels() {
        let ds = synth_dataset(3, 1);
        let refs: Vec<&Sample> = ds.samples.iter().collect();
        let b = make_batch(&refs, &[CropSpec::CENTER; 3]).unwrap();
        assert_eq!(b.images.shape(), &[3, 1, 48, 48]);
        for img in b.images.data().chunks(48 * 48) {
            let m = img.iter().sum::<f64>() / img.len() as f64;
            let var = img.iter().map(|v| (v - m).powi(2)).sum::<f64>() / img.len() as f64;
            assert!(m.abs() < 1e-9 && (var - 1.0).abs() < 1e-9, "mean {m} var {var}");
        }
        assert_eq!(b.labels.valence.unwrap(), ds.valence());
        assert!(make_batch(&refs, &[CropSpec::CENTER; 2]).is_err());
    }
}
