//! Procedural grayscale faces with known valence/arousal.
//!
//! Two latents drive the labels: mouth curvature (smile versus frown) and eye
//! openness (with brow height). Position, scale, tones, a lighting gradient
//! and pixel noise vary as nuisances. Every face is left-right symmetric in
//! its latents, so horizontal flips preserve the labels.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::image_ops::{save_png, SOURCE_SIZE};
use super::manifest::{write_manifest, ManifestEntry};
use super::{Dataset, Sample};
use crate::diffcore::Tensor;
use crate::error::Result;
use crate::rng;

const SAMPLE_STREAM: u64 = 0x5a4d_0001;
const CORRUPT_STREAM: u64 = 0x5a4d_0002;
const NOISE_SIGMA: f64 = 0.02;
/// Below this distance from the origin of the valence/arousal plane a face is neutral.
const NEUTRAL_RADIUS: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FaceLatents {
    /// Mouth curvature in [-1,1]; positive is a smile.
    pub mouth: f64,
    /// Eye openness in [-1,1].
    pub eyes: f64,
    pub shift_x: f64,
    pub shift_y: f64,
    pub scale: f64,
    pub face_tone: f64,
    pub background: f64,
    pub gradient_x: f64,
    pub gradient_y: f64,
}

impl FaceLatents {
    pub fn sample(rng: &mut impl Rng) -> Self {
        FaceLatents {
            mouth: rng.random_range(-1.0..=1.0),
            eyes: rng.random_range(-1.0..=1.0),
            shift_x: rng.random_range(-2.0..=2.0),
            shift_y: rng.random_range(-2.0..=2.0),
            scale: rng.random_range(0.9..=1.05),
            face_tone: rng.random_range(0.6..=0.8),
            background: rng.random_range(0.2..=0.4),
            gradient_x: rng.random_range(-0.1..=0.1),
            gradient_y: rng.random_range(-0.1..=0.1),
        }
    }

    /// `(valence, arousal)`, linear in the two expressive latents.
    pub fn labels(&self) -> (f64, f64) {
        let v = 0.8 * self.mouth + 0.2 * self.eyes;
        let a = 0.8 * self.eyes - 0.2 * self.mouth;
        (v.clamp(-1.0, 1.0), a.clamp(-1.0, 1.0))
    }
}

/// Neutral (0) near the origin, otherwise one of six 60° sectors (1..=6)
/// counted counter-clockwise from the positive valence axis.
pub fn expression_for(valence: f64, arousal: f64) -> usize {
    if valence.hypot(arousal) < NEUTRAL_RADIUS {
        return 0;
    }
    let angle = arousal.atan2(valence).rem_euclid(std::f64::consts::TAU);
    1 + ((angle / (std::f64::consts::PI / 3.0)) as usize).min(5)
}

fn coverage(signed_distance: f64) -> f64 {
    (0.5 - signed_distance).clamp(0.0, 1.0)
}

fn ellipse_distance(px: f64, py: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    let q = ((px - cx) / rx).hypot((py - cy) / ry);
    (q - 1.0) * rx.min(ry)
}

fn segment_distance(px: f64, py: f64, (ax, ay): (f64, f64), (bx, by): (f64, f64)) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let t = (((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    (px - ax - t * dx).hypot(py - ay - t * dy)
}

/// Renders the noiseless face, then adds pixel noise from `rng` and
/// quantizes to 8 bits so that PNG export is lossless.
pub fn render_face(latents: &FaceLatents, rng: &mut impl Rng) -> Tensor {
    let l = latents;
    let s = l.scale;
    let size = SOURCE_SIZE as f64;
    let (cx, cy) = (size / 2.0 + l.shift_x, size / 2.0 + 1.0 + l.shift_y);
    let eye_y = cy - 5.0 * s;
    let eye_dx = 7.5 * s;
    let eye_ry = s * (0.6 + 1.4 * (l.eyes + 1.0));
    let brow_y = eye_y - (4.5 + 1.5 * l.eyes) * s;
    let mouth_y = cy + 9.0 * s;
    let mouth_hw = 9.0 * s;
    let bend = 5.0 * s * l.mouth;
    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid sigma");

    let mut out = Vec::with_capacity(SOURCE_SIZE * SOURCE_SIZE);
    for y in 0..SOURCE_SIZE {
        for x in 0..SOURCE_SIZE {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut v = l.background + l.gradient_x * (px / size - 0.5) + l.gradient_y * (py / size - 0.5);
            let blend = |v: &mut f64, tone: f64, d: f64| {
                let c = coverage(d);
                *v = *v * (1.0 - c) + tone * c;
            };
            blend(&mut v, l.face_tone, ellipse_distance(px, py, cx, cy, 17.0 * s, 21.0 * s));
            for side in [-1.0, 1.0] {
                let ex = cx + side * eye_dx;
                blend(&mut v, 0.08, ellipse_distance(px, py, ex, eye_y, 3.8 * s, eye_ry));
                let brow = segment_distance(px, py, (ex - 4.0 * s, brow_y), (ex + 4.0 * s, brow_y));
                blend(&mut v, 0.15, brow - 0.7 * s);
            }
            // mouth: a parabola whose corners rise with `bend`
            let t = ((px - cx) / mouth_hw).clamp(-1.0, 1.0);
            let curve_y = mouth_y - bend * (t * t - 1.0 / 3.0);
            let slope = -2.0 * bend * t / mouth_hw;
            let d = if (px - cx).abs() <= mouth_hw {
                (py - curve_y).abs() / slope.hypot(1.0)
            } else {
                (px - (cx + t * mouth_hw)).hypot(py - curve_y)
            };
            blend(&mut v, 0.1, d - 1.4 * s);

            let noisy = (v + noise.sample(rng)).clamp(0.0, 1.0);
            out.push(f64::from((noisy * 255.0).round() as u8) / 255.0);
        }
    }
    Tensor::new(&[1, SOURCE_SIZE, SOURCE_SIZE], out).expect("56x56")
}

/// Latents of sample `index` under `seed`. Each sample has its own stream, so
/// a smaller dataset is a prefix of a larger one.
pub fn sample_latents(seed: u64, index: usize) -> FaceLatents {
    FaceLatents::sample(&mut rng::stream(seed, &[SAMPLE_STREAM, index as u64]))
}

pub fn synth_sample(seed: u64, index: usize) -> Sample {
    let mut rng = rng::stream(seed, &[SAMPLE_STREAM, index as u64]);
    let latents = FaceLatents::sample(&mut rng);
    let image = render_face(&latents, &mut rng);
    let (valence, arousal) = latents.labels();
    Sample {
        image,
        valence,
        arousal,
        expression: Some(expression_for(valence, arousal)),
    }
}

pub fn synth_dataset(n: usize, seed: u64) -> Dataset {
    Dataset::new((0..n).map(|i| synth_sample(seed, i)).collect())
}

/// Flips the sign of both regression targets on `round(fraction * n)`
/// samples chosen by `seed`. Expression labels are left clean. Returns the
/// corrupted indices in ascending order.
pub fn corrupt_labels(dataset: &mut Dataset, fraction: f64, seed: u64) -> Vec<usize> {
    let n = dataset.len();
    let k = ((fraction.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let mut rng = rng::stream(seed, &[CORRUPT_STREAM]);
    let mut picked = rand::seq::index::sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    for &i in &picked {
        let s = &mut dataset.samples[i];
        s.valence = -s.valence;
        s.arousal = -s.arousal;
    }
    picked
}

/// Writes `images/NNNNNN.png` and `manifest.csv` under `dir`; returns the manifest path.
pub fn export_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join("images"))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let rel = PathBuf::from(format!("images/{i:06}.png"));
        save_png(&s.image, dir.join(&rel))?;
        entries.push(ManifestEntry {
            image_path: rel,
            valence: s.valence,
            arousal: s.arousal,
            expression: s.expression,
        });
    }
    let path = dir.join("manifest.csv");
    write_manifest(&path, &entries)?;
    Ok(path)
}
