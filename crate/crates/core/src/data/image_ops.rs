//! Grayscale conversion, resizing, cropping and flipping of face crops.

use std::path::Path;

use image::DynamicImage;
use rand::Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Side of the stored, preprocessed face crop.
pub const SOURCE_SIZE: usize = 56;
/// Side of the network input.
pub const CROP_SIZE: usize = 48;
/// Largest crop offset along either axis.
pub const MAX_OFFSET: usize = SOURCE_SIZE - CROP_SIZE;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

/// Bilinear resize of a single plane using pixel-center alignment
/// (`src = (dst + 0.5) * in/out - 0.5`, clamped to the border).
pub fn resize_bilinear(plane: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    assert_eq!(plane.len(), h * w);
    let taps = |out: usize, len: usize| -> Vec<(usize, usize, f64)> {
        let scale = len as f64 / out as f64;
        (0..out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(len - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let ty = taps(out_h, h);
    let tx = taps(out_w, w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ty {
        for &(x0, x1, fx) in &tx {
            let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
            let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    out
}

/// Luma grayscale, bilinear resize to 56x56, values in [0,1]. Output `[1,56,56]`.
pub fn preprocess(image: &DynamicImage) -> Tensor {
    let (w, h) = (image.width() as usize, image.height() as usize);
    // 8-bit gray is taken as is, which keeps PNG round trips bit-exact
    let gray: Vec<f64> = match image {
        DynamicImage::ImageLuma8(g) => g.pixels().map(|p| f64::from(p[0]) / 255.0).collect(),
        other => other
            .to_rgb8()
            .pixels()
            .map(|p| (LUMA[0] * f64::from(p[0]) + LUMA[1] * f64::from(p[1]) + LUMA[2] * f64::from(p[2])) / 255.0)
            .collect(),
    };
    let resized = if (h, w) == (SOURCE_SIZE, SOURCE_SIZE) {
        gray
    } else {
        resize_bilinear(&gray, h, w, SOURCE_SIZE, SOURCE_SIZE)
    };
    let clamped = resized.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::new(&[1, SOURCE_SIZE, SOURCE_SIZE], clamped).expect("56x56")
}

/// Decodes a PNG or JPEG file and preprocesses it.
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(preprocess(&img))
}

/// Writes a `[1,H,W]` tensor in [0,1] as an 8-bit grayscale PNG.
pub fn save_png(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = plane_dims(image, "save_png")?;
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer size");
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

fn plane_dims(image: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match image.shape() {
        [1, h, w] => Ok((*h, *w)),
        other => Err(Error::invalid(op, format!("expected a [1,H,W] image, got {other:?}"))),
    }
}

/// Placement of one 48x48 crop inside a 56x56 source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropSpec {
    pub top: usize,
    pub left: usize,
    pub flip: bool,
}

impl CropSpec {
    pub const CENTER: CropSpec = CropSpec {
        top: MAX_OFFSET / 2,
        left: MAX_OFFSET / 2,
        flip: false,
    };

    /// Uniform offsets in `0..=8` on each axis and a fair coin for the flip.
    pub fn sample(rng: &mut impl Rng) -> Self {
        CropSpec {
            top: rng.random_range(0..=MAX_OFFSET),
            left: rng.random_range(0..=MAX_OFFSET),
            flip: rng.random_bool(0.5),
        }
    }

    pub fn mirrored(self) -> Self {
        CropSpec {
            flip: !self.flip,
            ..self
        }
    }
}

/// Cuts a 48x48 window out of a `[1,56,56]` image, mirroring it if requested.
pub fn crop(image: &Tensor, spec: CropSpec) -> Result<Tensor> {
    let (h, w) = plane_dims(image, "crop")?;
    if (h, w) != (SOURCE_SIZE, SOURCE_SIZE) {
        return Err(Error::invalid("crop", format!("expected 56x56 input, got {h}x{w}")));
    }
    if spec.top > MAX_OFFSET || spec.left > MAX_OFFSET {
        return Err(Error::invalid("crop", format!("offset {spec:?} out of range")));
    }
    let mut out = Vec::with_capacity(CROP_SIZE * CROP_SIZE);
    for y in 0..CROP_SIZE {
        let row = &image.data()[(spec.top + y) * w + spec.left..][..CROP_SIZE];
        if spec.flip {
            out.extend(row.iter().rev());
        } else {
            out.extend_from_slice(row);
        }
    }
    Ok(Tensor::new(&[1, CROP_SIZE, CROP_SIZE], out).expect("48x48"))
}

/// Random crop plus horizontal flip, drawn from `rng`.
pub fn augment(image: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
    crop(image, CropSpec::sample(rng))
}

/// Left-right mirror of a `[1,H,W]` image.
pub fn hflip(image: &Tensor) -> Result<Tensor> {
    let (_, w) = plane_dims(image, "hflip")?;
    let out = image.data().chunks(w).flat_map(|row| row.iter().rev().copied()).collect();
    Tensor::new(image.shape(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn ramp() -> Tensor {
        let data = (0..SOURCE_SIZE * SOURCE_SIZE).map(|i| i as f64 / 3136.0).collect();
        Tensor::new(&[1, SOURCE_SIZE, SOURCE_SIZE], data).unwrap()
    }

    #[test]
    fn grayscale_56_passes_through() {
        let img = image::GrayImage::from_fn(56, 56, |x, y| image::Luma([((x * 3 + y * 1) % 256) as u8]));
        let t = preprocess(&DynamicImage::ImageLuma8(img.clone()));
        for (v, p) in t.data().iter().zip(img.pixels()) {
            assert!((v - f64::from(p[0]) / 255.0).abs() < 1e-12);
        }
    }

    #[test]
    fn white_is_one() {
        let img = RgbImage::from_pixel(80, 64, Rgb([255, 255, 255]));
        let t = preprocess(&DynamicImage::ImageRgb8(img));
        assert!(t.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn checkerboard_downscale_matches_scalar_bilinear() {
        // 112 -> 56 samples at src = 2*dst + 0.5, the midpoint of two unlike
        // pixels, so every output is the average 0.5.
        let img = image::GrayImage::from_fn(112, 112, |x, y| image::Luma([if (x + y) % 2 == 0 { 255 } else { 0 }]));
        let t = preprocess(&DynamicImage::ImageLuma8(img));
        assert_eq!(t.shape(), &[1, 56, 56]);
        for &(y, x) in &[(0usize, 0usize), (10, 17), (55, 55), (31, 2)] {
            assert!((t.data()[y * 56 + x] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn resize_spot_values_against_scalar_formula() {
        let plane: Vec<f64> = (0..16).map(|i| (i * i) as f64).collect();
        let out = resize_bilinear(&plane, 4, 4, 6, 6);
        // dst (2,3): src y = 2.5*4/6 - 0.5 = 1.1667, x = 3.5*4/6 - 0.5 = 1.8333
        let (sy, sx) = (2.5 * 4.0 / 6.0 - 0.5, 3.5 * 4.0 / 6.0 - 0.5);
        let at = |y: usize, x: usize| plane[y * 4 + x];
        let (fy, fx) = (sy - 1.0, sx - 1.0);
        let expected = (1.0 - fy) * ((1.0 - fx) * at(1, 1) + fx * at(1, 2)) + fy * ((1.0 - fx) * at(2, 1) + fx * at(2, 2));
        assert!((out[2 * 6 + 3] - expected).abs() < 1e-12);
    }

    #[test]
    fn top_left_crop_without_flip() {
        let img = ramp();
        let c = crop(&img, CropSpec { top: 0, left: 0, flip: false }).unwrap();
        for y in 0..CROP_SIZE {
            assert_eq!(&c.data()[y * 48..(y + 1) * 48], &img.data()[y * 56..y * 56 + 48]);
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp();
        let spec = CropSpec { top: 3, left: 5, flip: true };
        let once = crop(&img, spec).unwrap();
        let plain = crop(&img, spec.mirrored()).unwrap();
        assert_eq!(hflip(&once).unwrap(), plain);
        assert_eq!(hflip(&hflip(&plain).unwrap()).unwrap(), plain);
    }

    #[test]
    fn augment_is_deterministic_under_seed() {
        let img = ramp();
        let a = augment(&img, &mut crate::rng::stream(5, &[1])).unwrap();
        let b = augment(&img, &mut crate::rng::stream(5, &[1])).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[1, 48, 48]);
    }

    #[test]
    fn wrong_size_is_rejected() {
        let small = Tensor::zeros(&[1, 48, 48]);
        assert!(crop(&small, CropSpec::CENTER).is_err());
    }
}
