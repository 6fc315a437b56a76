//! Deterministic evaluation pipeline: resize to a square and normalise
//! each channel with fixed statistics.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::raster::Raster;

pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct PreprocessConfig {
    pub target_size: usize,
    pub channel_means: [f32; 3],
    pub channel_stds: [f32; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: 224,
            channel_means: IMAGENET_MEAN,
            channel_stds: IMAGENET_STD,
        }
    }
}

impl PreprocessConfig {
    pub const MIN_TARGET_SIZE: usize = 32;

    pub fn validate(&self) -> Result<()> {
        if self.target_size < Self::MIN_TARGET_SIZE {
            return Err(Error::InvalidConfig(format!(
                "target_size {} is below {}",
                self.target_size,
                Self::MIN_TARGET_SIZE
            )));
        }
        if self.channel_stds.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::InvalidConfig("channel stds must be positive".into()));
        }
        if self.channel_means.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidConfig("channel means must be finite".into()));
        }
        Ok(())
    }

    /// Normalises a unit-range value of channel `c`.
    pub fn normalize_unit(&self, value: f32, c: usize) -> f32 {
        (value - self.channel_means[c]) / self.channel_stds[c]
    }

    pub fn denormalize_unit(&self, value: f32, c: usize) -> f32 {
        value * self.channel_stds[c] + self.channel_means[c]
    }
}

/// Channel-major (3 x height x width) float image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let expected = 3 * height * width;
        if data.len() != expected {
            return Err(Error::BufferSize {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Per-output-sample filter taps along one axis.
struct Taps {
    start: usize,
    weights: Vec<f32>,
}

/// Triangle-filter taps, widened by the scale factor when shrinking so that
/// every source pixel contributes (area-aware, no aliasing).
fn triangle_taps(src_len: usize, dst_len: usize) -> Vec<Taps> {
    let scale = src_len as f64 / dst_len as f64;
    let support = if scale > 1.0 { scale } else { 1.0 };
    (0..dst_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = libm::floor(center - support).max(0.0) as usize;
            let hi = (libm::ceil(center + support) as usize).min(src_len);
            let mut weights: Vec<f32> = (lo..hi)
                .map(|j| {
                    let d = libm::fabs((j as f64 + 0.5 - center) / support);
                    if d < 1.0 {
                        (1.0 - d) as f32
                    } else {
                        0.0
                    }
                })
                .collect();
            let sum: f32 = weights.iter().sum();
            if sum > 0.0 {
                weights.iter_mut().for_each(|w| *w /= sum);
                Taps { start: lo, weights }
            } else {
                let nearest = (libm::floor(center) as usize).min(src_len - 1);
                Taps {
                    start: nearest,
                    weights: vec![1.0],
                }
            }
        })
        .collect()
}

/// Resizes with a separable triangle (bilinear) filter. Same-size input is
/// returned unchanged.
pub fn resize(image: &Raster, width: usize, height: usize) -> Result<Raster> {
    if width == 0 || height == 0 {
        return Err(Error::EmptyImage);
    }
    if image.width() == width && image.height() == height {
        return Ok(image.clone());
    }
    let (sw, sh) = (image.width(), image.height());
    let src = image.as_bytes();

    let htaps = triangle_taps(sw, width);
    let mut horiz = vec![0f32; sh * width * 3];
    for y in 0..sh {
        let row = &src[y * sw * 3..(y + 1) * sw * 3];
        for (x, t) in htaps.iter().enumerate() {
            let mut acc = [0f32; 3];
            for (k, w) in t.weights.iter().enumerate() {
                let o = (t.start + k) * 3;
                acc[0] += w * f32::from(row[o]);
                acc[1] += w * f32::from(row[o + 1]);
                acc[2] += w * f32::from(row[o + 2]);
            }
            let o = (y * width + x) * 3;
            horiz[o..o + 3].copy_from_slice(&acc);
        }
    }

    let vtaps = triangle_taps(sh, height);
    let mut out = vec![0u8; height * width * 3];
    for (y, t) in vtaps.iter().enumerate() {
        for x in 0..width {
            let mut acc = [0f32; 3];
            for (k, w) in t.weights.iter().enumerate() {
                let o = ((t.start + k) * width + x) * 3;
                acc[0] += w * horiz[o];
                acc[1] += w * horiz[o + 1];
                acc[2] += w * horiz[o + 2];
            }
            let o = (y * width + x) * 3;
            for c in 0..3 {
                out[o + c] = libm::roundf(acc[c]).clamp(0.0, 255.0) as u8;
            }
        }
    }
    Raster::new(width, height, out)
}

/// Maps an 8-bit image to a channel-major normalised tensor without resizing.
pub fn normalize(image: &Raster, config: &PreprocessConfig) -> ImageTensor {
    let (w, h) = (image.width(), image.height());
    let n = w * h;
    let mut data = vec![0f32; 3 * n];
    for (i, px) in image.as_bytes().chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * n + i] = config.normalize_unit(f32::from(px[c]) / 255.0, c);
        }
    }
    ImageTensor {
        height: h,
        width: w,
        data,
    }
}

/// Inverse of [`normalize`], returning unit-range values (channel-major).
pub fn denormalize(tensor: &ImageTensor, config: &PreprocessConfig) -> Vec<f32> {
    let n = tensor.height * tensor.width;
    tensor
        .data
        .iter()
        .enumerate()
        .map(|(i, v)| config.denormalize_unit(*v, i / n))
        .collect()
}

pub fn preprocess_eval(image: &Raster, config: &PreprocessConfig) -> Result<ImageTensor> {
    config.validate()?;
    let resized = resize(image, config.target_size, config.target_size)?;
    Ok(normalize(&resized, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_imagenet_statistics() {
        let c = PreprocessConfig::default();
        assert_eq!(c.target_size, 224);
        assert_eq!(c.channel_means, [0.485, 0.456, 0.406]);
        assert_eq!(c.channel_stds, [0.229, 0.224, 0.225]);
    }

    #[test]
    fn mean_maps_to_zero() {
        let c = PreprocessConfig::default();
        for ch in 0..3 {
            assert_eq!(c.normalize_unit(c.channel_means[ch], ch), 0.0);
        }
        // nearest 8-bit value to 255 * 0.485
        let img = Raster::filled(40, 40, [124, 0, 0]).unwrap();
        let t = preprocess_eval(&img, &PreprocessConfig { target_size: 32, ..c }).unwrap();
        assert!(t.plane(0).iter().all(|v| v.abs() < 0.01));
    }

    #[test]
    fn full_red_channel_value() {
        let img = Raster::filled(50, 30, [255, 0, 0]).unwrap();
        let t = preprocess_eval(&img, &PreprocessConfig::default()).unwrap();
        let expected = (1.0 - 0.485) / 0.229;
        assert!((expected - 2.2489f64).abs() < 1e-4);
        assert!(t.plane(0).iter().all(|v| (f64::from(*v) - expected).abs() < 1e-4));
        assert_eq!((t.height(), t.width()), (224, 224));
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = Raster::from_fn(7, 5, |x, y| [(x * 30) as u8, (y * 40) as u8, 9]).unwrap();
        assert_eq!(resize(&img, 7, 5).unwrap(), img);
        let flat = Raster::filled(300, 200, [10, 20, 30]).unwrap();
        let small = resize(&flat, 33, 47).unwrap();
        assert!(small.as_bytes().chunks(3).all(|p| p == [10, 20, 30]));
    }

    #[test]
    fn downscale_averages_blocks() {
        // 2x2 checkerboard of 0/200 shrinks to its mean under the triangle filter.
        let img = Raster::from_fn(64, 64, |x, y| if (x + y) % 2 == 0 { [200; 3] } else { [0; 3] }).unwrap();
        let out = resize(&img, 32, 32).unwrap();
        for y in 1..31 {
            for x in 1..31 {
                let px = out.pixel(x, y)[0];
                assert!((i32::from(px) - 100).abs() <= 1, "{px} at ({x}, {y})");
            }
        }
    }

    #[test]
    fn invalid_configs() {
        let small = PreprocessConfig { target_size: 31, ..Default::default() };
        assert!(small.validate().is_err());
        let zero_std = PreprocessConfig { channel_stds: [0.2, 0.0, 0.2], ..Default::default() };
        assert!(zero_std.validate().is_err());
    }
}
