//! Training-time augmentation.
//!
//! The pipeline is: horizontal flip, rotation, colour jitter, then one
//! AutoAugment sub-policy drawn from the published ImageNet table, then
//! the evaluation resize and normalisation. Geometric warps fill exposed
//! pixels by mirroring the image about its edges.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::preprocess::{preprocess_eval, ImageTensor, PreprocessConfig};
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
        }
    }
}

impl ColorJitter {
    pub const NONE: ColorJitter = ColorJitter {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AugmentConfig {
    pub horizontal_flip_prob: f64,
    pub rotation_degrees: f64,
    pub color_jitter: ColorJitter,
    pub use_autoaugment_policy: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            horizontal_flip_prob: 0.5,
            rotation_degrees: 15.0,
            color_jitter: ColorJitter::default(),
            use_autoaugment_policy: true,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// A configuration that leaves every image untouched.
    pub fn identity() -> Self {
        Self {
            horizontal_flip_prob: 0.0,
            rotation_degrees: 0.0,
            color_jitter: ColorJitter::NONE,
            use_autoaugment_policy: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let j = &self.color_jitter;
        let mags = [
            self.rotation_degrees,
            j.brightness,
            j.contrast,
            j.saturation,
            j.hue,
        ];
        if mags.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::InvalidConfig(
                "augmentation magnitudes must be finite and >= 0".into(),
            ));
        }
        if self.rotation_degrees > 180.0 {
            return Err(Error::InvalidConfig(format!(
                "rotation_degrees {} exceeds 180",
                self.rotation_degrees
            )));
        }
        if !(0.0..=1.0).contains(&self.horizontal_flip_prob) {
            return Err(Error::InvalidConfig(
                "horizontal_flip_prob must lie in [0, 1]".into(),
            ));
        }
        if j.hue > 0.5 {
            return Err(Error::InvalidConfig("hue jitter must be <= 0.5".into()));
        }
        Ok(())
    }
}

fn clamp_u8(v: f64) -> u8 {
    libm::round(v).clamp(0.0, 255.0) as u8
}

fn luma(p: [u8; 3]) -> f64 {
    0.299 * f64::from(p[0]) + 0.587 * f64::from(p[1]) + 0.114 * f64::from(p[2])
}

/// Mirror an integer coordinate into `0..len`, repeating the edge pixel.
fn reflect(i: i64, len: usize) -> usize {
    let n = len as i64;
    let m = i.rem_euclid(2 * n);
    (if m >= n { 2 * n - 1 - m } else { m }) as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Interp {
    Nearest,
    Bilinear,
}

fn sample(img: &Raster, x: f64, y: f64, interp: Interp) -> [u8; 3] {
    let (w, h) = (img.width(), img.height());
    match interp {
        Interp::Nearest => img.pixel(
            reflect(libm::round(x) as i64, w),
            reflect(libm::round(y) as i64, h),
        ),
        Interp::Bilinear => {
            let x0 = libm::floor(x);
            let y0 = libm::floor(y);
            let (fx, fy) = (x - x0, y - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let p00 = img.pixel(reflect(x0, w), reflect(y0, h));
            let p10 = img.pixel(reflect(x0 + 1, w), reflect(y0, h));
            let p01 = img.pixel(reflect(x0, w), reflect(y0 + 1, h));
            let p11 = img.pixel(reflect(x0 + 1, w), reflect(y0 + 1, h));
            let mut out = [0u8; 3];
            for c in 0..3 {
                let top = f64::from(p00[c]) * (1.0 - fx) + f64::from(p10[c]) * fx;
                let bottom = f64::from(p01[c]) * (1.0 - fx) + f64::from(p11[c]) * fx;
                out[c] = clamp_u8(top * (1.0 - fy) + bottom * fy);
            }
            out
        }
    }
}

/// Resamples `img` through an output-to-source coordinate map.
fn warp(img: &Raster, interp: Interp, source: impl Fn(f64, f64) -> (f64, f64)) -> Raster {
    Raster::from_fn(img.width(), img.height(), |x, y| {
        let (sx, sy) = source(x as f64, y as f64);
        sample(img, sx, sy, interp)
    })
    .expect("same dimensions as a valid raster")
}

pub fn hflip(img: &Raster) -> Raster {
    let w = img.width();
    Raster::from_fn(w, img.height(), |x, y| img.pixel(w - 1 - x, y))
        .expect("same dimensions as a valid raster")
}

/// Counter-clockwise rotation about the image centre, bilinear sampling.
pub fn rotate(img: &Raster, degrees: f64) -> Raster {
    rotate_with(img, degrees, Interp::Bilinear)
}

fn rotate_with(img: &Raster, degrees: f64, interp: Interp) -> Raster {
    if degrees == 0.0 {
        return img.clone();
    }
    let theta = degrees.to_radians();
    let (s, c) = (libm::sin(theta), libm::cos(theta));
    let cx = (img.width() as f64 - 1.0) / 2.0;
    let cy = (img.height() as f64 - 1.0) / 2.0;
    warp(img, interp, |x, y| {
        let (dx, dy) = (x - cx, y - cy);
        (cx + dx * c - dy * s, cy + dx * s + dy * c)
    })
}

fn shear_x(img: &Raster, factor: f64) -> Raster {
    warp(img, Interp::Nearest, |x, y| (x - factor * y, y))
}

/// `factor * img + (1 - factor) * other`, per channel.
fn blend(img: &Raster, other: impl Fn([u8; 3]) -> [f64; 3], factor: f64) -> Raster {
    img.map_pixels(|p| {
        let o = other(p);
        let mut out = [0u8; 3];
        for c in 0..3 {
            out[c] = clamp_u8(factor * f64::from(p[c]) + (1.0 - factor) * o[c]);
        }
        out
    })
}

pub fn adjust_brightness(img: &Raster, factor: f64) -> Raster {
    blend(img, |_| [0.0; 3], factor)
}

pub fn adjust_contrast(img: &Raster, factor: f64) -> Raster {
    let bytes = img.as_bytes();
    let n = (bytes.len() / 3) as f64;
    let mean = bytes
        .chunks_exact(3)
        .map(|p| luma([p[0], p[1], p[2]]))
        .sum::<f64>()
        / n;
    blend(img, |_| [mean; 3], factor)
}

pub fn adjust_saturation(img: &Raster, factor: f64) -> Raster {
    blend(
        img,
        |p| {
            let l = luma(p);
            [l, l, l]
        },
        factor,
    )
}

fn rem_euclid(v: f64, m: f64) -> f64 {
    let r = libm::fmod(v, m);
    if r < 0.0 { r + m } else { r }
}

fn rgb_to_hsv(p: [u8; 3]) -> (f64, f64, f64) {
    let r = f64::from(p[0]) / 255.0;
    let g = f64::from(p[1]) / 255.0;
    let b = f64::from(p[2]) / 255.0;
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        rem_euclid((g - b) / d, 6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h6 = rem_euclid(h, 1.0) * 6.0;
    let i = libm::floor(h6);
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    let (r, g, b) = match i as i32 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [clamp_u8(r * 255.0), clamp_u8(g * 255.0), clamp_u8(b * 255.0)]
}

/// Rotates hue by `shift` turns (in `[-0.5, 0.5]`).
pub fn adjust_hue(img: &Raster, shift: f64) -> Raster {
    if shift == 0.0 {
        return img.clone();
    }
    img.map_pixels(|p| {
        let (h, s, v) = rgb_to_hsv(p);
        hsv_to_rgb(h + shift, s, v)
    })
}

fn sharpness(img: &Raster, factor: f64) -> Raster {
    let (w, h) = (img.width(), img.height());
    if w < 3 || h < 3 {
        return img.clone();
    }
    // 3x3 smoothing kernel [[1,1,1],[1,5,1],[1,1,1]] / 13; borders untouched.
    let smooth = Raster::from_fn(w, h, |x, y| {
        if x == 0 || y == 0 || x == w - 1 || y == h - 1 {
            return img.pixel(x, y);
        }
        let mut acc = [0f64; 3];
        for dy in 0..3 {
            for dx in 0..3 {
                let p = img.pixel(x + dx - 1, y + dy - 1);
                let k = if dx == 1 && dy == 1 { 5.0 } else { 1.0 };
                for c in 0..3 {
                    acc[c] += k * f64::from(p[c]);
                }
            }
        }
        [
            clamp_u8(acc[0] / 13.0),
            clamp_u8(acc[1] / 13.0),
            clamp_u8(acc[2] / 13.0),
        ]
    })
    .expect("valid dimensions");
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            let (p, s) = (img.pixel(x, y), smooth.pixel(x, y));
            let mut px = [0u8; 3];
            for c in 0..3 {
                px[c] = clamp_u8(f64::from(s[c]) + factor * (f64::from(p[c]) - f64::from(s[c])));
            }
            out.set_pixel(x, y, px);
        }
    }
    out
}

fn posterize(img: &Raster, bits: u32) -> Raster {
    let mask = (0xFFu32 << (8 - bits.min(8))) as u8;
    img.map_bytes(|v| v & mask)
}

fn solarize(img: &Raster, threshold: f64) -> Raster {
    img.map_bytes(|v| if f64::from(v) >= threshold { 255 - v } else { v })
}

fn invert(img: &Raster) -> Raster {
    img.map_bytes(|v| 255 - v)
}

fn channel_luts(img: &Raster, build: impl Fn(&[u32; 256]) -> Option<[u8; 256]>) -> Raster {
    let mut hist = [[0u32; 256]; 3];
    for p in img.as_bytes().chunks_exact(3) {
        for c in 0..3 {
            hist[c][p[c] as usize] += 1;
        }
    }
    let luts: Vec<Option<[u8; 256]>> = hist.iter().map(&build).collect();
    img.map_pixels(|p| {
        let mut out = p;
        for c in 0..3 {
            if let Some(lut) = &luts[c] {
                out[c] = lut[p[c] as usize];
            }
        }
        out
    })
}

fn autocontrast(img: &Raster) -> Raster {
    channel_luts(img, |h| {
        let lo = h.iter().position(|n| *n > 0)?;
        let hi = h.iter().rposition(|n| *n > 0)?;
        if hi <= lo {
            return None;
        }
        let scale = 255.0 / (hi - lo) as f64;
        let mut lut = [0u8; 256];
        for (v, out) in lut.iter_mut().enumerate() {
            *out = clamp_u8((v as f64 - lo as f64) * scale);
        }
        Some(lut)
    })
}

/// Histogram equalisation per channel.
fn equalize(img: &Raster) -> Raster {
    channel_luts(img, |h| {
        let last = h.iter().rposition(|n| *n > 0)?;
        if h.iter().filter(|n| **n > 0).count() <= 1 {
            return None;
        }
        let total: u32 = h.iter().sum();
        let step = (total - h[last]) / 255;
        if step == 0 {
            return None;
        }
        let mut lut = [0u8; 256];
        let mut n = step / 2;
        for (v, out) in lut.iter_mut().enumerate() {
            *out = (n / step).min(255) as u8;
            n += h[v];
        }
        Some(lut)
    })
}

/// Operations used by the ImageNet AutoAugment policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyOp {
    Posterize,
    Rotate,
    Solarize,
    AutoContrast,
    Equalize,
    Color,
    Contrast,
    Invert,
    Sharpness,
    ShearX,
}

const NUM_BINS: usize = 10;

impl PolicyOp {
    /// Magnitude for bin `m` of 10, and whether it takes a random sign.
    fn magnitude(self, m: usize) -> (f64, bool) {
        let lin = |lo: f64, hi: f64| lo + (hi - lo) * m as f64 / (NUM_BINS - 1) as f64;
        match self {
            PolicyOp::ShearX => (lin(0.0, 0.3), true),
            PolicyOp::Rotate => (lin(0.0, 30.0), true),
            PolicyOp::Color | PolicyOp::Contrast | PolicyOp::Sharpness => (lin(0.0, 0.9), true),
            PolicyOp::Posterize => {
                let step = (NUM_BINS - 1) as f64 / 4.0;
                (8.0 - libm::round(m as f64 / step), false)
            }
            PolicyOp::Solarize => (lin(255.0, 0.0), false),
            PolicyOp::AutoContrast | PolicyOp::Equalize | PolicyOp::Invert => (0.0, false),
        }
    }

    pub fn apply(self, img: &Raster, magnitude: f64) -> Raster {
        match self {
            PolicyOp::Posterize => posterize(img, magnitude as u32),
            PolicyOp::Rotate => rotate_with(img, magnitude, Interp::Nearest),
            PolicyOp::Solarize => solarize(img, magnitude),
            PolicyOp::AutoContrast => autocontrast(img),
            PolicyOp::Equalize => equalize(img),
            PolicyOp::Color => adjust_saturation(img, 1.0 + magnitude),
            PolicyOp::Contrast => adjust_contrast(img, 1.0 + magnitude),
            PolicyOp::Invert => invert(img),
            PolicyOp::Sharpness => sharpness(img, 1.0 + magnitude),
            PolicyOp::ShearX => shear_x(img, magnitude),
        }
    }
}

/// (operation, probability, magnitude bin)
pub type PolicyStep = (PolicyOp, f64, usize);

/// The 25 two-step sub-policies of the ImageNet AutoAugment policy.
pub const IMAGENET_POLICY: [[PolicyStep; 2]; 25] = {
    use PolicyOp::*;
    [
        [(Posterize, 0.4, 8), (Rotate, 0.6, 9)],
        [(Solarize, 0.6, 5), (AutoContrast, 0.6, 0)],
        [(Equalize, 0.8, 0), (Equalize, 0.6, 0)],
        [(Posterize, 0.6, 7), (Posterize, 0.6, 6)],
        [(Equalize, 0.4, 0), (Solarize, 0.2, 4)],
        [(Equalize, 0.4, 0), (Rotate, 0.8, 8)],
        [(Solarize, 0.6, 3), (Equalize, 0.6, 0)],
        [(Posterize, 0.8, 5), (Equalize, 1.0, 0)],
        [(Rotate, 0.2, 3), (Solarize, 0.6, 8)],
        [(Equalize, 0.6, 0), (Posterize, 0.4, 6)],
        [(Rotate, 0.8, 8), (Color, 0.4, 0)],
        [(Rotate, 0.4, 9), (Equalize, 0.6, 0)],
        [(Equalize, 0.0, 0), (Equalize, 0.8, 0)],
        [(Invert, 0.6, 0), (Equalize, 1.0, 0)],
        [(Color, 0.6, 4), (Contrast, 1.0, 8)],
        [(Rotate, 0.8, 8), (Color, 1.0, 2)],
        [(Color, 0.8, 8), (Solarize, 0.8, 7)],
        [(Sharpness, 0.4, 7), (Invert, 0.6, 0)],
        [(ShearX, 0.6, 5), (Equalize, 1.0, 0)],
        [(Color, 0.4, 0), (Equalize, 0.6, 0)],
        [(Equalize, 0.4, 0), (Solarize, 0.2, 4)],
        [(Solarize, 0.6, 5), (AutoContrast, 0.6, 0)],
        [(Invert, 0.6, 0), (Equalize, 1.0, 0)],
        [(Color, 0.6, 4), (Contrast, 1.0, 8)],
        [(Equalize, 0.8, 0), (Equalize, 0.6, 0)],
    ]
};

/// Draws one sub-policy uniformly and applies each step with its probability.
pub fn apply_autoaugment<R: RngCore + ?Sized>(img: &Raster, rng: &mut R) -> Raster {
    let policy = &IMAGENET_POLICY[rng.random_range(0..IMAGENET_POLICY.len())];
    let mut out = img.clone();
    for &(op, prob, bin) in policy {
        let draw: f64 = rng.random();
        let positive: bool = rng.random();
        if draw <= prob {
            let (mut mag, signed) = op.magnitude(bin);
            if signed && !positive {
                mag = -mag;
            }
            out = op.apply(&out, mag);
        }
    }
    out
}

fn color_jitter<R: RngCore + ?Sized>(img: &Raster, j: &ColorJitter, rng: &mut R) -> Raster {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    let mut out = img.clone();
    for op in order {
        out = match op {
            0 if j.brightness > 0.0 => {
                let f = rng.random_range((1.0 - j.brightness).max(0.0)..=1.0 + j.brightness);
                adjust_brightness(&out, f)
            }
            1 if j.contrast > 0.0 => {
                let f = rng.random_range((1.0 - j.contrast).max(0.0)..=1.0 + j.contrast);
                adjust_contrast(&out, f)
            }
            2 if j.saturation > 0.0 => {
                let f = rng.random_range((1.0 - j.saturation).max(0.0)..=1.0 + j.saturation);
                adjust_saturation(&out, f)
            }
            3 if j.hue > 0.0 => adjust_hue(&out, rng.random_range(-j.hue..=j.hue)),
            _ => out,
        };
    }
    out
}

/// Applies the stochastic part of the training pipeline at full resolution.
pub fn augment<R: RngCore + ?Sized>(img: &Raster, aug: &AugmentConfig, rng: &mut R) -> Result<Raster> {
    aug.validate()?;
    let mut out = if rng.random::<f64>() < aug.horizontal_flip_prob {
        hflip(img)
    } else {
        img.clone()
    };
    if aug.rotation_degrees > 0.0 {
        let angle = rng.random_range(-aug.rotation_degrees..=aug.rotation_degrees);
        out = rotate(&out, angle);
    }
    out = color_jitter(&out, &aug.color_jitter, rng);
    if aug.use_autoaugment_policy {
        out = apply_autoaugment(&out, rng);
    }
    Ok(out)
}

pub fn preprocess_train<R: RngCore + ?Sized>(
    img: &Raster,
    pre: &PreprocessConfig,
    aug: &AugmentConfig,
    rng: &mut R,
) -> Result<ImageTensor> {
    let augmented = augment(img, aug, rng)?;
    preprocess_eval(&augmented, pre)
}
