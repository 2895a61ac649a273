//! Intrinsics normalization, paired augmentation and channel stacking.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, shape_mismatch, Result};
use crate::geometry::CameraModel;

/// 8-bit interleaved RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb8Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(shape_mismatch(width * height * 3, data.len()));
        }
        Ok(Self { width, height, data })
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let o = (y * self.width + x) * 3;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let o = (y * self.width + x) * 3;
        self.data[o..o + 3].copy_from_slice(&rgb);
    }
}

/// Float RGB image with values in `[0, 1]`, interleaved `(height, width, 3)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl NormalizedImage {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, 3)
    }

    pub fn from_rgb8(img: &Rgb8Image) -> Self {
        Self {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|&v| f32::from(v) / 255.0).collect(),
        }
    }

    /// Rounds to 8 bits. Used for compact caching of normalized frames.
    pub fn to_rgb8(&self) -> Rgb8Image {
        Rgb8Image {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|&v| libm::roundf(v.clamp(0.0, 1.0) * 255.0) as u8)
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.width * self.height * 3 {
            return Err(shape_mismatch(self.width * self.height * 3, self.data.len()));
        }
        if let Some(v) = self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            bail!(Validation, "normalized pixel value {v} outside [0, 1]");
        }
        Ok(())
    }

    /// Area-average downsampling by an integer factor (floor on the size).
    pub fn downsample(&self, factor: usize) -> NormalizedImage {
        if factor <= 1 {
            return self.clone();
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = NormalizedImage::zeros(w, h);
        let norm = 1.0 / (factor * factor) as f32;
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for dy in 0..factor {
                    let row = (y * factor + dy) * self.width;
                    for dx in 0..factor {
                        let o = (row + x * factor + dx) * 3;
                        for c in 0..3 {
                            acc[c] += self.data[o + c];
                        }
                    }
                }
                let o = (y * w + x) * 3;
                for c in 0..3 {
                    out.data[o + c] = acc[c] * norm;
                }
            }
        }
        out
    }
}

/// Bilinear sample of channel `c` at continuous pixel-center coordinates.
/// Samples outside `[0, w-1] × [0, h-1]` read as 0.
#[inline]
fn bilinear<F: Fn(usize, usize, usize) -> f32>(get: &F, w: usize, h: usize, x: f64, y: f64, c: usize) -> f32 {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        return 0.0;
    }
    let x0 = libm::floor(x) as usize;
    let y0 = libm::floor(y) as usize;
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    if fx == 0.0 && fy == 0.0 {
        return get(x0, y0, c);
    }
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let top = get(x0, y0, c) * (1.0 - fx) + get(x1, y0, c) * fx;
    let bottom = get(x0, y1, c) * (1.0 - fx) + get(x1, y1, c) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn rewarp<F: Fn(usize, usize, usize) -> f32>(get: F, src_w: usize, src_h: usize, source: &CameraModel, target: &CameraModel) -> NormalizedImage {
    let (tw, th) = target.image_size;
    let sx = source.focal_x / target.focal_x;
    let sy = source.focal_y / target.focal_y;
    let mut out = NormalizedImage::zeros(tw, th);
    for v in 0..th {
        let ys = source.principal_point.1 + (v as f64 - target.principal_point.1) * sy;
        for u in 0..tw {
            let xs = source.principal_point.0 + (u as f64 - target.principal_point.0) * sx;
            let o = (v * tw + u) * 3;
            for c in 0..3 {
                out.data[o + c] = bilinear(&get, src_w, src_h, xs, ys, c).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Re-renders `image` (taken with `source` intrinsics) as if taken by the
/// `target` camera: output pixel `(u, v)` samples the source at
/// `K_source · K_target⁻¹ · (u, v, 1)` with bilinear interpolation and black
/// outside the source frame.
pub fn normalize(image: &Rgb8Image, source: &CameraModel, target: &CameraModel) -> Result<NormalizedImage> {
    source.validate()?;
    target.validate()?;
    if (image.width, image.height) != source.image_size {
        return Err(shape_mismatch(source.image_size, (image.width, image.height)));
    }
    let w = image.width;
    let data = &image.data;
    Ok(rewarp(
        |x, y, c| f32::from(data[(y * w + x) * 3 + c]) / 255.0,
        image.width,
        image.height,
        source,
        target,
    ))
}

/// [`normalize`] for an image that is already in float form.
pub fn normalize_float(image: &NormalizedImage, source: &CameraModel, target: &CameraModel) -> Result<NormalizedImage> {
    source.validate()?;
    target.validate()?;
    if (image.width, image.height) != source.image_size {
        return Err(shape_mismatch(source.image_size, (image.width, image.height)));
    }
    let w = image.width;
    let data = &image.data;
    Ok(rewarp(|x, y, c| data[(y * w + x) * 3 + c], image.width, image.height, source, target))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Radians; angle drawn from `[-max_rotation, max_rotation]`.
    pub max_rotation: f64,
    /// Fraction of image width/height; shift drawn symmetrically.
    pub max_translation_frac: f64,
    /// Additive brightness delta range.
    pub brightness_delta_range: (f64, f64),
    /// Multiplicative contrast factor range (around the per-channel mean).
    pub contrast_factor_range: (f64, f64),
    pub hflip_probability: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_rotation: 10f64.to_radians(),
            max_translation_frac: 0.10,
            brightness_delta_range: (-0.2, 0.2),
            contrast_factor_range: (0.8, 1.2),
            hflip_probability: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("brightness_delta_range", self.brightness_delta_range),
            ("contrast_factor_range", self.contrast_factor_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                bail!(InvalidConfig, "{name} must satisfy lo <= hi, got ({lo}, {hi})");
            }
        }
        if self.contrast_factor_range.0 < 0.0 {
            bail!(InvalidConfig, "contrast factors must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.hflip_probability) {
            bail!(InvalidConfig, "hflip_probability must be in [0, 1]");
        }
        if !(self.max_rotation >= 0.0 && self.max_translation_frac >= 0.0) {
            bail!(InvalidConfig, "rotation/translation limits must be non-negative");
        }
        Ok(())
    }
}

/// One random draw of augmentation parameters, shared by every image it is
/// applied to.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub contrast: f32,
    pub brightness: f32,
    pub flip: bool,
    pub angle: f64,
    /// Shift as a fraction of width/height.
    pub shift: (f64, f64),
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        contrast: 1.0,
        brightness: 0.0,
        flip: false,
        angle: 0.0,
        shift: (0.0, 0.0),
    };

    pub fn sample(cfg: &AugmentConfig, seed: u64) -> AugmentDraw {
        if !cfg.enabled {
            return Self::IDENTITY;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |lo: f64, hi: f64| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let contrast = uniform(cfg.contrast_factor_range.0, cfg.contrast_factor_range.1) as f32;
        let brightness = uniform(cfg.brightness_delta_range.0, cfg.brightness_delta_range.1) as f32;
        let flip = uniform(0.0, 1.0) < cfg.hflip_probability;
        let angle = uniform(-cfg.max_rotation, cfg.max_rotation);
        let sx = uniform(-cfg.max_translation_frac, cfg.max_translation_frac);
        let sy = uniform(-cfg.max_translation_frac, cfg.max_translation_frac);
        AugmentDraw {
            contrast,
            brightness,
            flip,
            angle,
            shift: (sx, sy),
        }
    }

    /// Applies photometric changes, then the rigid image-plane warp (black
    /// border), then the horizontal flip.
    pub fn apply(&self, img: &NormalizedImage) -> NormalizedImage {
        let mut out = img.clone();
        if self.contrast != 1.0 || self.brightness != 0.0 {
            let n = (img.width * img.height) as f32;
            let mut mean = [0.0f32; 3];
            for px in img.data.chunks_exact(3) {
                for c in 0..3 {
                    mean[c] += px[c];
                }
            }
            for m in &mut mean {
                *m /= n;
            }
            for px in out.data.chunks_exact_mut(3) {
                for c in 0..3 {
                    px[c] = ((px[c] - mean[c]) * self.contrast + mean[c] + self.brightness).clamp(0.0, 1.0);
                }
            }
        }
        if self.angle != 0.0 || self.shift != (0.0, 0.0) {
            out = warp_rigid(&out, self.angle, self.shift.0 * img.width as f64, self.shift.1 * img.height as f64);
        }
        if self.flip {
            hflip_in_place(&mut out);
        }
        out
    }
}

fn warp_rigid(img: &NormalizedImage, angle: f64, tx: f64, ty: f64) -> NormalizedImage {
    let (w, h) = (img.width, img.height);
    let cx = (w as f64 - 1.0) / 2.0;
    let cy = (h as f64 - 1.0) / 2.0;
    let (s, c) = (libm::sin(angle), libm::cos(angle));
    let data = &img.data;
    let get = |x: usize, y: usize, ch: usize| data[(y * w + x) * 3 + ch];
    let mut out = NormalizedImage::zeros(w, h);
    for v in 0..h {
        for u in 0..w {
            // Inverse map: rotate the output offset back by -angle.
            let dx = u as f64 - cx - tx;
            let dy = v as f64 - cy - ty;
            let xs = c * dx + s * dy + cx;
            let ys = -s * dx + c * dy + cy;
            let o = (v * w + u) * 3;
            for ch in 0..3 {
                out.data[o + ch] = bilinear(&get, w, h, xs, ys, ch);
            }
        }
    }
    out
}

fn hflip_in_place(img: &mut NormalizedImage) {
    let w = img.width;
    for row in img.data.chunks_exact_mut(w * 3) {
        for x in 0..w / 2 {
            for c in 0..3 {
                row.swap(x * 3 + c, (w - 1 - x) * 3 + c);
            }
        }
    }
}

/// Augments both images of a pair with one shared random draw.
pub fn augment_pair(a: &NormalizedImage, b: &NormalizedImage, cfg: &AugmentConfig, rng_seed: u64) -> (NormalizedImage, NormalizedImage) {
    if !cfg.enabled {
        return (a.clone(), b.clone());
    }
    let draw = AugmentDraw::sample(cfg, rng_seed);
    (draw.apply(a), draw.apply(b))
}

/// Two images concatenated along channels, `(height, width, 6)` interleaved,
/// earlier frame in channels 0..3.
#[derive(Debug, Clone, PartialEq)]
pub struct PairTensor {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl PairTensor {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, 6)
    }

    pub fn split(&self) -> (NormalizedImage, NormalizedImage) {
        let mut a = NormalizedImage::zeros(self.width, self.height);
        let mut b = NormalizedImage::zeros(self.width, self.height);
        for (k, px) in self.data.chunks_exact(6).enumerate() {
            a.data[k * 3..k * 3 + 3].copy_from_slice(&px[..3]);
            b.data[k * 3..k * 3 + 3].copy_from_slice(&px[3..]);
        }
        (a, b)
    }
}

pub fn stack_pair(a: &NormalizedImage, b: &NormalizedImage) -> Result<PairTensor> {
    if a.shape() != b.shape() || a.data.len() != b.data.len() {
        return Err(shape_mismatch(a.shape(), b.shape()));
    }
    let mut data = Vec::with_capacity(a.data.len() * 2);
    for (pa, pb) in a.data.chunks_exact(3).zip(b.data.chunks_exact(3)) {
        data.extend_from_slice(pa);
        data.extend_from_slice(pb);
    }
    Ok(PairTensor {
        height: a.height,
        width: a.width,
        data,
    })
}
