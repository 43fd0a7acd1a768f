//! Foveated retina transform.
//!
//! A blur pyramid is built once per image. A fixation assigns every pixel a
//! pyramid level from its eccentricity; the retina-transformed image takes
//! each pixel from its level. Over a sequence of fixations the per-pixel
//! level is the minimum over fixations, so the image only ever sharpens.
//!
//! The pyramid is undecimated: level `k` is level `k - 1` filtered with the
//! 5-tap binomial kernel dilated by `2^(k-1)` along each axis (borders
//! clamped). Every level keeps the source geometry pixel for pixel.

use crate::error::{GazeError, Result};
use crate::raster::{GrayImage, RgbImage};

pub const CHANNELS: usize = 3;
const BINOMIAL: [f32; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

#[derive(Clone, Debug, PartialEq)]
pub struct FoveationConfig {
    pub width: usize,
    pub height: usize,
    /// Half-width of the square foveal window in pixels.
    pub fovea_radius: f32,
    pub deg_per_px: f32,
    pub levels: usize,
    /// Eccentricity in degrees at which resolution halves.
    pub e2_deg: f32,
    /// Interpolate between adjacent levels instead of quantizing.
    pub blend: bool,
}

impl Default for FoveationConfig {
    fn default() -> Self {
        Self {
            width: 512,
            height: 320,
            fovea_radius: 16.0,
            deg_per_px: 54.0 / 512.0,
            levels: 5,
            e2_deg: 2.3,
            blend: false,
        }
    }
}

impl FoveationConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.fovea_radius > 0.0) {
            errs.push(format!("fovea_radius must be > 0, got {}", self.fovea_radius));
        }
        if self.levels < 2 || self.levels > 16 {
            errs.push(format!("levels must be in [2, 16], got {}", self.levels));
        }
        if self.width == 0 || !self.width.is_multiple_of(32) || self.height == 0 || !self.height.is_multiple_of(32) {
            errs.push(format!("image size {}x{} must be a positive multiple of 32", self.width, self.height));
        }
        if !(self.deg_per_px > 0.0) || !(self.e2_deg > 0.0) {
            errs.push("deg_per_px and e2_deg must be > 0".into());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(GazeError::Validation(errs))
        }
    }

    /// Radius of the disc forced to level 0; it circumscribes the foveal window.
    pub fn fovea_disc(&self) -> f64 {
        self.fovea_radius as f64 * std::f64::consts::SQRT_2
    }

    /// Continuous level for a pixel `dist` pixels from fixation.
    pub fn raw_level(&self, dist: f64) -> f64 {
        if dist < self.fovea_disc() {
            return 0.0;
        }
        let e = dist * self.deg_per_px as f64;
        let r = self.e2_deg as f64 / (self.e2_deg as f64 + e);
        (1.0 / r).log2().clamp(0.0, (self.levels - 1) as f64)
    }

    /// Quantized level for a pixel `dist` pixels from fixation.
    pub fn level(&self, dist: f64) -> u8 {
        if dist < self.fovea_disc() {
            return 0;
        }
        let e = dist * self.deg_per_px as f64;
        let r = self.e2_deg as f64 / (self.e2_deg as f64 + e);
        ((1.0 / r).log2().round()).clamp(0.0, (self.levels - 1) as f64) as u8
    }

    /// Squared distances at which the quantized level steps up; the level
    /// at `d²` is the number of thresholds not above it.
    fn thresholds(&self) -> Vec<f64> {
        (0..self.levels - 1)
            .map(|k| {
                let e = self.e2_deg as f64 * (2f64.powf(k as f64 + 0.5) - 1.0);
                let d = e / self.deg_per_px as f64;
                let d = if k == 0 { d.max(self.fovea_disc()) } else { d };
                d * d
            })
            .collect()
    }
}

/// Blur pyramid, all levels at source size, interleaved RGB.
#[derive(Clone, Debug)]
pub struct BlurPyramid {
    width: usize,
    height: usize,
    levels: Vec<Vec<f32>>,
}

impl BlurPyramid {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, k: usize) -> &[f32] {
        &self.levels[k]
    }
}

/// Filters rows with the binomial kernel at tap spacing `step`, edges clamped.
fn blur_rows(src: &[f32], w: usize, h: usize, step: usize) -> Vec<f32> {
    let mut dst = vec![0.0f32; src.len()];
    let pad = 2 * step;
    let mut line = vec![0.0f32; (w + 2 * pad) * CHANNELS];
    for y in 0..h {
        let row = &src[y * w * CHANNELS..][..w * CHANNELS];
        for (x, px) in line.chunks_exact_mut(CHANNELS).enumerate() {
            let sx = x.saturating_sub(pad).min(w - 1);
            px.copy_from_slice(&row[sx * CHANNELS..][..CHANNELS]);
        }
        let out = &mut dst[y * w * CHANNELS..][..w * CHANNELS];
        for (t, &b) in BINOMIAL.iter().enumerate() {
            let taps = &line[t * step * CHANNELS..][..w * CHANNELS];
            for (o, &v) in out.iter_mut().zip(taps) {
                *o += b * v;
            }
        }
    }
    dst
}

/// Filters columns with the binomial kernel at tap spacing `step`, edges clamped.
fn blur_cols(src: &[f32], w: usize, h: usize, step: usize) -> Vec<f32> {
    let stride = w * CHANNELS;
    let mut dst = vec![0.0f32; src.len()];
    for y in 0..h {
        let out = &mut dst[y * stride..][..stride];
        for (t, &b) in BINOMIAL.iter().enumerate() {
            let sy = (y as isize + (t as isize - 2) * step as isize).clamp(0, h as isize - 1) as usize;
            for (o, &v) in out.iter_mut().zip(&src[sy * stride..][..stride]) {
                *o += b * v;
            }
        }
    }
    dst
}

pub fn build_pyramid(image: &RgbImage, cfg: &FoveationConfig) -> Result<BlurPyramid> {
    let (w, h) = (image.width() as usize, image.height() as usize);
    if w != cfg.width || h != cfg.height {
        return Err(GazeError::invalid(format!("image is {w}x{h}, foveation expects {}x{}", cfg.width, cfg.height)));
    }
    let base: Vec<f32> = image.as_raw().iter().map(|&v| v as f32).collect();
    let mut levels = vec![base];
    for k in 1..cfg.levels {
        let step = 1usize << (k - 1);
        let tmp = blur_rows(&levels[k - 1], w, h, step);
        levels.push(blur_cols(&tmp, w, h, step));
    }
    Ok(BlurPyramid { width: w, height: h, levels })
}

/// Per-pixel level assignment, composable over fixations.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelMap {
    width: usize,
    height: usize,
    /// Continuous level per pixel; integral unless blending is on.
    raw: Vec<f32>,
}

impl LevelMap {
    /// All pixels at the coarsest level, i.e. nothing fixated yet.
    pub fn coarsest(cfg: &FoveationConfig) -> Self {
        Self { width: cfg.width, height: cfg.height, raw: vec![(cfg.levels - 1) as f32; cfg.width * cfg.height] }
    }

    /// Lowers every pixel to its level under `fix` where that is sharper.
    pub fn apply(&mut self, fix: (f32, f32), cfg: &FoveationConfig) -> Result<()> {
        check_fixation(fix, cfg)?;
        let (fx, fy) = (fix.0 as f64, fix.1 as f64);
        let thresholds = cfg.thresholds();
        for y in 0..self.height {
            let dy = y as f64 + 0.5 - fy;
            for x in 0..self.width {
                let dx = x as f64 + 0.5 - fx;
                let d2 = dx * dx + dy * dy;
                let lvl = if cfg.blend {
                    cfg.raw_level(d2.sqrt()) as f32
                } else {
                    thresholds.iter().take_while(|&&t| d2 >= t).count() as f32
                };
                let cell = &mut self.raw[y * self.width + x];
                if lvl < *cell {
                    *cell = lvl;
                }
            }
        }
        Ok(())
    }

    /// Integer level of each pixel.
    pub fn levels(&self) -> Vec<u8> {
        self.raw.iter().map(|&v| v.round() as u8).collect()
    }

    pub fn mean_level(&self) -> f64 {
        self.raw.iter().map(|&v| v as f64).sum::<f64>() / self.raw.len() as f64
    }

    pub fn raw(&self) -> &[f32] {
        &self.raw
    }
}

fn check_fixation(fix: (f32, f32), cfg: &FoveationConfig) -> Result<()> {
    let (x, y) = fix;
    if !(x >= 0.0 && y >= 0.0 && x < cfg.width as f32 && y < cfg.height as f32) {
        return Err(GazeError::invalid(format!("fixation ({x}, {y}) outside {}x{} image", cfg.width, cfg.height)));
    }
    Ok(())
}

/// Writes pixel `i` of `pyramid` at continuous level `raw` into `dst`.
pub fn sample_pixel(pyramid: &BlurPyramid, raw: f32, i: usize, dst: &mut [f32]) {
    let lo = raw.floor() as usize;
    let frac = raw - lo as f32;
    let a = &pyramid.levels[lo][i * CHANNELS..][..CHANNELS];
    if frac == 0.0 {
        dst.copy_from_slice(a);
    } else {
        let b = &pyramid.levels[lo + 1][i * CHANNELS..][..CHANNELS];
        for c in 0..CHANNELS {
            dst[c] = a[c] + frac * (b[c] - a[c]);
        }
    }
}

/// A retina-transformed image with its per-pixel level map.
#[derive(Clone, Debug, PartialEq)]
pub struct RetImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB on the 0..=255 scale.
    pub pixels: Vec<f32>,
    pub levels: Vec<u8>,
}

impl RetImage {
    /// Samples `pyramid` at the levels of `map`.
    pub fn compose(pyramid: &BlurPyramid, map: &LevelMap) -> Self {
        let n = pyramid.width * pyramid.height;
        let mut pixels = vec![0.0f32; n * CHANNELS];
        for (i, dst) in pixels.chunks_exact_mut(CHANNELS).enumerate() {
            sample_pixel(pyramid, map.raw[i], i, dst);
        }
        Self { width: pyramid.width, height: pyramid.height, pixels, levels: map.levels() }
    }

    pub fn mean_level(&self) -> f64 {
        self.levels.iter().map(|&v| v as f64).sum::<f64>() / self.levels.len() as f64
    }

    pub fn to_rgb8(&self) -> RgbImage {
        let data = self.pixels.iter().map(|v| v.round().clamp(0.0, 255.0) as u8).collect();
        RgbImage::from_raw(self.width as u32, self.height as u32, data).expect("buffer matches dimensions")
    }

    /// Level map scaled to the full gray range for inspection.
    pub fn level_raster(&self, levels: usize) -> GrayImage {
        let scale = 255.0 / (levels.max(2) - 1) as f32;
        let data = self.levels.iter().map(|&l| (l as f32 * scale).round() as u8).collect();
        GrayImage::from_raw(self.width as u32, self.height as u32, data).expect("buffer matches dimensions")
    }
}

pub fn foveate(pyramid: &BlurPyramid, fixation: (f32, f32), cfg: &FoveationConfig) -> Result<RetImage> {
    cumulative_foveate(pyramid, &[fixation], cfg)
}

pub fn cumulative_foveate(pyramid: &BlurPyramid, fixations: &[(f32, f32)], cfg: &FoveationConfig) -> Result<RetImage> {
    if fixations.is_empty() {
        return Err(GazeError::invalid("cumulative foveation needs at least one fixation"));
    }
    let mut map = LevelMap::coarsest(cfg);
    for &f in fixations {
        map.apply(f, cfg)?;
    }
    Ok(RetImage::compose(pyramid, &map))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(v: u8) -> RgbImage {
        RgbImage::from_pixel(512, 320, image::Rgb([v, v, v]))
    }

    #[test]
    fn constant_image_is_fixed_by_every_level() {
        let cfg = FoveationConfig::default();
        let img = gray(137);
        let p = build_pyramid(&img, &cfg).unwrap();
        for k in 0..cfg.levels {
            assert!(p.level(k).iter().all(|&v| v == 137.0), "level {k}");
        }
    }

    #[test]
    fn rejects_wrong_size_and_out_of_bounds() {
        let cfg = FoveationConfig::default();
        assert!(build_pyramid(&RgbImage::new(10, 10), &cfg).is_err());
        let p = build_pyramid(&gray(0), &cfg).unwrap();
        assert!(foveate(&p, (512.0, 10.0), &cfg).is_err());
        assert!(foveate(&p, (-0.1, 10.0), &cfg).is_err());
        assert!(cumulative_foveate(&p, &[], &cfg).is_err());
    }

    #[test]
    fn thresholds_agree_with_level_formula() {
        let cfg = FoveationConfig::default();
        let t = cfg.thresholds();
        for i in 0..6000 {
            let d = i as f64 * 0.1;
            let by_threshold = t.iter().take_while(|&&th| d * d >= th).count() as u8;
            assert_eq!(by_threshold, cfg.level(d), "distance {d}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(FoveationConfig::default().validate().is_ok());
        let bad = FoveationConfig { width: 500, levels: 1, ..Default::default() };
        match bad.validate() {
            Err(GazeError::Validation(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
