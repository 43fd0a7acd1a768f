//! Raster input and output through portable pixmap files.

use std::path::Path;

use image::imageops::FilterType;
pub use image::{GrayImage, RgbImage};

use crate::error::Result;

/// Loads any PNM file as 8-bit RGB; grayscale inputs are replicated.
pub fn load_rgb(path: impl AsRef<Path>) -> Result<RgbImage> {
    Ok(image::open(path)?.to_rgb8())
}

pub fn save_rgb(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Pnm)?;
    Ok(())
}

pub fn save_gray(path: impl AsRef<Path>, img: &GrayImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Pnm)?;
    Ok(())
}

/// Resizes with a triangle filter; returns the input unchanged when it
/// already has the requested size.
pub fn resize(img: RgbImage, width: u32, height: u32) -> RgbImage {
    if img.width() == width && img.height() == height {
        img
    } else {
        image::imageops::resize(&img, width, height, FilterType::Triangle)
    }
}

/// Resolves manifest image references: `synth:` references are rendered,
/// anything else is a file path relative to `base_dir`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ImageSource {
    pub base_dir: Option<std::path::PathBuf>,
    pub scene: crate::synth::SceneConfig,
}

impl ImageSource {
    pub fn new(base_dir: Option<std::path::PathBuf>) -> Self {
        Self { base_dir, scene: Default::default() }
    }

    pub fn load(&self, reference: &str) -> Result<RgbImage> {
        if reference.starts_with("synth:") {
            return crate::synth::render_ref(reference, &self.scene);
        }
        let path = match &self.base_dir {
            Some(dir) => dir.join(reference),
            None => reference.into(),
        };
        load_rgb(path)
    }
}
