//! Image file I/O: PNG/JPEG/BMP in, PNG out.

use std::path::Path;

use super::{BinaryMask, GrayImage, RgbImage};
use crate::error::{Error, Result};

fn image_err(path: &Path) -> impl FnOnce(image::ImageError) -> Error + '_ {
    move |source| Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(image_err(path))?.to_rgb8();
    let (w, h) = img.dimensions();
    RgbImage::new(w as usize, h as usize, img.into_raw())
}

/// Loads a mask image; any gray value above 127 maps to 1.
pub fn load_mask(path: &Path) -> Result<BinaryMask> {
    let img = image::open(path).map_err(image_err(path))?.to_luma8();
    let (w, h) = img.dimensions();
    let pixels = img
        .into_raw()
        .into_iter()
        .map(|v| (v > 127) as u8)
        .collect();
    BinaryMask::new(w as usize, h as usize, pixels)
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    image::save_buffer(
        path,
        img.pixels(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(image_err(path))
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    image::save_buffer(
        path,
        img.pixels(),
        img.width() as u32,
        img.height() as u32,
        image::ExtendedColorType::L8,
    )
    .map_err(image_err(path))
}

/// Writes a mask as a 0/255 grayscale PNG.
pub fn save_mask(mask: &BinaryMask, path: &Path) -> Result<()> {
    let gray = GrayImage::new(
        mask.width(),
        mask.height(),
        mask.pixels().iter().map(|&v| v * 255).collect(),
    )?;
    save_gray(&gray, path)
}

/// True for file extensions this module can read.
pub fn is_supported_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| {
            matches!(
                e.to_ascii_lowercase().as_str(),
                "png" | "jpg" | "jpeg" | "bmp"
            )
        })
        .unwrap_or(false)
}
