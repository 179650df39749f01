//! Classical preprocessing: hair-artifact detection and removal, resizing and normalization.
//!
//! The hair-removal chain is grayscale conversion, a blackhat transform with a cross-shaped
//! structuring element, a strict threshold, and fast-marching inpainting of the thresholded
//! pixels. All functions here are pure and deterministic.

mod inpaint;
pub mod io;
mod morphology;

pub use inpaint::inpaint_fmm;
pub use morphology::{blackhat, closing, dilate, erode};

use crate::error::{invalid, shape_mismatch, Result};
use crate::tensor::{kernels, Tensor};

/// Per-channel mean used by [`normalize`].
pub const NORM_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
/// Per-channel standard deviation used by [`normalize`].
pub const NORM_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// An 8-bit RGB image stored row-major as interleaved `R, G, B` triples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!(
                "image must be non-empty, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height * 3 {
            return Err(shape_mismatch(width * height * 3, pixels.len()));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        assert!(width > 0 && height > 0, "image must be non-empty");
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width * height * 3)
            .collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// A single-channel 8-bit image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(invalid(format!(
                "image must be non-empty, got {width}x{height}"
            )));
        }
        if pixels.len() != width * height {
            return Err(shape_mismatch(width * height, pixels.len()));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0, "image must be non-empty");
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn put(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }
}

/// A strictly binary `{0, 1}` mask; used for thresholded hair maps, ground truth and
/// binarized predictions alike.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl BinaryMask {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height],
        }
    }

    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![1; width * height],
        }
    }

    /// Builds a mask from `{0, 1}` values; any other value is rejected.
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(shape_mismatch(width * height, pixels.len()));
        }
        if let Some(v) = pixels.iter().find(|&&v| v > 1) {
            return Err(invalid(format!("mask values must be 0 or 1, found {v}")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y) as u8);
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.pixels[y * self.width + x] == 1
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.pixels[y * self.width + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().map(|&v| v as usize).sum()
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&v| 1 - v).collect(),
        }
    }

    /// Nearest-neighbour resampling (half-pixel centres).
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Self::from_fn(width, height, |x, y| {
            let src_x = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
            let src_y = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            self.get(src_x, src_y)
        })
    }
}

/// A `k×k` binary structuring element.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StructuringElement {
    k: usize,
    mask: Vec<bool>,
}

impl StructuringElement {
    pub fn size(&self) -> usize {
        self.k
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.k + col]
    }

    pub fn ones(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// Offsets `(dx, dy)` of the set cells relative to the centre.
    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let r = (self.k / 2) as isize;
        let mut out = Vec::new();
        for row in 0..self.k {
            for col in 0..self.k {
                if self.contains(row, col) {
                    out.push((col as isize - r, row as isize - r));
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let k = self.k;
        let mut mask = vec![false; k * k];
        for r in 0..k {
            for c in 0..k {
                mask[c * k + r] = self.mask[r * k + c];
            }
        }
        Self { k, mask }
    }
}

/// Cross-shaped element: middle row and middle column set.
pub fn cross_element(k: usize) -> Result<StructuringElement> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(invalid(format!(
            "structuring element size must be odd and positive, got {k}"
        )));
    }
    let mid = k / 2;
    let mask = (0..k * k).map(|i| i / k == mid || i % k == mid).collect();
    Ok(StructuringElement { k, mask })
}

/// ITU-R BT.601 luma, rounded to nearest.
pub fn to_grayscale(img: &RgbImage) -> GrayImage {
    let pixels = img
        .pixels
        .chunks_exact(3)
        .map(|p| {
            let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
            y.round().clamp(0.0, 255.0) as u8
        })
        .collect();
    GrayImage {
        width: img.width,
        height: img.height,
        pixels,
    }
}

/// `mask(j) = 1` iff `bh(j) > t`.
pub fn threshold_mask(bh: &GrayImage, t: u8) -> BinaryMask {
    BinaryMask {
        width: bh.width,
        height: bh.height,
        pixels: bh.pixels.iter().map(|&v| (v > t) as u8).collect(),
    }
}

/// Parameters of the hair-removal chain.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HairRemoval {
    pub threshold: u8,
    pub kernel: usize,
    pub radius: usize,
}

impl Default for HairRemoval {
    fn default() -> Self {
        Self {
            threshold: 10,
            kernel: 17,
            radius: 1,
        }
    }
}

/// Every intermediate image of the hair-removal chain.
#[derive(Clone, Debug)]
pub struct HairRemovalStages {
    pub original: RgbImage,
    pub grayscale: GrayImage,
    pub blackhat: GrayImage,
    pub mask: BinaryMask,
    pub inpainted: RgbImage,
}

pub fn remove_hair_stages(img: &RgbImage, params: &HairRemoval) -> Result<HairRemovalStages> {
    let se = cross_element(params.kernel)?;
    let grayscale = to_grayscale(img);
    let bh = blackhat(&grayscale, &se);
    let mask = threshold_mask(&bh, params.threshold);
    let inpainted = inpaint_fmm(img, &mask, params.radius)?;
    Ok(HairRemovalStages {
        original: img.clone(),
        grayscale,
        blackhat: bh,
        mask,
        inpainted,
    })
}

/// Detects thin dark structures and inpaints over them.
pub fn remove_hair(img: &RgbImage, params: &HairRemoval) -> Result<RgbImage> {
    remove_hair_stages(img, params).map(|s| s.inpainted)
}

/// Bilinear resize to `side×side`, rounded back to 8 bits.
pub fn resize_rgb(img: &RgbImage, side: usize) -> Result<RgbImage> {
    if side == 0 {
        return Err(invalid("resize side must be positive"));
    }
    if img.width == side && img.height == side {
        return Ok(img.clone());
    }
    let ys = kernels::bilinear_taps(img.height, side);
    let xs = kernels::bilinear_taps(img.width, side);
    let mut src = vec![0f64; img.width * img.height];
    let mut dst = vec![0f64; side * side];
    let mut out = vec![0u8; side * side * 3];
    for c in 0..3 {
        for (s, p) in src.iter_mut().zip(img.pixels.chunks_exact(3)) {
            *s = p[c] as f64;
        }
        kernels::resize_plane(&src, (img.height, img.width), &mut dst, &ys, &xs);
        for (i, v) in dst.iter().enumerate() {
            out[i * 3 + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    RgbImage::new(side, side, out)
}

/// Scales to `[0, 1]` and standardizes each channel; returns a `[1, 3, H, W]` tensor.
pub fn normalize(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width, img.height);
    let mut t = Tensor::zeros([1, 3, h, w]);
    for c in 0..3 {
        let (m, s) = (NORM_MEAN[c], NORM_STD[c]);
        let plane = t.plane_mut(0, c);
        for (dst, p) in plane.iter_mut().zip(img.pixels.chunks_exact(3)) {
            *dst = (p[c] as f32 / 255.0 - m) / s;
        }
    }
    t
}

/// Bilinear resize to `side×side` followed by [`normalize`].
pub fn resize_normalize(img: &RgbImage, side: usize) -> Result<Tensor<f32>> {
    if side < 32 {
        return Err(invalid(format!("side must be at least 32, got {side}")));
    }
    Ok(normalize(&resize_rgb(img, side)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grayscale_examples() {
        let black = RgbImage::filled(3, 2, [0, 0, 0]);
        assert!(to_grayscale(&black).pixels().iter().all(|&v| v == 0));
        let white = RgbImage::filled(1, 1, [255, 255, 255]);
        assert_eq!(to_grayscale(&white).get(0, 0), 255);
        let px = RgbImage::filled(1, 1, [100, 150, 200]);
        assert_eq!(to_grayscale(&px).get(0, 0), 141);
    }

    #[test]
    fn cross_elements() {
        let one = cross_element(1).unwrap();
        assert_eq!(one.ones(), 1);
        let three = cross_element(3).unwrap();
        let cells: Vec<bool> = (0..9).map(|i| three.contains(i / 3, i % 3)).collect();
        assert_eq!(
            cells,
            [false, true, false, true, true, true, false, true, false]
        );
        let big = cross_element(17).unwrap();
        assert_eq!(big.ones(), 33);
        assert_eq!(big.transpose(), big);
        assert!(cross_element(4).is_err());
        assert!(cross_element(0).is_err());
    }

    #[test]
    fn threshold_is_strict() {
        let bh = GrayImage::new(3, 1, vec![0, 50, 10]).unwrap();
        let m = threshold_mask(&bh, 10);
        assert_eq!(m.pixels(), &[0, 1, 0]);
        let zero = GrayImage::filled(4, 4, 0);
        assert_eq!(threshold_mask(&zero, 10).count(), 0);
    }

    #[test]
    fn resize_normalize_shapes_and_constants() {
        let img = RgbImage::filled(256, 256, [10, 20, 30]);
        assert_eq!(
            resize_normalize(&img, 256).unwrap().shape(),
            [1, 3, 256, 256]
        );
        let big = RgbImage::filled(512, 512, [10, 20, 30]);
        assert_eq!(
            resize_normalize(&big, 256).unwrap().shape(),
            [1, 3, 256, 256]
        );
        let black = RgbImage::filled(64, 64, [0, 0, 0]);
        let t = resize_normalize(&black, 64).unwrap();
        for c in 0..3 {
            let expect = -NORM_MEAN[c] / NORM_STD[c];
            assert!(t.plane(0, c).iter().all(|&v| (v - expect).abs() < 1e-6));
        }
        assert!(resize_normalize(&black, 16).is_err());
    }

    #[test]
    fn mask_rejects_non_binary() {
        assert!(BinaryMask::new(2, 1, vec![0, 2]).is_err());
        assert!(BinaryMask::new(2, 1, vec![0, 1]).is_ok());
    }

    #[test]
    fn nearest_resize_roundtrip_on_integer_scale() {
        let m = BinaryMask::from_fn(4, 4, |x, y| x < 2 && y >= 1);
        let up = m.resize_nearest(8, 8);
        assert_eq!(up.resize_nearest(4, 4), m);
    }
}
