//! Grayscale morphology with replicate-border handling.

use super::{GrayImage, StructuringElement};

fn filter(
    img: &GrayImage,
    offsets: &[(isize, isize)],
    pick: impl Fn(u8, u8) -> u8,
    init: u8,
) -> GrayImage {
    let (w, h) = (img.width as isize, img.height as isize);
    let mut out = vec![0u8; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = init;
            for &(dx, dy) in offsets {
                let sx = (x + dx).clamp(0, w - 1);
                let sy = (y + dy).clamp(0, h - 1);
                acc = pick(acc, img.pixels[(sy * w + sx) as usize]);
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    GrayImage {
        width: img.width,
        height: img.height,
        pixels: out,
    }
}

/// Maximum over the (reflected) element at each pixel.
pub fn dilate(img: &GrayImage, se: &StructuringElement) -> GrayImage {
    let reflected: Vec<_> = se
        .offsets()
        .into_iter()
        .map(|(dx, dy)| (-dx, -dy))
        .collect();
    filter(img, &reflected, u8::max, u8::MIN)
}

/// Minimum over the element at each pixel.
pub fn erode(img: &GrayImage, se: &StructuringElement) -> GrayImage {
    filter(img, &se.offsets(), u8::min, u8::MAX)
}

/// Dilation followed by erosion.
pub fn closing(img: &GrayImage, se: &StructuringElement) -> GrayImage {
    erode(&dilate(img, se), se)
}

/// `closing(img) − img`: responds to dark structures thinner than the element.
pub fn blackhat(img: &GrayImage, se: &StructuringElement) -> GrayImage {
    let closed = closing(img, se);
    let pixels = closed
        .pixels
        .iter()
        .zip(&img.pixels)
        .map(|(&c, &o)| c.saturating_sub(o))
        .collect();
    GrayImage {
        width: img.width,
        height: img.height,
        pixels,
    }
}
