//! Synthetic dermoscopy-like images: an elliptical lesion on textured skin, optionally
//! crossed by thin dark hair strokes that do not appear in the mask.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{DatasetIndex, Entry, Sample, SourceTag};
use crate::error::{invalid, Result};
use crate::imgproc::{io, BinaryMask, RgbImage};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthOptions {
    pub side: usize,
    pub hair: bool,
    pub min_strokes: usize,
    pub max_strokes: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            side: 128,
            hair: true,
            min_strokes: 6,
            max_strokes: 14,
        }
    }
}

/// Pixels a hair stroke would cover: a 1-px Bresenham segment clipped to the image.
pub fn bresenham(x0: i64, y0: i64, x1: i64, y1: i64, side: usize) -> Vec<(usize, usize)> {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    let mut out = Vec::new();
    loop {
        if x >= 0 && y >= 0 && (x as usize) < side && (y as usize) < side {
            out.push((x as usize, y as usize));
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
    out
}

fn clamp_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Generates sample `index` of the stream defined by `seed`.
///
/// Image content and hair use independent random streams, so toggling `hair` changes
/// only the stroke pixels.
pub fn synth_sample(seed: u64, index: usize, opts: &SynthOptions) -> Sample {
    let side = opts.side;
    let s = side as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * index as u64);

    let skin_r = rng.gen_range(195.0..235.0);
    let skin = [
        skin_r,
        skin_r - rng.gen_range(30.0..50.0),
        skin_r - rng.gen_range(55.0..85.0),
    ];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let theta = rng.gen_range(0.0..PI);
            let freq = rng.gen_range(1.5..6.0) * 2.0 * PI / s;
            (
                theta.cos() * freq,
                theta.sin() * freq,
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(2.0..6.0),
            )
        })
        .collect();

    let (cx, cy) = (rng.gen_range(0.3..0.7) * s, rng.gen_range(0.3..0.7) * s);
    let (a, b) = (rng.gen_range(0.12..0.3) * s, rng.gen_range(0.12..0.3) * s);
    let angle = rng.gen_range(0.0..PI);
    let (ca, sa) = (angle.cos(), angle.sin());
    let lesion_r = rng.gen_range(90.0..145.0);
    let lesion = [
        lesion_r,
        lesion_r * rng.gen_range(0.55..0.7),
        lesion_r * rng.gen_range(0.4..0.55),
    ];

    let mut img = RgbImage::filled(side, side, [0, 0, 0]);
    let mut mask = BinaryMask::zeros(side, side);
    for y in 0..side {
        for x in 0..side {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let tex: f64 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (fx * px + fy * py + ph).sin())
                .sum();
            let noise = rng.gen_range(-4.0..4.0);
            let (u, v) = (
                (px - cx) * ca + (py - cy) * sa,
                -(px - cx) * sa + (py - cy) * ca,
            );
            let r2 = (u / a).powi(2) + (v / b).powi(2);
            let rgb = if r2 <= 1.0 {
                mask.set(x, y, true);
                // Darker towards the centre, lighter at the rim.
                let shade = 0.85 + 0.15 * r2;
                lesion.map(|c| c * shade + tex * 0.5 + noise)
            } else {
                skin.map(|c| c + tex + noise)
            };
            img.put(x, y, rgb.map(clamp_u8));
        }
    }

    if opts.hair {
        let mut hair_rng = ChaCha8Rng::seed_from_u64(seed);
        hair_rng.set_stream(2 * index as u64 + 1);
        let strokes = hair_rng.gen_range(opts.min_strokes..=opts.max_strokes.max(opts.min_strokes));
        for _ in 0..strokes {
            let (x0, y0) = (hair_rng.gen_range(0.0..s), hair_rng.gen_range(0.0..s));
            let theta = hair_rng.gen_range(0.0..2.0 * PI);
            let len = hair_rng.gen_range(0.5..1.2) * s;
            let (x1, y1) = (x0 + len * theta.cos(), y0 + len * theta.sin());
            let dark = hair_rng.gen_range(15.0..45.0);
            let color = [dark + 10.0, dark + 4.0, dark].map(clamp_u8);
            for (x, y) in bresenham(x0 as i64, y0 as i64, x1 as i64, y1 as i64, side) {
                img.put(x, y, color);
            }
        }
    }

    Sample {
        id: format!("synth_{index:04}"),
        image: img,
        mask,
    }
}

pub fn synth_samples(n: usize, seed: u64, opts: &SynthOptions) -> Vec<Sample> {
    (0..n).map(|i| synth_sample(seed, i, opts)).collect()
}

/// Writes `n` samples as `images/*.png` and `masks/*.png` under `root`.
pub fn synth_dataset(
    root: &Path,
    n: usize,
    seed: u64,
    opts: &SynthOptions,
) -> Result<DatasetIndex> {
    if opts.side < 32 {
        return Err(invalid(format!(
            "synthetic side must be at least 32, got {}",
            opts.side
        )));
    }
    let images = root.join("images");
    let masks = root.join("masks");
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&masks)?;
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let sample = synth_sample(seed, i, opts);
        let image = images.join(format!("{}.png", sample.id));
        let mask = masks.join(format!("{}.png", sample.id));
        io::save_rgb(&sample.image, &image)?;
        io::save_mask(&sample.mask, &mask)?;
        entries.push(Entry {
            id: sample.id,
            image,
            mask,
        });
    }
    Ok(DatasetIndex {
        tag: SourceTag::Synthetic,
        entries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reproducible_and_hair_only_touches_strokes() {
        let opts = SynthOptions {
            side: 64,
            ..Default::default()
        };
        let a = synth_sample(7, 3, &opts);
        assert_eq!(a.image, synth_sample(7, 3, &opts).image);
        let clean = synth_sample(
            7,
            3,
            &SynthOptions {
                hair: false,
                ..opts
            },
        );
        assert_eq!(a.mask, clean.mask);
        let changed = a
            .image
            .pixels()
            .chunks_exact(3)
            .zip(clean.image.pixels().chunks_exact(3))
            .filter(|(p, q)| p != q)
            .count();
        assert!(changed > 0);
        assert!(a.mask.count() > 0);
    }

    #[test]
    fn bresenham_endpoints() {
        let line = bresenham(0, 0, 3, 1, 8);
        assert_eq!(line.first(), Some(&(0, 0)));
        assert_eq!(line.last(), Some(&(3, 1)));
        assert_eq!(line.len(), 4);
        assert!(bresenham(-5, -5, -1, -1, 8).is_empty());
    }
}
