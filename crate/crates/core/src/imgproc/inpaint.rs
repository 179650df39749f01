//! Fast-marching inpainting (Telea).
//!
//! Masked pixels are visited in order of increasing arrival time `T` of a front started on
//! the mask boundary. Each visited pixel becomes a normalized weighted average of the
//! already-known pixels within `radius`; weights combine direction (alignment with the
//! front normal), geometric distance and level-set distance.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use super::{BinaryMask, RgbImage};
use crate::error::{shape_mismatch, Error, Result};

#[derive(Clone, Copy, PartialEq, Eq)]
enum Flag {
    Known,
    Band,
    Inside,
}

const FAR: f64 = 1.0e6;

#[derive(Clone, Copy, PartialEq)]
struct Entry {
    t: f64,
    seq: usize,
    idx: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        self.t.total_cmp(&other.t).then(self.seq.cmp(&other.seq))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Field {
    w: usize,
    h: usize,
    flags: Vec<Flag>,
    t: Vec<f64>,
}

impl Field {
    fn flag(&self, x: isize, y: isize) -> Option<Flag> {
        if x < 0 || y < 0 || x >= self.w as isize || y >= self.h as isize {
            None
        } else {
            Some(self.flags[y as usize * self.w + x as usize])
        }
    }

    fn time(&self, x: isize, y: isize) -> f64 {
        self.t[y as usize * self.w + x as usize]
    }

    fn known(&self, x: isize, y: isize) -> bool {
        self.flag(x, y) == Some(Flag::Known)
    }

    /// First-order upwind solution of |∇T| = 1 from two orthogonal neighbours.
    fn solve(&self, (x1, y1): (isize, isize), (x2, y2): (isize, isize)) -> f64 {
        match (self.known(x1, y1), self.known(x2, y2)) {
            (true, true) => {
                let (t1, t2) = (self.time(x1, y1), self.time(x2, y2));
                let d = 2.0 - (t1 - t2) * (t1 - t2);
                if d < 0.0 {
                    return 1.0 + t1.min(t2);
                }
                let r = d.sqrt();
                let s = (t1 + t2 - r) * 0.5;
                if s >= t1 && s >= t2 {
                    s
                } else {
                    let s = s + r;
                    if s >= t1 && s >= t2 {
                        s
                    } else {
                        FAR
                    }
                }
            }
            (true, false) => 1.0 + self.time(x1, y1),
            (false, true) => 1.0 + self.time(x2, y2),
            (false, false) => FAR,
        }
    }

    fn arrival(&self, x: isize, y: isize) -> f64 {
        [
            self.solve((x - 1, y), (x, y - 1)),
            self.solve((x + 1, y), (x, y - 1)),
            self.solve((x - 1, y), (x, y + 1)),
            self.solve((x + 1, y), (x, y + 1)),
        ]
        .into_iter()
        .fold(FAR, f64::min)
    }

    fn not_inside(&self, x: isize, y: isize) -> bool {
        matches!(self.flag(x, y), Some(Flag::Known | Flag::Band))
    }

    fn grad_component(&self, x: isize, y: isize, (dx, dy): (isize, isize)) -> f64 {
        let t0 = self.time(x, y);
        let fwd = self.not_inside(x + dx, y + dy);
        let bwd = self.not_inside(x - dx, y - dy);
        match (fwd, bwd) {
            (true, true) => (self.time(x + dx, y + dy) - self.time(x - dx, y - dy)) * 0.5,
            (true, false) => self.time(x + dx, y + dy) - t0,
            (false, true) => t0 - self.time(x - dx, y - dy),
            (false, false) => 0.0,
        }
    }
}

/// Fills every masked pixel by fast-marching propagation from the mask boundary.
///
/// Pixels outside the mask are returned bit-identical. Fails if the mask leaves no
/// known pixel to propagate from.
pub fn inpaint_fmm(img: &RgbImage, mask: &BinaryMask, radius: usize) -> Result<RgbImage> {
    if (mask.width, mask.height) != (img.width, img.height) {
        return Err(shape_mismatch(
            (img.width, img.height),
            (mask.width, mask.height),
        ));
    }
    let masked = mask.count();
    if masked == 0 {
        return Ok(img.clone());
    }
    if masked == mask.pixels.len() {
        return Err(Error::NothingToInpaint);
    }

    let (w, h) = (img.width, img.height);
    let mut field = Field {
        w,
        h,
        flags: mask
            .pixels
            .iter()
            .map(|&m| if m == 1 { Flag::Inside } else { Flag::Known })
            .collect(),
        t: mask
            .pixels
            .iter()
            .map(|&m| if m == 1 { FAR } else { 0.0 })
            .collect(),
    };

    let mut heap = BinaryHeap::new();
    let mut seq = 0usize;
    for y in 0..h as isize {
        for x in 0..w as isize {
            if field.flag(x, y) != Some(Flag::Known) {
                continue;
            }
            let touches_mask = [(1, 0), (-1, 0), (0, 1), (0, -1)]
                .iter()
                .any(|&(dx, dy)| field.flag(x + dx, y + dy) == Some(Flag::Inside));
            if touches_mask {
                let idx = y as usize * w + x as usize;
                field.flags[idx] = Flag::Band;
                heap.push(Reverse(Entry { t: 0.0, seq, idx }));
                seq += 1;
            }
        }
    }

    let mut out = img.clone();
    let r = radius.max(1) as isize;
    while let Some(Reverse(Entry { idx, .. })) = heap.pop() {
        if field.flags[idx] == Flag::Known {
            continue;
        }
        field.flags[idx] = Flag::Known;
        let (px, py) = ((idx % w) as isize, (idx / w) as isize);
        for (dx, dy) in [(0, -1), (-1, 0), (1, 0), (0, 1)] {
            let (x, y) = (px + dx, py + dy);
            if field.flag(x, y) != Some(Flag::Inside) {
                continue;
            }
            let nidx = y as usize * w + x as usize;
            field.t[nidx] = field.arrival(x, y);
            fill_pixel(&field, &mut out, x, y, r);
            field.flags[nidx] = Flag::Band;
            heap.push(Reverse(Entry {
                t: field.t[nidx],
                seq,
                idx: nidx,
            }));
            seq += 1;
        }
    }
    Ok(out)
}

fn fill_pixel(field: &Field, out: &mut RgbImage, x: isize, y: isize, r: isize) {
    let gx = field.grad_component(x, y, (1, 0));
    let gy = field.grad_component(x, y, (0, 1));
    let t0 = field.time(x, y);
    let mut acc = [0.0f64; 3];
    let mut total = 0.0f64;
    for ky in y - r..=y + r {
        for kx in x - r..=x + r {
            if !field.not_inside(kx, ky) || (kx, ky) == (x, y) {
                continue;
            }
            let (rx, ry) = ((x - kx) as f64, (y - ky) as f64);
            let d2 = rx * rx + ry * ry;
            if d2 > (r * r) as f64 {
                continue;
            }
            let d = d2.sqrt();
            let mut dir = (rx * gx + ry * gy) / d;
            if dir.abs() <= 0.01 {
                dir = 1.0e-6;
            }
            let dst = 1.0 / d2;
            let lev = 1.0 / (1.0 + (field.time(kx, ky) - t0).abs());
            let wgt = (dir * dst * lev).abs();
            let p = out.get(kx as usize, ky as usize);
            for c in 0..3 {
                acc[c] += wgt * p[c] as f64;
            }
            total += wgt;
        }
    }
    if total > 0.0 {
        let rgb = acc.map(|a| (a / total).round().clamp(0.0, 255.0) as u8);
        out.put(x as usize, y as usize, rgb);
    }
}
