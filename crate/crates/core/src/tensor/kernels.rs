//! Per-plane numeric kernels shared by the graph ops.

use super::Float;

/// Geometry of a 2-D convolution window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dilation: usize,
}

impl Window {
    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let eff_h = self.dilation * (self.kh - 1) + 1;
        let eff_w = self.dilation * (self.kw - 1) + 1;
        let oh = (h + 2 * self.pad_h).saturating_sub(eff_h) / self.stride + 1;
        let ow = (w + 2 * self.pad_w).saturating_sub(eff_w) / self.stride + 1;
        (oh, ow)
    }

    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad_h == 0 && self.pad_w == 0
    }
}

/// Unfolds one `C×H×W` image into a `(C·kh·kw) × (oh·ow)` column matrix.
pub fn im2col<T: Float>(x: &[T], c: usize, h: usize, w: usize, win: &Window, col: &mut [T]) {
    let (oh, ow) = win.out_hw(h, w);
    let cols = oh * ow;
    debug_assert_eq!(col.len(), c * win.kh * win.kw * cols);
    let mut row = 0;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let dst = &mut col[row * cols..(row + 1) * cols];
                let dy = (ky * win.dilation) as isize - win.pad_h as isize;
                let dx = (kx * win.dilation) as isize - win.pad_w as isize;
                for oy in 0..oh {
                    let iy = (oy * win.stride) as isize + dy;
                    let out = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * win.stride) as isize + dx;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a column matrix back into an image gradient.
pub fn col2im<T: Float>(col: &[T], c: usize, h: usize, w: usize, win: &Window, dx: &mut [T]) {
    let (oh, ow) = win.out_hw(h, w);
    let cols = oh * ow;
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut dx[ch * h * w..(ch + 1) * h * w];
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let src = &col[row * cols..(row + 1) * cols];
                let dy = (ky * win.dilation) as isize - win.pad_h as isize;
                let dxo = (kx * win.dilation) as isize - win.pad_w as isize;
                for oy in 0..oh {
                    let iy = (oy * win.stride) as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * win.stride) as isize + dxo;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// One output coordinate of a half-pixel-centred bilinear resize.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

/// Sample positions along one axis, matching `align_corners = false` semantics.
pub fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            Tap {
                lo,
                hi,
                frac: src - lo as f64,
            }
        })
        .collect()
}

pub fn resize_plane<T: Float>(
    src: &[T],
    (h, w): (usize, usize),
    dst: &mut [T],
    ys: &[Tap],
    xs: &[Tap],
) {
    let ow = xs.len();
    for (oy, ty) in ys.iter().enumerate() {
        let fy = T::from_f64_lossy(ty.frac);
        let r0 = &src[ty.lo * w..(ty.lo + 1) * w];
        let r1 = &src[ty.hi * w..(ty.hi + 1) * w];
        let out = &mut dst[oy * ow..(oy + 1) * ow];
        for (o, tx) in out.iter_mut().zip(xs) {
            let fx = T::from_f64_lossy(tx.frac);
            let top = r0[tx.lo] + (r0[tx.hi] - r0[tx.lo]) * fx;
            let bot = r1[tx.lo] + (r1[tx.hi] - r1[tx.lo]) * fx;
            *o = top + (bot - top) * fy;
        }
    }
    debug_assert_eq!(src.len(), h * w);
}

pub fn resize_plane_backward<T: Float>(
    grad_out: &[T],
    w: usize,
    grad_in: &mut [T],
    ys: &[Tap],
    xs: &[Tap],
) {
    let ow = xs.len();
    for (oy, ty) in ys.iter().enumerate() {
        let fy = T::from_f64_lossy(ty.frac);
        for (ox, tx) in xs.iter().enumerate() {
            let g = grad_out[oy * ow + ox];
            let fx = T::from_f64_lossy(tx.frac);
            let one = T::one();
            grad_in[ty.lo * w + tx.lo] += g * (one - fy) * (one - fx);
            grad_in[ty.lo * w + tx.hi] += g * (one - fy) * fx;
            grad_in[ty.hi * w + tx.lo] += g * fy * (one - fx);
            grad_in[ty.hi * w + tx.hi] += g * fy * fx;
        }
    }
}

/// Non-overlapping `k×k` average pooling of one plane.
pub fn avg_pool_plane<T: Float>(src: &[T], h: usize, w: usize, k: usize, dst: &mut [T]) {
    let (oh, ow) = (h / k, w / k);
    let norm = T::one() / T::from_usize(k * k).unwrap();
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = T::zero();
            for y in oy * k..(oy + 1) * k {
                for x in ox * k..(ox + 1) * k {
                    acc += src[y * w + x];
                }
            }
            dst[oy * ow + ox] = acc * norm;
        }
    }
}

pub fn avg_pool_plane_backward<T: Float>(
    grad_out: &[T],
    h: usize,
    w: usize,
    k: usize,
    grad_in: &mut [T],
) {
    let (oh, ow) = (h / k, w / k);
    let norm = T::one() / T::from_usize(k * k).unwrap();
    for oy in 0..oh {
        for ox in 0..ow {
            let g = grad_out[oy * ow + ox] * norm;
            for y in oy * k..(oy + 1) * k {
                for x in ox * k..(ox + 1) * k {
                    grad_in[y * w + x] += g;
                }
            }
        }
    }
}

/// 3×3 max pooling with stride 2 and padding 1; records the flat argmax of each output.
pub fn max_pool3s2_plane<T: Float>(src: &[T], h: usize, w: usize, dst: &mut [T], arg: &mut [u32]) {
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut best = T::neg_infinity();
            let mut best_i = 0usize;
            for dy in 0..3 {
                let y = (oy * 2 + dy) as isize - 1;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in 0..3 {
                    let x = (ox * 2 + dx) as isize - 1;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let i = y as usize * w + x as usize;
                    if src[i] > best {
                        best = src[i];
                        best_i = i;
                    }
                }
            }
            dst[oy * ow + ox] = best;
            arg[oy * ow + ox] = best_i as u32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)> for arbitrary x, c.
        let win = Window {
            kh: 3,
            kw: 2,
            stride: 2,
            pad_h: 2,
            pad_w: 1,
            dilation: 2,
        };
        let (c, h, w) = (2, 5, 6);
        let (oh, ow) = win.out_hw(h, w);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let cv: Vec<f64> = (0..c * 6 * oh * ow)
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut col = vec![0.0; cv.len()];
        im2col(&x, c, h, w, &win, &mut col);
        let mut back = vec![0.0; x.len()];
        col2im(&cv, c, h, w, &win, &mut back);
        let lhs: f64 = col.iter().zip(&cv).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn bilinear_identity_when_sizes_match() {
        let taps = bilinear_taps(7, 7);
        assert!(taps
            .iter()
            .enumerate()
            .all(|(i, t)| t.lo == i && t.frac == 0.0));
    }

    #[test]
    fn bilinear_upsample_of_constant_is_constant() {
        let src = vec![3.5f64; 4 * 4];
        let ys = bilinear_taps(4, 16);
        let xs = bilinear_taps(4, 16);
        let mut dst = vec![0.0; 256];
        resize_plane(&src, (4, 4), &mut dst, &ys, &xs);
        assert!(dst.iter().all(|&v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn max_pool_picks_window_maximum() {
        let src: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let mut dst = vec![0.0; 4];
        let mut arg = vec![0; 4];
        max_pool3s2_plane(&src, 4, 4, &mut dst, &mut arg);
        assert_eq!(dst, vec![5.0, 7.0, 13.0, 15.0]);
        assert_eq!(arg, vec![5, 7, 13, 15]);
    }
}
