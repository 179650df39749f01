//! Boundary attention and reverse attention.
//!
//! Boundary attention gates shallow features with a mask that peaks along the predicted
//! lesion boundary. The mask comes from exact Euclidean distance transforms of the
//! binarized coarse prediction and of its complement. Reverse attention gates deep
//! features with `1 − sigmoid(coarser prediction)`, steering each refinement stage
//! toward regions the coarser map did not claim.
//!
//! Both masks are computed from graph values and enter the graph as constants.

use crate::decoder::ScoreMap;
use crate::error::{invalid, Result};
use crate::imgproc::BinaryMask;
use crate::nn::{Conv2d, ConvBn, Ctx, Init};
use crate::tensor::{ConvGeom, Float, Tensor, Var};

/// Channel width of the reverse-attention convolutions (and of the repeated mask).
pub const RA_CHANNELS: usize = 64;

/// Per-pixel multiplicative mask with entries in `[0, 1]`, `channels × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    channels: usize,
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl AttentionMask {
    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.width * self.height;
        &self.values[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.channel(c)[y * self.width + x]
    }

    /// `[1, 1, H, W]` tensor of channel 0.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, 1, self.height, self.width],
            self.channel(0)
                .iter()
                .map(|&v| T::from_f64_lossy(v))
                .collect(),
        )
    }
}

/// Non-negative per-pixel distances.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl DistanceMap {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

/// `S(j) = 1` iff `sigmoid(U(j)) > 0.5`, i.e. `U(j) > 0`.
pub fn binarize_map(u: &ScoreMap) -> BinaryMask {
    binarize_logits(u.values(), u.width(), u.height())
}

pub(crate) fn binarize_logits<T: Float>(values: &[T], width: usize, height: usize) -> BinaryMask {
    let pixels = values.iter().map(|&v| (v > T::zero()) as u8).collect();
    BinaryMask::new(width, height, pixels).expect("binary by construction")
}

/// One-dimensional squared distance transform of a sampled function (lower envelope
/// of parabolas). `f` holds 0 at sites and `inf` elsewhere, or a previous pass's output.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        if f[q].is_infinite() {
            continue;
        }
        if f[v[0]].is_infinite() {
            v[0] = q;
            continue;
        }
        loop {
            let p = v[k];
            let s =
                ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if f[v[0]].is_infinite() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0usize;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact Euclidean distance from each foreground pixel to the nearest zero pixel.
///
/// Background pixels map to 0. Pixels outside the image count as background, so the
/// transform stays finite for an all-ones mask.
pub fn distance_transform(s: &BinaryMask) -> DistanceMap {
    let (w, h) = (s.width(), s.height());
    let (pw, ph) = (w + 2, h + 2);
    let mut grid = vec![0.0f64; pw * ph];
    for y in 0..h {
        for x in 0..w {
            if s.get(x, y) {
                grid[(y + 1) * pw + x + 1] = f64::INFINITY;
            }
        }
    }
    let longest = pw.max(ph);
    let mut f = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut v = vec![0usize; longest];
    let mut z = vec![0.0; longest + 1];
    for x in 0..pw {
        for y in 0..ph {
            f[y] = grid[y * pw + x];
        }
        edt_1d(&f[..ph], &mut out[..ph], &mut v, &mut z);
        for y in 0..ph {
            grid[y * pw + x] = out[y];
        }
    }
    for y in 0..ph {
        let row = &mut grid[y * pw..(y + 1) * pw];
        f[..pw].copy_from_slice(row);
        edt_1d(&f[..pw], &mut out[..pw], &mut v, &mut z);
        row.copy_from_slice(&out[..pw]);
    }
    let mut values = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            values.push(grid[(y + 1) * pw + x + 1].sqrt());
        }
    }
    DistanceMap {
        width: w,
        height: h,
        values,
    }
}

/// `M_B = 1 − (DT(S)/max DT(S) + DT(1−S)/max DT(1−S))`.
///
/// A normalized term whose maximum is zero contributes zero. The two terms have
/// disjoint support, so `M_B ∈ [0, 1]`, highest next to the foreground/background edge.
pub fn boundary_mask(s: &BinaryMask) -> AttentionMask {
    let inner = distance_transform(s);
    let outer = distance_transform(&s.complement());
    let (mi, mo) = (inner.max(), outer.max());
    let values = inner
        .values
        .iter()
        .zip(&outer.values)
        .map(|(&a, &b)| {
            let na = if mi > 0.0 { a / mi } else { 0.0 };
            let nb = if mo > 0.0 { b / mo } else { 0.0 };
            1.0 - (na + nb)
        })
        .collect();
    AttentionMask {
        channels: 1,
        width: s.width(),
        height: s.height(),
        values,
    }
}

/// Morphological gradient of the ground truth: `dilate₃ₓ₃(G) − erode₃ₓ₃(G)`, with zeros
/// outside the image.
pub fn boundary_target(g: &BinaryMask) -> BinaryMask {
    let (w, h) = (g.width() as isize, g.height() as isize);
    let at =
        |x: isize, y: isize| x >= 0 && y >= 0 && x < w && y < h && g.get(x as usize, y as usize);
    BinaryMask::from_fn(g.width(), g.height(), |x, y| {
        let (x, y) = (x as isize, y as isize);
        let mut any = false;
        let mut all = true;
        for dy in -1..=1 {
            for dx in -1..=1 {
                let v = at(x + dx, y + dy);
                any |= v;
                all &= v;
            }
        }
        any && !all
    })
}

/// Reverse-attention mask: `1 − sigmoid(S_next)` repeated over `channels`.
///
/// `s_next` must already be resampled to the target level's resolution.
pub fn ra_mask(s_next: &ScoreMap, channels: usize) -> AttentionMask {
    let plane: Vec<f64> = s_next
        .values()
        .iter()
        .map(|&v| 1.0 - crate::tensor::sigmoid(v))
        .collect();
    let mut values = Vec::with_capacity(plane.len() * channels);
    for _ in 0..channels {
        values.extend_from_slice(&plane);
    }
    AttentionMask {
        channels,
        width: s_next.width(),
        height: s_next.height(),
        values,
    }
}

/// Boundary attention at one backbone level.
#[derive(Clone, Debug)]
pub struct BoundaryAttention {
    head: Conv2d,
}

/// Graph outputs of [`BoundaryAttention::forward`].
#[derive(Clone, Copy, Debug)]
pub struct BaOutput {
    /// Gated features `M_B ⊙ F_i`.
    pub features: Var,
    /// Boundary logits from a 1×1 head on the gated features.
    pub boundary: Var,
}

impl BoundaryAttention {
    pub fn new<T: Float>(init: &mut Init<'_, T>, channels: usize) -> Self {
        Self {
            head: Conv2d::new(&mut init.sub("head"), channels, 1, ConvGeom::same(1), true),
        }
    }

    /// Builds the boundary masks of every batch item from the logits `u`.
    pub fn masks<T: Float>(u: &Tensor<T>) -> Tensor<T> {
        let [n, _, h, w] = u.shape();
        let mut out = Tensor::zeros([n, 1, h, w]);
        for i in 0..n {
            let s = binarize_logits(u.plane(i, 0), w, h);
            let m = boundary_mask(&s);
            for (d, &v) in out.plane_mut(i, 0).iter_mut().zip(m.values()) {
                *d = T::from_f64_lossy(v);
            }
        }
        out
    }

    /// `u` holds the coarse logits already resized to `f`'s spatial extent.
    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, f: Var, u: Var) -> Result<BaOutput> {
        let sf = cx.graph.shape(f);
        let su = cx.graph.shape(u);
        if (su[0], su[2], su[3]) != (sf[0], sf[2], sf[3]) || su[1] != 1 {
            return Err(invalid(format!(
                "boundary attention expects a [N,1,H,W] map matching {sf:?}, got {su:?}"
            )));
        }
        let mask = Self::masks(cx.graph.value(u));
        let mask = cx.attention_mask(mask);
        let features = cx.graph.mul_mask(f, mask);
        let boundary = self.head.forward(cx, features);
        Ok(BaOutput { features, boundary })
    }
}

/// Reverse attention at one backbone level.
#[derive(Clone, Debug)]
pub struct ReverseAttention {
    con1: ConvBn,
    con2: ConvBn,
    head: Conv2d,
}

impl ReverseAttention {
    /// `cin` is the feature width plus the width of the routed boundary features.
    pub fn new<T: Float>(init: &mut Init<'_, T>, cin: usize) -> Self {
        Self {
            con1: ConvBn::new(
                &mut init.sub("con1"),
                cin,
                RA_CHANNELS,
                ConvGeom::same(3),
                true,
            ),
            con2: ConvBn::new(
                &mut init.sub("con2"),
                RA_CHANNELS,
                RA_CHANNELS,
                ConvGeom::same(3),
                true,
            ),
            head: Conv2d::new(
                &mut init.sub("head"),
                RA_CHANNELS + 1,
                1,
                ConvGeom::same(3),
                true,
            ),
        }
    }

    /// Mask tensor `[N, 1, H, W]` of `1 − sigmoid(s_next)`; broadcast over channels.
    pub fn masks<T: Float>(s_next: &Tensor<T>) -> Tensor<T> {
        s_next.map(|v| T::one() - crate::tensor::sigmoid(v))
    }

    /// `boundary` is the routed boundary-attention output (any resolution) or `None`
    /// when boundary attention is disabled; `s_next` holds the next-deeper logits.
    pub fn forward<T: Float>(
        &self,
        cx: &mut Ctx<'_, T>,
        f: Var,
        boundary: Option<Var>,
        s_next: Var,
    ) -> Result<Var> {
        let [n, _, h, w] = cx.graph.shape(f);
        let ss = cx.graph.shape(s_next);
        if ss[0] != n || ss[1] != 1 {
            return Err(invalid(format!(
                "reverse attention guidance must be [N,1,H,W], got {ss:?}"
            )));
        }
        let guide = cx.graph.resize(s_next, h, w);
        let input = match boundary {
            Some(b) => {
                let sb = cx.graph.shape(b);
                if sb[0] != n {
                    return Err(invalid("boundary features batch mismatch"));
                }
                let down = cx.graph.resample(b, h, w);
                cx.graph.concat(&[f, down])
            }
            None => f,
        };
        let t = self.con1.forward(cx, input);
        let t = self.con2.forward(cx, t);
        let mask = Self::masks(cx.graph.value(guide));
        let mask = cx.attention_mask(mask);
        let gated = cx.graph.mul_mask(t, mask);
        let cat = cx.graph.concat(&[gated, guide]);
        Ok(self.head.forward(cx, cat))
    }
}
