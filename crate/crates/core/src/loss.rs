//! Hybrid deep-supervision objective.
//!
//! Segmentation maps are scored with `δ·wBCE + (1−δ)·wIoU`, where per-pixel weights
//! emphasise pixels whose neighbourhood disagrees with their own label. Boundary
//! predictions are scored with plain BCE against the morphological gradient of the
//! ground truth. All losses work on logits and return analytic gradients alongside
//! their values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decoder::ScoreMap;
use crate::error::{invalid, shape_mismatch, Result};
use crate::imgproc::BinaryMask;
use crate::tensor::{sigmoid, Float, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Mixing weight between weighted BCE and weighted IoU.
    pub delta: f64,
    /// Amplitude of the hard-pixel weighting.
    pub lambda_w: f64,
    /// Odd window of the local-mean pooling that defines hard pixels.
    pub pool_k: usize,
    /// Additive smoothing of the IoU ratio.
    pub iou_eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            delta: 0.9,
            lambda_w: 5.0,
            pool_k: 31,
            iou_eps: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(invalid(format!(
                "delta must lie in [0, 1], got {}",
                self.delta
            )));
        }
        if self.lambda_w < 0.0 || !self.lambda_w.is_finite() {
            return Err(invalid(format!(
                "lambda_w must be >= 0, got {}",
                self.lambda_w
            )));
        }
        if self.pool_k.is_multiple_of(2) {
            return Err(invalid(format!("pool_k must be odd, got {}", self.pool_k)));
        }
        if self.iou_eps < 0.0 {
            return Err(invalid("iou_eps must be >= 0"));
        }
        Ok(())
    }
}

/// Per-pixel loss weights, all in `[1, 1 + lambda_w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelWeightMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl PixelWeightMap {
    pub fn uniform(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            values: vec![1.0; width * height],
        }
    }

    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(shape_mismatch(width * height, values.len()));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }
}

/// `w = 1 + lambda_w · |mean_k(G) − G|`.
///
/// The local mean averages over the in-image part of the `k×k` window, so constant
/// masks yield uniform unit weights right up to the border.
pub fn pixel_weights(g: &BinaryMask, lambda_w: f64, pool_k: usize) -> Result<PixelWeightMap> {
    if pool_k.is_multiple_of(2) {
        return Err(invalid(format!("pool_k must be odd, got {pool_k}")));
    }
    let (w, h) = (g.width(), g.height());
    // Summed-area table for O(1) window sums.
    let mut sat = vec![0u32; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0u32;
        for x in 0..w {
            row += g.get(x, y) as u32;
            sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
        }
    }
    let r = pool_k / 2;
    let mut values = Vec::with_capacity(w * h);
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let sum = sat[y1 * (w + 1) + x1] + sat[y0 * (w + 1) + x0]
                - sat[y0 * (w + 1) + x1]
                - sat[y1 * (w + 1) + x0];
            let mean = sum as f64 / ((y1 - y0) * (x1 - x0)) as f64;
            let gv = g.get(x, y) as u8 as f64;
            values.push(1.0 + lambda_w * (mean - gv).abs());
        }
    }
    PixelWeightMap::new(w, h, values)
}

#[inline]
fn softplus(x: f64) -> f64 {
    // log(1 + e^x) without overflow.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Per-pixel BCE on a logit: `−g·log σ(x) − (1−g)·log(1−σ(x))`.
#[inline]
fn bce_logit(x: f64, g: f64) -> f64 {
    softplus(x) - x * g
}

fn check_lengths(n: usize, others: &[usize]) -> Result<()> {
    match others.iter().find(|&&m| m != n) {
        Some(&m) => Err(shape_mismatch(n, m)),
        None => Ok(()),
    }
}

/// Weighted BCE and its gradient with respect to the logits.
pub fn weighted_bce_grad(logits: &[f64], target: &[f64], weights: &[f64]) -> (f64, Vec<f64>) {
    let wsum: f64 = weights.iter().sum();
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(target)
        .zip(weights)
        .map(|((&x, &g), &w)| {
            loss += w * bce_logit(x, g);
            w * (sigmoid(x) - g) / wsum
        })
        .collect();
    (loss / wsum, grad)
}

/// Weighted IoU loss `1 − (I + ε)/(U + ε)` and its gradient with respect to the logits.
pub fn weighted_iou_grad(
    logits: &[f64],
    target: &[f64],
    weights: &[f64],
    eps: f64,
) -> (f64, Vec<f64>) {
    let mut inter = 0.0;
    let mut union = 0.0;
    let probs: Vec<f64> = logits.iter().map(|&x| sigmoid(x)).collect();
    for ((&p, &g), &w) in probs.iter().zip(target).zip(weights) {
        inter += w * p * g;
        union += w * (p + g - p * g);
    }
    let (num, den) = (inter + eps, union + eps);
    let loss = 1.0 - num / den;
    let grad = probs
        .iter()
        .zip(target)
        .zip(weights)
        .map(|((&p, &g), &w)| {
            let d_inter = w * g;
            let d_union = w * (1.0 - g);
            let d_p = -(d_inter * den - num * d_union) / (den * den);
            d_p * p * (1.0 - p)
        })
        .collect();
    (loss, grad)
}

/// `δ·wBCE + (1−δ)·wIoU` with gradient.
pub fn hybrid_loss_grad(
    logits: &[f64],
    target: &[f64],
    weights: &[f64],
    delta: f64,
    eps: f64,
) -> (f64, Vec<f64>) {
    let (a, ga) = weighted_bce_grad(logits, target, weights);
    let (b, gb) = weighted_iou_grad(logits, target, weights, eps);
    let grad = ga
        .iter()
        .zip(&gb)
        .map(|(&x, &y)| delta * x + (1.0 - delta) * y)
        .collect();
    (delta * a + (1.0 - delta) * b, grad)
}

/// Mean BCE over pixels, with gradient.
pub fn boundary_bce_grad(logits: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .zip(target)
        .map(|(&x, &g)| {
            loss += bce_logit(x, g);
            (sigmoid(x) - g) / n
        })
        .collect();
    (loss / n, grad)
}

fn mask_f64(m: &BinaryMask) -> Vec<f64> {
    m.pixels().iter().map(|&v| v as f64).collect()
}

fn check_map(p: &ScoreMap, g: &BinaryMask) -> Result<()> {
    if (p.width(), p.height()) != (g.width(), g.height()) {
        return Err(shape_mismatch(
            (g.width(), g.height()),
            (p.width(), p.height()),
        ));
    }
    Ok(())
}

pub fn weighted_bce(p: &ScoreMap, g: &BinaryMask, w: &PixelWeightMap) -> Result<f64> {
    check_map(p, g)?;
    check_lengths(p.values().len(), &[w.values.len()])?;
    Ok(weighted_bce_grad(p.values(), &mask_f64(g), &w.values).0)
}

pub fn weighted_iou(p: &ScoreMap, g: &BinaryMask, w: &PixelWeightMap, eps: f64) -> Result<f64> {
    check_map(p, g)?;
    check_lengths(p.values().len(), &[w.values.len()])?;
    Ok(weighted_iou_grad(p.values(), &mask_f64(g), &w.values, eps).0)
}

/// `L_S = δ·L_wBCE + (1−δ)·L_wIoU` with pixel weights derived from `g`.
pub fn hybrid_loss(p: &ScoreMap, g: &BinaryMask, weights: &LossWeights) -> Result<f64> {
    weights.validate()?;
    check_map(p, g)?;
    let w = pixel_weights(g, weights.lambda_w, weights.pool_k)?;
    Ok(hybrid_loss_grad(
        p.values(),
        &mask_f64(g),
        &w.values,
        weights.delta,
        weights.iou_eps,
    )
    .0)
}

/// Mean-normalized BCE of boundary logits against a boundary target of equal extent.
pub fn boundary_bce(b_pred: &ScoreMap, g_b: &BinaryMask) -> Result<f64> {
    check_map(b_pred, g_b)?;
    Ok(boundary_bce_grad(b_pred.values(), &mask_f64(g_b)).0)
}

/// Downsamples a boundary target by block max-pooling so thin edges survive.
pub fn downsample_boundary(g_b: &BinaryMask, width: usize, height: usize) -> Result<BinaryMask> {
    if (width, height) == (g_b.width(), g_b.height()) {
        return Ok(g_b.clone());
    }
    if width == 0
        || height == 0
        || !g_b.width().is_multiple_of(width)
        || !g_b.height().is_multiple_of(height)
    {
        return Err(invalid(format!(
            "boundary target {}x{} cannot be max-pooled to {width}x{height}",
            g_b.width(),
            g_b.height()
        )));
    }
    let (kx, ky) = (g_b.width() / width, g_b.height() / height);
    Ok(BinaryMask::from_fn(width, height, |x, y| {
        (y * ky..(y + 1) * ky).any(|sy| (x * kx..(x + 1) * kx).any(|sx| g_b.get(sx, sy)))
    }))
}

/// Supervised network outputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Head {
    /// Global map from the partial decoder (or its 1×1 stand-in).
    Global,
    /// Boundary prediction of the boundary-attention module at a backbone level.
    Boundary(usize),
    /// Output of the reverse-attention module at a backbone level.
    Refine(usize),
}

impl Head {
    /// The five outputs of the standard architecture.
    pub const CANONICAL: [Head; 5] = [
        Head::Global,
        Head::Boundary(2),
        Head::Boundary(3),
        Head::Refine(4),
        Head::Refine(5),
    ];

    pub fn is_boundary(self) -> bool {
        matches!(self, Head::Boundary(_))
    }

    pub fn name(self) -> String {
        match self {
            Head::Global => "O_S".into(),
            Head::Boundary(l) => format!("B_pred_{l}"),
            Head::Refine(l) => format!("O_{l}"),
        }
    }
}

/// Full deep-supervision loss: segmentation terms on `O_S`, `O_4`, `O_5` (each
/// upsampled to the ground-truth resolution) plus boundary terms on both boundary heads
/// (against the max-pooled boundary target).
pub fn total_loss(
    outputs: &BTreeMap<Head, ScoreMap>,
    g: &BinaryMask,
    g_b: &BinaryMask,
    weights: &LossWeights,
) -> Result<f64> {
    let mut total = 0.0;
    for head in Head::CANONICAL {
        let map = outputs
            .get(&head)
            .ok_or_else(|| invalid(format!("missing output {}", head.name())))?;
        total += term_loss(head, map, g, g_b, weights)?;
    }
    Ok(total)
}

/// Loss of one supervised output.
pub fn term_loss(
    head: Head,
    map: &ScoreMap,
    g: &BinaryMask,
    g_b: &BinaryMask,
    weights: &LossWeights,
) -> Result<f64> {
    if head.is_boundary() {
        let target = downsample_boundary(g_b, map.width(), map.height())?;
        boundary_bce(map, &target)
    } else {
        let up = map.resized(g.width(), g.height(), 1);
        hybrid_loss(&up, g, weights)
    }
}

/// Per-item supervision targets for the graph-side losses.
#[derive(Clone, Debug)]
pub struct Targets {
    /// Ground-truth masks at network input resolution.
    pub masks: Vec<BinaryMask>,
    /// Pixel weights matching `masks`.
    pub weights: Vec<PixelWeightMap>,
    /// Boundary targets at input resolution.
    pub boundaries: Vec<BinaryMask>,
}

impl Targets {
    pub fn new(masks: Vec<BinaryMask>, weights: &LossWeights) -> Result<Self> {
        let pw = masks
            .iter()
            .map(|m| pixel_weights(m, weights.lambda_w, weights.pool_k))
            .collect::<Result<Vec<_>>>()?;
        let boundaries = masks
            .iter()
            .map(crate::attention::boundary_target)
            .collect();
        Ok(Self {
            masks,
            weights: pw,
            boundaries,
        })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }
}

fn batch_scalar<T: Float>(
    graph: &mut Graph<T>,
    x: Var,
    mut per_item: impl FnMut(usize, &[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<Var> {
    let value = graph.value(x);
    let [n, c, h, w] = value.shape();
    if c != 1 {
        return Err(invalid(format!(
            "loss expects single-channel logits, got {c} channels"
        )));
    }
    let mut total = 0.0;
    let mut grad = Tensor::<T>::zeros([n, 1, h, w]);
    for i in 0..n {
        let logits: Vec<f64> = value.plane(i, 0).iter().map(|v| v.to_f64_lossy()).collect();
        let (l, g) = per_item(i, &logits)?;
        total += l;
        for (d, gv) in grad.plane_mut(i, 0).iter_mut().zip(g) {
            *d = T::from_f64_lossy(gv / n as f64);
        }
    }
    Ok(graph.scalar_fn(x, T::from_f64_lossy(total / n as f64), grad))
}

/// Batch-mean hybrid loss of logits `x` after bilinear upsampling to the target size.
pub fn seg_loss_node<T: Float>(
    graph: &mut Graph<T>,
    x: Var,
    targets: &Targets,
    weights: &LossWeights,
) -> Result<Var> {
    let g0 = &targets.masks[0];
    let up = graph.resize(x, g0.height(), g0.width());
    batch_scalar(graph, up, |i, logits| {
        let g = mask_f64(&targets.masks[i]);
        check_lengths(logits.len(), &[g.len()])?;
        Ok(hybrid_loss_grad(
            logits,
            &g,
            &targets.weights[i].values,
            weights.delta,
            weights.iou_eps,
        ))
    })
}

/// Batch-mean boundary BCE of logits `x` against max-pooled boundary targets.
pub fn boundary_loss_node<T: Float>(
    graph: &mut Graph<T>,
    x: Var,
    targets: &Targets,
) -> Result<Var> {
    let [_, _, h, w] = graph.shape(x);
    let pooled = targets
        .boundaries
        .iter()
        .map(|b| downsample_boundary(b, w, h))
        .collect::<Result<Vec<_>>>()?;
    batch_scalar(graph, x, |i, logits| {
        Ok(boundary_bce_grad(logits, &mask_f64(&pooled[i])))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pixel_weights_examples() {
        for g in [BinaryMask::zeros(9, 7), BinaryMask::ones(9, 7)] {
            let w = pixel_weights(&g, 5.0, 31).unwrap();
            assert!(w.values().iter().all(|&v| v == 1.0));
        }
        let g = BinaryMask::new(4, 1, vec![0, 0, 1, 1]).unwrap();
        let w = pixel_weights(&g, 5.0, 3).unwrap();
        assert_abs_diff_eq!(w.values()[1], 8.0 / 3.0, epsilon = 1e-12);
        let big = BinaryMask::from_fn(40, 40, |x, _| x >= 20);
        let w = pixel_weights(&big, 5.0, 3).unwrap();
        assert_eq!(w.values()[10 * 40 + 5], 1.0);
        assert!(pixel_weights(&big, 5.0, 4).is_err());
    }

    #[test]
    fn weighted_bce_examples() {
        let g = BinaryMask::new(1, 1, vec![1]).unwrap();
        let p = ScoreMap::filled(1, 1, 1, 0.0);
        let w = PixelWeightMap::uniform(1, 1);
        assert_abs_diff_eq!(
            weighted_bce(&p, &g, &w).unwrap(),
            2f64.ln(),
            epsilon = 1e-12
        );

        let g = BinaryMask::new(2, 1, vec![1, 0]).unwrap();
        let p = ScoreMap::new(2, 1, 1, vec![20.0, -20.0]).unwrap();
        assert!(weighted_bce(&p, &g, &PixelWeightMap::uniform(2, 1)).unwrap() < 1e-8);

        // Unit weights reduce to mean BCE.
        let p = ScoreMap::new(2, 1, 1, vec![0.3, -1.2]).unwrap();
        let mean = (bce_logit(0.3, 1.0) + bce_logit(-1.2, 0.0)) / 2.0;
        assert_abs_diff_eq!(
            weighted_bce(&p, &g, &PixelWeightMap::uniform(2, 1)).unwrap(),
            mean,
            epsilon = 1e-12
        );
    }

    #[test]
    fn weighted_iou_examples() {
        let g = BinaryMask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        let w = PixelWeightMap::uniform(2, 2);
        let half = ScoreMap::filled(2, 2, 1, 0.0);
        assert_abs_diff_eq!(
            weighted_iou(&half, &g, &w, 1.0).unwrap(),
            1.0 - 1.5 / 3.5,
            epsilon = 1e-12
        );
        let zero = ScoreMap::filled(2, 2, 1, -800.0);
        assert_abs_diff_eq!(
            weighted_iou(&zero, &g, &w, 1.0).unwrap(),
            1.0 / 2.0,
            epsilon = 1e-12
        );
        let exact = ScoreMap::new(2, 2, 1, vec![800.0, -800.0, -800.0, -800.0]).unwrap();
        let ww = PixelWeightMap::new(2, 2, vec![3.0, 1.0, 2.0, 5.0]).unwrap();
        assert_abs_diff_eq!(
            weighted_iou(&exact, &g, &ww, 1.0).unwrap(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn hybrid_endpoints_and_linearity() {
        let g = BinaryMask::from_fn(6, 5, |x, y| x + y > 4);
        let p = ScoreMap::new(
            6,
            5,
            1,
            (0..30).map(|i| (i as f64 * 0.7).sin() * 3.0).collect(),
        )
        .unwrap();
        let mut lw = LossWeights::default();
        let w = pixel_weights(&g, lw.lambda_w, lw.pool_k).unwrap();
        let a = weighted_bce(&p, &g, &w).unwrap();
        let b = weighted_iou(&p, &g, &w, 1.0).unwrap();
        assert_abs_diff_eq!(
            hybrid_loss(&p, &g, &lw).unwrap(),
            0.9 * a + 0.1 * b,
            epsilon = 1e-12
        );
        lw.delta = 1.0;
        assert_eq!(hybrid_loss(&p, &g, &lw).unwrap(), a);
        lw.delta = 1.5;
        assert!(hybrid_loss(&p, &g, &lw).is_err());
    }

    #[test]
    fn boundary_bce_examples() {
        let gb = BinaryMask::from_fn(4, 4, |x, _| x == 1);
        let perfect = ScoreMap::new(
            4,
            4,
            4,
            (0..16)
                .map(|i| if i % 4 == 1 { 30.0 } else { -30.0 })
                .collect(),
        )
        .unwrap();
        assert!(boundary_bce(&perfect, &gb).unwrap() < 1e-8);
        let zero = ScoreMap::filled(4, 4, 4, 0.0);
        assert_abs_diff_eq!(
            boundary_bce(&zero, &gb).unwrap(),
            2f64.ln(),
            epsilon = 1e-12
        );
        let neg = ScoreMap::filled(4, 4, 4, -20.0);
        assert!(boundary_bce(&neg, &BinaryMask::zeros(4, 4)).unwrap() < 1e-8);
    }

    #[test]
    fn boundary_downsampling_keeps_thin_edges() {
        let gb = BinaryMask::from_fn(8, 8, |x, _| x == 5);
        let d = downsample_boundary(&gb, 2, 2).unwrap();
        assert_eq!(d.pixels(), &[0, 1, 0, 1]);
        assert!(downsample_boundary(&gb, 3, 3).is_err());
    }

    #[test]
    fn total_loss_requires_every_head() {
        let g = BinaryMask::zeros(8, 8);
        let mut outs = BTreeMap::new();
        outs.insert(Head::Global, ScoreMap::filled(2, 2, 4, -30.0));
        assert!(total_loss(&outs, &g, &g, &LossWeights::default()).is_err());
    }
}
