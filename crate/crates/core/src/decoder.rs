//! Parallel partial decoder over the two deepest backbone levels.

use crate::error::{invalid, shape_mismatch, Result};
use crate::nn::{Conv2d, ConvBn, Ctx, Init};
use crate::tensor::{ConvGeom, Float, Tensor, Var};

/// Channel width of every receptive-field block output.
pub const RFB_CHANNELS: usize = 32;

/// A single-channel map of logits at some stride relative to the network input.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    width: usize,
    height: usize,
    stride: usize,
    values: Vec<f64>,
}

impl ScoreMap {
    pub fn new(width: usize, height: usize, stride: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(shape_mismatch(width * height, values.len()));
        }
        if !matches!(stride, 1 | 2 | 4 | 8 | 16 | 32) {
            return Err(invalid(format!("unsupported stride {stride}")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("score map contains non-finite values"));
        }
        Ok(Self {
            width,
            height,
            stride,
            values,
        })
    }

    pub fn filled(width: usize, height: usize, stride: usize, value: f64) -> Self {
        Self::new(width, height, stride, vec![value; width * height]).expect("valid constant map")
    }

    /// Takes channel 0 of batch item `n` of a `[N, 1, H, W]` tensor.
    pub fn from_tensor<T: Float>(t: &Tensor<T>, n: usize, stride: usize) -> Result<Self> {
        let values = t.plane(n, 0).iter().map(|v| v.to_f64_lossy()).collect();
        Self::new(t.width(), t.height(), stride, values)
    }

    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::from_vec(
            [1, 1, self.height, self.width],
            self.values.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }

    /// Bilinear resize (half-pixel centres) to `width×height` at `stride`.
    pub fn resized(&self, width: usize, height: usize, stride: usize) -> Self {
        if (width, height) == (self.width, self.height) {
            return Self {
                stride,
                ..self.clone()
            };
        }
        let ys = crate::tensor::kernels::bilinear_taps(self.height, height);
        let xs = crate::tensor::kernels::bilinear_taps(self.width, width);
        let mut values = vec![0.0; width * height];
        crate::tensor::kernels::resize_plane(
            &self.values,
            (self.height, self.width),
            &mut values,
            &ys,
            &xs,
        );
        Self {
            width,
            height,
            stride,
            values,
        }
    }
}

/// Receptive-field block: four dilated branches fused by a 3×3 conv plus a 1×1 shortcut.
#[derive(Clone, Debug)]
pub struct Rfb {
    branches: Vec<Vec<ConvBn>>,
    fuse: ConvBn,
    shortcut: ConvBn,
}

impl Rfb {
    pub fn new<T: Float>(init: &mut Init<'_, T>, cin: usize) -> Self {
        let c = RFB_CHANNELS;
        let mut branches = Vec::new();
        let entry = |init: &mut Init<'_, T>| {
            ConvBn::new(&mut init.sub("0"), cin, c, ConvGeom::same(1), false)
        };
        branches.push(vec![entry(&mut init.sub("branch0"))]);
        for (b, k) in [(1usize, 3usize), (2, 5), (3, 7)] {
            let mut sub = init.sub(&format!("branch{b}"));
            let p = k / 2;
            branches.push(vec![
                entry(&mut sub),
                ConvBn::new(
                    &mut sub.sub("1"),
                    c,
                    c,
                    ConvGeom::new(1, k, 1, 0, p, 1),
                    false,
                ),
                ConvBn::new(
                    &mut sub.sub("2"),
                    c,
                    c,
                    ConvGeom::new(k, 1, 1, p, 0, 1),
                    false,
                ),
                ConvBn::new(
                    &mut sub.sub("3"),
                    c,
                    c,
                    ConvGeom::new(3, 3, 1, k, k, k),
                    false,
                ),
            ]);
        }
        let fuse = ConvBn::new(&mut init.sub("fuse"), 4 * c, c, ConvGeom::same(3), false);
        let shortcut = ConvBn::new(&mut init.sub("shortcut"), cin, c, ConvGeom::same(1), false);
        Self {
            branches,
            fuse,
            shortcut,
        }
    }

    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let outs: Vec<Var> = self
            .branches
            .iter()
            .map(|branch| branch.iter().fold(x, |y, conv| conv.forward(cx, y)))
            .collect();
        let cat = cx.graph.concat(&outs);
        let fused = self.fuse.forward(cx, cat);
        let skip = self.shortcut.forward(cx, x);
        let sum = cx.graph.add(fused, skip);
        cx.graph.relu(sum)
    }
}

/// Aggregates RFB-transformed `F4` and `F5` into the global map `O_S` at `F4`'s stride.
#[derive(Clone, Debug)]
pub struct PartialDecoder {
    up_gate: ConvBn,
    up_skip: ConvBn,
    conv1: ConvBn,
    conv2: ConvBn,
    head: Conv2d,
}

impl PartialDecoder {
    pub fn new<T: Float>(init: &mut Init<'_, T>) -> Self {
        let c = RFB_CHANNELS;
        Self {
            up_gate: ConvBn::new(&mut init.sub("up_gate"), c, c, ConvGeom::same(3), false),
            up_skip: ConvBn::new(&mut init.sub("up_skip"), c, c, ConvGeom::same(3), false),
            conv1: ConvBn::new(
                &mut init.sub("conv1"),
                3 * c,
                3 * c,
                ConvGeom::same(3),
                true,
            ),
            conv2: ConvBn::new(
                &mut init.sub("conv2"),
                3 * c,
                3 * c,
                ConvGeom::same(3),
                true,
            ),
            head: Conv2d::new(&mut init.sub("head"), 3 * c, 1, ConvGeom::same(1), true),
        }
    }

    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, r4: Var, r5: Var) -> Result<Var> {
        let s4 = cx.graph.shape(r4);
        let s5 = cx.graph.shape(r5);
        if s4[0] != s5[0] || s4[2] != 2 * s5[2] || s4[3] != 2 * s5[3] {
            return Err(invalid(format!(
                "decoder expects r4 at twice r5's resolution, got {s4:?} and {s5:?}"
            )));
        }
        if s4[1] != RFB_CHANNELS || s5[1] != RFB_CHANNELS {
            return Err(invalid(format!(
                "decoder inputs must have {RFB_CHANNELS} channels"
            )));
        }
        let up5 = cx.graph.resize(r5, s4[2], s4[3]);
        let gate = self.up_gate.forward(cx, up5);
        let product = cx.graph.mul(gate, r4);
        let skip = self.up_skip.forward(cx, up5);
        let cat = cx.graph.concat(&[product, r4, skip]);
        let y = self.conv1.forward(cx, cat);
        let y = self.conv2.forward(cx, y);
        Ok(self.head.forward(cx, y))
    }
}
