//! Res2Net feature extractor producing the five-level pyramid `F1..F5`.
//!
//! Each bottleneck splits its 1×1-projected features into `scale` groups. Group `i > 0`
//! is transformed together with the output of group `i − 1`'s transform, so receptive
//! fields grow across groups inside a single block; the last group passes through.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::nn::{ConvBn, Ctx, Init, ParamStore};
use crate::tensor::{ConvGeom, Float, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    /// Two blocks per stage, channels 16..256; desk-scale experiments.
    #[serde(alias = "toy")]
    Res2netToy,
    /// 50-layer profile: deep stem, blocks (3, 4, 6, 3), channels 64..2048.
    #[serde(alias = "full")]
    Res2netFull,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Channel widths of `F1..F5`.
    pub channels: [usize; 5],
    /// Split count `s` of every Res2Net block.
    pub scale: usize,
    /// Blocks in stages 2..5.
    pub blocks: [usize; 4],
    /// Per-group width is `out_channels * base_width / 256`.
    pub base_width: usize,
}

impl BackboneConfig {
    pub fn toy() -> Self {
        Self {
            kind: BackboneKind::Res2netToy,
            channels: [16, 32, 64, 128, 256],
            scale: 4,
            blocks: [2, 2, 2, 2],
            base_width: 32,
        }
    }

    pub fn full() -> Self {
        Self {
            kind: BackboneKind::Res2netFull,
            channels: [64, 256, 512, 1024, 2048],
            scale: 4,
            blocks: [3, 4, 6, 3],
            base_width: 26,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(format!(
                "backbone channels must be strictly increasing, got {:?}",
                self.channels
            )));
        }
        if self.scale < 2 {
            return Err(invalid(format!(
                "res2net scale must be >= 2, got {}",
                self.scale
            )));
        }
        if self.blocks.contains(&0) {
            return Err(invalid("every stage needs at least one block"));
        }
        Ok(())
    }

    fn group_width(&self, out: usize) -> usize {
        (out * self.base_width / 256).max(1)
    }
}

/// Spatial stride of pyramid level `level` (1-based).
pub const fn level_stride(level: usize) -> usize {
    1 << level
}

/// Graph handles of the five backbone feature maps.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 5],
}

impl FeaturePyramid {
    /// Feature map of level `1..=5`.
    pub fn level(&self, level: usize) -> Var {
        self.levels[level - 1]
    }
}

/// One Res2Net bottleneck.
#[derive(Clone, Debug)]
pub struct Res2Block {
    reduce: ConvBn,
    groups: Vec<ConvBn>,
    expand: ConvBn,
    shortcut: Option<ConvBn>,
    downsample: bool,
    width: usize,
    scale: usize,
}

impl Res2Block {
    pub fn new<T: Float>(
        init: &mut Init<'_, T>,
        cin: usize,
        cout: usize,
        width: usize,
        scale: usize,
        downsample: bool,
    ) -> Self {
        let mid = width * scale;
        let reduce = ConvBn::new(&mut init.sub("reduce"), cin, mid, ConvGeom::same(1), true);
        let groups = (0..scale - 1)
            .map(|i| {
                ConvBn::new(
                    &mut init.sub(&format!("group{i}")),
                    width,
                    width,
                    ConvGeom::same(3),
                    true,
                )
            })
            .collect();
        let expand = ConvBn::new(&mut init.sub("expand"), mid, cout, ConvGeom::same(1), false);
        let shortcut = (cin != cout).then(|| {
            ConvBn::new(
                &mut init.sub("shortcut"),
                cin,
                cout,
                ConvGeom::same(1),
                false,
            )
        });
        Self {
            reduce,
            groups,
            expand,
            shortcut,
            downsample,
            width,
            scale,
        }
    }

    /// Channels per split group.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    /// The hierarchical split transform on the reduced features, returning the
    /// per-group outputs before re-concatenation.
    pub fn split_cascade<T: Float>(&self, cx: &mut Ctx<'_, T>, reduced: Var) -> Vec<Var> {
        let mut outs = Vec::with_capacity(self.scale);
        let mut prev: Option<Var> = None;
        for (i, conv) in self.groups.iter().enumerate() {
            let part = cx.graph.slice_channels(reduced, i * self.width, self.width);
            let input = match prev {
                Some(p) => cx.graph.add(part, p),
                None => part,
            };
            let y = conv.forward(cx, input);
            outs.push(y);
            prev = Some(y);
        }
        let last = cx
            .graph
            .slice_channels(reduced, (self.scale - 1) * self.width, self.width);
        outs.push(last);
        outs
    }

    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let x = if self.downsample {
            cx.graph.avg_pool(x, 2)
        } else {
            x
        };
        let reduced = self.reduce.forward(cx, x);
        let parts = self.split_cascade(cx, reduced);
        let cat = cx.graph.concat(&parts);
        let y = self.expand.forward(cx, cat);
        let skip = match &self.shortcut {
            Some(sc) => sc.forward(cx, x),
            None => x,
        };
        let sum = cx.graph.add(y, skip);
        cx.graph.relu(sum)
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: Vec<ConvBn>,
    stages: Vec<Vec<Res2Block>>,
}

impl Backbone {
    pub fn new<T: Float>(init: &mut Init<'_, T>, config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let c = config.channels;
        let stem_widths: Vec<usize> = match config.kind {
            BackboneKind::Res2netToy => vec![c[0]],
            BackboneKind::Res2netFull => vec![c[0] / 2, c[0] / 2, c[0]],
        };
        let mut stem = Vec::new();
        let mut cin = 3;
        for (i, &cout) in stem_widths.iter().enumerate() {
            let stride = if i == 0 { 2 } else { 1 };
            let geom = ConvGeom::new(3, 3, stride, 1, 1, 1);
            stem.push(ConvBn::new(
                &mut init.sub(&format!("stem{i}")),
                cin,
                cout,
                geom,
                true,
            ));
            cin = cout;
        }
        let mut stages = Vec::new();
        for s in 0..4 {
            let cout = c[s + 1];
            let width = config.group_width(cout);
            let mut blocks = Vec::new();
            for b in 0..config.blocks[s] {
                let block_in = if b == 0 { cin } else { cout };
                // Stage 2 follows the stem max-pool; later stages halve resolution themselves.
                let downsample = b == 0 && s > 0;
                let mut sub = init.sub(&format!("stage{}.block{b}", s + 2));
                blocks.push(Res2Block::new(
                    &mut sub,
                    block_in,
                    cout,
                    width,
                    config.scale,
                    downsample,
                ));
            }
            stages.push(blocks);
            cin = cout;
        }
        Ok(Self {
            config: config.clone(),
            stem,
            stages,
        })
    }

    pub fn check_input(h: usize, w: usize) -> Result<()> {
        if h == 0 || w == 0 || !h.is_multiple_of(32) || !w.is_multiple_of(32) {
            return Err(invalid(format!(
                "input side must be a positive multiple of 32, got {h}x{w}"
            )));
        }
        Ok(())
    }

    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<FeaturePyramid> {
        let [_, c, h, w] = cx.graph.shape(x);
        if c != 3 {
            return Err(invalid(format!("expected 3 input channels, got {c}")));
        }
        Self::check_input(h, w)?;
        let mut y = x;
        for conv in &self.stem {
            y = conv.forward(cx, y);
        }
        let mut levels = [y; 5];
        y = cx.graph.max_pool3s2(y);
        for (s, blocks) in self.stages.iter().enumerate() {
            for block in blocks {
                y = block.forward(cx, y);
            }
            levels[s + 1] = y;
        }
        Ok(FeaturePyramid { levels })
    }

    /// Inference-mode convenience: returns the five feature tensors.
    pub fn extract_features<T: Float>(
        &self,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<[Tensor<T>; 5]> {
        let mut graph = Graph::new();
        let mut cx = Ctx::new(&mut graph, store, false);
        let input = cx.graph.constant(x.clone());
        let pyr = self.forward(&mut cx, input)?;
        Ok(pyr.levels.map(|v| graph.value(v).clone()))
    }

    pub fn stages(&self) -> &[Vec<Res2Block>] {
        &self.stages
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(seed: u64) -> (Backbone, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bb =
            Backbone::new(&mut Init::new(&mut store, &mut rng), &BackboneConfig::toy()).unwrap();
        (bb, store)
    }

    #[test]
    fn pyramid_shapes_follow_strides() {
        let (bb, store) = toy(1);
        let x = Tensor::full([1, 3, 64, 96], 0.3f32);
        let f = bb.extract_features(&store, &x).unwrap();
        let want = [
            (16, 32, 48),
            (32, 16, 24),
            (64, 8, 12),
            (128, 4, 6),
            (256, 2, 3),
        ];
        for (t, (c, h, w)) in f.iter().zip(want) {
            assert_eq!(t.shape(), [1, c, h, w]);
        }
    }

    #[test]
    fn rejects_side_not_divisible_by_32() {
        let (bb, store) = toy(1);
        assert!(bb
            .extract_features(&store, &Tensor::zeros([1, 3, 48, 64]))
            .is_err());
    }

    #[test]
    fn config_validation() {
        let mut c = BackboneConfig::toy();
        c.channels = [16, 16, 64, 128, 256];
        assert!(c.validate().is_err());
        let mut c = BackboneConfig::toy();
        c.scale = 1;
        assert!(c.validate().is_err());
        assert!(BackboneConfig::full().validate().is_ok());
    }
}
