//! Full network assembly: backbone, global map, boundary and reverse attention.
//!
//! The standard wiring places boundary attention on levels 2 and 3 and reverse
//! attention on levels 4 and 5. Reverse attention cascades from the deepest level
//! upward: the deepest branch is guided by the global map `O_S`, each shallower one by
//! the output of the branch below it, and the shallowest output is the prediction.
//! Other level assignments are accepted for ablation studies.

mod train;

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{BoundaryAttention, ReverseAttention};
use crate::backbone::{level_stride, Backbone, BackboneConfig};
use crate::decoder::{PartialDecoder, Rfb, ScoreMap, RFB_CHANNELS};
use crate::error::{invalid, Result};
use crate::imgproc::{self, BinaryMask, HairRemoval, RgbImage};
use crate::loss::Head;
use crate::nn::{Conv2d, Ctx, Init, ParamStore};
use crate::tensor::{sigmoid, ConvGeom, Float, Graph, Tensor, Var};

pub use train::{loss_and_grads, loss_graph, train_step, Adam, LossEval, TermWeights, TrainConfig};

/// How boundary-attention outputs are routed into a reverse-attention branch.
///
/// Only boundary levels shallower than the branch are eligible. `Level3` takes the
/// deepest eligible level and `Level2` the shallowest; with boundary attention on
/// levels 2 and 3 these are exactly those levels. `Sum` projects every eligible output
/// to 32 channels and adds them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaSource {
    Level2,
    #[default]
    Level3,
    Sum,
}

impl fmt::Display for BaSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaSource::Level2 => "level2",
            BaSource::Level3 => "level3",
            BaSource::Sum => "sum",
        })
    }
}

/// Module placement over backbone levels 1 to 5.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    /// Global map from the partial decoder; otherwise a 1×1 conv on `F5`.
    pub ppd: bool,
    pub ba_levels: Vec<usize>,
    pub ra_levels: Vec<usize>,
    #[serde(default)]
    pub ba_source: BaSource,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::proposed()
    }
}

impl ArchConfig {
    pub fn proposed() -> Self {
        Self {
            ppd: true,
            ba_levels: vec![2, 3],
            ra_levels: vec![4, 5],
            ba_source: BaSource::Level3,
        }
    }

    /// Parses a per-level row such as `"- BA BA RA RA"` (levels 1 to 5, `-` for none).
    pub fn from_row(row: &str, ppd: bool) -> Result<Self> {
        let cells: Vec<&str> = row.split_whitespace().collect();
        if cells.len() != 5 {
            return Err(invalid(format!("expected 5 level entries, got {row:?}")));
        }
        let mut cfg = Self {
            ppd,
            ba_levels: Vec::new(),
            ra_levels: Vec::new(),
            ba_source: BaSource::Level3,
        };
        for (i, cell) in cells.iter().enumerate() {
            match cell.to_ascii_uppercase().as_str() {
                "BA" => cfg.ba_levels.push(i + 1),
                "RA" => cfg.ra_levels.push(i + 1),
                "-" | "NONE" => {}
                other => return Err(invalid(format!("unknown module {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The per-level row form, e.g. `"- BA BA RA RA"`.
    pub fn row(&self) -> String {
        (1..=5)
            .map(|l| {
                if self.ba_levels.contains(&l) {
                    "BA"
                } else if self.ra_levels.contains(&l) {
                    "RA"
                } else {
                    "-"
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn validate(&self) -> Result<()> {
        for &l in self.ba_levels.iter().chain(&self.ra_levels) {
            if !(1..=5).contains(&l) {
                return Err(invalid(format!("level {l} outside 1..=5")));
            }
        }
        let mut all: Vec<usize> = self
            .ba_levels
            .iter()
            .chain(&self.ra_levels)
            .copied()
            .collect();
        all.sort_unstable();
        let n = all.len();
        all.dedup();
        if all.len() != n {
            return Err(invalid("a level may host at most one module"));
        }
        Ok(())
    }

    /// Heads that receive supervision under this placement.
    pub fn heads(&self) -> Vec<Head> {
        let mut heads = vec![Head::Global];
        heads.extend(self.ba_levels.iter().map(|&l| Head::Boundary(l)));
        heads.extend(self.ra_levels.iter().map(|&l| Head::Refine(l)));
        heads.sort();
        heads
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub arch: ArchConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::toy(),
            arch: ArchConfig::proposed(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.arch.validate()
    }
}

#[derive(Clone, Debug)]
enum GlobalHead {
    Ppd {
        rfb4: Rfb,
        rfb5: Rfb,
        decoder: PartialDecoder,
    },
    Plain(Conv2d),
}

#[derive(Clone, Debug)]
struct BaBranch {
    level: usize,
    module: BoundaryAttention,
    proj: Option<Conv2d>,
}

#[derive(Clone, Debug)]
struct RaBranch {
    level: usize,
    module: ReverseAttention,
    sources: Vec<usize>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct GraphOutputs {
    pub heads: BTreeMap<Head, Var>,
    /// Logits of the prediction map at their native stride.
    pub final_logits: Var,
}

/// A probability map in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl ProbabilityMap {
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

    /// Pixels with probability strictly above `t`.
    pub fn threshold(&self, t: f64) -> BinaryMask {
        BinaryMask::from_fn(self.width, self.height, |x, y| self.get(x, y) > t)
    }
}

/// Per-image outputs of [`Mfsnet::forward`].
#[derive(Clone, Debug)]
pub struct MfsnetOutputs {
    pub heads: BTreeMap<Head, ScoreMap>,
    /// Sigmoid of the prediction logits upsampled to input resolution.
    pub final_map: ProbabilityMap,
}

impl MfsnetOutputs {
    pub fn head(&self, head: Head) -> Option<&ScoreMap> {
        self.heads.get(&head)
    }

    pub fn o_s(&self) -> &ScoreMap {
        &self.heads[&Head::Global]
    }
}

#[derive(Clone, Debug)]
pub struct Mfsnet {
    config: ModelConfig,
    backbone: Backbone,
    global: GlobalHead,
    ba: Vec<BaBranch>,
    /// Deepest first: the order in which guidance cascades.
    ra: Vec<RaBranch>,
}

impl Mfsnet {
    /// Builds the network and its parameters from `seed`.
    pub fn new<T: Float>(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init::new(&mut store, &mut rng);
        let net = Self::build(&mut init, config)?;
        Ok((net, store))
    }

    fn build<T: Float>(init: &mut Init<'_, T>, config: &ModelConfig) -> Result<Self> {
        let backbone = Backbone::new(&mut init.sub("backbone"), &config.backbone)?;
        let ch = config.backbone.channels;
        let arch = &config.arch;
        let global = if arch.ppd {
            GlobalHead::Ppd {
                rfb4: Rfb::new(&mut init.sub("rfb4"), ch[3]),
                rfb5: Rfb::new(&mut init.sub("rfb5"), ch[4]),
                decoder: PartialDecoder::new(&mut init.sub("ppd")),
            }
        } else {
            GlobalHead::Plain(Conv2d::new(
                &mut init.sub("global_head"),
                ch[4],
                1,
                ConvGeom::same(1),
                true,
            ))
        };
        let mut ba_levels = arch.ba_levels.clone();
        ba_levels.sort_unstable();
        let ba = ba_levels
            .iter()
            .map(|&level| {
                let mut sub = init.sub(&format!("ba{level}"));
                let module = BoundaryAttention::new(&mut sub, ch[level - 1]);
                let proj = (arch.ba_source == BaSource::Sum).then(|| {
                    Conv2d::new(
                        &mut sub.sub("proj"),
                        ch[level - 1],
                        RFB_CHANNELS,
                        ConvGeom::same(1),
                        true,
                    )
                });
                BaBranch {
                    level,
                    module,
                    proj,
                }
            })
            .collect();
        let mut ra_levels = arch.ra_levels.clone();
        ra_levels.sort_unstable_by(|a, b| b.cmp(a));
        let ra = ra_levels
            .iter()
            .map(|&level| {
                let eligible: Vec<usize> =
                    ba_levels.iter().copied().filter(|&b| b < level).collect();
                let sources = match (arch.ba_source, eligible.first(), eligible.last()) {
                    (BaSource::Sum, _, _) => eligible.clone(),
                    (BaSource::Level2, Some(&s), _) | (BaSource::Level3, _, Some(&s)) => vec![s],
                    _ => Vec::new(),
                };
                let routed = match (arch.ba_source, sources.first()) {
                    (_, None) => 0,
                    (BaSource::Sum, Some(_)) => RFB_CHANNELS,
                    (_, Some(&s)) => ch[s - 1],
                };
                let module = ReverseAttention::new(
                    &mut init.sub(&format!("ra{level}")),
                    ch[level - 1] + routed,
                );
                RaBranch {
                    level,
                    module,
                    sources,
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            backbone,
            global,
            ba,
            ra,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    /// Records the forward pass of a normalized `[N, 3, H, W]` batch.
    pub fn forward_graph<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<GraphOutputs> {
        let pyr = self.backbone.forward(cx, x)?;
        let o_s = match &self.global {
            GlobalHead::Ppd {
                rfb4,
                rfb5,
                decoder,
            } => {
                let r4 = rfb4.forward(cx, pyr.level(4));
                let r5 = rfb5.forward(cx, pyr.level(5));
                decoder.forward(cx, r4, r5)?
            }
            GlobalHead::Plain(head) => head.forward(cx, pyr.level(5)),
        };
        let mut heads = BTreeMap::new();
        heads.insert(Head::Global, o_s);

        let mut routed = BTreeMap::new();
        for b in &self.ba {
            let f = pyr.level(b.level);
            let [_, _, h, w] = cx.graph.shape(f);
            let u = cx.graph.resize(o_s, h, w);
            let out = b.module.forward(cx, f, u)?;
            heads.insert(Head::Boundary(b.level), out.boundary);
            let feats = match &b.proj {
                Some(p) => p.forward(cx, out.features),
                None => out.features,
            };
            routed.insert(b.level, feats);
        }

        let mut guide = o_s;
        for r in &self.ra {
            let f = pyr.level(r.level);
            let [_, _, h, w] = cx.graph.shape(f);
            let boundary = match r.sources.as_slice() {
                [] => None,
                [one] => Some(routed[one]),
                many => {
                    let parts: Vec<Var> = many
                        .iter()
                        .map(|s| cx.graph.resample(routed[s], h, w))
                        .collect();
                    Some(
                        parts[1..]
                            .iter()
                            .fold(parts[0], |acc, &p| cx.graph.add(acc, p)),
                    )
                }
            };
            guide = r.module.forward(cx, f, boundary, guide)?;
            heads.insert(Head::Refine(r.level), guide);
        }
        Ok(GraphOutputs {
            heads,
            final_logits: guide,
        })
    }

    /// Inference-mode forward of a normalized batch.
    pub fn forward(&self, store: &ParamStore<f32>, x: &Tensor<f32>) -> Result<Vec<MfsnetOutputs>> {
        let mut graph = Graph::new();
        let mut cx = Ctx::new(&mut graph, store, false);
        let input = cx.graph.constant(x.clone());
        let outs = self.forward_graph(&mut cx, input)?;
        let (side_h, side_w) = x.hw();
        let mut results = Vec::with_capacity(x.batch());
        for n in 0..x.batch() {
            let mut heads = BTreeMap::new();
            for (&head, &v) in &outs.heads {
                let t = graph.value(v);
                heads.insert(head, ScoreMap::from_tensor(t, n, side_w / t.width())?);
            }
            let logits = ScoreMap::from_tensor(graph.value(outs.final_logits), n, 1)?;
            let up = logits.resized(side_w, side_h, 1);
            let final_map = ProbabilityMap {
                width: side_w,
                height: side_h,
                values: up.values().iter().map(|&v| sigmoid(v)).collect(),
            };
            results.push(MfsnetOutputs { heads, final_map });
        }
        Ok(results)
    }

    /// Stride of `head` relative to the network input.
    pub fn head_stride(&self, head: Head) -> usize {
        match head {
            Head::Global if self.config.arch.ppd => level_stride(4),
            Head::Global => level_stride(5),
            Head::Boundary(l) | Head::Refine(l) => level_stride(l),
        }
    }

    /// Segments an RGB image of any size.
    pub fn predict(
        &self,
        store: &ParamStore<f32>,
        img: &RgbImage,
        pre: &Preprocess,
    ) -> Result<BinaryMask> {
        let x = pre.prepare(img)?;
        let out = self.forward(store, &x)?.remove(0);
        let mask = out.final_map.threshold(0.5);
        Ok(mask.resize_nearest(img.width(), img.height()))
    }
}

/// Input preparation: resize, optional hair removal on 8-bit data, then normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct Preprocess {
    pub side: usize,
    /// `None` skips artifact removal.
    pub hair: Option<HairRemoval>,
}

impl Default for Preprocess {
    fn default() -> Self {
        Self {
            side: 256,
            hair: Some(HairRemoval::default()),
        }
    }
}

impl Preprocess {
    /// The resized and (optionally) cleaned 8-bit image.
    pub fn clean(&self, img: &RgbImage) -> Result<RgbImage> {
        let resized = imgproc::resize_rgb(img, self.side)?;
        match &self.hair {
            Some(params) => imgproc::remove_hair(&resized, params),
            None => Ok(resized),
        }
    }

    /// A `[1, 3, side, side]` network input.
    pub fn prepare(&self, img: &RgbImage) -> Result<Tensor<f32>> {
        Ok(imgproc::normalize(&self.clean(img)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_parsing_roundtrips() {
        let cfg = ArchConfig::from_row("- BA BA RA RA", true).unwrap();
        assert_eq!(cfg, ArchConfig::proposed());
        assert_eq!(cfg.row(), "- BA BA RA RA");
        assert!(ArchConfig::from_row("BA BA", true).is_err());
        assert!(ArchConfig::from_row("- XX BA RA RA", true).is_err());
        let bad = ArchConfig {
            ba_levels: vec![2, 4],
            ra_levels: vec![4],
            ..ArchConfig::proposed()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn routing_follows_ba_source() {
        let mut cfg = ModelConfig::default();
        let (net, _) = Mfsnet::new::<f32>(&cfg, 1).unwrap();
        let levels: Vec<(usize, Vec<usize>)> = net
            .ra
            .iter()
            .map(|r| (r.level, r.sources.clone()))
            .collect();
        assert_eq!(levels, vec![(5, vec![3]), (4, vec![3])]);
        cfg.arch.ba_source = BaSource::Sum;
        let (net, _) = Mfsnet::new::<f32>(&cfg, 1).unwrap();
        assert_eq!(net.ra[0].sources, vec![2, 3]);
        cfg.arch = ArchConfig::from_row("BA RA BA RA RA", true).unwrap();
        let (net, _) = Mfsnet::new::<f32>(&cfg, 1).unwrap();
        let levels: Vec<(usize, Vec<usize>)> = net
            .ra
            .iter()
            .map(|r| (r.level, r.sources.clone()))
            .collect();
        assert_eq!(levels, vec![(5, vec![3]), (4, vec![3]), (2, vec![1])]);
    }

    #[test]
    fn small_forward_shapes() {
        let (net, store) = Mfsnet::new::<f32>(&ModelConfig::default(), 3).unwrap();
        let x = Tensor::from_fn([2, 3, 64, 64], |[n, c, y, x]| {
            ((n + c * 7 + y * 3 + x) % 11) as f32 / 5.0 - 1.0
        });
        let outs = net.forward(&store, &x).unwrap();
        assert_eq!(outs.len(), 2);
        let o = &outs[0];
        assert_eq!((o.o_s().width(), o.o_s().stride()), (4, 16));
        assert_eq!(o.head(Head::Refine(5)).unwrap().width(), 2);
        assert_eq!(o.head(Head::Refine(4)).unwrap().width(), 4);
        assert_eq!(o.head(Head::Boundary(2)).unwrap().width(), 16);
        assert_eq!(o.head(Head::Boundary(3)).unwrap().width(), 8);
        assert_eq!(o.final_map.width(), 64);
        assert!(o.final_map.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
