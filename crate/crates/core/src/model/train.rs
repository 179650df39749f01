use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Mfsnet;
use crate::error::{invalid, Error, Result};
use crate::loss::{boundary_loss_node, seg_loss_node, Head, LossWeights, Targets};
use crate::nn::{apply_bn_updates, BnUpdate, Ctx, ParamId, ParamStore};
use crate::tensor::{Float, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Random horizontal and vertical flips.
    pub flips: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 8,
            clip_norm: 0.5,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            flips: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size must be positive"));
        }
        if self.clip_norm <= 0.0 {
            return Err(invalid("clip_norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(invalid("Adam betas must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Multipliers on individual deep-supervision terms; unlisted heads weigh 1.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TermWeights(pub BTreeMap<Head, f64>);

impl TermWeights {
    pub fn get(&self, head: Head) -> f64 {
        self.0.get(&head).copied().unwrap_or(1.0)
    }

    pub fn with(mut self, head: Head, weight: f64) -> Self {
        self.0.insert(head, weight);
        self
    }
}

/// Records the weighted sum of every supervised term.
pub fn loss_graph<T: Float>(
    graph: &mut Graph<T>,
    heads: &BTreeMap<Head, Var>,
    targets: &Targets,
    weights: &LossWeights,
    terms: &TermWeights,
) -> Result<Var> {
    let mut parts = Vec::new();
    for (&head, &v) in heads {
        let w = terms.get(head);
        if w == 0.0 {
            continue;
        }
        let term = if head.is_boundary() {
            boundary_loss_node(graph, v, targets)?
        } else {
            seg_loss_node(graph, v, targets, weights)?
        };
        parts.push(if w == 1.0 {
            term
        } else {
            graph.scale(term, T::from_f64_lossy(w))
        });
    }
    if parts.is_empty() {
        return Err(invalid("every loss term has zero weight"));
    }
    Ok(graph.sum_scalars(&parts))
}

/// Loss value, parameter gradients (sorted by id) and batch-norm statistics of one batch.
pub struct LossEval<T> {
    pub loss: f64,
    pub grads: Vec<(ParamId, Tensor<T>)>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

pub fn loss_and_grads<T: Float>(
    net: &Mfsnet,
    store: &ParamStore<T>,
    x: &Tensor<T>,
    targets: &Targets,
    weights: &LossWeights,
    terms: &TermWeights,
) -> Result<LossEval<T>> {
    if targets.len() != x.batch() {
        return Err(invalid(format!(
            "{} targets for a batch of {}",
            targets.len(),
            x.batch()
        )));
    }
    let mut graph = Graph::new();
    let mut cx = Ctx::new(&mut graph, store, true);
    let input = cx.graph.constant(x.clone());
    let outs = net.forward_graph(&mut cx, input)?;
    let bn_updates = std::mem::take(&mut cx.bn_updates);
    let root = loss_graph(&mut graph, &outs.heads, targets, weights, terms)?;
    let loss = graph.value(root).data()[0].to_f64_lossy();
    graph.backward(root);
    let mut grads: Vec<(ParamId, Tensor<T>)> = graph
        .param_grads()
        .filter(|(id, _)| store.entry(ParamId(*id)).trainable)
        .map(|(id, g)| (ParamId(id), g.clone()))
        .collect();
    grads.sort_by_key(|(id, _)| id.0);
    Ok(LossEval {
        loss,
        grads,
        bn_updates,
    })
}

/// Adam with bias correction and global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    step: u64,
    moments: BTreeMap<usize, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            clip_norm: cfg.clip_norm,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn apply<T: Float>(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        let norm = grads
            .iter()
            .flat_map(|(_, g)| g.data())
            .map(|v| {
                let v = v.to_f64_lossy();
                v * v
            })
            .sum::<f64>()
            .sqrt();
        let clip = if norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let (m, v) = self
                .moments
                .entry(id.0)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let p = store.get_mut(*id).data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i].to_f64_lossy() * clip;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                p[i] = T::from_f64_lossy(p[i].to_f64_lossy() - update);
            }
        }
    }
}

/// One optimizer update on the full deep-supervision loss; returns the loss before the update.
pub fn train_step(
    net: &Mfsnet,
    store: &mut ParamStore<f32>,
    opt: &mut Adam,
    x: &Tensor<f32>,
    targets: &Targets,
    weights: &LossWeights,
) -> Result<f64> {
    let eval = loss_and_grads(net, store, x, targets, weights, &TermWeights::default())?;
    if !eval.loss.is_finite() || eval.grads.iter().any(|(_, g)| !g.all_finite()) {
        return Err(Error::NonFiniteLoss {
            step: opt.steps() as usize,
            value: eval.loss,
        });
    }
    opt.apply(store, &eval.grads);
    apply_bn_updates(store, &eval.bn_updates);
    Ok(eval.loss)
}
