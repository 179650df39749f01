//! Parameter storage and the small set of layers the network is built from.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{ConvGeom, Float, Graph, Tensor, Var};

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

/// Index of an entry in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Running statistics are stored alongside weights but never receive gradients.
    pub trainable: bool,
}

/// Named tensors of a model, addressed by [`ParamId`] and keyed by path for checkpoints.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: String, value: Tensor<T>, trainable: bool) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter {name}"
        );
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    trainable: e.trainable,
                })
                .collect(),
        }
    }
}

/// Creates parameters under a hierarchical name prefix with seeded initialization.
pub struct Init<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Float> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// A child initializer whose parameter names are prefixed with `name.`.
    pub fn sub(&mut self, name: &str) -> Init<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn path(&self, leaf: &str) -> String {
        if self.prefix.is_empty() {
            leaf.to_string()
        } else {
            format!("{}.{leaf}", self.prefix)
        }
    }

    pub fn zeros(&mut self, leaf: &str, shape: [usize; 4], trainable: bool) -> ParamId {
        let name = self.path(leaf);
        self.store.push(name, Tensor::zeros(shape), trainable)
    }

    pub fn ones(&mut self, leaf: &str, shape: [usize; 4], trainable: bool) -> ParamId {
        let name = self.path(leaf);
        self.store
            .push(name, Tensor::full(shape, T::one()), trainable)
    }

    /// Kaiming (fan-in) normal initialization.
    pub fn kaiming(&mut self, leaf: &str, shape: [usize; 4]) -> ParamId {
        let fan_in = (shape[1] * shape[2] * shape[3]).max(1);
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(normal.sample(&mut *self.rng)))
            .collect();
        let name = self.path(leaf);
        self.store.push(name, Tensor::from_vec(shape, data), true)
    }

    /// Uniform initialization in `[-bound, bound]`.
    pub fn uniform(&mut self, leaf: &str, shape: [usize; 4], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64_lossy(self.rng.gen_range(-bound..=bound)))
            .collect();
        let name = self.path(leaf);
        self.store.push(name, Tensor::from_vec(shape, data), true)
    }
}

/// Running-statistics update requested by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
}

/// Attention masks are data, not graph nodes. Recording them and replaying them in a
/// later pass freezes them, which is what finite-difference checks need.
#[derive(Clone, Debug)]
pub enum MaskTape<T> {
    Off,
    Record(Vec<Tensor<T>>),
    Replay(Vec<Tensor<T>>, usize),
}

/// Forward-pass context: the graph being recorded plus read-only parameters.
pub struct Ctx<'a, T> {
    pub graph: &'a mut Graph<T>,
    pub store: &'a ParamStore<T>,
    /// Training mode: batch norms use batch statistics.
    pub train: bool,
    pub bn_updates: Vec<BnUpdate<T>>,
    pub masks: MaskTape<T>,
}

impl<'a, T: Float> Ctx<'a, T> {
    pub fn new(graph: &'a mut Graph<T>, store: &'a ParamStore<T>, train: bool) -> Self {
        Self {
            graph,
            store,
            train,
            bn_updates: Vec::new(),
            masks: MaskTape::Off,
        }
    }

    /// Routes a freshly computed attention mask through the mask tape.
    pub fn attention_mask(&mut self, computed: Tensor<T>) -> Tensor<T> {
        match &mut self.masks {
            MaskTape::Off => computed,
            MaskTape::Record(tape) => {
                tape.push(computed.clone());
                computed
            }
            MaskTape::Replay(tape, next) => {
                let m = tape.get(*next).expect("mask tape exhausted").clone();
                assert_eq!(m.shape(), computed.shape(), "replayed mask shape");
                *next += 1;
                m
            }
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.graph.param(id.0, self.store.get(id))
    }
}

/// Folds batch statistics into running averages (momentum 0.1, unbiased variance).
pub fn apply_bn_updates<T: Float>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>]) {
    let m = T::from_f64_lossy(BN_MOMENTUM);
    let keep = T::one() - m;
    for u in updates {
        for (r, &b) in store
            .get_mut(u.mean)
            .data_mut()
            .iter_mut()
            .zip(&u.batch_mean)
        {
            *r = keep * *r + m * b;
        }
        for (r, &b) in store.get_mut(u.var).data_mut().iter_mut().zip(&u.batch_var) {
            *r = keep * *r + m * b;
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
    pub out_channels: usize,
}

impl Conv2d {
    pub fn new<T: Float>(
        init: &mut Init<'_, T>,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Self {
        let weight = init.kaiming("weight", [cout, cin, geom.kh, geom.kw]);
        let bias = bias.then(|| init.zeros("bias", [1, cout, 1, 1], true));
        Self {
            weight,
            bias,
            geom,
            out_channels: cout,
        }
    }

    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let w = cx.param(self.weight);
        let b = self.bias.map(|b| cx.param(b));
        cx.graph.conv2d(x, w, b, self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Float>(init: &mut Init<'_, T>, c: usize) -> Self {
        Self {
            gamma: init.ones("gamma", [1, c, 1, 1], true),
            beta: init.zeros("beta", [1, c, 1, 1], true),
            running_mean: init.zeros("running_mean", [1, c, 1, 1], false),
            running_var: init.ones("running_var", [1, c, 1, 1], false),
        }
    }

    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        let eps = T::from_f64_lossy(BN_EPS);
        if cx.train {
            let (y, stats) = cx.graph.batch_norm(x, gamma, beta, None, eps);
            let stats = stats.expect("training batch norm yields statistics");
            cx.bn_updates.push(BnUpdate {
                mean: self.running_mean,
                var: self.running_var,
                batch_mean: stats.mean,
                batch_var: stats.var_unbiased,
            });
            y
        } else {
            let rm = cx.store.get(self.running_mean).data();
            let rv = cx.store.get(self.running_var).data();
            cx.graph.batch_norm(x, gamma, beta, Some((rm, rv)), eps).0
        }
    }
}

/// Convolution (no bias) → batch norm → optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    pub fn new<T: Float>(
        init: &mut Init<'_, T>,
        cin: usize,
        cout: usize,
        geom: ConvGeom,
        relu: bool,
    ) -> Self {
        let conv = Conv2d::new(&mut init.sub("conv"), cin, cout, geom, false);
        let bn = BatchNorm2d::new(&mut init.sub("bn"), cout);
        Self { conv, bn, relu }
    }

    pub fn forward<T: Float>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Var {
        let y = self.conv.forward(cx, x);
        let y = self.bn.forward(cx, y);
        if self.relu {
            cx.graph.relu(y)
        } else {
            y
        }
    }

    pub fn out_channels(&self) -> usize {
        self.conv.out_channels
    }
}
