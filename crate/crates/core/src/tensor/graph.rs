use std::collections::HashMap;

use super::kernels::{self, Tap, Window};
use super::{Float, Tensor};

/// Convolution geometry: kernel extent, stride, zero padding and dilation.
pub type ConvGeom = Window;

impl ConvGeom {
    /// Square `k×k` kernel with "same" padding at stride 1.
    pub fn same(k: usize) -> Self {
        Self::new(k, k, 1, k / 2, k / 2, 1)
    }

    pub fn new(
        kh: usize,
        kw: usize,
        stride: usize,
        pad_h: usize,
        pad_w: usize,
        dilation: usize,
    ) -> Self {
        Self {
            kh,
            kw,
            stride,
            pad_h,
            pad_w,
            dilation,
        }
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        win: Window,
        cols: Vec<Vec<T>>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        invstd: Vec<T>,
        batch_stats: bool,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    MulMask {
        x: Var,
        mask: Tensor<T>,
    },
    Concat(Vec<Var>),
    SliceChannels {
        x: Var,
        start: usize,
    },
    Resize {
        x: Var,
        ys: Vec<Tap>,
        xs: Vec<Tap>,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    MaxPool {
        x: Var,
        arg: Vec<u32>,
    },
    Scale(Var, T),
    /// Scalar-valued function of `x` whose gradient was computed alongside its value.
    Scalar {
        x: Var,
        grad: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics produced by a training-mode batch norm, for running-average updates.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

/// A single forward pass recorded for reverse-mode differentiation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    /// A constant: gradients are never propagated into it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// An input leaf whose gradient can be read back after [`Graph::backward`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Inserts parameter `id`; repeated calls with the same id share one node.
    pub fn param(&mut self, id: usize, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// Copies the value of `v` into a fresh constant (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, win: Window) -> Var {
        let [n, cin, h, wd] = self.shape(x);
        let [cout, wcin, kh, kw] = self.shape(w);
        assert_eq!(cin, wcin, "conv2d input channels");
        assert_eq!((kh, kw), (win.kh, win.kw), "conv2d kernel extent");
        let (oh, ow) = win.out_hw(h, wd);
        let k = cin * kh * kw;
        let p = oh * ow;
        let mut out = Tensor::zeros([n, cout, oh, ow]);
        let mut cols = Vec::new();
        {
            let xv = &self.nodes[x.0].value;
            let wv = self.nodes[w.0].value.data();
            for i in 0..n {
                let xi = xv.item(i);
                let yi = out.item_mut(i);
                if win.is_pointwise() {
                    T::gemm(
                        cout,
                        k,
                        p,
                        T::one(),
                        wv,
                        (k as isize, 1),
                        xi,
                        (p as isize, 1),
                        T::zero(),
                        yi,
                        (p as isize, 1),
                    );
                } else {
                    let mut col = vec![T::zero(); k * p];
                    kernels::im2col(xi, cin, h, wd, &win, &mut col);
                    T::gemm(
                        cout,
                        k,
                        p,
                        T::one(),
                        wv,
                        (k as isize, 1),
                        &col,
                        (p as isize, 1),
                        T::zero(),
                        yi,
                        (p as isize, 1),
                    );
                    cols.push(col);
                }
            }
            if let Some(b) = b {
                let bv = self.nodes[b.0].value.data();
                for i in 0..n {
                    let yi = out.item_mut(i);
                    for (c, &bias) in bv.iter().enumerate() {
                        for v in &mut yi[c * p..(c + 1) * p] {
                            *v += bias;
                        }
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv { x, w, b, win, cols }, ng)
    }

    /// Batch normalization over `(N, H, W)` per channel.
    ///
    /// With `running = Some((mean, var))` the supplied statistics are used (inference);
    /// otherwise batch statistics are computed and returned for running-average updates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> (Var, Option<BatchStats<T>>) {
        let [n, c, h, w] = self.shape(x);
        let m = n * h * w;
        let xv = &self.nodes[x.0].value;
        let (mean, var, stats) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), None),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                let mf = T::from_usize(m).unwrap();
                for ch in 0..c {
                    let mut s = T::zero();
                    for i in 0..n {
                        s += xv.plane(i, ch).iter().copied().sum::<T>();
                    }
                    let mu = s / mf;
                    let mut ss = T::zero();
                    for i in 0..n {
                        for &v in xv.plane(i, ch) {
                            ss += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = ss / mf;
                }
                let unbiased = if m > 1 {
                    let f = mf / T::from_usize(m - 1).unwrap();
                    var.iter().map(|&v| v * f).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var_unbiased: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let invstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.nodes[gamma.0].value.data();
        let bv = self.nodes[beta.0].value.data();
        let mut out = xv.clone();
        for i in 0..n {
            for ch in 0..c {
                let (mu, is, g, b) = (mean[ch], invstd[ch], gv[ch], bv[ch]);
                for v in out.plane_mut(i, ch) {
                    *v = (*v - mu) * is * g + b;
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let batch_stats = stats.is_some();
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                batch_stats,
            },
            ng,
        );
        (v, stats)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&p, &q)| p * q)
            .collect();
        let out = Tensor::from_vec(av.shape(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// Multiplies `x` by a constant mask. The mask is `[N, 1, H, W]` (broadcast across
    /// channels) or exactly `x`'s shape.
    pub fn mul_mask(&mut self, x: Var, mask: Tensor<T>) -> Var {
        let [n, c, h, w] = self.shape(x);
        let ms = mask.shape();
        assert!(
            ms == [n, 1, h, w] || ms == [n, c, h, w],
            "mask shape {ms:?} incompatible with {:?}",
            [n, c, h, w]
        );
        let mut out = self.value(x).clone();
        for i in 0..n {
            for ch in 0..c {
                let mp = mask.plane(i, if ms[1] == 1 { 0 } else { ch });
                for (v, &m) in out.plane_mut(i, ch).iter_mut().zip(mp) {
                    *v *= m;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::MulMask { x, mask }, ng)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let [n, _, h, w] = self.shape(xs[0]);
        let ctot: usize = xs
            .iter()
            .map(|&v| {
                let s = self.shape(v);
                assert_eq!((s[0], s[2], s[3]), (n, h, w), "concat spatial mismatch");
                s[1]
            })
            .sum();
        let mut out = Tensor::zeros([n, ctot, h, w]);
        for i in 0..n {
            let mut off = 0;
            let dst = out.item_mut(i);
            for &v in xs {
                let src = self.nodes[v.0].value.item(i);
                dst[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(out, Op::Concat(xs.to_vec()), ng)
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let [n, c, h, w] = self.shape(x);
        assert!(start + len <= c, "channel slice out of range");
        let hw = h * w;
        let xv = self.value(x);
        let mut out = Tensor::zeros([n, len, h, w]);
        for i in 0..n {
            out.item_mut(i)
                .copy_from_slice(&xv.item(i)[start * hw..(start + len) * hw]);
        }
        let ng = self.ng(x);
        self.push(out, Op::SliceChannels { x, start }, ng)
    }

    /// Bilinear resize to `(oh, ow)` with half-pixel centres.
    pub fn resize(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let [n, c, h, w] = self.shape(x);
        if (h, w) == (oh, ow) {
            return x;
        }
        let ys = kernels::bilinear_taps(h, oh);
        let xs = kernels::bilinear_taps(w, ow);
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let xv = &self.nodes[x.0].value;
        for i in 0..n {
            for ch in 0..c {
                kernels::resize_plane(xv.plane(i, ch), (h, w), out.plane_mut(i, ch), &ys, &xs);
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Resize { x, ys, xs }, ng)
    }

    /// Non-overlapping `k×k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        if k == 1 {
            return x;
        }
        let [n, c, h, w] = self.shape(x);
        assert!(
            h % k == 0 && w % k == 0,
            "avg_pool factor must divide extent"
        );
        let mut out = Tensor::zeros([n, c, h / k, w / k]);
        let xv = &self.nodes[x.0].value;
        for i in 0..n {
            for ch in 0..c {
                kernels::avg_pool_plane(xv.plane(i, ch), h, w, k, out.plane_mut(i, ch));
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::AvgPool { x, k }, ng)
    }

    /// Resamples to `(oh, ow)`: exact average pooling for integer down-scaling,
    /// bilinear otherwise.
    pub fn resample(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let [_, _, h, w] = self.shape(x);
        if oh < h && h % oh == 0 && w % ow == 0 && h / oh == w / ow {
            self.avg_pool(x, h / oh)
        } else {
            self.resize(x, oh, ow)
        }
    }

    /// 3×3 max pooling, stride 2, padding 1.
    pub fn max_pool3s2(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let mut out = Tensor::zeros([n, c, oh, ow]);
        let mut arg = vec![0u32; n * c * oh * ow];
        let xv = &self.nodes[x.0].value;
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * oh * ow;
                kernels::max_pool3s2_plane(
                    xv.plane(i, ch),
                    h,
                    w,
                    out.plane_mut(i, ch),
                    &mut arg[off..off + oh * ow],
                );
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::MaxPool { x, arg }, ng)
    }

    /// Records a scalar function of `x` whose value and gradient were computed externally.
    pub fn scalar_fn(&mut self, x: Var, value: T, grad: Tensor<T>) -> Var {
        assert_eq!(grad.shape(), self.shape(x), "scalar_fn gradient shape");
        let ng = self.ng(x);
        self.push(Tensor::scalar(value), Op::Scalar { x, grad }, ng)
    }

    /// Sum of scalar nodes.
    pub fn sum_scalars(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let mut acc = xs[0];
        for &v in &xs[1..] {
            acc = self.add(acc, v);
        }
        acc
    }

    /// Reverse pass from scalar `root` (seeded with gradient 1).
    pub fn backward(&mut self, root: Var) {
        assert_eq!(
            self.shape(root),
            [1, 1, 1, 1],
            "backward root must be scalar"
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
    }

    /// Gradient of the last [`Graph::backward`] root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter inserted via [`Graph::param`].
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|(&id, &v)| self.grad(v).map(|g| (id, g)))
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Conv { x, w, b, win, cols } => self.conv_backward(*x, *w, *b, win, cols, g, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                batch_stats,
            } => self.bn_backward(*x, *gamma, *beta, mean, invstd, *batch_stats, g, grads),
            Op::Relu(x) => {
                if self.ng(*x) {
                    let out = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &o)| if o > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(grads, *x, Tensor::from_vec(g.shape(), data));
                }
            }
            Op::Sigmoid(x) => {
                if self.ng(*x) {
                    let out = &node.value;
                    let data = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .map(|(&gv, &s)| gv * s * (T::one() - s))
                        .collect();
                    accumulate(grads, *x, Tensor::from_vec(g.shape(), data));
                }
            }
            Op::Add(a, b) => {
                if self.ng(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.ng(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(*a, *b), (*b, *a)] {
                    if self.ng(this) {
                        let ov = self.value(other);
                        let data = g
                            .data()
                            .iter()
                            .zip(ov.data())
                            .map(|(&p, &q)| p * q)
                            .collect();
                        accumulate(grads, this, Tensor::from_vec(g.shape(), data));
                    }
                }
            }
            Op::MulMask { x, mask } => {
                if self.ng(*x) {
                    let [n, c, _, _] = g.shape();
                    let bcast = mask.channels() == 1;
                    let mut dx = g.clone();
                    for i in 0..n {
                        for ch in 0..c {
                            let mp = mask.plane(i, if bcast { 0 } else { ch });
                            for (v, &m) in dx.plane_mut(i, ch).iter_mut().zip(mp) {
                                *v *= m;
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Concat(xs) => {
                let [n, _, h, w] = g.shape();
                let mut off = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.ng(v) {
                        let mut dx = Tensor::zeros([n, c, h, w]);
                        for i in 0..n {
                            dx.item_mut(i)
                                .copy_from_slice(&g.item(i)[off * h * w..(off + c) * h * w]);
                        }
                        accumulate(grads, v, dx);
                    }
                    off += c;
                }
            }
            Op::SliceChannels { x, start } => {
                if self.ng(*x) {
                    let [n, c, h, w] = self.shape(*x);
                    let len = g.channels();
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    for i in 0..n {
                        dx.item_mut(i)[start * h * w..(start + len) * h * w]
                            .copy_from_slice(g.item(i));
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Resize { x, ys, xs } => {
                if self.ng(*x) {
                    let [n, c, h, w] = self.shape(*x);
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    for i in 0..n {
                        for ch in 0..c {
                            kernels::resize_plane_backward(
                                g.plane(i, ch),
                                w,
                                dx.plane_mut(i, ch),
                                ys,
                                xs,
                            );
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::AvgPool { x, k } => {
                if self.ng(*x) {
                    let [n, c, h, w] = self.shape(*x);
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    for i in 0..n {
                        for ch in 0..c {
                            kernels::avg_pool_plane_backward(
                                g.plane(i, ch),
                                h,
                                w,
                                *k,
                                dx.plane_mut(i, ch),
                            );
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::MaxPool { x, arg } => {
                if self.ng(*x) {
                    let [n, c, h, w] = self.shape(*x);
                    let plane_out = g.height() * g.width();
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    for i in 0..n {
                        for ch in 0..c {
                            let off = (i * c + ch) * plane_out;
                            let gp = g.plane(i, ch);
                            let dp = dx.plane_mut(i, ch);
                            for (j, &a) in arg[off..off + plane_out].iter().enumerate() {
                                dp[a as usize] += gp[j];
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Scale(x, s) => {
                if self.ng(*x) {
                    accumulate(grads, *x, g.map(|v| v * *s));
                }
            }
            Op::Scalar { x, grad } => {
                if self.ng(*x) {
                    let seed = g.data()[0];
                    accumulate(grads, *x, grad.map(|v| v * seed));
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        win: &Window,
        cols: &[Vec<T>],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let [n, cin, h, wd] = self.shape(x);
        let [cout, _, kh, kw] = self.shape(w);
        let k = cin * kh * kw;
        let p = g.height() * g.width();
        let xv = self.value(x);
        let wv = self.value(w).data();
        if self.ng(w) {
            let mut dw = Tensor::zeros(self.shape(w));
            for i in 0..n {
                let col: &[T] = if win.is_pointwise() {
                    xv.item(i)
                } else {
                    &cols[i]
                };
                T::gemm(
                    cout,
                    p,
                    k,
                    T::one(),
                    g.item(i),
                    (p as isize, 1),
                    col,
                    (1, p as isize),
                    T::one(),
                    dw.data_mut(),
                    (k as isize, 1),
                );
            }
            accumulate(grads, w, dw);
        }
        if let Some(b) = b.filter(|&b| self.ng(b)) {
            let mut db = Tensor::zeros([1, cout, 1, 1]);
            for i in 0..n {
                let gi = g.item(i);
                for (c, d) in db.data_mut().iter_mut().enumerate() {
                    *d += gi[c * p..(c + 1) * p].iter().copied().sum::<T>();
                }
            }
            accumulate(grads, b, db);
        }
        if self.ng(x) {
            let mut dx = Tensor::zeros([n, cin, h, wd]);
            let mut dcol = if win.is_pointwise() {
                Vec::new()
            } else {
                vec![T::zero(); k * p]
            };
            for i in 0..n {
                if win.is_pointwise() {
                    T::gemm(
                        k,
                        cout,
                        p,
                        T::one(),
                        wv,
                        (1, k as isize),
                        g.item(i),
                        (p as isize, 1),
                        T::zero(),
                        dx.item_mut(i),
                        (p as isize, 1),
                    );
                } else {
                    T::gemm(
                        k,
                        cout,
                        p,
                        T::one(),
                        wv,
                        (1, k as isize),
                        g.item(i),
                        (p as isize, 1),
                        T::zero(),
                        &mut dcol,
                        (p as isize, 1),
                    );
                    kernels::col2im(&dcol, cin, h, wd, win, dx.item_mut(i));
                }
            }
            accumulate(grads, x, dx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        invstd: &[T],
        batch_stats: bool,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let [n, c, h, w] = g.shape();
        let m = T::from_usize(n * h * w).unwrap();
        let xv = self.value(x);
        let gv = self.value(gamma).data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ch in 0..c {
            for i in 0..n {
                for (&gy, &xx) in g.plane(i, ch).iter().zip(xv.plane(i, ch)) {
                    dgamma[ch] += gy * (xx - mean[ch]) * invstd[ch];
                    dbeta[ch] += gy;
                }
            }
        }
        if self.ng(x) {
            let mut dx = Tensor::zeros([n, c, h, w]);
            for ch in 0..c {
                let (mu, is, gm) = (mean[ch], invstd[ch], gv[ch]);
                for i in 0..n {
                    let dp = dx.plane_mut(i, ch);
                    for ((d, &gy), &xx) in dp.iter_mut().zip(g.plane(i, ch)).zip(xv.plane(i, ch)) {
                        *d = if batch_stats {
                            let xhat = (xx - mu) * is;
                            gm * is / m * (m * gy - dbeta[ch] - xhat * dgamma[ch])
                        } else {
                            gy * gm * is
                        };
                    }
                }
            }
            accumulate(grads, x, dx);
        }
        if self.ng(gamma) {
            accumulate(grads, gamma, Tensor::from_vec([1, c, 1, 1], dgamma));
        }
        if self.ng(beta) {
            accumulate(grads, beta, Tensor::from_vec([1, c, 1, 1], dbeta));
        }
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
pub fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
