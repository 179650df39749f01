//! Finite-difference machinery shared by the gradient and acceptance tests.

#![allow(dead_code)]

use std::collections::BTreeMap;

use mfsnet::decoder::ScoreMap;
use mfsnet::imgproc::BinaryMask;
use mfsnet::loss::{self, hybrid_loss_grad, pixel_weights, Head, LossWeights, Targets};
use mfsnet::model::{loss_graph, ArchConfig, Mfsnet, ModelConfig, TermWeights};
use mfsnet::nn::{Ctx, MaskTape, ParamId, ParamStore};
use mfsnet::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-6;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, the usual norm-wise relative error.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn central(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + H;
            let up = f(&probe);
            probe[i] = x[i] - H;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * H)
        })
        .collect()
}

pub fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize) -> BinaryMask {
    // A blob plus noise so both classes and an edge are present.
    let (cx, cy) = (rng.gen_range(2.0..6.0), rng.gen_range(2.0..6.0));
    BinaryMask::from_fn(w, h, |x, y| {
        let d = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
        d < 6.0 || rng.gen_bool(0.05)
    })
}

pub fn random_logits(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Worst relative error of the hybrid-loss gradient over `cases` random 8×8 toys.
pub fn hybrid_grad_error(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let weights = LossWeights::default();
    for _ in 0..cases {
        let g = random_mask(&mut rng, 8, 8);
        let logits = random_logits(&mut rng, 64);
        let target: Vec<f64> = g.pixels().iter().map(|&v| v as f64).collect();
        let w = pixel_weights(&g, weights.lambda_w, weights.pool_k).unwrap();
        let (_, analytic) = hybrid_loss_grad(&logits, &target, w.values(), 0.9, weights.iou_eps);
        // The numeric side goes through the map-level entry point.
        let mut f = |v: &[f64]| {
            let p = ScoreMap::new(8, 8, 1, v.to_vec()).unwrap();
            loss::hybrid_loss(&p, &g, &weights).unwrap()
        };
        let numeric = central(&mut f, &logits);
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Head extents on an 8×8 toy: integer factors for the boundary heads.
const HEAD_SIDES: [(Head, usize); 5] = [
    (Head::Global, 2),
    (Head::Boundary(2), 4),
    (Head::Boundary(3), 2),
    (Head::Refine(4), 2),
    (Head::Refine(5), 1),
];

/// Worst relative error of the graph-side total loss against the map-level one.
pub fn total_grad_error(seed: u64, cases: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let weights = LossWeights::default();
    for _ in 0..cases {
        let g = random_mask(&mut rng, 8, 8);
        let g_b = mfsnet::attention::boundary_target(&g);
        let maps: Vec<(Head, usize, Vec<f64>)> = HEAD_SIDES
            .iter()
            .map(|&(head, side)| (head, side, random_logits(&mut rng, side * side)))
            .collect();

        // Analytic: the graph-side loss used during training.
        let mut graph = Graph::<f64>::new();
        let mut vars = BTreeMap::new();
        for (head, side, v) in &maps {
            let var = graph.input(Tensor::from_vec([1, 1, *side, *side], v.clone()));
            vars.insert(*head, var);
        }
        let targets = Targets::new(vec![g.clone()], &weights).unwrap();
        let root = loss_graph(
            &mut graph,
            &vars,
            &targets,
            &weights,
            &TermWeights::default(),
        )
        .unwrap();
        graph.backward(root);
        let analytic: Vec<f64> = vars
            .values()
            .flat_map(|&v| graph.grad(v).unwrap().data().to_vec())
            .collect();

        // Numeric: the map-level total loss over every head's logits flattened.
        let sides: BTreeMap<Head, usize> = maps.iter().map(|(h, s, _)| (*h, *s)).collect();
        let flat: Vec<f64> = {
            let by_head: BTreeMap<Head, &Vec<f64>> = maps.iter().map(|(h, _, v)| (*h, v)).collect();
            by_head.values().flat_map(|v| v.iter().copied()).collect()
        };
        let mut f = |x: &[f64]| {
            let mut outputs = BTreeMap::new();
            let mut at = 0;
            for (&head, &side) in &sides {
                let n = side * side;
                let stride = 8 / side;
                outputs.insert(
                    head,
                    ScoreMap::new(side, side, stride, x[at..at + n].to_vec()).unwrap(),
                );
                at += n;
            }
            loss::total_loss(&outputs, &g, &g_b, &weights).unwrap()
        };
        let value = f(&flat);
        assert!((value - graph.value(root).data()[0]).abs() < 1e-12);
        let numeric = central(&mut f, &flat);
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Weighted sum of a tensor, recorded as a scalar so `backward` can start from it.
fn probe_sum(graph: &mut Graph<f64>, x: Var, c: &Tensor<f64>) -> Var {
    let value: f64 = graph
        .value(x)
        .data()
        .iter()
        .zip(c.data())
        .map(|(a, b)| a * b)
        .sum();
    graph.scalar_fn(x, value, c.clone())
}

/// Checks `d probe_sum(build(inputs)) / d inputs[k]` for every `k` in `check`.
pub fn check_inputs(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    check: &[usize],
    train: bool,
    build: &dyn Fn(&mut Ctx<'_, f64>, &[Var]) -> Var,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let run = |xs: &[Tensor<f64>], c: Option<&Tensor<f64>>| -> (f64, Vec<Vec<f64>>, Tensor<f64>) {
        let mut graph = Graph::new();
        let mut cx = Ctx::new(&mut graph, store, train);
        let vars: Vec<Var> = xs.iter().map(|x| cx.graph.input(x.clone())).collect();
        let out = build(&mut cx, &vars);
        let shape = graph.shape(out);
        let c = c.cloned().unwrap_or_else(|| Tensor::full(shape, 1.0));
        let root = probe_sum(&mut graph, out, &c);
        graph.backward(root);
        let grads = vars
            .iter()
            .map(|&v| graph.grad(v).unwrap().data().to_vec())
            .collect();
        (graph.value(root).data()[0], grads, c)
    };
    let (_, _, shape_probe) = run(inputs, None);
    let c = Tensor::from_fn(shape_probe.shape(), |_| rng.gen_range(-1.0..1.0));
    let (_, grads, _) = run(inputs, Some(&c));
    let mut worst: f64 = 0.0;
    for &k in check {
        let mut f = |v: &[f64]| {
            let mut xs = inputs.to_vec();
            xs[k] = Tensor::from_vec(inputs[k].shape(), v.to_vec());
            run(&xs, Some(&c)).0
        };
        let numeric = central(&mut f, inputs[k].data());
        worst = worst.max(rel_err(&grads[k], &numeric));
    }
    worst
}

/// Loss of the whole network with attention masks frozen to `tape` (or recorded).
pub fn model_loss(
    net: &Mfsnet,
    store: &ParamStore<f64>,
    x: &Tensor<f64>,
    targets: &Targets,
    weights: &LossWeights,
    tape: MaskTape<f64>,
    want_grads: bool,
) -> (f64, Vec<(ParamId, Tensor<f64>)>, MaskTape<f64>) {
    let mut graph = Graph::new();
    let mut cx = Ctx::new(&mut graph, store, true);
    cx.masks = tape;
    let input = cx.graph.constant(x.clone());
    let outs = net.forward_graph(&mut cx, input).unwrap();
    let tape = std::mem::replace(&mut cx.masks, MaskTape::Off);
    let root = loss_graph(
        &mut graph,
        &outs.heads,
        targets,
        weights,
        &TermWeights::default(),
    )
    .unwrap();
    let value = graph.value(root).data()[0];
    let mut grads = Vec::new();
    if want_grads {
        graph.backward(root);
        grads = graph
            .param_grads()
            .map(|(id, g)| (ParamId(id), g.clone()))
            .collect();
        grads.sort_by_key(|(id, _)| id.0);
    }
    (value, grads, tape)
}

/// Relative error of parameter gradients of a whole 64×64 toy network.
pub fn probe_model(arch: ArchConfig, seed: u64) -> f64 {
    let cfg = ModelConfig {
        arch,
        ..ModelConfig::default()
    };
    let (net, store) = Mfsnet::new::<f32>(&cfg, seed).unwrap();
    let mut store = store.cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // At 32 px F5 is 1×1 and batch norm over two values makes the loss nearly
    // discontinuous; 64 px keeps every normalization well conditioned.
    let side = 64;
    let x = random_tensor(&mut rng, [2, 3, side, side]);
    let masks = vec![
        BinaryMask::from_fn(side, side, |x, y| {
            (x as f64 - 28.0).powi(2) + (y as f64 - 34.0).powi(2) < 320.0
        }),
        BinaryMask::from_fn(side, side, |x, y| {
            (10..44).contains(&x) && (18..54).contains(&y)
        }),
    ];
    let weights = LossWeights::default();
    let targets = Targets::new(masks, &weights).unwrap();

    let (loss, grads, tape) = model_loss(
        &net,
        &store,
        &x,
        &targets,
        &weights,
        MaskTape::Record(Vec::new()),
        true,
    );
    let MaskTape::Record(recorded) = tape else {
        unreachable!()
    };
    let replay = || MaskTape::Replay(recorded.clone(), 0);
    let (again, _, _) = model_loss(&net, &store, &x, &targets, &weights, replay(), false);
    assert_eq!(
        loss, again,
        "replaying the recorded masks reproduces the loss"
    );

    // One parameter per module group, probed at its largest-gradient entries.
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (id, g) in &grads {
        let name = store.entry(*id).name.clone();
        let group: String = name.split('.').take(3).collect::<Vec<_>>().join(".");
        if !seen.insert(group) {
            continue;
        }
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g.data()[b].abs().total_cmp(&g.data()[a].abs()));
        for &k in order.iter().take(2) {
            let base = store.get(*id).data()[k];
            store.get_mut(*id).data_mut()[k] = base + H;
            let up = model_loss(&net, &store, &x, &targets, &weights, replay(), false).0;
            store.get_mut(*id).data_mut()[k] = base - H;
            let down = model_loss(&net, &store, &x, &targets, &weights, replay(), false).0;
            store.get_mut(*id).data_mut()[k] = base;
            analytic.push(g.data()[k]);
            numeric.push((up - down) / (2.0 * H));
        }
    }
    assert!(analytic.len() >= 20, "probed {} entries", analytic.len());
    rel_err(&analytic, &numeric)
}
