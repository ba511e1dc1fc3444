#![allow(dead_code)]

use metfa::datagen::{generate_pair, sample_batch, Batch, DomainData, DomainShiftSpec};
use metfa::graph::{Graph, Var};
use metfa::losses::LossWeights;
use metfa::model::{NetConfig, ParamGroup, ParamStore};
use metfa::optim::{apply_group, build_step_graph, MomentumState, OptConfig};
use metfa::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn named(pairs: Vec<(&str, Tensor)>) -> Vec<(String, Tensor)> {
    pairs.into_iter().map(|(n, t)| (n.to_string(), t)).collect()
}

/// Deterministic weights of the same shape as `out`, summed against it so
/// that every output coordinate reaches the scalar with a distinct weight.
pub fn probe(g: &mut Graph, out: Var) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|k| (0.7 * k as f64 + 0.3).cos()).collect();
    let w = g.constant(Tensor::new(shape, w)?);
    let prod = g.mul(out, w)?;
    Ok(g.sum(prod))
}

pub fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn ce_oracle(logits: &[Vec<f64>], y: &[usize]) -> f64 {
    logits.iter().zip(y).map(|(r, &c)| -softmax(r)[c].ln()).sum::<f64>() / y.len() as f64
}

pub fn entropy_oracle(logits: &[Vec<f64>]) -> f64 {
    let h: f64 = logits
        .iter()
        .map(|r| softmax(r).iter().filter(|p| **p > 0.0).map(|p| -p * p.ln()).sum::<f64>())
        .sum();
    h / logits.len() as f64
}

/// Brute-force metric loss: for each query, the farthest same-class
/// support against the closest support of every other class.
pub fn metric_oracle(zs: &[Vec<f64>], ys: &[usize], zt: &[Vec<f64>], yhat: &[usize], m: usize) -> f64 {
    let mut total = 0.0;
    for (q, &i) in zt.iter().zip(yhat) {
        let d = |c: usize, pick: fn(f64, f64) -> f64, init: f64| {
            zs.iter().zip(ys).filter(|(_, &y)| y == c).map(|(s, _)| sqdist(s, q)).fold(init, pick)
        };
        let di = d(i, f64::max, f64::NEG_INFINITY);
        let inner: f64 = (0..m).filter(|&k| k != i).map(|k| (di - d(k, f64::min, f64::INFINITY)).exp()).sum();
        total += (1.0 + inner).ln();
    }
    total / zt.len() as f64
}

pub fn classdist_oracle(
    gs: &[Vec<f64>],
    ys: &[usize],
    gt: &[Vec<f64>],
    yhat: &[usize],
    m: usize,
    tau1: f64,
) -> f64 {
    let class_dist = |g: &[Vec<f64>], y: &[usize], c: usize| {
        let rows: Vec<&Vec<f64>> = g.iter().zip(y).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
        let mean: Vec<f64> =
            (0..g[0].len()).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64 / tau1).collect();
        softmax(&mean)
    };
    let mut total = 0.0;
    for c in 0..m {
        let count = yhat.iter().filter(|&&y| y == c).count();
        if count == 0 {
            continue;
        }
        let p = class_dist(gs, ys, c);
        let q = class_dist(gt, yhat, c);
        let kl = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * (x / y).ln()).sum::<f64>();
        total += count as f64 * (kl(&p, &q) + kl(&q, &p));
    }
    total / m as f64
}

/// Uniform random rotation of `R^d` by Gram–Schmidt on a Gaussian matrix.
pub fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Tensor {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    while basis.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Tensor::from_rows(&basis).unwrap()
}

pub fn small_spec(num_classes: usize) -> DomainShiftSpec {
    DomainShiftSpec { num_classes, n_source: 60, n_target: 60, ..DomainShiftSpec::default() }
}

pub fn small_net(num_classes: usize) -> NetConfig {
    NetConfig { num_classes, ..NetConfig::default() }
}

pub fn fixture(seed: u64) -> (DomainData, Batch, ParamStore, NetConfig) {
    let data = generate_pair(&DomainShiftSpec { seed, ..small_spec(4) }).unwrap();
    let batch = sample_batch(&data, &mut rng(seed)).unwrap();
    let net = small_net(4);
    let store = ParamStore::init(&net, seed).unwrap();
    (data, batch, store, net)
}

/// Target-batch entropy before and after one prototype-only update driven
/// by `L − λ6·L_H`, with the same embedding noise on both forward passes.
pub fn entropy_around_w_update(seed: u64, lr: f64) -> (f64, f64) {
    let (_, batch, mut store, net) = fixture(seed);
    let w = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, lambda4: 0.0, lambda5: 0.0, ..LossWeights::default() };
    let cfg = OptConfig { lr, ..OptConfig::default() };
    let noise = rng(1000 + seed);
    let entropy_of = |store: &ParamStore| {
        let sg = build_step_graph(&batch, store, &net, &w, &mut noise.clone()).unwrap();
        sg.graph.value(sg.terms.entropy.unwrap()).item().unwrap()
    };
    let before = entropy_of(&store);
    let sg = build_step_graph(&batch, &store, &net, &w, &mut noise.clone()).unwrap();
    let grads = sg.graph.backward(sg.proto).unwrap();
    let grads: Vec<Tensor> = sg.bound.vars().iter().map(|&v| grads.get(v)).collect();
    let mut state = MomentumState::zeros(&store);
    apply_group(&mut store, &mut state, &grads, ParamGroup::Prototype, &cfg).unwrap();
    (before, entropy_of(&store))
}

/// Largest absolute gap between the parameters after a second
/// `train_step` and a reference update built from two independent tapes:
/// prototypes follow `∇(L − λ6·L_H)`, everything else `∇(L + λ6·L_H)`,
/// with the momentum carried over from the first step.
pub fn minimax_split_error(seed: u64) -> f64 {
    let (_, batch, mut store, net) = fixture(seed);
    let w = LossWeights::default();
    let cfg = OptConfig { lr: 1e-3, l2_scale: 1e-2, ..OptConfig::default() };
    let mut state = MomentumState::zeros(&store);
    metfa::optim::train_step(&batch, &mut store, &mut state, &net, &w, &cfg, &mut rng(seed + 1)).unwrap();

    let noise = rng(seed + 2);
    let grads_of = |objective_is_main: bool| {
        let sg = build_step_graph(&batch, &store, &net, &w, &mut noise.clone()).unwrap();
        let root = if objective_is_main { sg.main } else { sg.proto };
        let grads = sg.graph.backward(root).unwrap();
        sg.bound.vars().iter().map(|&v| grads.get(v)).collect::<Vec<Tensor>>()
    };
    let main = grads_of(true);
    let proto = grads_of(false);
    let mut expected = Vec::new();
    for (i, e) in store.entries().iter().enumerate() {
        let g = if e.group == ParamGroup::Prototype { &proto[i] } else { &main[i] };
        let v = state.velocity(i);
        let next: Vec<f64> = e
            .value
            .data()
            .iter()
            .zip(g.data())
            .zip(v.data())
            .map(|((&wi, &gi), &vi)| wi - cfg.lr * (cfg.momentum * vi + gi + cfg.l2_scale * wi))
            .collect();
        expected.push(next);
    }

    metfa::optim::train_step(&batch, &mut store, &mut state, &net, &w, &cfg, &mut noise.clone()).unwrap();
    store
        .entries()
        .iter()
        .zip(&expected)
        .flat_map(|(e, x)| e.value.data().iter().zip(x).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
}
