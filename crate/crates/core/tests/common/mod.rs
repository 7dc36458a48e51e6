#![allow(dead_code)]

use std::sync::Arc;

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use urcl::model::{Backbone, BoundParams, Encoded, GatedGraphBackbone, GraphSupports, ModelConfig, ModelState, ParamSet};
use urcl::tape::Tape;
use urcl::Result;

/// `y[v] = x[M-1, v, :] · w + b`: one affine layer on the last input step.
#[derive(Debug)]
pub struct LinearToy {
    pub config: ModelConfig,
}

impl LinearToy {
    pub fn new(nodes: usize, channels: usize, input_len: usize) -> Self {
        let mut config = ModelConfig::new(nodes, channels, false);
        config.input_len = input_len;
        config.layer_widths = vec![1];
        config.dilations = vec![1];
        config.projector_widths = vec![];
        LinearToy { config }
    }
}

impl Backbone for LinearToy {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn init_params(&self, rng: &mut dyn rand::RngCore) -> ParamSet {
        use rand::Rng;
        let c = self.config.input_channels;
        let mut p = ParamSet::default();
        let w: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
        p.insert("toy.weight", ArrayD::from_shape_vec(IxDyn(&[c, 1]), w).unwrap());
        p.insert("toy.bias", ArrayD::from_shape_vec(IxDyn(&[1]), vec![rng.random_range(-0.5..0.5)]).unwrap());
        p
    }

    fn encode(&self, tape: &mut Tape, params: &BoundParams, inputs: &Array4<f64>, _graph: &GraphSupports) -> Result<Encoded> {
        let (b, _, v, _) = inputs.dim();
        let x = tape.leaf(inputs.clone().into_dyn());
        let last = tape.time_suffix(x, 1);
        let y = tape.linear(last, params.var("toy.weight"), Some(params.var("toy.bias")));
        let per_node = tape.reshape(y, &[b, v, 1]);
        let pooled = tape.mean_axis(per_node, 1);
        Ok(Encoded { per_node, pooled })
    }

    fn decode(&self, tape: &mut Tape, _params: &BoundParams, per_node: Var) -> Var {
        let shape = tape.value(per_node).shape().to_vec();
        let y = tape.reshape(per_node, &[shape[0], shape[1], 1, 1]);
        tape.permute(y, &[0, 2, 1, 3])
    }
}

use urcl::tape::Var;

pub fn toy_model(nodes: usize, channels: usize, input_len: usize, seed: u64) -> ModelState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelState::new(Arc::new(LinearToy::new(nodes, channels, input_len)), &mut rng)
}

pub fn ring(n: usize) -> Array2<f64> {
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        let j = (i + 1) % n;
        a[[i, j]] = 1.0;
        a[[j, i]] = 1.0;
    }
    a
}

/// Full architecture with small widths for fast checks.
pub fn tiny_config(nodes: usize, channels: usize, input_len: usize, directed: bool) -> ModelConfig {
    let mut c = ModelConfig::new(nodes, channels, directed);
    c.input_len = input_len;
    c.residual_width = 4;
    c.layer_widths = vec![4, 4, 4, 4, 6];
    c.embedding_dim = 3;
    c.decoder_hidden = 5;
    c.projector_widths = vec![5, 6];
    c
}

pub fn tiny_model(config: ModelConfig, seed: u64) -> ModelState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ModelState::new(Arc::new(GatedGraphBackbone::new(config).unwrap()), &mut rng)
}

/// Two fixed augmented views with their graph supports.
pub struct Views {
    pub w1: Array4<f64>,
    pub g1: GraphSupports,
    pub w2: Array4<f64>,
    pub g2: GraphSupports,
}

pub struct Objective<'a> {
    pub inputs: &'a Array4<f64>,
    pub targets: &'a Array4<f64>,
    pub graph: &'a GraphSupports,
    pub views: &'a Views,
    pub tau: f64,
    pub task: bool,
    pub ssl: bool,
}

/// Value and parameter gradients of `task + ssl` under `params`. When
/// `z_const` is given, the encoder targets are those constants instead of
/// detached encodings.
pub fn objective(
    model: &ModelState,
    params: &ParamSet,
    obj: &Objective,
    z_const: Option<&(Array2<f64>, Array2<f64>)>,
) -> (f64, ParamSet) {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let mut terms = Vec::new();
    if obj.task {
        let enc = model.backbone().encode(&mut tape, &bound, obj.inputs, obj.graph).unwrap();
        let pred = model.backbone().decode(&mut tape, &bound, enc.per_node);
        terms.push(tape.mae(pred, obj.targets.clone().into_dyn()));
    }
    if obj.ssl {
        let layers = model.projector_layers();
        let side = |tape: &mut Tape, w: &Array4<f64>, g: &GraphSupports, zc: Option<&Array2<f64>>| {
            let enc = model.backbone().encode(tape, &bound, w, g).unwrap();
            let p = urcl::model::projector_on_tape(tape, &bound, enc.pooled, layers);
            let z = match zc {
                Some(z) => tape.leaf(z.clone().into_dyn()),
                None => tape.detach(enc.pooled),
            };
            (p, z)
        };
        let (p1, z1) = side(&mut tape, &obj.views.w1, &obj.views.g1, z_const.map(|z| &z.0));
        let (p2, z2) = side(&mut tape, &obj.views.w2, &obj.views.g2, z_const.map(|z| &z.1));
        terms.push(tape.graphcl(p1, p2, z1, z2, obj.tau));
    }
    let root = tape.add(&terms);
    let value = tape.scalar(root);
    let grads = tape.backward(root);
    (value, bound.gradients(&tape, &grads))
}

/// Pooled encodings of both views under `params`.
pub fn view_encodings(model: &ModelState, params: &ParamSet, views: &Views) -> (Array2<f64>, Array2<f64>) {
    let m = ModelState::with_params(std::sync::Arc::clone(model.backbone()), params.clone()).unwrap();
    (m.encode_pooled(&views.w1, &views.g1).unwrap(), m.encode_pooled(&views.w2, &views.g2).unwrap())
}

/// Largest per-group relative difference `‖a − n‖ / max(‖a‖, ‖n‖, floor)`
/// between analytic gradients and central differences.
pub fn gradient_check(
    params: &ParamSet,
    analytic: &ParamSet,
    h: f64,
    floor: f64,
    mut f: impl FnMut(&ParamSet) -> f64,
) -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (name, value) in params.iter() {
        let mut diff2 = 0.0;
        let mut a2 = 0.0;
        let mut n2 = 0.0;
        let a = analytic.get(name).unwrap();
        for idx in 0..value.len() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] += h;
            minus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] -= h;
            let num = (f(&plus) - f(&minus)) / (2.0 * h);
            let ana = a.as_slice().unwrap()[idx];
            diff2 += (num - ana).powi(2);
            a2 += ana * ana;
            n2 += num * num;
        }
        let rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(floor);
        out.push((name.clone(), rel));
    }
    out
}

fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut s = 0.0;
            for k in 0..a.ncols() {
                s += a[[i, k]] * b[[k, j]];
            }
            out[[i, j]] = s;
        }
    }
    out
}

fn row_normalized(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut out = a.clone();
    for i in 0..n {
        out[[i, i]] += 1.0;
        let s: f64 = (0..n).map(|j| out[[i, j]]).sum();
        for j in 0..n {
            out[[i, j]] /= s;
        }
    }
    out
}

/// Row softmax of `relu(E1 E2ᵀ)` by explicit loops.
pub fn softmax_relu_oracle(e1: &Array2<f64>, e2: &Array2<f64>) -> Array2<f64> {
    let logits = matmul(e1, &e2.t().to_owned()).mapv(|v| v.max(0.0));
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - m).exp()).sum();
        row.mapv_inplace(|v| (v - m).exp() / s);
    }
    out
}

/// Dense power series `σ(Σ_k Σ_s P_s^k X W_{s,k})` per batch and time step.
pub fn gconv_oracle(
    x: &Array4<f64>,
    adjacency: &Array2<f64>,
    directed: bool,
    e1: &Array2<f64>,
    e2: &Array2<f64>,
    weights: &urcl::model::DiffusionWeights,
    relu: bool,
) -> Array4<f64> {
    let mut supports = vec![(row_normalized(adjacency), &weights.fixed[0])];
    if directed {
        supports.push((row_normalized(&adjacency.t().to_owned()), &weights.fixed[1]));
    }
    let adaptive = softmax_relu_oracle(e1, e2);
    supports.push((adaptive, &weights.adaptive));
    let (b, t, v, _) = x.dim();
    let f_out = weights.adaptive[0].ncols();
    let mut out = Array4::zeros((b, t, v, f_out));
    for bi in 0..b {
        for ti in 0..t {
            let xs = x.slice(ndarray::s![bi, ti, .., ..]).to_owned();
            let mut acc = Array2::<f64>::zeros((v, f_out));
            for (p, ws) in &supports {
                let mut power = Array2::<f64>::eye(v);
                for w in ws.iter() {
                    acc = acc + matmul(&matmul(&power, &xs), w);
                    power = matmul(&power, p);
                }
            }
            if relu {
                acc.mapv_inplace(|a| a.max(0.0));
            }
            out.slice_mut(ndarray::s![bi, ti, .., ..]).assign(&acc);
        }
    }
    out
}

/// Weights and bias of a [`LinearToy`] model.
pub fn toy_weights(model: &ModelState) -> (Vec<f64>, f64) {
    let w = model.params.get("toy.weight").unwrap().iter().copied().collect();
    let b = model.params.get("toy.bias").unwrap()[[0]];
    (w, b)
}

fn toy_predict(x: &ndarray::Array3<f64>, w: &[f64], b: f64) -> Vec<f64> {
    let m = x.dim().0;
    (0..x.dim().1)
        .map(|v| (0..w.len()).map(|c| x[[m - 1, v, c]] * w[c]).sum::<f64>() + b)
        .collect()
}

fn toy_item_mae(x: &ndarray::Array3<f64>, y: &ndarray::Array3<f64>, w: &[f64], b: f64) -> f64 {
    let p = toy_predict(x, w, b);
    p.iter().enumerate().map(|(v, pv)| (pv - y[[0, v, 0]]).abs()).sum::<f64>() / p.len() as f64
}

fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One hand-derived MAE gradient step of the toy model on a batch.
pub fn toy_virtual_step(
    batch: &urcl::data::WindowBatch,
    w: &[f64],
    b: f64,
    lr: f64,
) -> (Vec<f64>, f64) {
    let (bs, m, v, c) = batch.inputs.dim();
    let n = (bs * v) as f64;
    let mut gw = vec![0.0; c];
    let mut gb = 0.0;
    for i in 0..bs {
        let x = batch.inputs.index_axis(ndarray::Axis(0), i).to_owned();
        let p = toy_predict(&x, w, b);
        for node in 0..v {
            let s = sign(p[node] - batch.targets[[i, 0, node, 0]]);
            for ch in 0..c {
                gw[ch] += s * x[[m - 1, node, ch]] / n;
            }
            gb += s / n;
        }
    }
    (w.iter().zip(&gw).map(|(a, g)| a - lr * g).collect(), b - lr * gb)
}

fn pearson_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Exhaustive two-stage retrieval for the toy model: every delta, a stable
/// sort (descending, older first), the first `pool`, then every Pearson score
/// against the mean current window (descending, higher interference first).
pub fn rmir_oracle(
    buffer: &urcl::replay::ReplayBuffer,
    current: &urcl::data::WindowBatch,
    model: &ModelState,
    lr: f64,
    pool: usize,
    sample: usize,
) -> Vec<usize> {
    if buffer.len() < sample {
        return (0..buffer.len()).collect();
    }
    let (w, b) = toy_weights(model);
    let (w2, b2) = toy_virtual_step(current, &w, b, lr);
    let mut deltas: Vec<(f64, u64, usize)> = buffer
        .items()
        .enumerate()
        .map(|(i, it)| {
            let d = toy_item_mae(&it.input_window, &it.target, &w2, b2) - toy_item_mae(&it.input_window, &it.target, &w, b);
            (d, it.insert_counter, i)
        })
        .collect();
    deltas.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let top: Vec<usize> = deltas.iter().take(pool).map(|d| d.2).collect();
    let bs = current.inputs.dim().0 as f64;
    let mean: Vec<f64> = current.inputs.sum_axis(ndarray::Axis(0)).iter().map(|v| v / bs).collect();
    let mut sims: Vec<(f64, usize, usize)> = top
        .iter()
        .enumerate()
        .map(|(rank, &i)| {
            let flat: Vec<f64> = buffer.get(i).unwrap().input_window.iter().copied().collect();
            (pearson_oracle(&flat, &mean), rank, i)
        })
        .collect();
    sims.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    sims.into_iter().take(sample).map(|s| s.2).collect()
}

/// One randomized trial of every augmentation property; `Err` names the
/// first property that failed.
pub fn augmentation_trial(seed: u64) -> std::result::Result<(), String> {
    use rand::Rng;
    use urcl::augment::*;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(3..12);
    let m = rng.random_range(2..13);
    let b = rng.random_range(1..4);
    let c = rng.random_range(1..3);
    let directed = rng.random_bool(0.3);
    let mut adjacency = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random_bool(0.3) {
                let w = rng.random_range(0.05..2.0);
                adjacency[[i, j]] = w;
                if !directed {
                    adjacency[[j, i]] = w;
                }
            }
        }
    }
    let window = Array4::from_shape_fn((b, m, n, c), |_| rng.random_range(-3.0..3.0));
    let sample = GraphSample::new(window.clone(), adjacency.clone(), directed).map_err(|e| e.to_string())?;
    let fail = |what: &str| Err(format!("{what} (seed {seed})"));

    let flipped = time_shifting(&sample, TimeShiftVariant::Flip, 2, &mut rng).unwrap();
    for t in 0..m {
        if flipped.window.slice(ndarray::s![.., t, .., ..]) != window.slice(ndarray::s![.., m - 1 - t, .., ..]) {
            return fail("flip reverses time");
        }
    }
    if time_shifting(&flipped, TimeShiftVariant::Flip, 2, &mut rng).unwrap().window != window {
        return fail("flip is an involution");
    }

    let l = rng.random_range(2..=m.max(2)).min(m);
    if l >= 2 {
        let warped = time_shifting(&sample, TimeShiftVariant::Warp, l, &mut rng).unwrap();
        if warped.window.dim() != window.dim() {
            return fail("warp keeps length M");
        }
        let constant = Array4::from_shape_fn((b, m, n, c), |(bi, _, v, ch)| (bi + 2 * v + 3 * ch) as f64 * 0.37);
        let cs = GraphSample::new(constant.clone(), adjacency.clone(), directed).unwrap();
        let cw = time_shifting(&cs, TimeShiftVariant::Warp, l, &mut rng).unwrap();
        if cw.window.iter().zip(constant.iter()).any(|(a, b)| (a - b).abs() > 1e-12) {
            return fail("warp keeps constant windows");
        }

        let sliced = time_shifting(&sample, TimeShiftVariant::Slice, l, &mut rng).unwrap();
        if sliced.window.dim() != window.dim() {
            return fail("slice keeps length M");
        }
        for bi in 0..b {
            let out = sliced.window.index_axis(ndarray::Axis(0), bi);
            let src = window.index_axis(ndarray::Axis(0), bi);
            let found = (0..=m - l).any(|start| {
                (0..l).all(|t| out.index_axis(ndarray::Axis(0), t) == src.index_axis(ndarray::Axis(0), start + t))
                    && (l..m).all(|t| out.index_axis(ndarray::Axis(0), t) == src.index_axis(ndarray::Axis(0), start + l - 1))
            });
            if !found {
                return fail("slice is a contiguous in-bounds sub-window padded by its last frame");
            }
        }
    }

    let ratio = rng.random_range(0.0..0.99);
    let dn = drop_nodes(&sample, ratio, &mut rng).unwrap();
    if dn.adjacency.iter().zip(adjacency.iter()).any(|(a, b)| a > b) {
        return fail("drop nodes never increases adjacency");
    }
    let masked = (0..n).filter(|&v| dn.window.slice(ndarray::s![.., .., v, ..]).iter().all(|x| *x == 0.0)
        && dn.adjacency.row(v).iter().all(|x| *x == 0.0)).count();
    if masked < (ratio * n as f64).floor() as usize {
        return fail("drop nodes masks floor(ratio |V|) nodes");
    }
    let threshold = rng.random_range(0.0..2.5);
    let de = drop_edges(&sample, ratio, threshold, &mut rng).unwrap();
    for ((a, o), i) in de.adjacency.iter().zip(adjacency.iter()).zip(0..) {
        if a > o || (a != o && (*a != 0.0 || *o >= threshold)) {
            return fail(&format!("drop edges only removes edges below the threshold (entry {i})"));
        }
    }
    if de.window != window {
        return fail("drop edges leaves features unchanged");
    }

    let min_hops = rng.random_range(2..5);
    let ae = add_edges(&sample, rng.random_range(0.0..0.99), min_hops, &mut rng).unwrap();
    let hops = hop_distances(&sample);
    let feats = node_features(&window);
    for i in 0..n {
        for j in 0..n {
            if ae.adjacency[[i, j]] != adjacency[[i, j]] {
                if hops[[i, j]] < min_hops {
                    return fail("added edges respect the minimum hop distance");
                }
                let dot: f64 = (0..c).map(|ch| feats[[i, ch]] * feats[[j, ch]]).sum();
                if (ae.adjacency[[i, j]] - dot.max(0.0)).abs() > 1e-12 {
                    return fail("added edge weight is the feature dot product");
                }
            }
        }
    }
    Ok(())
}

/// A METR-LA-shaped stream: 207 directed sensors with about eight
/// neighbours each, a speed-like channel and a time-of-day channel.
pub fn metr_la_shaped(slots: usize, seed: u64) -> (urcl::data::SensorNetwork, urcl::data::ObservationSeries) {
    use rand::Rng;
    use urcl::harness::{synthetic_stream, SynthSpec};
    let nodes = 207;
    let (_, mut series) = synthetic_stream(&SynthSpec::new(nodes, 4, slots, seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for i in 0..nodes {
        for _ in 0..8 {
            let j = (i + rng.random_range(1..12)) % nodes;
            if !edges.iter().any(|&(a, b, _)| a == i && b == j) {
                edges.push((i, j, rng.random_range(0.2..5.0)));
            }
        }
    }
    let network = urcl::data::build_adjacency(&edges, nodes, true).unwrap();
    let mut values = ndarray::Array3::zeros((slots, nodes, 2));
    values.slice_mut(ndarray::s![.., .., 0]).assign(&series.values.slice(ndarray::s![.., .., 0]));
    for t in 0..slots {
        values.slice_mut(ndarray::s![t, .., 1]).fill((t % 288) as f64 / 288.0);
    }
    series = urcl::data::ObservationSeries::new(values, 5.0);
    (network, series)
}
