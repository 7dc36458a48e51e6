//! Spatio-temporal forecasting network: a gated-TCN / diffusion-GCN encoder
//! with a self-adaptive adjacency, a feed-forward decoder, and the projection
//! head used by the contrastive objective.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array4, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UrclError};
use crate::tape::{Gradients, MixMatrix, Tape, Tensor, Var};

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub node_count: usize,
    pub input_channels: usize,
    pub input_len: usize,
    pub output_len: usize,
    pub output_channels: usize,
    /// Width of the lifted input and of every gated-TCN stage.
    pub residual_width: usize,
    /// Output width of each spatio-temporal layer.
    pub layer_widths: Vec<usize>,
    pub dilations: Vec<usize>,
    /// Diffusion steps `K`.
    pub diffusion_steps: usize,
    /// Node-embedding width `d_e` of the adaptive adjacency.
    pub embedding_dim: usize,
    pub decoder_hidden: usize,
    pub projector_widths: Vec<usize>,
    /// Whether the fixed graph contributes forward and backward transition
    /// matrices (directed) or a single one (undirected).
    pub directed: bool,
}

impl ModelConfig {
    pub fn new(node_count: usize, input_channels: usize, directed: bool) -> Self {
        ModelConfig {
            node_count,
            input_channels,
            input_len: 12,
            output_len: 1,
            output_channels: 1,
            residual_width: 32,
            layer_widths: vec![32, 32, 32, 32, 256],
            dilations: vec![1, 2, 1, 2, 4],
            diffusion_steps: 2,
            embedding_dim: 10,
            decoder_hidden: 512,
            projector_widths: vec![256, 256],
            directed,
        }
    }

    pub fn latent_width(&self) -> usize {
        *self.layer_widths.last().expect("at least one layer")
    }

    pub fn fixed_supports(&self) -> usize {
        if self.directed {
            2
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("node_count", self.node_count),
            ("input_channels", self.input_channels),
            ("input_len", self.input_len),
            ("output_len", self.output_len),
            ("output_channels", self.output_channels),
            ("residual_width", self.residual_width),
            ("embedding_dim", self.embedding_dim),
            ("decoder_hidden", self.decoder_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(UrclError::config(format!("{name} must be positive")));
            }
        }
        if self.layer_widths.is_empty() || self.layer_widths.len() != self.dilations.len() {
            return Err(UrclError::config(
                "layer_widths and dilations must be non-empty and of equal length",
            ));
        }
        if self.dilations.iter().any(|d| *d == 0) || self.layer_widths.iter().any(|w| *w == 0) {
            return Err(UrclError::config("dilations and widths must be positive"));
        }
        if self.projector_widths.last() != Some(&self.latent_width()) && !self.projector_widths.is_empty() {
            return Err(UrclError::config(
                "projector output width must equal the encoder latent width",
            ));
        }
        Ok(())
    }

    /// Number of trailing time steps each layer must produce so that the
    /// final step of the last layer is exact. Entry `i` is layer `i`'s
    /// output length; the lifted input is always `input_len` long.
    pub fn layer_output_lengths(&self) -> Vec<usize> {
        let n = self.dilations.len();
        let mut lens = vec![1; n];
        for i in (0..n - 1).rev() {
            lens[i] = (lens[i + 1] + self.dilations[i + 1]).min(self.input_len);
        }
        lens
    }
}

/// Named parameter arrays, ordered by name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    pub fn zeros_like(&self) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.raw_dim())))
                .collect(),
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self -= lr * grads` for every shared name.
    pub fn sgd_step(&mut self, grads: &ParamSet, lr: f64) {
        for (name, p) in self.entries.iter_mut() {
            if let Some(g) = grads.get(name) {
                p.scaled_add(-lr, g);
            }
        }
    }

    /// Places every parameter on `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .entries
            .iter()
            .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Writes `URCL-CKPT-v1`: a text header followed by little-endian `f64`
    /// payloads in name order.
    pub fn save(&self, path: &Path, config_hash: &str) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{MODEL_MAGIC}")?;
        writeln!(w, "config_hash {config_hash}")?;
        writeln!(w, "params {}", self.entries.len())?;
        for (name, t) in &self.entries {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            writeln!(w, "{name} {}", dims.join(","))?;
            for v in t.iter() {
                w.write_all(&v.to_le_bytes())?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a file written by [`save`](Self::save); returns the parameters
    /// and the stored config hash.
    pub fn load(path: &Path) -> Result<(ParamSet, String)> {
        let bad = |message: String| UrclError::Checkpoint {
            path: path.to_path_buf(),
            message,
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<File>| -> Result<String> {
            line.clear();
            r.read_line(&mut line)?;
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut r)? != MODEL_MAGIC {
            return Err(bad(format!("missing {MODEL_MAGIC} header")));
        }
        let hash = next_line(&mut r)?
            .strip_prefix("config_hash ")
            .ok_or_else(|| bad("missing config_hash".into()))?
            .to_string();
        let count: usize = next_line(&mut r)?
            .strip_prefix("params ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad("missing parameter count".into()))?;
        let mut params = ParamSet::default();
        for _ in 0..count {
            let header = next_line(&mut r)?;
            let (name, dims) = header
                .rsplit_once(' ')
                .ok_or_else(|| bad(format!("bad parameter header {header:?}")))?;
            let shape: Vec<usize> = if dims.is_empty() {
                vec![]
            } else {
                dims.split(',')
                    .map(|d| d.parse().map_err(|_| bad(format!("bad dims {dims:?}"))))
                    .collect::<Result<_>>()?
            };
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 8];
            r.read_exact(&mut buf)?;
            let data: Vec<f64> = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let mut nl = [0u8; 1];
            r.read_exact(&mut nl)?;
            let t = ArrayD::from_shape_vec(IxDyn(&shape), data).expect("length from shape");
            params.insert(name, t);
        }
        Ok((params, hash))
    }
}

pub const MODEL_MAGIC: &str = "URCL-CKPT-v1";

/// Tape handles for a [`ParamSet`].
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    pub fn try_var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients for every bound parameter (zeros where none flowed).
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> ParamSet {
        let mut out = ParamSet::default();
        for (name, v) in &self.vars {
            out.insert(name.clone(), grads.get_or_zeros(*v, tape.value(*v)));
        }
        out
    }
}

/// Glorot-uniform initialisation for a `[fan_in, fan_out]` matrix.
pub fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    ArrayD::from_shape_fn(IxDyn(&[fan_in, fan_out]), |_| rng.random_range(-limit..limit))
}

fn zeros(n: usize) -> Tensor {
    Tensor::zeros(IxDyn(&[n]))
}

/// Fixed transition matrices derived from the sensor graph.
#[derive(Debug, Clone)]
pub struct GraphSupports {
    pub fixed: Vec<Arc<MixMatrix>>,
}

impl GraphSupports {
    /// `Ã = A + I`; forward `Ã / rowsum(Ã)` and, for directed graphs,
    /// backward `Ãᵀ / rowsum(Ãᵀ)`.
    pub fn from_adjacency(adjacency: &Array2<f64>, directed: bool) -> Result<Self> {
        let forward = transition(adjacency)?;
        let mut fixed = vec![Arc::new(MixMatrix::new(forward))];
        if directed {
            let backward = transition(&adjacency.t().to_owned())?;
            fixed.push(Arc::new(MixMatrix::new(backward)));
        }
        Ok(GraphSupports { fixed })
    }
}

/// Row-normalized `A + I`.
pub fn transition(adjacency: &Array2<f64>) -> Result<Array2<f64>> {
    let n = adjacency.nrows();
    let mut a = adjacency + &Array2::<f64>::eye(n);
    for (i, mut row) in a.rows_mut().into_iter().enumerate() {
        let sum = row.sum();
        if !(sum > 0.0) {
            return Err(UrclError::contract(format!("row {i} of A + I sums to {sum}")));
        }
        row.mapv_inplace(|v| v / sum);
    }
    Ok(a)
}

/// `softmax(relu(E1 · E2ᵀ))` row-wise.
pub fn adaptive_adjacency(e1: &Array2<f64>, e2: &Array2<f64>) -> Array2<f64> {
    let mut tape = Tape::new();
    let a = tape.leaf(e1.clone().into_dyn());
    let b = tape.leaf(e2.clone().into_dyn());
    let out = adaptive_on_tape(&mut tape, a, b);
    tape.value(out).clone().into_dimensionality().expect("2-d")
}

fn adaptive_on_tape(tape: &mut Tape, e1: Var, e2: Var) -> Var {
    let logits = tape.matmul_nt(e1, e2);
    let logits = tape.relu(logits);
    tape.softmax_rows(logits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Identity,
}

/// Diffusion weights for one graph-convolution layer. `fixed[s][k]` pairs
/// with the `k`-th power of fixed support `s`; `adaptive[k]` with the
/// adaptive adjacency.
#[derive(Debug, Clone)]
pub struct DiffusionWeights {
    pub fixed: Vec<Vec<Array2<f64>>>,
    pub adaptive: Vec<Array2<f64>>,
}

/// Standalone diffusion graph convolution over `x: [B, T, V, F]`.
pub fn diffusion_gconv(
    x: &Array4<f64>,
    supports: &GraphSupports,
    e1: &Array2<f64>,
    e2: &Array2<f64>,
    weights: &DiffusionWeights,
    activation: Activation,
) -> Array4<f64> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().into_dyn());
    let a = tape.leaf(e1.clone().into_dyn());
    let b = tape.leaf(e2.clone().into_dyn());
    let adaptive = adaptive_on_tape(&mut tape, a, b);
    let fixed_w: Vec<Vec<Var>> = weights
        .fixed
        .iter()
        .map(|ws| ws.iter().map(|w| tape.leaf(w.clone().into_dyn())).collect())
        .collect();
    let adaptive_w: Vec<Var> = weights
        .adaptive
        .iter()
        .map(|w| tape.leaf(w.clone().into_dyn()))
        .collect();
    let out = gconv_on_tape(
        &mut tape,
        xv,
        &supports.fixed,
        adaptive,
        &fixed_w,
        &adaptive_w,
        activation,
    );
    tape.value(out).clone().into_dimensionality().expect("4-d")
}

fn gconv_on_tape(
    tape: &mut Tape,
    x: Var,
    fixed: &[Arc<MixMatrix>],
    adaptive: Var,
    fixed_w: &[Vec<Var>],
    adaptive_w: &[Var],
    activation: Activation,
) -> Var {
    let k_max = adaptive_w.len() - 1;
    // P^0 = I for every support, so the k = 0 weights act on x together
    let mut zero_terms: Vec<Var> = fixed_w.iter().map(|ws| ws[0]).collect();
    zero_terms.push(adaptive_w[0]);
    let w0 = tape.add(&zero_terms);
    let mut terms = vec![tape.linear(x, w0, None)];
    for (mat, ws) in fixed.iter().zip(fixed_w) {
        let mut cur = x;
        for w in ws.iter().take(k_max + 1).skip(1) {
            cur = tape.node_mix_const(cur, mat);
            terms.push(tape.linear(cur, *w, None));
        }
    }
    let mut cur = x;
    for w in adaptive_w.iter().skip(1) {
        cur = tape.node_mix(cur, adaptive);
        terms.push(tape.linear(cur, *w, None));
    }
    let sum = tape.add(&terms);
    match activation {
        Activation::Relu => tape.relu(sum),
        Activation::Identity => sum,
    }
}

/// Gated dilated causal convolution (kernel length 2) on the tape:
/// `tanh(Θ₁ ⋆ x + b) ⊙ sigmoid(Θ₂ ⋆ x + c)`, producing the last `out_len`
/// steps. `filter`/`gate` are `[2F, F']` with the current-step tap first.
pub fn gated_tcn_on_tape(
    tape: &mut Tape,
    x: Var,
    filter: (Var, Var),
    gate: (Var, Var),
    dilation: usize,
    out_len: usize,
) -> Var {
    let cur = tape.time_suffix(x, out_len);
    let lag = tape.causal_shift(x, dilation, out_len);
    let taps = tape.concat_last(&[cur, lag]);
    let f = tape.linear(taps, filter.0, Some(filter.1));
    let f = tape.tanh(f);
    let g = tape.linear(taps, gate.0, Some(gate.1));
    let g = tape.sigmoid(g);
    tape.mul(f, g)
}

/// Standalone full-length gated TCN over `x: [B, T, V, F]`.
pub fn gated_tcn(
    x: &Array4<f64>,
    filter: &Array2<f64>,
    filter_bias: &[f64],
    gate: &Array2<f64>,
    gate_bias: &[f64],
    dilation: usize,
) -> Array4<f64> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().into_dyn());
    let leaf = |tape: &mut Tape, a: &Array2<f64>| tape.leaf(a.clone().into_dyn());
    let fw = leaf(&mut tape, filter);
    let fb = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[filter_bias.len()]), filter_bias.to_vec()).unwrap());
    let gw = leaf(&mut tape, gate);
    let gb = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[gate_bias.len()]), gate_bias.to_vec()).unwrap());
    let t = x.len_of(Axis(1));
    let out = gated_tcn_on_tape(&mut tape, xv, (fw, fb), (gw, gb), dilation, t);
    tape.value(out).clone().into_dimensionality().expect("4-d")
}

/// Encoder outputs on a tape.
#[derive(Debug, Clone, Copy)]
pub struct Encoded {
    /// `[B, V, latent]` final-step features per node.
    pub per_node: Var,
    /// `[B, latent]` node-averaged representation.
    pub pooled: Var,
}

/// Pluggable encoder/decoder pair.
pub trait Backbone: Send + Sync + std::fmt::Debug {
    fn config(&self) -> &ModelConfig;

    /// Encoder and decoder parameters under canonical names.
    fn init_params(&self, rng: &mut dyn rand::RngCore) -> ParamSet;

    fn encode(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        inputs: &Array4<f64>,
        graph: &GraphSupports,
    ) -> Result<Encoded>;

    /// `[B, V, latent]` to predictions `[B, N, V, C_out]`.
    fn decode(&self, tape: &mut Tape, params: &BoundParams, per_node: Var) -> Var;
}

/// Gated-TCN + diffusion-GCN encoder with a two-layer feed-forward decoder.
#[derive(Debug, Clone)]
pub struct GatedGraphBackbone {
    config: ModelConfig,
}

impl GatedGraphBackbone {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(GatedGraphBackbone { config })
    }

    fn support_names(&self) -> Vec<&'static str> {
        if self.config.directed {
            vec!["forward", "backward"]
        } else {
            vec!["forward"]
        }
    }

    fn layer_input_width(&self, layer: usize) -> usize {
        if layer == 0 {
            self.config.residual_width
        } else {
            self.config.layer_widths[layer - 1]
        }
    }
}

impl Backbone for GatedGraphBackbone {
    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn init_params(&self, rng: &mut dyn rand::RngCore) -> ParamSet {
        let c = &self.config;
        let h = c.residual_width;
        let mut rng = rng;
        let mut p = ParamSet::default();
        p.insert("encoder.lift.weight", glorot(&mut rng, c.input_channels, h));
        p.insert("encoder.lift.bias", zeros(h));
        p.insert("adaptive.E1", glorot(&mut rng, c.node_count, c.embedding_dim));
        p.insert("adaptive.E2", glorot(&mut rng, c.node_count, c.embedding_dim));
        for (i, &width) in c.layer_widths.iter().enumerate() {
            let pre = format!("encoder.layer{}", i + 1);
            let in_w = self.layer_input_width(i);
            p.insert(format!("{pre}.entry.weight"), glorot(&mut rng, in_w, h));
            p.insert(format!("{pre}.entry.bias"), zeros(h));
            p.insert(format!("{pre}.tcn.filter"), glorot(&mut rng, 2 * h, h));
            p.insert(format!("{pre}.tcn.filter_bias"), zeros(h));
            p.insert(format!("{pre}.tcn.gate"), glorot(&mut rng, 2 * h, h));
            p.insert(format!("{pre}.tcn.gate_bias"), zeros(h));
            for k in 0..=c.diffusion_steps {
                for s in self.support_names().into_iter().chain(["adaptive"]) {
                    p.insert(format!("{pre}.gconv.{s}.k{k}"), glorot(&mut rng, h, width));
                }
            }
            if in_w != width {
                p.insert(format!("{pre}.residual.weight"), glorot(&mut rng, in_w, width));
                p.insert(format!("{pre}.residual.bias"), zeros(width));
            }
        }
        let latent = c.latent_width();
        let out = c.output_len * c.output_channels;
        p.insert("decoder.fc1.weight", glorot(&mut rng, latent, c.decoder_hidden));
        p.insert("decoder.fc1.bias", zeros(c.decoder_hidden));
        p.insert("decoder.fc2.weight", glorot(&mut rng, c.decoder_hidden, out));
        p.insert("decoder.fc2.bias", zeros(out));
        p
    }

    fn encode(
        &self,
        tape: &mut Tape,
        params: &BoundParams,
        inputs: &Array4<f64>,
        graph: &GraphSupports,
    ) -> Result<Encoded> {
        let c = &self.config;
        let (b, m, v, ch) = inputs.dim();
        if m != c.input_len || v != c.node_count || ch != c.input_channels {
            return Err(UrclError::contract(format!(
                "encoder expects [B, {}, {}, {}], got [{b}, {m}, {v}, {ch}]",
                c.input_len, c.node_count, c.input_channels
            )));
        }
        if graph.fixed.len() != c.fixed_supports() {
            return Err(UrclError::contract("support count does not match the model"));
        }
        let x = tape.leaf(inputs.clone().into_dyn());
        let e1 = params.var("adaptive.E1");
        let e2 = params.var("adaptive.E2");
        let adaptive = adaptive_on_tape(tape, e1, e2);

        let mut h = tape.linear(
            x,
            params.var("encoder.lift.weight"),
            Some(params.var("encoder.lift.bias")),
        );
        let out_lens = c.layer_output_lengths();
        let supports = self.support_names();
        for (i, &width) in c.layer_widths.iter().enumerate() {
            let pre = format!("encoder.layer{}", i + 1);
            let p = |n: &str| params.var(&format!("{pre}.{n}"));
            let out_len = out_lens[i];

            let entry = tape.linear(h, p("entry.weight"), Some(p("entry.bias")));
            let t = gated_tcn_on_tape(
                tape,
                entry,
                (p("tcn.filter"), p("tcn.filter_bias")),
                (p("tcn.gate"), p("tcn.gate_bias")),
                c.dilations[i],
                out_len,
            );
            let fixed_w: Vec<Vec<Var>> = supports
                .iter()
                .map(|s| (0..=c.diffusion_steps).map(|k| p(&format!("gconv.{s}.k{k}"))).collect())
                .collect();
            let adaptive_w: Vec<Var> = (0..=c.diffusion_steps)
                .map(|k| p(&format!("gconv.adaptive.k{k}")))
                .collect();
            let g = gconv_on_tape(
                tape,
                t,
                &graph.fixed,
                adaptive,
                &fixed_w,
                &adaptive_w,
                Activation::Relu,
            );
            let mut skip = tape.time_suffix(h, out_len);
            if let Some(rw) = params.try_var(&format!("{pre}.residual.weight")) {
                skip = tape.linear(skip, rw, Some(p("residual.bias")));
            }
            debug_assert_eq!(tape.value(skip).shape().last(), Some(&width));
            h = tape.add(&[g, skip]);
            if tape.value(h).iter().any(|v| !v.is_finite()) {
                return Err(UrclError::Numerical(format!(
                    "non-finite activation in encoder layer {}",
                    i + 1
                )));
            }
        }
        let latent = c.latent_width();
        let per_node = tape.reshape(h, &[b, v, latent]);
        let pooled = tape.mean_axis(per_node, 1);
        Ok(Encoded { per_node, pooled })
    }

    fn decode(&self, tape: &mut Tape, params: &BoundParams, per_node: Var) -> Var {
        let c = &self.config;
        let shape = tape.value(per_node).shape().to_vec();
        let (b, v) = (shape[0], shape[1]);
        let h = tape.linear(
            per_node,
            params.var("decoder.fc1.weight"),
            Some(params.var("decoder.fc1.bias")),
        );
        let h = tape.relu(h);
        let y = tape.linear(
            h,
            params.var("decoder.fc2.weight"),
            Some(params.var("decoder.fc2.bias")),
        );
        let y = tape.reshape(y, &[b, v, c.output_len, c.output_channels]);
        tape.permute(y, &[0, 2, 1, 3])
    }
}

/// Projection head `h(·)`: affine layers with a rectifier between them.
pub fn init_projector(rng: &mut impl Rng, input: usize, widths: &[usize]) -> ParamSet {
    let mut p = ParamSet::default();
    let mut fan_in = input;
    for (i, &w) in widths.iter().enumerate() {
        p.insert(format!("projector.fc{}.weight", i + 1), glorot(rng, fan_in, w));
        p.insert(format!("projector.fc{}.bias", i + 1), zeros(w));
        fan_in = w;
    }
    p
}

pub fn projector_on_tape(tape: &mut Tape, params: &BoundParams, z: Var, layers: usize) -> Var {
    let mut h = z;
    for i in 1..=layers {
        h = tape.linear(
            h,
            params.var(&format!("projector.fc{i}.weight")),
            Some(params.var(&format!("projector.fc{i}.bias"))),
        );
        if i < layers {
            h = tape.relu(h);
        }
    }
    h
}

/// All learnable state: backbone parameters plus the projection head.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub params: ParamSet,
    backbone: Arc<dyn Backbone>,
}

impl ModelState {
    pub fn new(backbone: Arc<dyn Backbone>, rng: &mut impl rand::RngCore) -> Self {
        let mut params = backbone.init_params(rng);
        let c = backbone.config();
        for (k, v) in init_projector(rng, c.latent_width(), &c.projector_widths).iter() {
            params.insert(k.clone(), v.clone());
        }
        ModelState { params, backbone }
    }

    pub fn with_params(backbone: Arc<dyn Backbone>, params: ParamSet) -> Result<Self> {
        let mut probe = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let reference = ModelState::new(Arc::clone(&backbone), &mut probe);
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(UrclError::contract(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => return Err(UrclError::contract(format!("missing parameter {name}"))),
            }
        }
        if params.len() != reference.params.len() {
            return Err(UrclError::contract("unexpected extra parameters"));
        }
        Ok(ModelState { params, backbone })
    }

    pub fn backbone(&self) -> &Arc<dyn Backbone> {
        &self.backbone
    }

    pub fn config(&self) -> &ModelConfig {
        self.backbone.config()
    }

    pub fn projector_layers(&self) -> usize {
        self.config().projector_widths.len()
    }

    /// Forward pass to predictions `[B, N, V, C_out]` on an existing tape.
    pub fn forecast_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        inputs: &Array4<f64>,
        graph: &GraphSupports,
    ) -> Result<(Var, Encoded)> {
        let enc = self.backbone.encode(tape, bound, inputs, graph)?;
        let pred = self.backbone.decode(tape, bound, enc.per_node);
        Ok((pred, enc))
    }

    /// Inference without keeping a tape, in chunks of `chunk` samples.
    pub fn predict(&self, inputs: &Array4<f64>, graph: &GraphSupports, chunk: usize) -> Result<Array4<f64>> {
        let b = inputs.len_of(Axis(0));
        let mut outs = Vec::new();
        let mut start = 0;
        while start < b {
            let end = (start + chunk.max(1)).min(b);
            let part = inputs.slice_axis(Axis(0), ndarray::Slice::from(start..end)).to_owned();
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape);
            let (pred, _) = self.forecast_on_tape(&mut tape, &bound, &part, graph)?;
            outs.push(
                tape.value(pred)
                    .clone()
                    .into_dimensionality::<ndarray::Ix4>()
                    .expect("4-d prediction"),
            );
            start = end;
        }
        let views: Vec<_> = outs.iter().map(|o| o.view()).collect();
        Ok(ndarray::concatenate(Axis(0), &views).expect("matching prediction shapes"))
    }

    /// Pooled encoder representation `[B, latent]`.
    pub fn encode_pooled(&self, inputs: &Array4<f64>, graph: &GraphSupports) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let enc = self.backbone.encode(&mut tape, &bound, inputs, graph)?;
        Ok(tape.value(enc.pooled).clone().into_dimensionality().expect("2-d"))
    }

    /// Projection head applied to `z: [B, latent]`.
    pub fn project(&self, z: &Array2<f64>) -> Array2<f64> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let zv = tape.leaf(z.clone().into_dyn());
        let p = projector_on_tape(&mut tape, &bound, zv, self.projector_layers());
        tape.value(p).clone().into_dimensionality().expect("2-d")
    }
}
