//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records every operation of a forward pass in order; calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! accumulates gradients for every node. The op set is exactly what the
//! forecasting network, the contrastive head and the losses need.
//!
//! Spatio-temporal activations use the layout `[batch, time, node, feature]`.

use std::sync::Arc;

use ndarray::{s, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Zip};

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Constant node-mixing operator (a transition matrix), stored densely and,
/// when sparse enough, in CSR form for both itself and its transpose.
#[derive(Debug, Clone)]
pub struct MixMatrix {
    dense: Array2<f64>,
    sparse: Option<(Csr, Csr)>,
}

#[derive(Debug, Clone)]
struct Csr {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl Csr {
    fn from_dense(m: ArrayView2<f64>) -> Self {
        let mut row_ptr = Vec::with_capacity(m.nrows() + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in m.rows() {
            for (j, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    cols.push(j);
                    vals.push(v);
                }
            }
            row_ptr.push(cols.len());
        }
        Csr { row_ptr, cols, vals }
    }

    /// `self · x` where `x` is `[n, cols]`.
    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let n = self.row_ptr.len() - 1;
        let mut out = Array2::<f64>::zeros((n, x.ncols()));
        for i in 0..n {
            let mut out_row = out.row_mut(i);
            for idx in self.row_ptr[i]..self.row_ptr[i + 1] {
                let w = self.vals[idx];
                out_row.scaled_add(w, &x.row(self.cols[idx]));
            }
        }
        out
    }
}

impl MixMatrix {
    pub fn new(dense: Array2<f64>) -> Self {
        let n = dense.nrows();
        let nnz = dense.iter().filter(|v| **v != 0.0).count();
        let sparse = if n >= 32 && (nnz as f64) < 0.25 * (n * n) as f64 {
            Some((
                Csr::from_dense(dense.view()),
                Csr::from_dense(dense.t()),
            ))
        } else {
            None
        };
        MixMatrix { dense, sparse }
    }

    pub fn dense(&self) -> &Array2<f64> {
        &self.dense
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        match &self.sparse {
            Some((m, _)) => m.apply(x),
            None => self.dense.dot(&x),
        }
    }

    fn apply_transposed(&self, x: ArrayView2<f64>) -> Array2<f64> {
        match &self.sparse {
            Some((_, mt)) => mt.apply(x),
            None => self.dense.t().dot(&x),
        }
    }
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Vec<Var>),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    TimeSuffix { x: Var, len: usize },
    CausalShift { x: Var, dilation: usize },
    NodeMixConst { x: Var, mat: Arc<MixMatrix> },
    NodeMix { x: Var, mat: Var },
    MatMulNt(Var, Var),
    SoftmaxRows(Var),
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    ConcatLast(Vec<Var>),
    MeanAxis { x: Var, axis: usize },
    Mae { pred: Var, target: Arc<Tensor> },
    GraphCl { p1: Var, p2: Var, z1: Var, z2: Var, tau: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(like.raw_dim()))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn as_2d(t: &Tensor) -> ArrayView2<'_, f64> {
    let last = *t.shape().last().expect("rank >= 1");
    let rows = if last == 0 { 0 } else { t.len() / last };
    t.view()
        .into_shape_with_order((rows, last))
        .expect("standard layout")
}

fn from_2d(a: Array2<f64>, shape: &[usize]) -> Tensor {
    let a = if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    };
    a.into_dyn()
        .into_shape_with_order(IxDyn(shape))
        .expect("element count preserved")
}

/// `[B, T, V, F]` to `[V, B*T*F]`.
fn nodes_first(x: &Tensor) -> Array2<f64> {
    let sh = x.shape();
    let (b, t, v, f) = (sh[0], sh[1], sh[2], sh[3]);
    x.view()
        .permuted_axes(IxDyn(&[2, 0, 1, 3]))
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((v, b * t * f))
        .expect("contiguous")
}

/// Inverse of [`nodes_first`].
fn nodes_back(y: Array2<f64>, shape: &[usize]) -> Tensor {
    let (b, t, v, f) = (shape[0], shape[1], shape[2], shape[3]);
    let y = if y.is_standard_layout() {
        y
    } else {
        y.as_standard_layout().into_owned()
    };
    y.into_shape_with_order(IxDyn(&[v, b, t, f]))
        .expect("contiguous")
        .permuted_axes(IxDyn(&[1, 2, 0, 3]))
        .as_standard_layout()
        .into_owned()
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Row-normalized copy and the row norms; zero rows stay zero.
fn normalize_rows(x: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = x.to_owned();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt();
        norms.push(n);
        if n > 0.0 {
            row.mapv_inplace(|v| v / n);
        }
    }
    (out, norms)
}

/// Backward through `u = v / ||v||` row-wise.
fn normalize_rows_backward(gu: &Array2<f64>, u: &Array2<f64>, norms: &[f64]) -> Array2<f64> {
    let mut gv = gu.clone();
    for (i, mut row) in gv.rows_mut().into_iter().enumerate() {
        let n = norms[i];
        if n == 0.0 {
            row.fill(0.0);
            continue;
        }
        let ui = u.row(i);
        let proj = row.dot(&ui);
        Zip::from(&mut row).and(&ui).for_each(|g, &uu| *g = (*g - proj * uu) / n);
    }
    gv
}

/// Symmetric cross-view similarity matrix used by the contrastive loss:
/// `S[s, t] = 0.5 * cos(p1_s, z2_t) + 0.5 * cos(p2_s, z1_t)`.
pub(crate) struct GraphClParts {
    pub p1n: Array2<f64>,
    pub p2n: Array2<f64>,
    pub z1n: Array2<f64>,
    pub z2n: Array2<f64>,
    pub norms: [Vec<f64>; 4],
    pub sym: Array2<f64>,
}

pub(crate) fn graphcl_parts(
    p1: ArrayView2<f64>,
    p2: ArrayView2<f64>,
    z1: ArrayView2<f64>,
    z2: ArrayView2<f64>,
) -> GraphClParts {
    let (p1n, n0) = normalize_rows(p1);
    let (p2n, n1) = normalize_rows(p2);
    let (z1n, n2) = normalize_rows(z1);
    let (z2n, n3) = normalize_rows(z2);
    let sym = (p1n.dot(&z2n.t()) + p2n.dot(&z1n.t())) * 0.5;
    GraphClParts {
        p1n,
        p2n,
        z1n,
        z2n,
        norms: [n0, n1, n2, n3],
        sym,
    }
}

/// Per-sample loss `-sym[s,s]/tau + log sum_{t != s} exp(sym[s,t]/tau)`,
/// averaged over the batch, together with `dL/dsym`.
pub(crate) fn graphcl_from_sym(sym: &Array2<f64>, tau: f64) -> (f64, Array2<f64>) {
    let n = sym.nrows();
    let mut loss = 0.0;
    let mut dsym = Array2::<f64>::zeros((n, n));
    for s in 0..n {
        let row = sym.row(s);
        let max = (0..n)
            .filter(|&t| t != s)
            .map(|t| row[t] / tau)
            .fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n)
            .filter(|&t| t != s)
            .map(|t| (row[t] / tau - max).exp())
            .sum();
        let lse = max + denom.ln();
        loss += -row[s] / tau + lse;
        dsym[[s, s]] -= 1.0 / (tau * n as f64);
        for t in (0..n).filter(|&t| t != s) {
            let w = (row[t] / tau - lse).exp();
            dsym[[s, t]] += w / (tau * n as f64);
        }
    }
    (loss / n as f64, dsym)
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        debug_assert_eq!(t.len(), 1);
        t.iter().next().copied().unwrap_or(f64::NAN)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Copy of `v` with no gradient path back to `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Leaf)
    }

    /// `x · w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w).view().into_dimensionality::<Ix2>().expect("2-d weight");
        assert_eq!(
            *xv.shape().last().unwrap(),
            wv.nrows(),
            "linear: input width {} vs weight rows {}",
            xv.shape().last().unwrap(),
            wv.nrows()
        );
        let mut out = as_2d(xv).dot(&wv);
        if let Some(b) = b {
            let bv = self.value(b);
            let bv = bv.view().into_shape_with_order(wv.ncols()).expect("bias shape");
            out += &bv;
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = wv.ncols();
        let value = from_2d(out, &shape);
        self.push(value, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty());
        let mut value = self.value(terms[0]).clone();
        for t in &terms[1..] {
            value += self.value(*t);
        }
        self.push(value, Op::Add(terms.to_vec()))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let value = self.value(x) * k;
        self.push(value, Op::Scale(x, k))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        self.push(value, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        self.push(value, Op::Sigmoid(x))
    }

    /// Last `len` time steps of a `[B, T, V, F]` tensor.
    pub fn time_suffix(&mut self, x: Var, len: usize) -> Var {
        let xv = self.value(x);
        let t = xv.shape()[1];
        assert!(len <= t, "time_suffix: {len} > {t}");
        if len == t {
            return x;
        }
        let value = xv.slice(s![.., t - len.., .., ..]).to_owned().into_dyn();
        self.push(value, Op::TimeSuffix { x, len })
    }

    /// Causal lag of a `[B, T_in, V, F]` tensor restricted to the last
    /// `out_len` steps: output step `j` reads input step
    /// `T_in - out_len + j - dilation`, or zero when that index is negative.
    pub fn causal_shift(&mut self, x: Var, dilation: usize, out_len: usize) -> Var {
        let xv = self.value(x);
        let sh = xv.shape().to_vec();
        let t_in = sh[1];
        assert!(out_len <= t_in);
        let mut value = Tensor::zeros(IxDyn(&[sh[0], out_len, sh[2], sh[3]]));
        let offset = t_in - out_len;
        for j in 0..out_len {
            let src = offset + j;
            if src >= dilation {
                value
                    .slice_mut(s![.., j, .., ..])
                    .assign(&xv.slice(s![.., src - dilation, .., ..]));
            }
        }
        self.push(value, Op::CausalShift { x, dilation })
    }

    /// `out[b, t] = mat · x[b, t]` for a constant node-mixing matrix.
    pub fn node_mix_const(&mut self, x: Var, mat: &Arc<MixMatrix>) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let y = mat.apply(nodes_first(xv).view());
        let value = nodes_back(y, &shape);
        self.push(value, Op::NodeMixConst { x, mat: Arc::clone(mat) })
    }

    /// `out[b, t] = mat · x[b, t]` for a learnable `[V, V]` matrix.
    pub fn node_mix(&mut self, x: Var, mat: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let m = self
            .value(mat)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d mixing matrix");
        let y = m.dot(&nodes_first(xv));
        let value = nodes_back(y, &shape);
        self.push(value, Op::NodeMix { x, mat })
    }

    /// `a · bᵀ` for 2-d operands.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a).view().into_dimensionality::<Ix2>().expect("2-d");
        let bv = self.value(b).view().into_dimensionality::<Ix2>().expect("2-d");
        let value = av.dot(&bv.t()).into_dyn();
        self.push(value, Op::MatMulNt(a, b))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self
            .value(x)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("2-d")
            .to_owned();
        let value = softmax_rows(&xv).into_dyn();
        self.push(value, Op::SoftmaxRows(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self
            .value(x)
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape preserves element count");
        self.push(value, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let value = self
            .value(x)
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .into_owned();
        self.push(value, Op::Permute { x, axes: axes.to_vec() })
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.value(*v).view()).collect();
        let axis = Axis(views[0].ndim() - 1);
        let value = ndarray::concatenate(axis, &views).expect("matching leading shapes");
        self.push(value, Op::ConcatLast(parts.to_vec()))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Var {
        let value = self
            .value(x)
            .mean_axis(Axis(axis))
            .expect("non-empty axis");
        self.push(value, Op::MeanAxis { x, axis })
    }

    /// Mean absolute error against a constant target; returns a scalar node.
    pub fn mae(&mut self, pred: Var, target: Tensor) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "mae: shape mismatch");
        let n = pv.len().max(1) as f64;
        let total: f64 = Zip::from(pv).and(&target).fold(0.0, |acc, &p, &t| acc + (p - t).abs());
        let value = ndarray::arr0(total / n).into_dyn();
        self.push(
            value,
            Op::Mae {
                pred,
                target: Arc::new(target),
            },
        )
    }

    /// Symmetric contrastive batch loss over two views; all inputs `[S, D]`.
    /// The caller detaches `z1`/`z2` to stop their gradient.
    pub fn graphcl(&mut self, p1: Var, p2: Var, z1: Var, z2: Var, tau: f64) -> Var {
        let view = |v: Var| {
            self.value(v)
                .view()
                .into_dimensionality::<Ix2>()
                .expect("2-d embeddings")
        };
        let parts = graphcl_parts(view(p1), view(p2), view(z1), view(z2));
        let (loss, _) = graphcl_from_sym(&parts.sym, tau);
        self.push(
            ndarray::arr0(loss).into_dyn(),
            Op::GraphCl { p1, p2, z1, z2, tau },
        )
    }

    /// Reverse pass from the scalar node `root` (seeded with 1).
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.nodes[root.0].value.raw_dim()));

        fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            let g = if g.is_standard_layout() {
                g
            } else {
                g.as_standard_layout().into_owned()
            };
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // interior gradients are released once propagated
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w).view().into_dimensionality::<Ix2>().unwrap();
                    let g2 = as_2d(&g);
                    let gx = from_2d(g2.dot(&wv.t()), xv.shape());
                    let gw = as_2d(xv).t().dot(&g2).into_dyn();
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *w, gw);
                    if let Some(b) = b {
                        let gb = g2.sum_axis(Axis(0)).into_dyn();
                        let shape = self.value(*b).shape().to_vec();
                        acc(&mut grads, *b, gb.into_shape_with_order(IxDyn(&shape)).unwrap());
                    }
                }
                Op::Add(terms) => {
                    for t in terms {
                        acc(&mut grads, *t, g.clone());
                    }
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(x, k) => acc(&mut grads, *x, &g * *k),
                Op::Relu(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(self.value(*x))
                        .for_each(|gg, &v| if v <= 0.0 { *gg = 0.0 });
                    acc(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(&node.value)
                        .for_each(|gg, &y| *gg *= 1.0 - y * y);
                    acc(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    Zip::from(&mut gx)
                        .and(&node.value)
                        .for_each(|gg, &y| *gg *= y * (1.0 - y));
                    acc(&mut grads, *x, gx);
                }
                Op::TimeSuffix { x, len } => {
                    let xv = self.value(*x);
                    let t = xv.shape()[1];
                    let mut gx = Tensor::zeros(xv.raw_dim());
                    gx.slice_mut(s![.., t - len.., .., ..]).assign(&g);
                    acc(&mut grads, *x, gx);
                }
                Op::CausalShift { x, dilation } => {
                    let xv = self.value(*x);
                    let t_in = xv.shape()[1];
                    let out_len = g.shape()[1];
                    let offset = t_in - out_len;
                    let mut gx = Tensor::zeros(xv.raw_dim());
                    for j in 0..out_len {
                        let src = offset + j;
                        if src >= *dilation {
                            let mut dst = gx.slice_mut(s![.., src - dilation, .., ..]);
                            dst += &g.slice(s![.., j, .., ..]);
                        }
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::NodeMixConst { x, mat } => {
                    let shape = g.shape().to_vec();
                    let gy = nodes_first(&g);
                    let gx = nodes_back(mat.apply_transposed(gy.view()), &shape);
                    acc(&mut grads, *x, gx);
                }
                Op::NodeMix { x, mat } => {
                    let shape = g.shape().to_vec();
                    let gy = nodes_first(&g);
                    let xf = nodes_first(self.value(*x));
                    let m = self.value(*mat).view().into_dimensionality::<Ix2>().unwrap();
                    let gx = nodes_back(m.t().dot(&gy), &shape);
                    let gm = gy.dot(&xf.t()).into_dyn();
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *mat, gm);
                }
                Op::MatMulNt(a, b) => {
                    let av = self.value(*a).view().into_dimensionality::<Ix2>().unwrap();
                    let bv = self.value(*b).view().into_dimensionality::<Ix2>().unwrap();
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    acc(&mut grads, *a, g2.dot(&bv).into_dyn());
                    acc(&mut grads, *b, g2.t().dot(&av).into_dyn());
                }
                Op::SoftmaxRows(x) => {
                    let y = node.value.view().into_dimensionality::<Ix2>().unwrap();
                    let mut gx = g.into_dimensionality::<Ix2>().unwrap();
                    for (mut grow, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = grow.dot(&yrow);
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|gg, &yy| *gg = yy * (*gg - dot));
                    }
                    acc(&mut grads, *x, gx.into_dyn());
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    acc(&mut grads, *x, g.into_shape_with_order(IxDyn(&shape)).unwrap());
                }
                Op::Permute { x, axes } => {
                    let mut inverse = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let gx = g
                        .permuted_axes(IxDyn(&inverse))
                        .as_standard_layout()
                        .into_owned();
                    acc(&mut grads, *x, gx);
                }
                Op::ConcatLast(parts) => {
                    let axis = Axis(g.ndim() - 1);
                    let mut start = 0;
                    for p in parts {
                        let w = *self.value(*p).shape().last().unwrap();
                        let gp = g
                            .slice_axis(axis, ndarray::Slice::from(start..start + w))
                            .to_owned();
                        acc(&mut grads, *p, gp);
                        start += w;
                    }
                }
                Op::MeanAxis { x, axis } => {
                    let xv = self.value(*x);
                    let n = xv.shape()[*axis] as f64;
                    let expanded = g.insert_axis(Axis(*axis));
                    let gx = expanded
                        .broadcast(xv.raw_dim())
                        .expect("broadcast over reduced axis")
                        .mapv(|v| v / n);
                    acc(&mut grads, *x, gx);
                }
                Op::Mae { pred, target } => {
                    let pv = self.value(*pred);
                    let scale = g.iter().next().copied().unwrap_or(0.0) / pv.len().max(1) as f64;
                    let mut gp = Tensor::zeros(pv.raw_dim());
                    Zip::from(&mut gp).and(pv).and(target.as_ref()).for_each(|gg, &p, &t| {
                        let d = p - t;
                        *gg = if d > 0.0 {
                            scale
                        } else if d < 0.0 {
                            -scale
                        } else {
                            0.0
                        };
                    });
                    acc(&mut grads, *pred, gp);
                }
                Op::GraphCl { p1, p2, z1, z2, tau } => {
                    let upstream = g.iter().next().copied().unwrap_or(0.0);
                    let view = |v: Var| self.value(v).view().into_dimensionality::<Ix2>().unwrap();
                    let parts = graphcl_parts(view(*p1), view(*p2), view(*z1), view(*z2));
                    let (_, dsym) = graphcl_from_sym(&parts.sym, *tau);
                    // sym = 0.5 * p1n z2nᵀ + 0.5 * p2n z1nᵀ
                    let d = dsym * (0.5 * upstream);
                    let gp1n = d.dot(&parts.z2n);
                    let gz2n = d.t().dot(&parts.p1n);
                    let gp2n = d.dot(&parts.z1n);
                    let gz1n = d.t().dot(&parts.p2n);
                    let [n0, n1, n2, n3] = &parts.norms;
                    acc(&mut grads, *p1, normalize_rows_backward(&gp1n, &parts.p1n, n0).into_dyn());
                    acc(&mut grads, *p2, normalize_rows_backward(&gp2n, &parts.p2n, n1).into_dyn());
                    acc(&mut grads, *z1, normalize_rows_backward(&gz1n, &parts.z1n, n2).into_dyn());
                    acc(&mut grads, *z2, normalize_rows_backward(&gz2n, &parts.z2n, n3).into_dyn());
                }
            }
        }
        Gradients { grads }
    }
}
