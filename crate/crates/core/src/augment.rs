//! Spatio-temporal augmentations producing contrastive views.

use std::collections::VecDeque;
use std::fmt;

use ndarray::{s, Array2, Array4, Axis};
use rand::seq::{index, IndexedRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, UrclError};

/// A batch of windows `B x M x |V| x C` together with the graph it lives on.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSample {
    pub window: Array4<f64>,
    pub adjacency: Array2<f64>,
    pub directed: bool,
}

impl GraphSample {
    pub fn new(window: Array4<f64>, adjacency: Array2<f64>, directed: bool) -> Result<Self> {
        let v = window.len_of(Axis(2));
        if adjacency.dim() != (v, v) {
            return Err(UrclError::contract(format!(
                "adjacency {:?} does not match {v} nodes",
                adjacency.dim()
            )));
        }
        if adjacency.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(UrclError::contract("adjacency must be finite and non-negative"));
        }
        if window.iter().any(|x| !x.is_finite()) {
            return Err(UrclError::contract("window must be finite"));
        }
        Ok(GraphSample {
            window,
            adjacency,
            directed,
        })
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn window_len(&self) -> usize {
        self.window.len_of(Axis(1))
    }

    /// Edges as `(i, j)` with positive weight; one entry per unordered pair
    /// when undirected.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        let n = self.node_count();
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i == j || self.adjacency[[i, j]] <= 0.0 {
                    continue;
                }
                if self.directed || i < j || self.adjacency[[j, i]] <= 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }

    fn zero_nodes(&mut self, nodes: &[usize]) {
        for &k in nodes {
            self.adjacency.row_mut(k).fill(0.0);
            self.adjacency.column_mut(k).fill(0.0);
            self.window.slice_mut(s![.., .., k, ..]).fill(0.0);
        }
    }

    /// Undirected neighbour lists over positive entries.
    fn neighbours(&self) -> Vec<Vec<usize>> {
        let n = self.node_count();
        let mut nb = vec![Vec::new(); n];
        for i in 0..n {
            for j in 0..n {
                if i != j && (self.adjacency[[i, j]] > 0.0 || self.adjacency[[j, i]] > 0.0) {
                    nb[i].push(j);
                }
            }
        }
        nb
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TimeShiftVariant {
    Slice,
    Warp,
    Flip,
}

/// Top-level augmentation families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AugmentationFamily {
    DropNodes,
    DropEdges,
    Subgraph,
    AddEdges,
    TimeShift,
}

pub const FAMILIES: [AugmentationFamily; 5] = [
    AugmentationFamily::DropNodes,
    AugmentationFamily::DropEdges,
    AugmentationFamily::Subgraph,
    AugmentationFamily::AddEdges,
    AugmentationFamily::TimeShift,
];

/// A concrete augmentation with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AugmentationKind {
    DropNodes { ratio: f64 },
    DropEdges { ratio: f64, threshold: f64 },
    Subgraph { coverage: f64 },
    AddEdges { ratio: f64, min_hops: usize },
    TimeShift { variant: TimeShiftVariant, slice_len: usize },
}

impl AugmentationKind {
    pub fn family(&self) -> AugmentationFamily {
        match self {
            AugmentationKind::DropNodes { .. } => AugmentationFamily::DropNodes,
            AugmentationKind::DropEdges { .. } => AugmentationFamily::DropEdges,
            AugmentationKind::Subgraph { .. } => AugmentationFamily::Subgraph,
            AugmentationKind::AddEdges { .. } => AugmentationFamily::AddEdges,
            AugmentationKind::TimeShift { .. } => AugmentationFamily::TimeShift,
        }
    }

    pub fn apply(&self, sample: &GraphSample, rng: &mut impl Rng) -> Result<GraphSample> {
        match *self {
            AugmentationKind::DropNodes { ratio } => drop_nodes(sample, ratio, rng),
            AugmentationKind::DropEdges { ratio, threshold } => drop_edges(sample, ratio, threshold, rng),
            AugmentationKind::Subgraph { coverage } => sample_subgraph(sample, coverage, rng),
            AugmentationKind::AddEdges { ratio, min_hops } => add_edges(sample, ratio, min_hops, rng),
            AugmentationKind::TimeShift { variant, slice_len } => time_shifting(sample, variant, slice_len, rng),
        }
    }
}

impl fmt::Display for AugmentationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentationKind::DropNodes { .. } => write!(f, "DN"),
            AugmentationKind::DropEdges { .. } => write!(f, "DE"),
            AugmentationKind::Subgraph { .. } => write!(f, "SG"),
            AugmentationKind::AddEdges { .. } => write!(f, "AE"),
            AugmentationKind::TimeShift { variant, .. } => match variant {
                TimeShiftVariant::Slice => write!(f, "TS_slice"),
                TimeShiftVariant::Warp => write!(f, "TS_warp"),
                TimeShiftVariant::Flip => write!(f, "TS_flip"),
            },
        }
    }
}

/// Parameters for every augmentation family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub drop_node_ratio: f64,
    pub drop_edge_ratio: f64,
    /// `None` means the 10th percentile of positive edge weights.
    pub drop_edge_threshold: Option<f64>,
    pub subgraph_coverage: f64,
    pub add_edge_ratio: f64,
    pub add_edge_min_hops: usize,
    /// `None` means `M / 2`.
    pub slice_len: Option<usize>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            drop_node_ratio: 0.1,
            drop_edge_ratio: 0.1,
            drop_edge_threshold: None,
            subgraph_coverage: 0.8,
            add_edge_ratio: 0.05,
            add_edge_min_hops: 3,
            slice_len: None,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self, window_len: usize) -> Result<()> {
        for (name, r) in [
            ("drop_node_ratio", self.drop_node_ratio),
            ("drop_edge_ratio", self.drop_edge_ratio),
            ("add_edge_ratio", self.add_edge_ratio),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(UrclError::config(format!("{name} must be in [0, 1), got {r}")));
            }
        }
        if !(self.subgraph_coverage > 0.0 && self.subgraph_coverage <= 1.0) {
            return Err(UrclError::config(format!(
                "subgraph_coverage must be in (0, 1], got {}",
                self.subgraph_coverage
            )));
        }
        if let Some(t) = self.drop_edge_threshold {
            if !(t >= 0.0) {
                return Err(UrclError::config("drop_edge_threshold must be >= 0"));
            }
        }
        let l = self.resolved_slice_len(window_len);
        if l < 2 || l > window_len {
            return Err(UrclError::config(format!(
                "slice length {l} must be in [2, {window_len}]"
            )));
        }
        Ok(())
    }

    pub fn resolved_slice_len(&self, window_len: usize) -> usize {
        self.slice_len.unwrap_or(window_len / 2)
    }

    /// Concrete kind for a family; `TimeShift` draws its sub-variant.
    pub fn kind_for(
        &self,
        family: AugmentationFamily,
        edge_threshold: f64,
        window_len: usize,
        rng: &mut impl Rng,
    ) -> AugmentationKind {
        match family {
            AugmentationFamily::DropNodes => AugmentationKind::DropNodes {
                ratio: self.drop_node_ratio,
            },
            AugmentationFamily::DropEdges => AugmentationKind::DropEdges {
                ratio: self.drop_edge_ratio,
                threshold: self.drop_edge_threshold.unwrap_or(edge_threshold),
            },
            AugmentationFamily::Subgraph => AugmentationKind::Subgraph {
                coverage: self.subgraph_coverage,
            },
            AugmentationFamily::AddEdges => AugmentationKind::AddEdges {
                ratio: self.add_edge_ratio,
                min_hops: self.add_edge_min_hops,
            },
            AugmentationFamily::TimeShift => {
                let variant = *[TimeShiftVariant::Slice, TimeShiftVariant::Warp, TimeShiftVariant::Flip]
                    .choose(rng)
                    .expect("non-empty");
                AugmentationKind::TimeShift {
                    variant,
                    slice_len: self.resolved_slice_len(window_len),
                }
            }
        }
    }
}

/// 10th percentile (nearest rank) of the positive adjacency weights, 0 if none.
pub fn default_edge_threshold(adjacency: &Array2<f64>) -> f64 {
    let mut w: Vec<f64> = adjacency.iter().copied().filter(|w| *w > 0.0).collect();
    if w.is_empty() {
        return 0.0;
    }
    w.sort_by(f64::total_cmp);
    let rank = ((0.1 * w.len() as f64).ceil() as usize).max(1);
    w[rank - 1]
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(UrclError::contract(format!("ratio must be in [0, 1), got {ratio}")));
    }
    Ok(())
}

/// Masks `floor(ratio * |V|)` uniformly chosen nodes.
pub fn drop_nodes(sample: &GraphSample, ratio: f64, rng: &mut impl Rng) -> Result<GraphSample> {
    check_ratio(ratio)?;
    let n = sample.node_count();
    let k = (ratio * n as f64).floor() as usize;
    let mut out = sample.clone();
    let nodes = index::sample(rng, n, k).into_vec();
    out.zero_nodes(&nodes);
    Ok(out)
}

/// Samples `floor(ratio * |E|)` edges and removes those weaker than `threshold`.
pub fn drop_edges(sample: &GraphSample, ratio: f64, threshold: f64, rng: &mut impl Rng) -> Result<GraphSample> {
    check_ratio(ratio)?;
    if !(threshold >= 0.0) {
        return Err(UrclError::contract("edge threshold must be >= 0"));
    }
    let edges = sample.edge_list();
    let k = (ratio * edges.len() as f64).floor() as usize;
    let mut out = sample.clone();
    for e in index::sample(rng, edges.len(), k) {
        let (i, j) = edges[e];
        if sample.adjacency[[i, j]] < threshold {
            out.adjacency[[i, j]] = 0.0;
            if !sample.directed {
                out.adjacency[[j, i]] = 0.0;
            }
        }
    }
    Ok(out)
}

/// Random-walk node set of size `ceil(coverage * |V|)` (or the reachable
/// component if smaller).
pub fn random_walk_nodes(sample: &GraphSample, coverage: f64, rng: &mut impl Rng) -> Vec<bool> {
    let n = sample.node_count();
    let quota = ((coverage * n as f64).ceil() as usize).clamp(1, n);
    let nb = sample.neighbours();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(quota);
    let mut cur = rng.random_range(0..n);
    visited[cur] = true;
    order.push(cur);
    let mut stale = 0usize;
    while order.len() < quota {
        if nb[cur].is_empty() || stale > 4 * n {
            let frontier: Vec<usize> = order
                .iter()
                .copied()
                .filter(|&u| nb[u].iter().any(|&w| !visited[w]))
                .collect();
            if frontier.is_empty() {
                log::info!(
                    "subgraph walk reached {} of {quota} nodes; graph is disconnected",
                    order.len()
                );
                break;
            }
            cur = *frontier.choose(rng).expect("non-empty");
            stale = 0;
            continue;
        }
        cur = *nb[cur].choose(rng).expect("non-empty");
        if !visited[cur] {
            visited[cur] = true;
            order.push(cur);
            stale = 0;
        } else {
            stale += 1;
        }
    }
    visited
}

/// Keeps a random-walk subgraph and masks everything else.
pub fn sample_subgraph(sample: &GraphSample, coverage: f64, rng: &mut impl Rng) -> Result<GraphSample> {
    if !(coverage > 0.0 && coverage <= 1.0) {
        return Err(UrclError::contract(format!("coverage must be in (0, 1], got {coverage}")));
    }
    let keep = random_walk_nodes(sample, coverage, rng);
    let dropped: Vec<usize> = (0..keep.len()).filter(|&i| !keep[i]).collect();
    let mut out = sample.clone();
    out.zero_nodes(&dropped);
    Ok(out)
}

/// Undirected hop distances from every node; `usize::MAX` when unreachable.
pub fn hop_distances(sample: &GraphSample) -> Array2<usize> {
    let n = sample.node_count();
    let nb = sample.neighbours();
    let mut d = Array2::from_elem((n, n), usize::MAX);
    for src in 0..n {
        d[[src, src]] = 0;
        let mut q = VecDeque::from([src]);
        while let Some(u) = q.pop_front() {
            for &w in &nb[u] {
                if d[[src, w]] == usize::MAX {
                    d[[src, w]] = d[[src, u]] + 1;
                    q.push_back(w);
                }
            }
        }
    }
    d
}

/// Per-node feature vectors: mean of the window over batch and time, `|V| x C`.
pub fn node_features(window: &Array4<f64>) -> Array2<f64> {
    window
        .mean_axis(Axis(0))
        .and_then(|m| m.mean_axis(Axis(0)))
        .expect("non-empty window")
}

/// Links `floor(ratio * |V|)` distant node pairs, weighted by the dot product
/// of their feature vectors.
pub fn add_edges(sample: &GraphSample, ratio: f64, min_hops: usize, rng: &mut impl Rng) -> Result<GraphSample> {
    check_ratio(ratio)?;
    let n = sample.node_count();
    let k = (ratio * n as f64).floor() as usize;
    if k == 0 {
        return Ok(sample.clone());
    }
    let d = hop_distances(sample);
    let candidates: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
        .filter(|&(i, j)| d[[i, j]] >= min_hops)
        .collect();
    if candidates.is_empty() {
        log::info!("no node pair is at least {min_hops} hops apart; edges unchanged");
        return Ok(sample.clone());
    }
    let feats = node_features(&sample.window);
    let mut out = sample.clone();
    for c in index::sample(rng, candidates.len(), k.min(candidates.len())) {
        let (i, j) = candidates[c];
        // negative products would break non-negativity; they clip to no edge
        let w = feats.row(i).dot(&feats.row(j)).max(0.0);
        out.adjacency[[i, j]] = w;
        if !sample.directed {
            out.adjacency[[j, i]] = w;
        }
    }
    Ok(out)
}

/// Linear interpolation of `len_in` frames onto `len_out` evenly spaced points.
fn interpolate_time(src: ndarray::ArrayView3<f64>, len_out: usize) -> ndarray::Array3<f64> {
    let (l, v, c) = src.dim();
    let mut out = ndarray::Array3::zeros((len_out, v, c));
    for t in 0..len_out {
        let pos = if len_out == 1 {
            0.0
        } else {
            t as f64 * (l - 1) as f64 / (len_out - 1) as f64
        };
        let lo = (pos.floor() as usize).min(l - 1);
        let hi = (lo + 1).min(l - 1);
        let frac = pos - lo as f64;
        let mut dst = out.index_axis_mut(Axis(0), t);
        dst.assign(&src.index_axis(Axis(0), lo));
        if frac > 0.0 {
            dst.zip_mut_with(&src.index_axis(Axis(0), hi), |a, &b| *a += frac * (b - *a));
        }
    }
    out
}

/// Slice, warp or flip along the time axis; one random start per sample.
pub fn time_shifting(
    sample: &GraphSample,
    variant: TimeShiftVariant,
    slice_len: usize,
    rng: &mut impl Rng,
) -> Result<GraphSample> {
    let m = sample.window_len();
    let mut out = sample.clone();
    if variant == TimeShiftVariant::Flip {
        out.window.invert_axis(Axis(1));
        out.window = out.window.as_standard_layout().into_owned();
        return Ok(out);
    }
    if slice_len < 2 || slice_len > m {
        return Err(UrclError::contract(format!(
            "slice length {slice_len} outside [2, {m}]"
        )));
    }
    for (b, mut dst) in out.window.outer_iter_mut().enumerate() {
        let start = rng.random_range(0..=m - slice_len);
        let src = sample.window.slice(s![b, start..start + slice_len, .., ..]);
        match variant {
            TimeShiftVariant::Slice => {
                dst.slice_mut(s![..slice_len, .., ..]).assign(&src);
                let last = src.index_axis(Axis(0), slice_len - 1);
                for t in slice_len..m {
                    dst.index_axis_mut(Axis(0), t).assign(&last);
                }
            }
            TimeShiftVariant::Warp => dst.assign(&interpolate_time(src, m)),
            TimeShiftVariant::Flip => unreachable!(),
        }
    }
    Ok(out)
}

/// Two views from distinct, uniformly drawn augmentation families.
pub fn random_view_pair(
    sample: &GraphSample,
    cfg: &AugmentConfig,
    edge_threshold: f64,
    rng: &mut impl Rng,
) -> Result<(GraphSample, GraphSample, [AugmentationKind; 2])> {
    let picks = index::sample(rng, FAMILIES.len(), 2);
    let m = sample.window_len();
    let k1 = cfg.kind_for(FAMILIES[picks.index(0)], edge_threshold, m, rng);
    let k2 = cfg.kind_for(FAMILIES[picks.index(1)], edge_threshold, m, rng);
    let v1 = k1.apply(sample, rng)?;
    let v2 = k2.apply(sample, rng)?;
    Ok((v1, v2, [k1, k2]))
}
