//! Sensor-network datasets: ingestion, min-max scaling, stream segmentation
//! and sliding-window batching.

use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Result, UrclError};

/// Weighted sensor graph with a dense adjacency matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorNetwork {
    adjacency: Array2<f64>,
    directed: bool,
}

impl SensorNetwork {
    pub fn new(adjacency: Array2<f64>, directed: bool) -> Result<Self> {
        let (r, c) = adjacency.dim();
        if r != c || r == 0 {
            return Err(UrclError::Schema(format!(
                "adjacency must be square and non-empty, got {r}x{c}"
            )));
        }
        if adjacency.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(UrclError::Domain(
                "adjacency entries must be finite and non-negative".into(),
            ));
        }
        if adjacency.diag().iter().any(|w| *w != 0.0) {
            return Err(UrclError::Schema("adjacency diagonal must be zero".into()));
        }
        if !directed && adjacency != adjacency.t() {
            return Err(UrclError::Schema(
                "undirected network requires a symmetric adjacency".into(),
            ));
        }
        Ok(SensorNetwork { adjacency, directed })
    }

    pub fn node_count(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn adjacency(&self) -> &Array2<f64> {
        &self.adjacency
    }

    pub fn directed(&self) -> bool {
        self.directed
    }

    /// Positive off-diagonal entries as `(src, dst, weight)`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        self.adjacency
            .indexed_iter()
            .filter(|(_, w)| **w > 0.0)
            .map(|((i, j), w)| (i, j, *w))
            .collect()
    }
}

/// Builds the adjacency with weight `1 / distance` for each connected pair.
/// Undirected networks get both orientations of every edge.
pub fn build_adjacency(
    edges: &[(usize, usize, f64)],
    node_count: usize,
    directed: bool,
) -> Result<SensorNetwork> {
    if node_count == 0 {
        return Err(UrclError::Schema("node_count must be positive".into()));
    }
    let mut adj = Array2::<f64>::zeros((node_count, node_count));
    for &(src, dst, dis) in edges {
        if src >= node_count || dst >= node_count {
            return Err(UrclError::Schema(format!(
                "edge ({src},{dst}) references a node outside 0..{node_count}"
            )));
        }
        if src == dst {
            return Err(UrclError::Schema(format!("self-loop on node {src}")));
        }
        if !(dis.is_finite() && dis > 0.0) {
            return Err(UrclError::Domain(format!(
                "edge ({src},{dst}) has non-positive distance {dis}"
            )));
        }
        adj[[src, dst]] = 1.0 / dis;
        if !directed {
            adj[[dst, src]] = 1.0 / dis;
        }
    }
    SensorNetwork::new(adj, directed)
}

/// Observations `T x |V| x C` on a regular time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSeries {
    pub values: Array3<f64>,
    /// `true` where a value was observed; imputed entries are `false`.
    pub mask: Array3<bool>,
    pub interval_minutes: f64,
    pub start_slot_index: i64,
}

impl ObservationSeries {
    pub fn new(values: Array3<f64>, interval_minutes: f64) -> Self {
        let mask = Array3::from_elem(values.raw_dim(), true);
        ObservationSeries {
            values,
            mask,
            interval_minutes,
            start_slot_index: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node_count(&self) -> usize {
        self.values.len_of(Axis(1))
    }

    pub fn channels(&self) -> usize {
        self.values.len_of(Axis(2))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub node_count: usize,
    pub channels: usize,
    pub interval_minutes: f64,
    pub directed: bool,
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| UrclError::Ingest(format!("cannot read {}: {e}", path.display())))
}

fn parse_cell<T: std::str::FromStr>(file: &str, row: usize, column: usize, cell: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    cell.trim().parse::<T>().map_err(|e| UrclError::Parse {
        file: file.to_string(),
        row,
        column,
        message: format!("{e} (cell {cell:?})"),
    })
}

/// Loads `meta.json`, `graph.csv` and `observations.csv` from `root`.
///
/// Row and column numbers in parse errors are 1-based and count the header
/// line. Missing cells are imputed with 0 and cleared in the mask.
pub fn load_dataset(root: &Path) -> Result<(SensorNetwork, ObservationSeries)> {
    let meta_path = root.join("meta.json");
    let meta: DatasetMeta = serde_json::from_str(&read_file(&meta_path)?)
        .map_err(|e| UrclError::Ingest(format!("{}: {e}", meta_path.display())))?;
    if meta.node_count == 0 || meta.channels == 0 || !(meta.interval_minutes > 0.0) {
        return Err(UrclError::Schema(
            "meta.json requires positive node_count, channels and interval_minutes".into(),
        ));
    }

    let graph_text = read_file(&root.join("graph.csv"))?;
    let mut lines = graph_text.lines();
    match lines.next().map(str::trim) {
        Some("src,dst,distance") => {}
        other => {
            return Err(UrclError::Schema(format!(
                "graph.csv header must be `src,dst,distance`, found {other:?}"
            )))
        }
    }
    let mut edges = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(UrclError::Parse {
                file: "graph.csv".into(),
                row,
                column: cells.len().min(3) + 1,
                message: format!("expected 3 cells, found {}", cells.len()),
            });
        }
        let src: usize = parse_cell("graph.csv", row, 1, cells[0])?;
        let dst: usize = parse_cell("graph.csv", row, 2, cells[1])?;
        let dis: f64 = parse_cell("graph.csv", row, 3, cells[2])?;
        edges.push((src, dst, dis));
    }
    let network = build_adjacency(&edges, meta.node_count, meta.directed)?;

    let obs_text = read_file(&root.join("observations.csv"))?;
    let mut lines = obs_text.lines();
    let header = lines
        .next()
        .ok_or_else(|| UrclError::Ingest("observations.csv is empty".into()))?;
    let (nodes, channels) = parse_observation_header(header)?;
    if nodes != meta.node_count {
        return Err(UrclError::Schema(format!(
            "observations.csv has {nodes} nodes but meta.json declares {}",
            meta.node_count
        )));
    }
    if channels != meta.channels {
        return Err(UrclError::Schema(format!(
            "observations.csv has {channels} channels but meta.json declares {}",
            meta.channels
        )));
    }

    let width = nodes * channels;
    let mut flat = Vec::new();
    let mut mask = Vec::new();
    let mut first_t: Option<i64> = None;
    let mut rows = 0usize;
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width + 1 {
            return Err(UrclError::Parse {
                file: "observations.csv".into(),
                row,
                column: cells.len().min(width + 1),
                message: format!("expected {} cells, found {}", width + 1, cells.len()),
            });
        }
        let t: i64 = parse_cell("observations.csv", row, 1, cells[0])?;
        let expected = first_t.map(|f| f + rows as i64);
        match expected {
            None => first_t = Some(t),
            Some(e) if e != t => {
                return Err(UrclError::Schema(format!(
                    "observations.csv row {row}: slot {t} breaks the contiguous time axis (expected {e})"
                )))
            }
            _ => {}
        }
        for (c, cell) in cells[1..].iter().enumerate() {
            if cell.trim().is_empty() {
                flat.push(0.0);
                mask.push(false);
            } else {
                let v: f64 = parse_cell("observations.csv", row, c + 2, cell)?;
                if !v.is_finite() {
                    return Err(UrclError::Parse {
                        file: "observations.csv".into(),
                        row,
                        column: c + 2,
                        message: "non-finite value".into(),
                    });
                }
                flat.push(v);
                mask.push(true);
            }
        }
        rows += 1;
    }
    let values = Array3::from_shape_vec((rows, nodes, channels), flat)
        .expect("row width checked above");
    let mask = Array3::from_shape_vec((rows, nodes, channels), mask).expect("same shape");
    let series = ObservationSeries {
        values,
        mask,
        interval_minutes: meta.interval_minutes,
        start_slot_index: first_t.unwrap_or(0),
    };
    Ok((network, series))
}

fn parse_observation_header(header: &str) -> Result<(usize, usize)> {
    let cells: Vec<&str> = header.trim().split(',').collect();
    if cells.first().map(|c| c.trim()) != Some("t") {
        return Err(UrclError::Schema(
            "observations.csv header must start with `t`".into(),
        ));
    }
    let mut pairs = Vec::with_capacity(cells.len() - 1);
    for (k, cell) in cells[1..].iter().enumerate() {
        let parsed = cell
            .trim()
            .strip_prefix('n')
            .and_then(|rest| rest.split_once("_c"))
            .and_then(|(n, c)| Some((n.parse::<usize>().ok()?, c.parse::<usize>().ok()?)));
        match parsed {
            Some(p) => pairs.push(p),
            None => {
                return Err(UrclError::Parse {
                    file: "observations.csv".into(),
                    row: 1,
                    column: k + 2,
                    message: format!("bad column name {cell:?}"),
                })
            }
        }
    }
    let channels = pairs.iter().take_while(|(n, _)| *n == 0).count();
    if channels == 0 || pairs.len() % channels != 0 {
        return Err(UrclError::Schema("observations.csv header is ragged".into()));
    }
    let nodes = pairs.len() / channels;
    for (k, &(n, c)) in pairs.iter().enumerate() {
        if n != k / channels || c != k % channels {
            return Err(UrclError::Schema(format!(
                "observations.csv column {} should be n{}_c{}",
                k + 2,
                k / channels,
                k % channels
            )));
        }
    }
    Ok((nodes, channels))
}

/// Writes a dataset directory readable by [`load_dataset`].
pub fn write_dataset(root: &Path, network: &SensorNetwork, series: &ObservationSeries) -> Result<()> {
    fs::create_dir_all(root)?;
    let meta = DatasetMeta {
        node_count: network.node_count(),
        channels: series.channels(),
        interval_minutes: series.interval_minutes,
        directed: network.directed(),
    };
    fs::write(
        root.join("meta.json"),
        serde_json::to_string_pretty(&meta).expect("plain struct"),
    )?;

    let mut graph = String::from("src,dst,distance\n");
    for (i, j, w) in network.edges() {
        if !network.directed() && j < i {
            continue;
        }
        graph.push_str(&format!("{i},{j},{}\n", 1.0 / w));
    }
    fs::write(root.join("graph.csv"), graph)?;

    let (t_len, nodes, channels) = series.values.dim();
    let mut out = String::from("t");
    for n in 0..nodes {
        for c in 0..channels {
            out.push_str(&format!(",n{n}_c{c}"));
        }
    }
    out.push('\n');
    for t in 0..t_len {
        out.push_str(&(series.start_slot_index + t as i64).to_string());
        for n in 0..nodes {
            for c in 0..channels {
                out.push(',');
                if series.mask[[t, n, c]] {
                    out.push_str(&series.values[[t, n, c]].to_string());
                }
            }
        }
        out.push('\n');
    }
    fs::write(root.join("observations.csv"), out)?;
    Ok(())
}

/// Per-channel min/max used for `[0, 1]` scaling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub per_channel_min: Vec<f64>,
    pub per_channel_max: Vec<f64>,
}

impl NormalizationStats {
    /// Fits on the observed entries of `range` (slots).
    pub fn fit(series: &ObservationSeries, range: Range<usize>) -> Self {
        let channels = series.channels();
        let mut min = vec![f64::INFINITY; channels];
        let mut max = vec![f64::NEG_INFINITY; channels];
        let vals = series.values.slice(s![range.clone(), .., ..]);
        let mask = series.mask.slice(s![range, .., ..]);
        for ((idx, &v), &seen) in vals.indexed_iter().zip(mask.iter()) {
            if seen {
                let c = idx.2;
                min[c] = min[c].min(v);
                max[c] = max[c].max(v);
            }
        }
        for c in 0..channels {
            if !min[c].is_finite() {
                min[c] = 0.0;
                max[c] = 0.0;
            }
        }
        NormalizationStats {
            per_channel_min: min,
            per_channel_max: max,
        }
    }

    fn span(&self, c: usize) -> f64 {
        self.per_channel_max[c] - self.per_channel_min[c]
    }

    pub fn normalize_value(&self, v: f64, c: usize) -> f64 {
        let span = self.span(c);
        if span > 0.0 {
            (v - self.per_channel_min[c]) / span
        } else {
            0.0
        }
    }

    /// Inverse of [`normalize_value`](Self::normalize_value); constant
    /// channels map back to their single value.
    pub fn denormalize_value(&self, v: f64, c: usize) -> f64 {
        v * self.span(c) + self.per_channel_min[c]
    }
}

/// Scales every channel with `stats`, fitting them on `fit_range` first when
/// absent. Values outside the fitted range are not clipped.
pub fn min_max_normalize(
    series: &ObservationSeries,
    stats: Option<&NormalizationStats>,
    fit_range: Range<usize>,
) -> (ObservationSeries, NormalizationStats) {
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormalizationStats::fit(series, fit_range),
    };
    let mut out = series.clone();
    for ((_, _, c), v) in out.values.indexed_iter_mut() {
        *v = stats.normalize_value(*v, c);
    }
    (out, stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SegmentRole {
    Base,
    Incremental(usize),
}

impl fmt::Display for SegmentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SegmentRole::Base => write!(f, "base"),
            SegmentRole::Incremental(k) => write!(f, "incremental_{k}"),
        }
    }
}

/// A contiguous slice of the stream with temporal train/val/test ranges.
/// All ranges are absolute slot indices into the full series.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamSegment {
    pub role: SegmentRole,
    pub slots: Range<usize>,
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl StreamSegment {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

pub const TRAIN_FRACTION: f64 = 0.7;
pub const VAL_FRACTION: f64 = 0.1;

/// Splits `total_slots` into a base segment of `floor(base_fraction * T)`
/// slots and `n_incremental` equal parts (the last absorbs the remainder),
/// each divided 70/10/20 into train/val/test. Every sub-range must hold at
/// least `min_window` slots.
pub fn split_stream(
    total_slots: usize,
    base_fraction: f64,
    n_incremental: usize,
    min_window: usize,
) -> Result<Vec<StreamSegment>> {
    if !(base_fraction > 0.0 && base_fraction < 1.0) {
        return Err(UrclError::config(format!(
            "base_fraction must lie in (0,1), got {base_fraction}"
        )));
    }
    if n_incremental == 0 {
        return Err(UrclError::config("n_incremental must be at least 1"));
    }
    let base_len = (base_fraction * total_slots as f64).floor() as usize;
    let rest = total_slots - base_len;
    let part = rest / n_incremental;

    let mut bounds = vec![(SegmentRole::Base, 0..base_len)];
    let mut start = base_len;
    for k in 1..=n_incremental {
        let end = if k == n_incremental { total_slots } else { start + part };
        bounds.push((SegmentRole::Incremental(k), start..end));
        start = end;
    }

    bounds
        .into_iter()
        .map(|(role, slots)| {
            let len = slots.len();
            let train_len = (TRAIN_FRACTION * len as f64).floor() as usize;
            let val_len = (VAL_FRACTION * len as f64).floor() as usize;
            let train = slots.start..slots.start + train_len;
            let val = train.end..train.end + val_len;
            let test = val.end..slots.end;
            for (name, r) in [("train", &train), ("val", &val), ("test", &test)] {
                if r.len() < min_window.max(1) {
                    return Err(UrclError::config(format!(
                        "{role} {name} split has {} slots, fewer than one window ({min_window})",
                        r.len()
                    )));
                }
            }
            Ok(StreamSegment {
                role,
                slots,
                train,
                val,
                test,
            })
        })
        .collect()
}

/// Inputs `B x M x |V| x C`, targets `B x N x |V| x 1` (channel 0).
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub inputs: Array4<f64>,
    pub targets: Array4<f64>,
    /// Absolute slot of each window's first input step.
    pub origin_slots: Vec<usize>,
}

impl WindowBatch {
    pub fn batch_size(&self) -> usize {
        self.inputs.len_of(Axis(0))
    }

    pub fn from_windows(inputs: &[ArrayView3<f64>], targets: &[ArrayView3<f64>], origins: Vec<usize>) -> Self {
        let stack = |xs: &[ArrayView3<f64>]| {
            ndarray::stack(Axis(0), xs).expect("windows share a shape")
        };
        WindowBatch {
            inputs: stack(inputs),
            targets: stack(targets),
            origin_slots: origins,
        }
    }

    /// Concatenates batches along the batch axis.
    pub fn concat(batches: &[WindowBatch]) -> Self {
        let inputs: Vec<_> = batches.iter().map(|b| b.inputs.view()).collect();
        let targets: Vec<_> = batches.iter().map(|b| b.targets.view()).collect();
        WindowBatch {
            inputs: ndarray::concatenate(Axis(0), &inputs).expect("matching shapes"),
            targets: ndarray::concatenate(Axis(0), &targets).expect("matching shapes"),
            origin_slots: batches.iter().flat_map(|b| b.origin_slots.clone()).collect(),
        }
    }
}

/// Number of stride-1 windows of `input_len + output_len` slots in `range`.
pub fn window_count(range: &Range<usize>, input_len: usize, output_len: usize) -> usize {
    (range.len() + 1).saturating_sub(input_len + output_len)
}

/// Sequential stride-1 sliding windows over a slot range, in batches.
pub struct WindowIter<'a> {
    series: &'a ObservationSeries,
    next_origin: usize,
    last_origin_exclusive: usize,
    input_len: usize,
    output_len: usize,
    batch_size: usize,
}

impl Iterator for WindowIter<'_> {
    type Item = WindowBatch;

    fn next(&mut self) -> Option<WindowBatch> {
        if self.next_origin >= self.last_origin_exclusive {
            return None;
        }
        let end = (self.next_origin + self.batch_size).min(self.last_origin_exclusive);
        let (m, n) = (self.input_len, self.output_len);
        let vals = &self.series.values;
        let origins: Vec<usize> = (self.next_origin..end).collect();
        let inputs: Vec<_> = origins.iter().map(|&o| vals.slice(s![o..o + m, .., ..])).collect();
        let targets: Vec<_> = origins
            .iter()
            .map(|&o| vals.slice(s![o + m..o + m + n, .., 0..1]))
            .collect();
        self.next_origin = end;
        Some(WindowBatch::from_windows(&inputs, &targets, origins))
    }
}

pub fn make_windows(
    series: &ObservationSeries,
    range: Range<usize>,
    input_len: usize,
    output_len: usize,
    batch_size: usize,
) -> WindowIter<'_> {
    assert!(input_len >= 1 && output_len >= 1 && batch_size >= 1);
    let range = range.start..range.end.min(series.len());
    let count = window_count(&range, input_len, output_len);
    WindowIter {
        series,
        next_origin: range.start,
        last_origin_exclusive: range.start + count,
        input_len,
        output_len,
        batch_size,
    }
}
