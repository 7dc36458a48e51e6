//! Replay buffer, interference-ranked retrieval and mixup fusion.

use std::collections::{HashMap, VecDeque};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array3, Array4, Axis};
use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::data::WindowBatch;
use crate::error::{Result, UrclError};
use crate::model::{GraphSupports, ModelState};
use crate::tape::Tape;

/// One raw (pre-mixup) training pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayItem {
    /// `M x |V| x C`
    pub input_window: Array3<f64>,
    /// `N x |V| x C_out`
    pub target: Array3<f64>,
    pub insert_counter: u64,
}

/// Bounded FIFO store of past training windows.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    items: VecDeque<ReplayItem>,
    capacity: usize,
    next_counter: u64,
}

pub const BUFFER_MAGIC: &str = "URCL-BUF-v1";

impl ReplayBuffer {
    /// A capacity of 0 gives a buffer that never retains anything.
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            items: VecDeque::with_capacity(capacity.min(4096)),
            capacity,
            next_counter: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> impl ExactSizeIterator<Item = &ReplayItem> {
        self.items.iter()
    }

    pub fn get(&self, i: usize) -> Option<&ReplayItem> {
        self.items.get(i)
    }

    /// Total insertions so far, including evicted items.
    pub fn inserted(&self) -> u64 {
        self.next_counter
    }

    /// Appends one pair, evicting the oldest item beyond capacity.
    pub fn push(&mut self, input_window: Array3<f64>, target: Array3<f64>) -> Result<()> {
        if let Some(first) = self.items.front() {
            if first.input_window.dim() != input_window.dim() || first.target.dim() != target.dim() {
                return Err(UrclError::contract(format!(
                    "replay item shape {:?}/{:?} does not match buffered {:?}/{:?}",
                    input_window.dim(),
                    target.dim(),
                    first.input_window.dim(),
                    first.target.dim()
                )));
            }
        }
        let insert_counter = self.next_counter;
        self.next_counter += 1;
        if self.capacity == 0 {
            return Ok(());
        }
        self.items.push_back(ReplayItem {
            input_window,
            target,
            insert_counter,
        });
        while self.items.len() > self.capacity {
            self.items.pop_front();
        }
        Ok(())
    }

    /// Stores every window/target pair of `batch` in batch order.
    pub fn insert_batch(&mut self, batch: &WindowBatch) -> Result<()> {
        for (x, y) in batch.inputs.outer_iter().zip(batch.targets.outer_iter()) {
            self.push(x.to_owned(), y.to_owned())?;
        }
        Ok(())
    }

    /// Stacks the selected items into a batch (origin slots are not tracked
    /// for replayed items and are reported as insert counters).
    pub fn gather(&self, indices: &[usize]) -> Option<WindowBatch> {
        if indices.is_empty() {
            return None;
        }
        let inputs: Vec<_> = indices.iter().map(|&i| self.items[i].input_window.view()).collect();
        let targets: Vec<_> = indices.iter().map(|&i| self.items[i].target.view()).collect();
        let origins = indices
            .iter()
            .map(|&i| self.items[i].insert_counter as usize)
            .collect();
        Some(WindowBatch::from_windows(&inputs, &targets, origins))
    }

    /// Writes the versioned binary checkpoint: magic line, a header line with
    /// `capacity next_counter count m v c n c_out`, then per item the counter
    /// and the little-endian `f64` input and target payloads.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{BUFFER_MAGIC}")?;
        let (m, v, c) = self
            .items
            .front()
            .map(|i| i.input_window.dim())
            .unwrap_or((0, 0, 0));
        let (n, _, co) = self
            .items
            .front()
            .map(|i| i.target.dim())
            .unwrap_or((0, 0, 0));
        writeln!(
            w,
            "{} {} {} {m} {v} {c} {n} {co}",
            self.capacity,
            self.next_counter,
            self.items.len()
        )?;
        for item in &self.items {
            w.write_all(&item.insert_counter.to_le_bytes())?;
            for x in item.input_window.iter().chain(item.target.iter()) {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bad = |message: &str| UrclError::Checkpoint {
            path: path.to_path_buf(),
            message: message.to_string(),
        };
        let mut r = BufReader::new(File::open(path)?);
        let read_line = |r: &mut BufReader<File>| -> Result<String> {
            let mut bytes = Vec::new();
            let mut b = [0u8; 1];
            loop {
                r.read_exact(&mut b)?;
                if b[0] == b'\n' {
                    break;
                }
                bytes.push(b[0]);
                if bytes.len() > 256 {
                    return Err(bad("header line too long"));
                }
            }
            String::from_utf8(bytes).map_err(|_| bad("header is not UTF-8"))
        };
        if read_line(&mut r)? != BUFFER_MAGIC {
            return Err(bad("missing URCL-BUF-v1 header"));
        }
        let header = read_line(&mut r)?;
        let nums: Vec<u64> = header
            .split_whitespace()
            .map(|t| t.parse::<u64>().map_err(|_| bad("bad header field")))
            .collect::<Result<_>>()?;
        let [capacity, next_counter, count, m, v, c, n, co] = nums[..] else {
            return Err(bad("header needs 8 fields"));
        };
        let (m, v, c, n, co) = (m as usize, v as usize, c as usize, n as usize, co as usize);
        let mut items = VecDeque::with_capacity(count as usize);
        let read_f64s = |r: &mut BufReader<File>, len: usize| -> Result<Vec<f64>> {
            let mut buf = vec![0u8; len * 8];
            r.read_exact(&mut buf)?;
            Ok(buf
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect())
        };
        for _ in 0..count {
            let mut cb = [0u8; 8];
            r.read_exact(&mut cb)?;
            let insert_counter = u64::from_le_bytes(cb);
            let x = read_f64s(&mut r, m * v * c)?;
            let y = read_f64s(&mut r, n * v * co)?;
            items.push_back(ReplayItem {
                input_window: Array3::from_shape_vec((m, v, c), x).expect("sized read"),
                target: Array3::from_shape_vec((n, v, co), y).expect("sized read"),
                insert_counter,
            });
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after the last item"));
        }
        Ok(ReplayBuffer {
            items,
            capacity: capacity as usize,
            next_counter,
        })
    }
}

/// Mean absolute error of `model` on `batch` and its gradient.
fn mae_gradient(
    model: &ModelState,
    batch: &WindowBatch,
    graph: &GraphSupports,
) -> Result<crate::model::ParamSet> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let (pred, _) = model.forecast_on_tape(&mut tape, &bound, &batch.inputs, graph)?;
    let loss = tape.mae(pred, batch.targets.clone().into_dyn());
    let grads = tape.backward(loss);
    Ok(bound.gradients(&tape, &grads))
}

/// One gradient-descent step on the MAE sampling loss, applied to a copy:
/// `θ' = θ − lr · ∇θ MAE(f_θ(batch))`. The input model is untouched.
pub fn virtual_update(
    model: &ModelState,
    batch: &WindowBatch,
    graph: &GraphSupports,
    lr: f64,
) -> Result<ModelState> {
    let grads = mae_gradient(model, batch, graph)?;
    if !grads.all_finite() {
        return Err(UrclError::Numerical(
            "non-finite gradient in the virtual update".into(),
        ));
    }
    let mut next = model.clone();
    next.params.sgd_step(&grads, lr);
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterferenceScore {
    pub item_index: usize,
    pub insert_counter: u64,
    pub loss_before: f64,
    pub loss_after: f64,
    pub delta: f64,
}

impl InterferenceScore {
    pub fn new(item_index: usize, insert_counter: u64, loss_before: f64, loss_after: f64) -> Self {
        InterferenceScore {
            item_index,
            insert_counter,
            loss_before,
            loss_after,
            delta: loss_after - loss_before,
        }
    }
}

/// Indices of the first occurrence of each distinct item, and for every item
/// the position of its representative in that list.
fn distinct_items(buffer: &ReplayBuffer) -> (Vec<usize>, Vec<usize>) {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut reps = Vec::new();
    let mut slot = Vec::with_capacity(buffer.len());
    for (i, item) in buffer.items().enumerate() {
        let key: Vec<u64> = item
            .input_window
            .iter()
            .chain(item.target.iter())
            .map(|v| v.to_bits())
            .collect();
        let next = reps.len();
        let k = *seen.entry(key).or_insert(next);
        if k == next {
            reps.push(i);
        }
        slot.push(k);
    }
    (reps, slot)
}

/// Per-item MAE of `model` over the whole buffer, evaluated in chunks.
/// Identical items (the same window re-inserted in a later epoch) are
/// evaluated once.
pub fn per_item_losses(
    buffer: &ReplayBuffer,
    model: &ModelState,
    graph: &GraphSupports,
    chunk: usize,
) -> Result<Vec<f64>> {
    let (reps, slot) = distinct_items(buffer);
    let mut distinct = Vec::with_capacity(reps.len());
    for part in reps.chunks(chunk.max(1)) {
        let batch = buffer.gather(part).expect("non-empty chunk");
        let pred = model.predict(&batch.inputs, graph, part.len())?;
        for (p, t) in pred.outer_iter().zip(batch.targets.outer_iter()) {
            let n = p.len() as f64;
            let err: f64 = p.iter().zip(t.iter()).map(|(a, b)| (a - b).abs()).sum();
            distinct.push(err / n);
        }
    }
    Ok(slot.into_iter().map(|k| distinct[k]).collect())
}

/// Sorts scores by `delta` descending, older items first on ties.
pub fn sort_scores(scores: &mut [InterferenceScore]) {
    scores.sort_by(|a, b| {
        b.delta
            .total_cmp(&a.delta)
            .then(a.insert_counter.cmp(&b.insert_counter))
    });
}

/// Loss increase of every buffered item between `model` and `model_virtual`.
pub fn interference_rank(
    buffer: &ReplayBuffer,
    model: &ModelState,
    model_virtual: &ModelState,
    graph: &GraphSupports,
) -> Result<Vec<InterferenceScore>> {
    if buffer.is_empty() {
        return Ok(Vec::new());
    }
    let before = per_item_losses(buffer, model, graph, EVAL_CHUNK)?;
    let after = per_item_losses(buffer, model_virtual, graph, EVAL_CHUNK)?;
    let mut scores: Vec<_> = buffer
        .items()
        .enumerate()
        .map(|(i, item)| InterferenceScore::new(i, item.insert_counter, before[i], after[i]))
        .collect();
    sort_scores(&mut scores);
    Ok(scores)
}

const EVAL_CHUNK: usize = 64;

/// Pearson correlation of two equally long vectors; 0 when either is constant.
pub fn pearson_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(UrclError::contract(format!(
            "pearson_similarity on lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(UrclError::contract("pearson_similarity needs at least 2 values"));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Retrieval sizes: `pool` candidates by interference, `sample` kept by similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RmirSizes {
    pub pool: usize,
    pub sample: usize,
}

/// Outcome of a retrieval: chosen buffer indices in selection order.
#[derive(Debug, Clone, PartialEq)]
pub struct RmirSelection {
    pub indices: Vec<usize>,
    /// `false` when the interference step failed and a random draw was used.
    pub ranked: bool,
}

/// Second stage of retrieval: orders `candidates` by Pearson similarity of
/// their input window to `reference` (descending, earlier candidate first on
/// ties) and keeps the first `sample`.
pub fn rerank_by_similarity(
    buffer: &ReplayBuffer,
    candidates: &[usize],
    reference: &[f64],
    sample: usize,
) -> Result<Vec<usize>> {
    let mut scored = Vec::with_capacity(candidates.len());
    for (rank, &i) in candidates.iter().enumerate() {
        let item = &buffer.items[i];
        let flat = item
            .input_window
            .as_slice()
            .map(|s| s.to_vec())
            .unwrap_or_else(|| item.input_window.iter().copied().collect());
        scored.push((pearson_similarity(&flat, reference)?, rank, i));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    Ok(scored.into_iter().take(sample).map(|(_, _, i)| i).collect())
}

/// Mean input window of the batch, flattened over `(M, |V|, C)`.
pub fn mean_input_window(batch: &WindowBatch) -> Vec<f64> {
    batch
        .inputs
        .mean_axis(Axis(0))
        .expect("non-empty batch")
        .iter()
        .copied()
        .collect()
}

/// Ranking-based maximally interfered retrieval.
///
/// 1. virtual step on `current`; 2. keep the `pool` items whose loss grows
/// the most; 3. keep the `sample` of those most correlated with the mean
/// current input window. Falls back to a uniform draw if the virtual step
/// is not finite.
pub fn rmir_sample(
    buffer: &ReplayBuffer,
    current: &WindowBatch,
    model: &ModelState,
    graph: &GraphSupports,
    lr: f64,
    sizes: RmirSizes,
    rng: &mut impl Rng,
) -> Result<RmirSelection> {
    if sizes.sample > sizes.pool {
        return Err(UrclError::contract(format!(
            "sample size {} exceeds pool size {}",
            sizes.sample, sizes.pool
        )));
    }
    if buffer.is_empty() {
        return Ok(RmirSelection {
            indices: vec![],
            ranked: true,
        });
    }
    if buffer.len() < sizes.sample {
        return Ok(RmirSelection {
            indices: (0..buffer.len()).collect(),
            ranked: true,
        });
    }
    let virtual_model = match virtual_update(model, current, graph, lr) {
        Ok(m) => m,
        Err(UrclError::Numerical(msg)) => {
            log::warn!("{msg}; falling back to random replay sampling");
            let picks = rand::seq::index::sample(rng, buffer.len(), sizes.sample).into_vec();
            return Ok(RmirSelection {
                indices: picks,
                ranked: false,
            });
        }
        Err(e) => return Err(e),
    };
    let scores = interference_rank(buffer, model, &virtual_model, graph)?;
    let pool: Vec<usize> = scores
        .iter()
        .take(sizes.pool.min(buffer.len()))
        .map(|s| s.item_index)
        .collect();
    let reference = mean_input_window(current);
    let indices = rerank_by_similarity(buffer, &pool, &reference, sizes.sample)?;
    Ok(RmirSelection {
        indices,
        ranked: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixupConfig {
    pub alpha: f64,
    pub rng_seed: u64,
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(UrclError::config(format!(
                "mixup alpha must be positive, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Draws the interpolation weight `λ ~ Beta(α, α)`.
pub fn draw_lambda(alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    let beta = Beta::new(alpha, alpha)
        .map_err(|e| UrclError::config(format!("invalid Beta({alpha},{alpha}): {e}")))?;
    Ok(beta.sample(rng))
}

/// `λ · current + (1 − λ) · sampled` for inputs and targets; sampled items
/// are cycled to the batch size.
pub fn stmixup_with_lambda(current: &WindowBatch, sampled: &[&ReplayItem], lambda: f64) -> Result<WindowBatch> {
    if sampled.is_empty() {
        return Err(UrclError::contract("stmixup needs at least one sampled item"));
    }
    let b = current.batch_size();
    let mut inputs: Array4<f64> = current.inputs.clone();
    let mut targets: Array4<f64> = current.targets.clone();
    for i in 0..b {
        let item = sampled[i % sampled.len()];
        let mut xi = inputs.index_axis_mut(Axis(0), i);
        if xi.dim() != item.input_window.dim() {
            return Err(UrclError::contract("sampled input shape differs from the batch"));
        }
        xi.zip_mut_with(&item.input_window, |x, &r| *x = lambda * *x + (1.0 - lambda) * r);
        let mut yi = targets.index_axis_mut(Axis(0), i);
        if yi.dim() != item.target.dim() {
            return Err(UrclError::contract("sampled target shape differs from the batch"));
        }
        yi.zip_mut_with(&item.target, |y, &r| *y = lambda * *y + (1.0 - lambda) * r);
    }
    Ok(WindowBatch {
        inputs,
        targets,
        origin_slots: current.origin_slots.clone(),
    })
}

/// Mixup with one `λ ~ Beta(α, α)` per batch; returns the mixed batch and `λ`.
pub fn stmixup(
    current: &WindowBatch,
    sampled: &[&ReplayItem],
    cfg: &MixupConfig,
    rng: &mut impl Rng,
) -> Result<(WindowBatch, f64)> {
    cfg.validate()?;
    if sampled.is_empty() {
        return Err(UrclError::contract("stmixup needs at least one sampled item"));
    }
    let lambda = draw_lambda(cfg.alpha, rng)?;
    Ok((stmixup_with_lambda(current, sampled, lambda)?, lambda))
}
