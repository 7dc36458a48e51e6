use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, OptimizerKind, Strategy};
use crate::augment::{default_edge_threshold, random_view_pair, GraphSample};
use crate::data::{
    make_windows, min_max_normalize, split_stream, window_count, NormalizationStats, ObservationSeries,
    SegmentRole, SensorNetwork, StreamSegment, WindowBatch,
};
use crate::error::{Result, UrclError};
use crate::loss::{total_loss, LossBreakdown};
use crate::model::{projector_on_tape, GatedGraphBackbone, GraphSupports, ModelState, ParamSet};
use crate::replay::{rmir_sample, stmixup, ReplayBuffer};
use crate::tape::Tape;

const EVAL_CHUNK: usize = 64;

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: ParamSet,
    v: ParamSet,
    t: i32,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let step = self.lr / c1;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.get_mut(name).expect("moment for every parameter");
            let v = self.v.get_mut(name).expect("moment for every parameter");
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= step * *m / ((*v / c2).sqrt() + self.eps);
            });
        }
    }
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(Adam),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, params: &ParamSet, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(params, lr)),
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Optimizer::Adam(a) => a.lr,
            Optimizer::Sgd { lr } => *lr,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        match self {
            Optimizer::Adam(a) => a.step(params, grads),
            Optimizer::Sgd { lr } => params.sgd_step(grads, *lr),
        }
    }
}

/// Rescales `grads` in place so their global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        let k = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * k);
        }
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: f64,
    pub ssl: f64,
    pub total: f64,
    pub val_mae: f64,
    pub val_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub role: SegmentRole,
    pub strategy: Strategy,
    /// Mean training losses and validation metrics per epoch.
    pub epochs: Vec<EpochLog>,
    /// 1-based epoch whose weights were kept; 0 when nothing was trained.
    pub best_epoch: usize,
    pub test_mae: f64,
    pub test_rmse: f64,
    pub train_seconds: f64,
    pub infer_seconds_per_window: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub task: f64,
    pub ssl: f64,
    pub total: f64,
}

/// Normalized stream plus everything derived from the graph once per run.
#[derive(Debug, Clone)]
pub struct StreamData {
    pub network: SensorNetwork,
    pub series: ObservationSeries,
    pub stats: NormalizationStats,
    pub segments: Vec<StreamSegment>,
    pub graph: GraphSupports,
    pub edge_threshold: f64,
}

impl StreamData {
    /// Splits the stream and scales it with statistics of the base train range.
    pub fn prepare(network: SensorNetwork, raw: &ObservationSeries, cfg: &ExperimentConfig) -> Result<Self> {
        if network.node_count() != raw.node_count() {
            return Err(UrclError::Schema(format!(
                "graph has {} nodes but observations have {}",
                network.node_count(),
                raw.node_count()
            )));
        }
        let segments = split_stream(
            raw.len(),
            cfg.base_fraction,
            cfg.incremental_segments,
            cfg.input_len + cfg.output_len,
        )?;
        let (series, stats) = min_max_normalize(raw, None, segments[0].train.clone());
        let graph = GraphSupports::from_adjacency(network.adjacency(), network.directed())?;
        let edge_threshold = default_edge_threshold(network.adjacency());
        Ok(StreamData {
            network,
            series,
            stats,
            segments,
            graph,
            edge_threshold,
        })
    }

    pub fn windows(&self, range: std::ops::Range<usize>, cfg: &ExperimentConfig) -> impl Iterator<Item = WindowBatch> + '_ {
        make_windows(&self.series, range, cfg.input_len, cfg.output_len, cfg.batch_size)
    }
}

/// MAE and RMSE over paired arrays after mapping both back to channel-0 units.
pub fn metrics_denormalized(pred: &Array4<f64>, target: &Array4<f64>, stats: &NormalizationStats) -> Result<(f64, f64)> {
    if pred.shape() != target.shape() {
        return Err(UrclError::contract("prediction and target shapes differ"));
    }
    if pred.is_empty() {
        return Err(UrclError::contract("no windows to evaluate"));
    }
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(target.iter()) {
        let e = stats.denormalize_value(*p, 0) - stats.denormalize_value(*t, 0);
        abs += e.abs();
        sq += e * e;
    }
    let n = pred.len() as f64;
    Ok((abs / n, (sq / n).sqrt()))
}

/// MAE and RMSE of `model` over every window of `range`, in dataset units.
pub fn evaluate_metrics(
    model: &ModelState,
    data: &StreamData,
    range: std::ops::Range<usize>,
    cfg: &ExperimentConfig,
) -> Result<(f64, f64)> {
    if window_count(&range, cfg.input_len, cfg.output_len) == 0 {
        return Err(UrclError::contract(format!("range {range:?} holds no window")));
    }
    let (mut abs, mut sq, mut n) = (0.0, 0.0, 0usize);
    for batch in make_windows(&data.series, range, cfg.input_len, cfg.output_len, EVAL_CHUNK) {
        let pred = model.predict(&batch.inputs, &data.graph, EVAL_CHUNK)?;
        let (mae, rmse) = metrics_denormalized(&pred, &batch.targets, &data.stats)?;
        let k = pred.len();
        abs += mae * k as f64;
        sq += rmse * rmse * k as f64;
        n += k;
    }
    Ok((abs / n as f64, (sq / n as f64).sqrt()))
}

/// Per-segment RNG stream; independent of earlier segments so resumed runs
/// see the same draws.
pub fn segment_rng(seed: u64, segment_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(segment_index as u64 + 1);
    rng
}

pub fn initial_model(data: &StreamData, cfg: &ExperimentConfig) -> Result<ModelState> {
    let mc = cfg.model_config(data.network.node_count(), data.series.channels(), data.network.directed());
    let backbone = Arc::new(GatedGraphBackbone::new(mc)?);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(ModelState::new(backbone, &mut rng))
}

/// One optimisation step of Algorithm 1 (steps a–f). Returns the logged losses.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &mut ModelState,
    optimizer: &mut Optimizer,
    buffer: &mut ReplayBuffer,
    batch: &WindowBatch,
    data: &StreamData,
    cfg: &ExperimentConfig,
    replay: bool,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let mut mixed = None;
    if replay && !buffer.is_empty() {
        let sel = rmir_sample(buffer, batch, model, &data.graph, optimizer.lr(), cfg.rmir_sizes(), rng)?;
        if !sel.indices.is_empty() {
            let items: Vec<_> = sel.indices.iter().map(|&i| buffer.get(i).expect("selected index")).collect();
            mixed = Some(stmixup(batch, &items, &cfg.mixup(), rng)?.0);
        }
    }
    let train_batch = mixed.as_ref().unwrap_or(batch);

    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let (pred, _) = model.forecast_on_tape(&mut tape, &bound, &train_batch.inputs, &data.graph)?;
    let task = tape.mae(pred, train_batch.targets.clone().into_dyn());

    let mut root = task;
    let mut ssl_value = 0.0;
    if replay && cfg.ssl_weight > 0.0 && train_batch.batch_size() >= 2 {
        let sample = GraphSample {
            window: train_batch.inputs.clone(),
            adjacency: data.network.adjacency().clone(),
            directed: data.network.directed(),
        };
        let (v1, v2, _) = random_view_pair(&sample, &cfg.augment, data.edge_threshold, rng)?;
        let backbone = Arc::clone(model.backbone());
        let layers = model.projector_layers();
        let branch = |tape: &mut Tape, view: &GraphSample| -> Result<_> {
            let graph = if view.adjacency == sample.adjacency {
                data.graph.clone()
            } else {
                GraphSupports::from_adjacency(&view.adjacency, view.directed)?
            };
            let enc = backbone.encode(tape, &bound, &view.window, &graph)?;
            let p = projector_on_tape(tape, &bound, enc.pooled, layers);
            let z = tape.detach(enc.pooled);
            Ok((p, z))
        };
        let (p1, z1) = branch(&mut tape, &v1)?;
        let (p2, z2) = branch(&mut tape, &v2)?;
        let ssl = tape.graphcl(p1, p2, z1, z2, cfg.tau);
        let weighted = if cfg.ssl_weight == 1.0 { ssl } else { tape.scale(ssl, cfg.ssl_weight) };
        ssl_value = tape.scalar(weighted);
        root = tape.add(&[task, weighted]);
    }
    let breakdown = total_loss(tape.scalar(task), ssl_value)?;
    let grads = tape.backward(root);
    let mut grads = bound.gradients(&tape, &grads);
    drop(tape);
    if !grads.all_finite() {
        return Err(UrclError::Numerical("non-finite gradient".into()));
    }
    clip_global_norm(&mut grads, cfg.grad_clip);
    optimizer.step(&mut model.params, &grads);
    if replay {
        buffer.insert_batch(batch)?;
    }
    Ok(breakdown)
}

/// Trains on one segment until validation MAE stops improving, then keeps
/// the best weights and scores the test split.
#[allow(clippy::too_many_arguments)]
pub fn train_segment(
    model: &mut ModelState,
    buffer: &mut ReplayBuffer,
    data: &StreamData,
    segment_index: usize,
    cfg: &ExperimentConfig,
    strategy: Strategy,
    losses: &mut Vec<LossRow>,
) -> Result<SegmentReport> {
    let segment = &data.segments[segment_index];
    let train = strategy != Strategy::OneFitAll || segment.role == SegmentRole::Base;
    let replay = strategy == Strategy::Urcl;
    let mut rng = segment_rng(cfg.seed, segment_index);
    let mut epochs = Vec::new();
    let mut best_epoch = 0;
    let mut steps = 0;
    let started = Instant::now();
    if train {
        let mut optimizer = Optimizer::new(cfg.optimizer, &model.params, cfg.learning_rate);
        let mut best = (f64::INFINITY, model.params.clone());
        for epoch in 1..=cfg.max_epochs {
            let (mut task, mut ssl, mut total, mut n) = (0.0, 0.0, 0.0, 0usize);
            for batch in data.windows(segment.train.clone(), cfg) {
                let l = train_step(model, &mut optimizer, buffer, &batch, data, cfg, replay, &mut rng)
                    .map_err(|e| match e {
                        UrclError::Numerical(m) => UrclError::Numerical(format!(
                            "{} segment, epoch {epoch}, step {}: {m}",
                            segment.role,
                            losses.len() + 1
                        )),
                        other => other,
                    })?;
                losses.push(LossRow {
                    step: losses.len() + 1,
                    task: l.task,
                    ssl: l.ssl,
                    total: l.total,
                });
                task += l.task;
                ssl += l.ssl;
                total += l.total;
                n += 1;
                steps += 1;
            }
            let (val_mae, val_rmse) = evaluate_metrics(model, data, segment.val.clone(), cfg)?;
            let k = n.max(1) as f64;
            epochs.push(EpochLog {
                task: task / k,
                ssl: ssl / k,
                total: total / k,
                val_mae,
                val_rmse,
            });
            log::debug!(
                "{} epoch {epoch}: task {:.5} ssl {:.5} val_mae {val_mae:.5}",
                segment.role,
                task / k,
                ssl / k
            );
            if val_mae < best.0 {
                best = (val_mae, model.params.clone());
                best_epoch = epoch;
            } else if epoch - best_epoch >= cfg.patience {
                break;
            }
        }
        model.params = best.1;
    }
    let train_seconds = if train { started.elapsed().as_secs_f64() } else { 0.0 };
    let infer_start = Instant::now();
    let (test_mae, test_rmse) = evaluate_metrics(model, data, segment.test.clone(), cfg)?;
    let windows = window_count(&segment.test, cfg.input_len, cfg.output_len).max(1);
    let infer_seconds_per_window = infer_start.elapsed().as_secs_f64() / windows as f64;
    log::info!(
        "{strategy} {}: test MAE {test_mae:.4} RMSE {test_rmse:.4} ({} epochs, {train_seconds:.1}s)",
        segment.role,
        epochs.len()
    );
    Ok(SegmentReport {
        role: segment.role,
        strategy,
        epochs,
        best_epoch,
        test_mae,
        test_rmse,
        train_seconds,
        infer_seconds_per_window,
        steps,
    })
}

/// Where a finished segment's state was written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub model_path: PathBuf,
    pub buffer_path: PathBuf,
    pub config_hash: String,
    pub segment_index: usize,
    pub reports: Vec<SegmentReport>,
    pub losses: Vec<LossRow>,
}

impl CheckpointRecord {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| UrclError::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| UrclError::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub reports: Vec<SegmentReport>,
    pub losses: Vec<LossRow>,
    pub model: ModelState,
    pub buffer: ReplayBuffer,
}

/// Runs every segment in order for `cfg.strategy`. With `out_dir`, writes a
/// checkpoint per segment plus `summary.csv` and `losses.csv`.
pub fn run_stream_experiment(
    data: &StreamData,
    cfg: &ExperimentConfig,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let hash = cfg.config_hash();
    let mut model = initial_model(data, cfg)?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);
    let mut reports = Vec::new();
    let mut losses = Vec::new();
    let mut start = 0;
    if let Some(path) = resume {
        let record = CheckpointRecord::load(path)?;
        if record.config_hash != hash {
            return Err(UrclError::Checkpoint {
                path: path.to_path_buf(),
                message: format!(
                    "checkpoint was written with config {} but the current config is {hash}",
                    record.config_hash
                ),
            });
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let (params, model_hash) = ParamSet::load(&resolve(&record.model_path))?;
        if model_hash != hash {
            return Err(UrclError::Checkpoint {
                path: record.model_path.clone(),
                message: "model checkpoint config hash mismatch".into(),
            });
        }
        model = ModelState::with_params(Arc::clone(model.backbone()), params)?;
        buffer = ReplayBuffer::load(&resolve(&record.buffer_path))?;
        reports = record.reports;
        losses = record.losses;
        start = record.segment_index + 1;
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join("checkpoints"))?;
    }
    for index in start..data.segments.len() {
        let report = train_segment(&mut model, &mut buffer, data, index, cfg, cfg.strategy, &mut losses)?;
        reports.push(report);
        if let Some(dir) = out_dir {
            let model_name = PathBuf::from(format!("segment_{index}.model"));
            let buffer_name = PathBuf::from(format!("segment_{index}.buffer"));
            let ck = dir.join("checkpoints");
            model.params.save(&ck.join(&model_name), &hash)?;
            buffer.save(&ck.join(&buffer_name))?;
            CheckpointRecord {
                model_path: model_name,
                buffer_path: buffer_name,
                config_hash: hash.clone(),
                segment_index: index,
                reports: reports.clone(),
                losses: losses.clone(),
            }
            .save(&ck.join(format!("segment_{index}.json")))?;
            write_summary(&dir.join("summary.csv"), &reports)?;
            write_losses(&dir.join("losses.csv"), &losses)?;
        }
    }
    Ok(ExperimentOutcome {
        reports,
        losses,
        model,
        buffer,
    })
}

pub const SUMMARY_HEADER: &str = "segment,strategy,MAE,RMSE,train_seconds,infer_seconds_per_window";

pub fn write_summary(path: &Path, reports: &[SegmentReport]) -> Result<()> {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&format!(
            "{},{},{:?},{:?},{:.6},{:.9}\n",
            r.role, r.strategy, r.test_mae, r.test_rmse, r.train_seconds, r.infer_seconds_per_window
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn write_losses(path: &Path, losses: &[LossRow]) -> Result<()> {
    let mut out = String::from("step,task,ssl,total\n");
    for l in losses {
        out.push_str(&format!("{},{:?},{:?},{:?}\n", l.step, l.task, l.ssl, l.total));
    }
    fs::write(path, out)?;
    Ok(())
}
