//! End-to-end acceptance run. Long: invoke with
//! `cargo test --release --test acceptance -- --ignored --nocapture`.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use common::*;
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use urcl::data::{load_dataset, write_dataset, WindowBatch};
use urcl::harness::*;
use urcl::loss::{graphcl_batch_loss, graphcl_loss_from_similarities, ViewPairEmbeddings};
use urcl::model::{diffusion_gconv, Activation, DiffusionWeights, GraphSupports, ParamSet};
use urcl::replay::*;

type Outcome = std::result::Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, started: Instant) -> (bool, String) {
    let e = started.elapsed();
    (e < limit, format!("{:.1}s of {}s", e.as_secs_f64(), limit.as_secs()))
}

fn random_graph(rng: &mut impl Rng, n: usize, directed: bool) -> Array2<f64> {
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.random_bool(0.4) {
                let w = rng.random_range(0.1..1.0);
                a[[i, j]] = w;
                if !directed {
                    a[[j, i]] = w;
                }
            }
        }
    }
    a
}

fn uniform2(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

fn diffusion_oracle() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(1..=6);
        let k = rng.random_range(0..=3);
        let directed = rng.random_bool(0.5);
        let adjacency = random_graph(&mut rng, n, directed);
        let supports = GraphSupports::from_adjacency(&adjacency, directed).map_err(|e| e.to_string())?;
        let (e1, e2) = (uniform2(&mut rng, n, 3), uniform2(&mut rng, n, 3));
        let weights = DiffusionWeights {
            fixed: (0..if directed { 2 } else { 1 })
                .map(|_| (0..=k).map(|_| uniform2(&mut rng, 3, 4)).collect())
                .collect(),
            adaptive: (0..=k).map(|_| uniform2(&mut rng, 3, 4)).collect(),
        };
        let x = Array4::from_shape_fn((2, 3, n, 3), |_| rng.random_range(-1.0..1.0));
        let got = diffusion_gconv(&x, &supports, &e1, &e2, &weights, Activation::Relu);
        let want = gconv_oracle(&x, &adjacency, directed, &e1, &e2, &weights, true);
        worst = (&got - &want).iter().fold(worst, |m, d| m.max(d.abs()));
    }
    let (fast, t) = within(Duration::from_secs(10), started);
    check(worst < 1e-5 && fast, format!("50 graphs, max abs diff {worst:.2e}, {t}"))
}

fn rmir_oracle_equivalence() -> Outcome {
    let started = Instant::now();
    let (m, v) = (3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let graph = GraphSupports::from_adjacency(&ring(v), false).unwrap();
    let mut matches = 0;
    for trial in 0..100 {
        let n = rng.random_range(0..=32);
        let mut buffer = ReplayBuffer::new(32);
        let mut made: Vec<(Array3<f64>, Array3<f64>)> = Vec::new();
        for _ in 0..n {
            let pair = if !made.is_empty() && rng.random_bool(0.2) {
                made[rng.random_range(0..made.len())].clone()
            } else {
                (
                    Array3::from_shape_fn((m, v, 1), |_| rng.random_range(-2.0..2.0)),
                    Array3::from_shape_fn((1, v, 1), |_| rng.random_range(-2.0..2.0)),
                )
            };
            made.push(pair.clone());
            buffer.push(pair.0, pair.1).unwrap();
        }
        let current = WindowBatch {
            inputs: Array4::from_shape_fn((4, m, v, 1), |_| rng.random_range(-2.0..2.0)),
            targets: Array4::from_shape_fn((4, 1, v, 1), |_| rng.random_range(-2.0..2.0)),
            origin_slots: vec![0; 4],
        };
        let sample = rng.random_range(1..=8);
        let pool = rng.random_range(sample..=16);
        let model = toy_model(v, 1, m, trial);
        let sel = rmir_sample(&buffer, &current, &model, &graph, 0.3, RmirSizes { pool, sample }, &mut rng)
            .map_err(|e| e.to_string())?;
        if sel.indices == rmir_oracle(&buffer, &current, &model, 0.3, pool, sample) {
            matches += 1;
        }
    }
    let (fast, t) = within(Duration::from_secs(60), started);
    check(matches == 100 && fast, format!("{matches}/100 buffers match the exhaustive oracle, {t}"))
}

fn graphcl_hand_values() -> Outcome {
    let sym = ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0]]);
    let two = graphcl_loss_from_similarities(&sym, 0.5).map_err(|e| e.to_string())?;
    let s = 5;
    let e = Array2::from_elem((s, 3), 0.7);
    let pairs = ViewPairEmbeddings { p1: e.clone(), p2: e.clone(), z1: e.clone(), z2: e };
    let same = graphcl_batch_loss(&pairs, 0.5).map_err(|e| e.to_string())?;
    let want = ((s - 1) as f64).ln();
    check(
        (two + 2.0).abs() < 1e-6 && (same - want).abs() < 1e-6,
        format!("S=2 gives {two:.9}, identical S={s} gives {same:.9} vs log(S-1) {want:.9}"),
    )
}

struct TinyInstance {
    model: urcl::model::ModelState,
    inputs: Array4<f64>,
    targets: Array4<f64>,
    graph: GraphSupports,
    views: Views,
}

fn tiny_instance(seed: u64) -> TinyInstance {
    let model = tiny_model(tiny_config(4, 2, 6, true), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let mut r4 = |shape| Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0));
    let inputs = r4((2, 6, 4, 2));
    let targets = r4((2, 1, 4, 1));
    let noise = r4((2, 6, 4, 2));
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
    let adjacency = random_graph(&mut rng, 4, true);
    let mut dropped = adjacency.clone();
    dropped[[0, 1]] = 0.0;
    let graph = GraphSupports::from_adjacency(&adjacency, true).unwrap();
    let views = Views {
        w1: &inputs + &noise.mapv(|x| 0.1 * x),
        g1: GraphSupports::from_adjacency(&dropped, true).unwrap(),
        w2: inputs.slice(ndarray::s![.., ..;-1, .., ..]).to_owned(),
        g2: graph.clone(),
    };
    TinyInstance { model, inputs, targets, graph, views }
}

fn stop_gradient() -> Outcome {
    let t = tiny_instance(21);
    let obj = Objective {
        inputs: &t.inputs,
        targets: &t.targets,
        graph: &t.graph,
        views: &t.views,
        tau: 0.5,
        task: false,
        ssl: true,
    };
    let (value, analytic) = objective(&t.model, &t.model.params, &obj, None);
    let z = view_encodings(&t.model, &t.model.params, &t.views);
    let (value_c, analytic_c) = objective(&t.model, &t.model.params, &obj, Some(&z));
    let substituted = value.to_bits() == value_c.to_bits() && analytic == analytic_c;
    let report = gradient_check(&t.model.params, &analytic, 1e-6, 1e-8, |p| objective(&t.model, p, &obj, Some(&z)).0);
    let worst = report.iter().map(|r| r.1).fold(0.0f64, f64::max);
    check(
        worst < 1e-3 && substituted,
        format!("max group rel err {worst:.2e}; detached == constant-substituted: {substituted}"),
    )
}

fn gradient_check_total() -> Outcome {
    let started = Instant::now();
    let t = tiny_instance(7);
    let obj = Objective {
        inputs: &t.inputs,
        targets: &t.targets,
        graph: &t.graph,
        views: &t.views,
        tau: 0.5,
        task: true,
        ssl: true,
    };
    let (_, analytic) = objective(&t.model, &t.model.params, &obj, None);
    let z = view_encodings(&t.model, &t.model.params, &t.views);
    let report = gradient_check(&t.model.params, &analytic, 1e-6, 1e-8, |p| objective(&t.model, p, &obj, Some(&z)).0);
    let (name, worst) = report.iter().cloned().fold((String::new(), 0.0f64), |a, b| if b.1 > a.1 { b } else { a });
    let (fast, time) = within(Duration::from_secs(120), started);
    check(
        worst < 1e-3 && fast,
        format!("{} groups, worst {name} at {worst:.2e}, {time}", report.len()),
    )
}

fn augmentation_suite() -> Outcome {
    let failures: Vec<String> = (0..1000).filter_map(|s| augmentation_trial(s).err()).collect();
    check(
        failures.is_empty(),
        format!("{} of 1000 trials passed{}", 1000 - failures.len(), failures.first().map(|f| format!("; first failure: {f}")).unwrap_or_default()),
    )
}

fn mixup_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r4 = |rng: &mut ChaCha8Rng, shape| Array4::from_shape_fn(shape, |_| rng.random_range(-5.0..5.0));
    let mut hull_ok = true;
    let mut ident_ok = true;
    for _ in 0..200 {
        let b = rng.random_range(1..6);
        let current = WindowBatch {
            inputs: r4(&mut rng, (b, 4, 3, 2)),
            targets: r4(&mut rng, (b, 1, 3, 1)),
            origin_slots: vec![0; b],
        };
        let k = rng.random_range(1..4);
        let items: Vec<ReplayItem> = (0..k)
            .map(|i| ReplayItem {
                input_window: Array3::from_shape_fn((4, 3, 2), |_| rng.random_range(-5.0..5.0)),
                target: Array3::from_shape_fn((1, 3, 1), |_| rng.random_range(-5.0..5.0)),
                insert_counter: i as u64,
            })
            .collect();
        let refs: Vec<&ReplayItem> = items.iter().collect();
        let one = stmixup_with_lambda(&current, &refs, 1.0).unwrap();
        let zero = stmixup_with_lambda(&current, &refs, 0.0).unwrap();
        ident_ok &= one.inputs == current.inputs && one.targets == current.targets;
        for i in 0..b {
            let it = refs[i % k];
            ident_ok &= zero.inputs.index_axis(ndarray::Axis(0), i) == it.input_window;
            ident_ok &= zero.targets.index_axis(ndarray::Axis(0), i) == it.target;
        }
        let (mixed, _) = stmixup(&current, &refs, &MixupConfig { alpha: 0.5, rng_seed: 0 }, &mut rng).unwrap();
        for i in 0..b {
            let it = refs[i % k];
            let pairs = [
                (mixed.inputs.index_axis(ndarray::Axis(0), i), current.inputs.index_axis(ndarray::Axis(0), i), it.input_window.view()),
                (mixed.targets.index_axis(ndarray::Axis(0), i), current.targets.index_axis(ndarray::Axis(0), i), it.target.view()),
            ];
            for (m, c, r) in pairs {
                for ((m, c), r) in m.iter().zip(c.iter()).zip(r.iter()) {
                    hull_ok &= *m >= c.min(*r) - 1e-12 && *m <= c.max(*r) + 1e-12;
                }
            }
        }
    }
    let n = 10_000;
    let alpha = 0.5;
    let mean = (0..n).map(|_| draw_lambda(alpha, &mut rng).unwrap()).sum::<f64>() / n as f64;
    let se = (1.0 / (4.0 * (2.0 * alpha + 1.0)) / n as f64).sqrt();
    let mean_ok = (mean - 0.5).abs() < 3.0 * se;
    check(
        hull_ok && ident_ok && mean_ok,
        format!("identities {ident_ok}, convex hull {hull_ok}, Beta mean {mean:.4} (3 SE = {:.4})", 3.0 * se),
    )
}

fn buffer_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut buffer = ReplayBuffer::new(256);
    let mut pushed = Vec::new();
    for _ in 0..300 {
        let x = Array3::from_shape_fn((12, 10, 1), |_| rng.random::<f64>());
        let y = Array3::from_shape_fn((1, 10, 1), |_| rng.random::<f64>());
        pushed.push(x.clone());
        buffer.push(x, y).unwrap();
    }
    let fifo = buffer.len() == 256 && buffer.items().zip(&pushed[44..]).all(|(a, b)| &a.input_window == b);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("b.buf");
    buffer.save(&path).map_err(|e| e.to_string())?;
    let loaded = ReplayBuffer::load(&path).map_err(|e| e.to_string())?;
    let path2 = dir.path().join("b2.buf");
    loaded.save(&path2).map_err(|e| e.to_string())?;
    let buf_same = loaded == buffer && std::fs::read(&path).unwrap() == std::fs::read(&path2).unwrap();

    let model = tiny_model(tiny_config(5, 2, 12, false), 3);
    let mp = dir.path().join("m.ckpt");
    model.params.save(&mp, "h").map_err(|e| e.to_string())?;
    let (params, _) = ParamSet::load(&mp).map_err(|e| e.to_string())?;
    let model_same = params.iter().zip(model.params.iter()).all(|((n1, a), (n2, b))| {
        n1 == n2 && a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
    }) && params.len() == model.params.len();
    check(
        fifo && buf_same && model_same,
        format!("last 256 of 300 kept: {fifo}; buffer round trip bit-identical: {buf_same}; model round trip bit-identical: {model_same}"),
    )
}

/// Settings for the synthetic-stream comparison.
fn stream_config(strategy: Strategy, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.batch_size = 32;
    cfg.max_epochs = 20;
    cfg.patience = 5;
    cfg.strategy = strategy;
    cfg.seed = seed;
    cfg
}

const SEEDS: [u64; 3] = [0, 1, 2];

struct StreamRun {
    strategy: Strategy,
    seed: u64,
    reports: Vec<SegmentReport>,
}

fn stream_runs() -> (Vec<StreamRun>, Duration) {
    let started = Instant::now();
    let jobs: Vec<(Strategy, u64)> = SEEDS
        .iter()
        .flat_map(|&s| [Strategy::Urcl, Strategy::Finetune, Strategy::OneFitAll].map(|st| (st, s)))
        .collect();
    let queue = Mutex::new(jobs.into_iter());
    let results = Mutex::new(Vec::new());
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let Some((strategy, seed)) = queue.lock().unwrap().next() else { break };
                let cfg = stream_config(strategy, seed);
                let (network, series) = synthetic_stream(&SynthSpec::new(10, 4, 1000, seed)).unwrap();
                let data = StreamData::prepare(network, &series, &cfg).unwrap();
                let out = run_stream_experiment(&data, &cfg, None, None).unwrap();
                results.lock().unwrap().push(StreamRun { strategy, seed, reports: out.reports });
            });
        }
    });
    let mut runs = results.into_inner().unwrap();
    runs.sort_by_key(|r| (r.seed, r.strategy.as_str()));
    (runs, started.elapsed())
}

fn incremental_mean(runs: &[StreamRun], strategy: Strategy) -> f64 {
    let picked: Vec<&StreamRun> = runs.iter().filter(|r| r.strategy == strategy).collect();
    picked
        .iter()
        .map(|r| r.reports[1..].iter().map(|x| x.test_mae).sum::<f64>() / (r.reports.len() - 1) as f64)
        .sum::<f64>()
        / picked.len() as f64
}

fn desk_scale_direction(runs: &[StreamRun], elapsed: Duration) -> Outcome {
    let urcl = incremental_mean(runs, Strategy::Urcl);
    let fine = incremental_mean(runs, Strategy::Finetune);
    let ofa = incremental_mean(runs, Strategy::OneFitAll);
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let time_ok = cores < 4 || elapsed < Duration::from_secs(15 * 60);
    let ok = urcl < fine && urcl < ofa && urcl <= 0.9 * fine.min(ofa) && time_ok;
    let mut per_seed = Vec::new();
    for s in SEEDS {
        let one: Vec<StreamRun> = runs
            .iter()
            .filter(|r| r.seed == s)
            .map(|r| StreamRun { strategy: r.strategy, seed: r.seed, reports: r.reports.clone() })
            .collect();
        per_seed.push(format!(
            "seed {s}: {:.3}/{:.3}/{:.3}",
            incremental_mean(&one, Strategy::Urcl),
            incremental_mean(&one, Strategy::Finetune),
            incremental_mean(&one, Strategy::OneFitAll)
        ));
    }
    check(
        ok,
        format!(
            "incremental MAE urcl {urcl:.4}, finetune {fine:.4}, one_fit_all {ofa:.4}; need urcl <= {:.4} [{}]; {:.0}s on {cores} core(s)",
            0.9 * fine.min(ofa),
            per_seed.join(", "),
            elapsed.as_secs_f64()
        ),
    )
}

/// 1-based epoch at which the training task loss first comes within 110% of
/// its value in the last epoch.
fn epochs_to_settle(report: &SegmentReport) -> usize {
    let last = report.epochs.last().map_or(0.0, |e| e.task);
    report.epochs.iter().position(|e| e.task <= 1.1 * last).map_or(0, |i| i + 1)
}

fn convergence_shape(runs: &[StreamRun]) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for r in runs.iter().filter(|r| r.strategy == Strategy::Urcl) {
        let e: Vec<usize> = r.reports.iter().map(epochs_to_settle).collect();
        ok &= e[1..].iter().all(|&k| k < e[0]);
        parts.push(format!("seed {}: base {} vs incremental {:?}", r.seed, e[0], &e[1..]));
    }
    check(ok, format!("epochs to reach 110% of final task loss, urcl: {}", parts.join("; ")))
}

fn metric_identities(runs: &[StreamRun]) -> Outcome {
    let stats = urcl::data::NormalizationStats { per_channel_min: vec![0.0], per_channel_max: vec![1.0] };
    let pred = Array4::from_shape_vec((2, 1, 1, 1), vec![1.0, 2.0]).unwrap();
    let target = Array4::from_shape_vec((2, 1, 1, 1), vec![0.0, 4.0]).unwrap();
    let (mae, rmse) = metrics_denormalized(&pred, &target, &stats).map_err(|e| e.to_string())?;
    let (z_mae, z_rmse) = metrics_denormalized(&target, &target, &stats).map_err(|e| e.to_string())?;
    let hand = mae == 1.5 && rmse == 2.5f64.sqrt() && z_mae == 0.0 && z_rmse == 0.0;
    let rows: Vec<&SegmentReport> = runs.iter().flat_map(|r| &r.reports).collect();
    let ordered = rows.iter().all(|r| r.test_rmse >= r.test_mae);
    check(
        hand && ordered && !rows.is_empty(),
        format!("hand cases exact: {hand}; RMSE >= MAE on all {} report rows: {ordered}", rows.len()),
    )
}

fn real_format_smoke() -> Outcome {
    let started = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let (network, series) = metr_la_shaped(1000, 0);
    write_dataset(&dir.path().join("data"), &network, &series).map_err(|e| e.to_string())?;
    let (network, series) = load_dataset(&dir.path().join("data")).map_err(|e| e.to_string())?;
    let shape_ok = series.values.dim() == (1000, 207, 2) && network.directed();
    let mut cfg = ExperimentConfig::default();
    cfg.max_epochs = 2;
    cfg.patience = 2;
    cfg.batch_size = 64;
    cfg.strategy = Strategy::Finetune;
    let data = StreamData::prepare(network, &series, &cfg).map_err(|e| e.to_string())?;
    let out_dir = dir.path().join("out");
    let out = run_stream_experiment(&data, &cfg, Some(&out_dir), None).map_err(|e| e.to_string())?;
    let epochs_ok = out.reports.iter().all(|r| r.epochs.len() == 2);
    let summary = std::fs::read_to_string(out_dir.join("summary.csv")).map_err(|e| e.to_string())?;
    let rows = read_summary(&out_dir.join("summary.csv")).map_err(|e| e.to_string())?;
    let well_formed = summary.lines().next() == Some(SUMMARY_HEADER)
        && rows.len() == 5
        && rows.iter().all(|r| r.mae.is_finite() && r.rmse >= r.mae);
    let (fast, t) = within(Duration::from_secs(600), started);
    check(
        shape_ok && epochs_ok && well_formed && fast,
        format!("1000 x 207 x 2 loaded: {shape_ok}; 2 epochs per segment: {epochs_ok}; summary.csv well formed: {well_formed}; {t}"),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(format!(
            "panicked: {}",
            p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default()
        )),
    }
}

#[test]
#[ignore = "long-running acceptance run"]
fn acceptance_criteria() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, r: Outcome| {
        let (tag, detail) = match &r {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {n:>2} {tag} {name}: {detail}");
        results.push((n, name, r));
    };
    record(1, "diffusion convolution oracle", guarded(diffusion_oracle));
    record(2, "RMIR oracle", guarded(rmir_oracle_equivalence));
    record(3, "contrastive loss hand values", guarded(graphcl_hand_values));
    record(4, "stop-gradient", guarded(stop_gradient));
    record(5, "gradient check", guarded(gradient_check_total));
    record(6, "augmentation suite", guarded(augmentation_suite));
    record(7, "mixup properties", guarded(mixup_properties));
    record(8, "buffer semantics", guarded(buffer_semantics));
    let runs = catch_unwind(stream_runs);
    match &runs {
        Ok((runs, elapsed)) => {
            record(9, "desk-scale direction", guarded(|| desk_scale_direction(runs, *elapsed)));
            record(10, "convergence shape", guarded(|| convergence_shape(runs)));
            record(11, "metric identities", guarded(|| metric_identities(runs)));
        }
        Err(_) => {
            for (n, name) in [(9, "desk-scale direction"), (10, "convergence shape"), (11, "metric identities")] {
                record(n, name, Err("stream runs panicked".into()));
            }
        }
    }
    record(12, "real-format smoke test", guarded(real_format_smoke));
    let failed: Vec<usize> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!("{} of {} criteria passed", results.len() - failed.len(), results.len());
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

