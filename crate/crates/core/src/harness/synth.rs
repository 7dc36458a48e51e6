use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{build_adjacency, split_stream, ObservationSeries, SensorNetwork};
use crate::error::{Result, UrclError};

/// Shape of a generated concept-drift stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthSpec {
    pub nodes: usize,
    pub channels: usize,
    pub incremental_segments: usize,
    pub slots: usize,
    pub base_fraction: f64,
    pub interval_minutes: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(nodes: usize, incremental_segments: usize, slots: usize, seed: u64) -> Self {
        SynthSpec {
            nodes,
            channels: 1,
            incremental_segments,
            slots,
            base_fraction: 0.3,
            interval_minutes: 5.0,
            seed,
        }
    }
}

/// Parameters of one regime: a wave travelling around the ring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regime {
    pub period: f64,
    pub amplitude: f64,
    pub offset: f64,
    /// Phase lag between neighbouring nodes, in radians.
    pub lag: f64,
    pub noise: f64,
}

/// Regime of each segment: the base regime is followed by shifted ones.
pub fn regimes(count: usize, rng: &mut impl Rng) -> Vec<Regime> {
    (0..count)
        .map(|k| {
            let shift = k as f64;
            Regime {
                period: rng.random_range(18.0..30.0) * (1.0 + 0.25 * (shift % 3.0)),
                amplitude: rng.random_range(8.0..12.0) * (1.0 + 0.3 * shift),
                offset: 50.0 + 6.0 * shift + rng.random_range(-2.0..2.0),
                lag: rng.random_range(0.2..0.6) * if k % 2 == 0 { 1.0 } else { -1.0 },
                noise: 1.0,
            }
        })
        .collect()
}

/// Ring graph with random edge lengths and a per-segment regime-shifted
/// sinusoidal signal plus AR(1) noise. Channel 0 carries the signal; extra
/// channels are smoothed copies of it.
pub fn synthetic_stream(spec: &SynthSpec) -> Result<(SensorNetwork, ObservationSeries)> {
    if spec.nodes < 3 {
        return Err(UrclError::config("a ring needs at least 3 nodes"));
    }
    if spec.channels == 0 {
        return Err(UrclError::config("channels must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let edges: Vec<(usize, usize, f64)> = (0..spec.nodes)
        .map(|i| {
            let j = (i + 1) % spec.nodes;
            let d = 1.0 + (i as f64 * 0.37).fract();
            (i, j, d)
        })
        .collect();
    let network = build_adjacency(&edges, spec.nodes, false)?;

    let segments = split_stream(spec.slots, spec.base_fraction, spec.incremental_segments, 1)?;
    let regs = regimes(segments.len(), &mut rng);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut values = Array3::zeros((spec.slots, spec.nodes, spec.channels));
    let mut noise = vec![0.0; spec.nodes];
    let mut phase = vec![0.0; spec.nodes];
    for (seg, r) in segments.iter().zip(&regs) {
        for t in seg.slots.clone() {
            for i in 0..spec.nodes {
                phase[i] += std::f64::consts::TAU / r.period;
                noise[i] = 0.7 * noise[i] + r.noise * unit.sample(&mut rng);
                let x = r.offset + r.amplitude * (phase[i] - r.lag * i as f64).sin() + noise[i];
                values[[t, i, 0]] = x;
                for c in 1..spec.channels {
                    let prev = if t > 0 { values[[t - 1, i, c]] } else { x };
                    values[[t, i, c]] = prev + (x - prev) / (1 + c) as f64;
                }
            }
        }
    }
    Ok((network, ObservationSeries::new(values, spec.interval_minutes)))
}
