use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{LabeledWindow, TimeSeriesFrame};
use crate::tensor::Tensor;

/// Seasonal series: per channel a mixture of three sinusoids (daily-like,
/// weekly-like and one random period) plus AR(1) noise and a slow trend.
pub fn synthetic_series(len: usize, channels: usize, seed: u64) -> TimeSeriesFrame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f64, 0.15).unwrap();
    let specs: Vec<_> = (0..channels)
        .map(|_| {
            let periods = [24.0, 168.0, rng.random_range(8.0..48.0)];
            let amps = [
                rng.random_range(0.6..1.4),
                rng.random_range(0.2..0.6),
                rng.random_range(0.1..0.5),
            ];
            let phases = [
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            ];
            let offset = rng.random_range(-2.0..2.0);
            let trend = rng.random_range(-1e-3..1e-3);
            (periods, amps, phases, offset, trend)
        })
        .collect();
    let mut ar = vec![0.0f64; channels];
    let mut values = Vec::with_capacity(len * channels);
    for t in 0..len {
        for (c, (periods, amps, phases, offset, trend)) in specs.iter().enumerate() {
            ar[c] = 0.7 * ar[c] + noise.sample(&mut rng);
            let mut v = offset + trend * t as f64 + ar[c];
            for k in 0..3 {
                v += amps[k] * (std::f64::consts::TAU * t as f64 / periods[k] + phases[k]).sin();
            }
            values.push(v as f32);
        }
    }
    let names = (0..channels).map(|c| format!("s{c}")).collect();
    TimeSeriesFrame::new(values, channels, names).expect("synthetic values are finite")
}

/// Classification windows: class `k` oscillates with period `T / (k + 2)`,
/// random phase and amplitude, plus white noise.
pub fn synthetic_labeled(
    n: usize,
    t: usize,
    channels: usize,
    classes: usize,
    seed: u64,
) -> Vec<LabeledWindow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f64, 0.3).unwrap();
    (0..n)
        .map(|i| {
            let label = i % classes;
            let period = t as f64 / (label as f64 + 2.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let amp = rng.random_range(0.5..1.5);
            let data = (0..t * channels)
                .map(|j| {
                    let (s, c) = (j / channels, j % channels);
                    let v = amp * (std::f64::consts::TAU * s as f64 / period + phase + c as f64).sin()
                        + noise.sample(&mut rng);
                    v as f32
                })
                .collect();
            LabeledWindow {
                window: Tensor::new(vec![t, channels], data).expect("shape"),
                label,
            }
        })
        .collect()
}
