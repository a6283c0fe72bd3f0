use crate::tensor::Tensor;

/// Lower clamp on per-channel standard deviations.
pub const NORM_EPS: f32 = 1e-5;

/// Per-channel statistics of one window, kept for de-normalising forecasts.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceStats {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl InstanceStats {
    /// Inverse of the normalisation for a `[len, C]` tensor.
    pub fn denormalize(&self, x: &Tensor<f32>) -> Tensor<f32> {
        let c = self.mean.len();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = *v * self.std[i % c] + self.mean[i % c];
        }
        out
    }
}

/// Z-scores each channel of a `[T, C]` window using its population standard
/// deviation (clamped below by [`NORM_EPS`]).
pub fn instance_normalize(window: &Tensor<f32>) -> (Tensor<f32>, InstanceStats) {
    let (t, c) = (window.rows(), window.cols());
    let n = t as f64;
    let mut mean = vec![0.0f64; c];
    let mut var = vec![0.0f64; c];
    for row in window.data().chunks(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for row in window.data().chunks(c) {
        for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let std: Vec<f32> = var
        .iter()
        .map(|&s| ((s / n).sqrt() as f32).max(NORM_EPS))
        .collect();
    let mean: Vec<f32> = mean.iter().map(|&m| m as f32).collect();
    let mut out = window.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = (*v - mean[i % c]) / std[i % c];
    }
    (out, InstanceStats { mean, std })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn col(values: &[f32]) -> Tensor<f32> {
        Tensor::new(vec![values.len(), 1], values.to_vec()).unwrap()
    }

    #[test]
    fn constant_channel_maps_to_zero() {
        let (z, stats) = instance_normalize(&col(&[4.0; 6]));
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(stats.std, vec![NORM_EPS]);
        assert_eq!(stats.mean, vec![4.0]);
    }

    #[test]
    fn standardised_channel_is_unchanged() {
        let (z, _) = instance_normalize(&col(&[-1.0, 1.0]));
        assert_eq!(z.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn matches_scalar_computation() {
        // mean 2, population variance 2/3
        let (z, stats) = instance_normalize(&col(&[1.0, 2.0, 3.0]));
        let s = (2.0f64 / 3.0).sqrt();
        let expect = [-1.0 / s, 0.0, 1.0 / s];
        for (a, b) in z.data().iter().zip(expect) {
            assert!((*a as f64 - b).abs() < 1e-6);
        }
        assert!((stats.std[0] as f64 - s).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn denormalize_inverts(values in proptest::collection::vec(-100.0f32..100.0, 8..40)) {
            let n = values.len() / 2 * 2;
            let w = Tensor::new(vec![n / 2, 2], values[..n].to_vec()).unwrap();
            let (z, stats) = instance_normalize(&w);
            let back = stats.denormalize(&z);
            for (c, s) in stats.std.iter().enumerate() {
                if *s > 1e-3 {
                    for t in 0..n / 2 {
                        let (a, b) = (back.at(t, c), w.at(t, c));
                        prop_assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()) * 10.0);
                    }
                }
            }
        }
    }
}
