use super::{ParamStore, Scalar};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            ..Self::default()
        }
    }
}

/// Adam with bias correction. Moment buffers are aligned with the
/// [`ParamStore`] they were created for.
#[derive(Clone, Debug)]
pub struct AdamState<S = f32> {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig, params: &ParamStore<S>) -> Self {
        let m: Vec<Vec<S>> = params
            .tensors()
            .iter()
            .map(|t| vec![S::zero(); t.numel()])
            .collect();
        Self {
            config,
            step: 0,
            v: m.clone(),
            m,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update using each trainable tensor's `grad` buffer.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore<S>) -> Result<()> {
        if params.len() != self.m.len()
            || params
                .tensors()
                .iter()
                .zip(&self.m)
                .any(|(t, m)| t.numel() != m.len())
        {
            return Err(Error::Usage(
                "optimizer state is not aligned with the parameter store".into(),
            ));
        }
        self.step += 1;
        let c = self.config;
        let b1 = S::from_f64(c.beta1).unwrap();
        let b2 = S::from_f64(c.beta2).unwrap();
        let one = S::one();
        let lr = S::from_f64(c.learning_rate).unwrap();
        let eps = S::from_f64(c.epsilon).unwrap();
        let t = self.step as i32;
        let bc1 = one - b1.powi(t);
        let bc2 = one - b2.powi(t);
        for ((tensor, m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if !tensor.requires_grad {
                continue;
            }
            let Some(grad) = tensor.grad.take() else {
                // zero gradient: moments decay, update stays proportional to them
                for (mi, vi) in m.iter_mut().zip(v.iter_mut()) {
                    *mi *= b1;
                    *vi *= b2;
                }
                apply(tensor.data_mut(), m, v, lr, bc1, bc2, eps);
                continue;
            };
            for ((mi, vi), &g) in m.iter_mut().zip(v.iter_mut()).zip(&grad) {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
            }
            apply(tensor.data_mut(), m, v, lr, bc1, bc2, eps);
            tensor.grad = Some(grad);
        }
        Ok(())
    }
}

fn apply<S: Scalar>(data: &mut [S], m: &[S], v: &[S], lr: S, bc1: S, bc2: S, eps: S) {
    for ((p, &mi), &vi) in data.iter_mut().zip(m).zip(v) {
        let mhat = mi / bc1;
        let vhat = vi / bc2;
        *p -= lr * mhat / (vhat.sqrt() + eps);
    }
}
