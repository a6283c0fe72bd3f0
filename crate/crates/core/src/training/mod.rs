//! Pre-training loop, batch gradients and checkpoints.

mod checkpoint;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, TrainingMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::data::{make_pretrain_batch, stream_rng, TimeSeriesFrame};
use crate::error::{Error, Result};
use crate::model::{LossMode, ModelConfig, SiameseModel};
use crate::par::Exec;
use crate::tensor::{sum_grads, AdamConfig, AdamState, ParamStore, Scalar, Tape, Var};

/// Optimiser and schedule settings for pre-training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Set from the run-level seed, not read from config text.
    #[serde(skip)]
    pub seed: u64,
    /// Defaults to `ceil(windows / batch_size)`.
    pub steps_per_epoch: Option<usize>,
    pub loss_mode: LossMode,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 32,
            epochs: 50,
            seed: 0,
            steps_per_epoch: None,
            loss_mode: LossMode::All,
        }
    }
}

impl PretrainConfig {
    /// Defaults for classification corpora.
    pub fn classification() -> Self {
        Self {
            batch_size: 256,
            epochs: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        Ok(())
    }

    fn resolved_steps(&self, windows: usize) -> usize {
        self.steps_per_epoch
            .unwrap_or_else(|| windows.div_ceil(self.batch_size).max(1))
    }
}

/// One line of training telemetry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} mean_loss={:.6}", self.epoch, self.mean_loss)
    }
}

/// Result of [`pretrain`].
#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: SiameseModel<f32>,
    pub history: Vec<EpochLog>,
    pub steps: usize,
}

impl PretrainOutcome {
    pub fn checkpoint(&self, seed: u64) -> Checkpoint {
        Checkpoint::from_model(
            &self.model,
            TrainingMeta {
                epoch: self.history.len(),
                final_loss: self.history.last().map(|l| l.mean_loss),
                seed,
            },
        )
    }
}

/// Mean loss and summed-then-averaged gradients of `n` independent graphs.
///
/// `build(i, tape)` constructs sample `i`'s scalar loss. Per-sample results
/// are reduced in index order, so the outcome does not depend on `exec`.
pub fn batch_gradients<S, F>(
    params: &ParamStore<S>,
    exec: Exec,
    n: usize,
    build: F,
) -> Result<(f64, crate::tensor::ParamGrads<S>)>
where
    S: Scalar,
    F: Fn(usize, &mut Tape<'_, S>) -> Result<Var> + Sync + Send,
{
    if n == 0 {
        return Err(Error::Usage("empty batch".into()));
    }
    let per_sample = exec.try_map(n, |i| {
        let mut tape = Tape::with_params(params);
        let loss = build(i, &mut tape)?;
        let value = tape.scalar(loss).to_f64_lossy();
        let grads = tape.backward(loss)?.param_grads();
        Ok::<_, Error>((value, grads))
    })?;
    let mut total = 0.0;
    let mut tables = Vec::with_capacity(n);
    for (loss, grads) in per_sample {
        total += loss;
        tables.push(grads);
    }
    let mut grads = sum_grads(tables, params.len());
    let inv = S::one() / S::from_usize_lossy(n);
    for g in grads.iter_mut().flatten() {
        g.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((total / n as f64, grads))
}

/// Dropout stream seed for sample `i` of global step `step`.
pub(crate) fn dropout_seed(seed: u64, step: usize, i: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D)
        ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (i as u64).rotate_left(32)
}

/// Trains a fresh model on Siamese pairs from `frame`.
///
/// `on_epoch` receives each epoch's mean loss as it completes.
pub fn pretrain(
    frame: &TimeSeriesFrame,
    model_config: &ModelConfig,
    config: &PretrainConfig,
    exec: Exec,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<PretrainOutcome> {
    let model = SiameseModel::<f32>::new(model_config.clone(), config.seed)?;
    pretrain_model(model, frame, config, exec, on_epoch)
}

/// Continues pre-training an existing model.
pub fn pretrain_model(
    mut model: SiameseModel<f32>,
    frame: &TimeSeriesFrame,
    config: &PretrainConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<PretrainOutcome> {
    config.validate()?;
    let mc = model.config.clone();
    if frame.channels() != mc.channels {
        return Err(Error::Data(format!(
            "series has {} channels, model expects {}",
            frame.channels(),
            mc.channels
        )));
    }
    if frame.len() < mc.input_len {
        return Err(Error::Data(format!(
            "series of length {} is shorter than the window length {}",
            frame.len(),
            mc.input_len
        )));
    }
    let windows = frame.len() - mc.input_len + 1;
    let steps_per_epoch = config.resolved_steps(windows);
    let mut adam = AdamState::new(AdamConfig::with_lr(config.learning_rate), &model.params);
    let mut history = Vec::with_capacity(config.epochs);
    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let mut sum = 0.0;
        for _ in 0..steps_per_epoch {
            let mut rng = stream_rng(config.seed, step as u64, 0);
            let batch = make_pretrain_batch(
                frame,
                mc.input_len,
                mc.sampling_range,
                &mc.mask,
                config.batch_size,
                &mut rng,
            )?;
            let (loss, grads) = batch_gradients(&model.params, exec, batch.len(), |i, tape| {
                tape.set_train_mode(mc.dropout, dropout_seed(config.seed, step, i));
                Ok(model.pretrain_forward(tape, &batch[i], config.loss_mode)?.loss)
            })?;
            if !loss.is_finite() || grads.iter().flatten().flatten().any(|g| !g.is_finite()) {
                return Err(Error::Divergence { step, loss });
            }
            model.params.zero_grads();
            model.params.accumulate(&grads, 1.0)?;
            adam.step(&mut model.params)?;
            sum += loss;
            step += 1;
        }
        let log = EpochLog {
            epoch: epoch + 1,
            mean_loss: sum / steps_per_epoch as f64,
        };
        on_epoch(&log);
        history.push(log);
    }
    model.params.zero_grads();
    Ok(PretrainOutcome {
        model,
        history,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_series;

    fn quick() -> (TimeSeriesFrame, ModelConfig, PretrainConfig) {
        let frame = synthetic_series(300, 2, 1);
        let mc = ModelConfig::tiny(2);
        let pc = PretrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 2,
            seed: 5,
            steps_per_epoch: Some(3),
            ..PretrainConfig::default()
        };
        (frame, mc, pc)
    }

    #[test]
    fn zero_epochs_returns_the_initialisation() {
        let (frame, mc, mut pc) = quick();
        pc.epochs = 0;
        let out = pretrain(&frame, &mc, &pc, Exec::Sequential, |_| {}).unwrap();
        let init = SiameseModel::<f32>::new(mc, pc.seed).unwrap();
        assert_eq!(out.model.params.tensors(), init.params.tensors());
        assert!(out.history.is_empty());
    }

    #[test]
    fn runs_are_deterministic_across_strategies() {
        let (frame, mc, pc) = quick();
        let mut lines = Vec::new();
        let a = pretrain(&frame, &mc, &pc, Exec::Sequential, |l| lines.push(l.to_string())).unwrap();
        let b = pretrain(&frame, &mc, &pc, Exec::Parallel, |_| {}).unwrap();
        assert_eq!(a.model.params.tensors(), b.model.params.tensors());
        assert_eq!(a.history, b.history);
        assert_eq!(a.steps, 6);
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("epoch=1 mean_loss="));
    }

    #[test]
    fn lineage_table_moves_during_pretraining() {
        let (frame, mc, pc) = quick();
        let out = pretrain(&frame, &mc, &pc, Exec::Parallel, |_| {}).unwrap();
        let init = SiameseModel::<f32>::new(mc, pc.seed).unwrap();
        let t = out.model.lineage.table;
        assert_ne!(out.model.params.get(t).data(), init.params.get(t).data());
    }

    #[test]
    fn divergence_names_the_step() {
        let (frame, mc, mut pc) = quick();
        pc.learning_rate = 1e30;
        pc.epochs = 5;
        match pretrain(&frame, &mc, &pc, Exec::Sequential, |_| {}) {
            Err(Error::Divergence { step, .. }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn short_series_is_a_data_error() {
        let (_, mc, pc) = quick();
        let frame = synthetic_series(5, 2, 0);
        assert!(matches!(
            pretrain(&frame, &mc, &pc, Exec::Sequential, |_| {}),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn batch_gradients_average_per_sample_gradients() {
        use crate::tensor::Tensor;
        let mut store = ParamStore::<f64>::new();
        let w = store.add("w", Tensor::new(vec![1], vec![2.0]).unwrap());
        // loss_i = (w - i)^2, grad_i = 2 (w - i)
        let (loss, grads) = batch_gradients(&store, Exec::Parallel, 3, |i, tape| {
            let p = tape.param(w);
            let c = tape.constant(&Tensor::new(vec![1], vec![i as f64]).unwrap());
            let d = tape.sub(p, c)?;
            let sq = tape.mul(d, d)?;
            Ok(tape.sum(sq))
        })
        .unwrap();
        assert!((loss - (4.0 + 1.0 + 0.0) / 3.0).abs() < 1e-12);
        let g = grads[0].as_ref().unwrap()[0];
        assert!((g - (4.0 + 2.0 + 0.0) / 3.0).abs() < 1e-12);
    }
}
