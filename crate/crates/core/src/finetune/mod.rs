//! Downstream use of a pre-trained encoder: lineage fusion, heads,
//! fine-tuning or linear probing, metrics and lineage-diversity PCA.

mod fusion;
mod head;
mod metrics;
mod pca;

use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use fusion::{fuse_extended, fuse_fixed, Fusion};
pub use head::{argmax, classify_head, denormalize, forecast_head, Head, HeadSpec};
pub use metrics::{
    auroc, average_precision, class_stats, classification_metrics, confusion_matrix,
    forecast_errors, ClassStats, ClassifyMetrics, ForecastReport, HorizonMetrics, MetricsReport,
};
pub use pca::{lineage_diversity_pca, lineage_encodings, LineagePca, Pca, PcaPoint};

use crate::data::{forecast_starts, instance_normalize, stream_rng, LabeledWindow, TimeSeriesFrame};
use crate::error::{Error, Result};
use crate::model::SiameseModel;
use crate::par::Exec;
use crate::tensor::{softmax_in_place, AdamConfig, AdamState, Scalar, Tape, Tensor, Var};
use crate::training::{batch_gradients, EpochLog};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Forecast,
    Classify,
}

/// Which parameters fine-tuning may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Everything the downstream graph uses except the lineage table.
    #[default]
    Full,
    /// Only the new head.
    LinearProbe,
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "linear-probe" | "linear_probe" => Ok(Self::LinearProbe),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Single,
    #[default]
    Fixed,
    Extended,
}

impl FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "fixed" => Ok(Self::Fixed),
            "extended" => Ok(Self::Extended),
            other => Err(Error::Config(format!("unknown fusion {other:?}"))),
        }
    }
}

/// Downstream training settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub task: Task,
    pub mode: TrainMode,
    pub fusion: FusionKind,
    /// Lineages averaged by fixed fusion; defaults to all `N + 1`.
    pub lineages_used: Option<usize>,
    /// Input length in windows for extended fusion.
    pub extended_segments: usize,
    /// Forecast horizon `O`.
    pub horizon: usize,
    pub learning_rate: f64,
    /// Defaults to 10 (forecast) or 50 (classify).
    pub epochs: Option<usize>,
    /// Defaults to 32 (forecast) or 64 (classify).
    pub batch_size: Option<usize>,
    /// Caps the batches per epoch; by default every training example is
    /// visited once per epoch.
    pub steps_per_epoch: Option<usize>,
    /// Set from the run-level seed, not read from config text.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            task: Task::Forecast,
            mode: TrainMode::Full,
            fusion: FusionKind::Fixed,
            lineages_used: None,
            extended_segments: 2,
            horizon: 96,
            learning_rate: 1e-4,
            epochs: None,
            batch_size: None,
            steps_per_epoch: None,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.task {
            Task::Forecast => 10,
            Task::Classify => 50,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size.unwrap_or(match self.task {
            Task::Forecast => 32,
            Task::Classify => 64,
        })
    }

    /// Concrete fusion for a model with `lineages` past lineages.
    pub fn resolve_fusion(&self, lineages: usize) -> Fusion {
        match self.fusion {
            FusionKind::Single => Fusion::Single,
            FusionKind::Fixed => Fusion::Fixed {
                lineages: self.lineages_used.unwrap_or(lineages + 1),
            },
            FusionKind::Extended => Fusion::Extended {
                segments: self.extended_segments,
            },
        }
    }

    /// Head description for this task.
    pub fn head_spec(&self, lineages: usize, classes: usize) -> HeadSpec {
        let fusion = self.resolve_fusion(lineages);
        match self.task {
            Task::Forecast => HeadSpec::Forecast {
                horizon: self.horizon,
                fusion,
            },
            Task::Classify => HeadSpec::Classify { classes, fusion },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == Some(0) || self.steps_per_epoch == Some(0) {
            return Err(Error::Config(
                "batch_size and steps_per_epoch must be positive".into(),
            ));
        }
        if self.task == Task::Forecast && self.horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        Ok(())
    }
}

/// Attaches a head and sets which parameters are trainable.
pub fn prepare(
    mut model: SiameseModel<f32>,
    spec: HeadSpec,
    mode: TrainMode,
    seed: u64,
) -> Result<SiameseModel<f32>> {
    spec.fusion().validate(&model)?;
    model.attach_head(spec, seed)?;
    set_mode(&mut model, mode);
    Ok(model)
}

/// Lineage rows, the pre-training decoder and projector never change
/// downstream; the rest follows `mode`.
pub fn set_mode<S: Scalar>(model: &mut SiameseModel<S>, mode: TrainMode) {
    model.params.set_trainable(|name| match mode {
        TrainMode::LinearProbe => name.starts_with(Head::PREFIX),
        TrainMode::Full => {
            !SiameseModel::<S>::is_lineage_param(name)
                && !name.starts_with("decoder.")
                && !name.starts_with("projector.")
        }
    });
}

fn head_spec(model: &SiameseModel<impl Scalar>) -> Result<HeadSpec> {
    model
        .head_spec()
        .ok_or_else(|| Error::Usage("model has no head; call prepare first".into()))
}

/// De-normalised `[O, C]` forecast for a raw input of the fusion's length.
pub fn predict_forecast<S: Scalar>(
    model: &SiameseModel<S>,
    tape: &mut Tape<'_, S>,
    input: &Tensor<f32>,
) -> Result<Var> {
    let fusion = head_spec(model)?.fusion();
    let (x, stats) = instance_normalize(input);
    let h = fusion.encode(model, tape, &x.cast())?;
    let y = forecast_head(model, tape, h)?;
    denormalize(tape, y, &stats)
}

/// `K` logits for a raw labelled window.
pub fn predict_logits<S: Scalar>(
    model: &SiameseModel<S>,
    tape: &mut Tape<'_, S>,
    window: &Tensor<f32>,
) -> Result<Var> {
    let fusion = head_spec(model)?.fusion();
    let (x, _) = instance_normalize(window);
    let h = fusion.encode(model, tape, &x.cast())?;
    classify_head(model, tape, h)
}

/// Model and per-epoch training losses.
#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub model: SiameseModel<f32>,
    pub history: Vec<EpochLog>,
}

/// Generic epoch loop over `n` examples with a per-example loss.
fn train_loop<F>(
    mut model: SiameseModel<f32>,
    n: usize,
    cfg: &FinetuneConfig,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochLog),
    loss: F,
) -> Result<FinetuneOutcome>
where
    F: Fn(&SiameseModel<f32>, &mut Tape<'_, f32>, usize) -> Result<Var> + Sync + Send,
{
    cfg.validate()?;
    if n == 0 {
        return Err(Error::Data("no training examples".into()));
    }
    let dropout = match cfg.mode {
        TrainMode::Full => model.config.dropout,
        TrainMode::LinearProbe => 0.0,
    };
    let bs = cfg.batch_size().min(n);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.learning_rate), &model.params);
    let mut history = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs() {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(cfg.seed, epoch as u64, 1));
        let batches: Vec<&[usize]> = order.chunks(bs).collect();
        let take = cfg.steps_per_epoch.unwrap_or(batches.len()).min(batches.len());
        let mut sum = 0.0;
        for batch in &batches[..take] {
            let (l, grads) = batch_gradients(&model.params, exec, batch.len(), |i, tape| {
                if dropout > 0.0 {
                    tape.set_train_mode(dropout, crate::training::dropout_seed(cfg.seed, step, i));
                }
                loss(&model, tape, batch[i])
            })?;
            if !l.is_finite() {
                return Err(Error::Divergence { step, loss: l });
            }
            model.params.zero_grads();
            model.params.accumulate(&grads, 1.0)?;
            adam.step(&mut model.params)?;
            sum += l;
            step += 1;
        }
        let log = EpochLog {
            epoch: epoch + 1,
            mean_loss: sum / take as f64,
        };
        on_epoch(&log);
        history.push(log);
    }
    model.params.zero_grads();
    Ok(FinetuneOutcome { model, history })
}

fn check_channels(model: &SiameseModel<f32>, channels: usize) -> Result<()> {
    if channels != model.config.channels {
        return Err(Error::Data(format!(
            "data has {channels} channels, model expects {}",
            model.config.channels
        )));
    }
    Ok(())
}

/// Trains a prepared forecasting model with squared error on `train`.
pub fn finetune_forecast(
    model: SiameseModel<f32>,
    train: &TimeSeriesFrame,
    cfg: &FinetuneConfig,
    exec: Exec,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<FinetuneOutcome> {
    check_channels(&model, train.channels())?;
    let HeadSpec::Forecast { horizon, fusion } = head_spec(&model)? else {
        return Err(Error::Usage("model has a classification head".into()));
    };
    let input_len = fusion.input_len(model.config.input_len);
    let starts = forecast_starts(train.len(), input_len, horizon);
    train_loop(model, starts.len(), cfg, exec, on_epoch, |m, tape, i| {
        let s = starts[i];
        let pred = predict_forecast(m, tape, &train.window(s, input_len)?)?;
        let target = tape.constant(&train.window(s + input_len, horizon)?);
        tape.mse(pred, target)
    })
}

/// Trains a prepared classification model with cross-entropy.
pub fn finetune_classify(
    model: SiameseModel<f32>,
    train: &[LabeledWindow],
    cfg: &FinetuneConfig,
    exec: Exec,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<FinetuneOutcome> {
    let HeadSpec::Classify { classes, .. } = head_spec(&model)? else {
        return Err(Error::Usage("model has a forecasting head".into()));
    };
    for w in train {
        check_channels(&model, w.window.cols())?;
        if w.label >= classes {
            return Err(Error::Data(format!("label {} outside 0..{classes}", w.label)));
        }
    }
    train_loop(model, train.len(), cfg, exec, on_epoch, |m, tape, i| {
        let logits = predict_logits(m, tape, &train[i].window)?;
        tape.cross_entropy(logits, train[i].label)
    })
}

/// Test MSE/MAE of a forecasting model; `None` when `test` is too short
/// for a single window.
pub fn evaluate_forecast(
    model: &SiameseModel<f32>,
    test: &TimeSeriesFrame,
    exec: Exec,
) -> Result<Option<HorizonMetrics>> {
    check_channels(model, test.channels())?;
    let HeadSpec::Forecast { horizon, fusion } = head_spec(model)? else {
        return Err(Error::Usage("model has a classification head".into()));
    };
    let input_len = fusion.input_len(model.config.input_len);
    let starts = forecast_starts(test.len(), input_len, horizon);
    if starts.is_empty() {
        return Ok(None);
    }
    let pairs = exec.try_map(starts.len(), |i| {
        let s = starts[i];
        let mut tape = model.tape();
        let pred = predict_forecast(model, &mut tape, &test.window(s, input_len)?)?;
        tape.ensure_finite(pred, "forecast")?;
        let target = test.window(s + input_len, horizon)?.into_data();
        Ok::<_, Error>((tape.value(pred).to_vec(), target))
    })?;
    let (preds, targets): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    let (mse, mae) = forecast_errors(&preds, &targets)?;
    Ok(Some(HorizonMetrics {
        horizon,
        mse,
        mae,
        windows: starts.len(),
    }))
}

/// Class probabilities for every window, in order.
pub fn predict_probabilities(
    model: &SiameseModel<f32>,
    windows: &[LabeledWindow],
    exec: Exec,
) -> Result<Vec<Vec<f64>>> {
    exec.try_map(windows.len(), |i| {
        let mut tape = model.tape();
        let logits = predict_logits(model, &mut tape, &windows[i].window)?;
        tape.ensure_finite(logits, "classify")?;
        let mut p: Vec<f64> = tape.value(logits).iter().map(|&v| v as f64).collect();
        softmax_in_place(&mut p);
        Ok(p)
    })
}

pub fn evaluate_classify(
    model: &SiameseModel<f32>,
    windows: &[LabeledWindow],
    exec: Exec,
) -> Result<ClassifyMetrics> {
    let HeadSpec::Classify { classes, .. } = head_spec(model)? else {
        return Err(Error::Usage("model has a forecasting head".into()));
    };
    let probs = predict_probabilities(model, windows, exec)?;
    let labels: Vec<usize> = windows.iter().map(|w| w.label).collect();
    classification_metrics(&labels, &probs, classes)
}

/// Train/test data for [`finetune`].
#[derive(Clone, Copy, Debug)]
pub enum Dataset<'a> {
    Forecast {
        train: &'a TimeSeriesFrame,
        test: &'a TimeSeriesFrame,
    },
    Classify {
        train: &'a [LabeledWindow],
        test: &'a [LabeledWindow],
        classes: usize,
    },
}

/// Attaches a head to a pre-trained model, trains it per `cfg` and reports
/// test metrics.
pub fn finetune(
    pretrained: SiameseModel<f32>,
    data: Dataset<'_>,
    cfg: &FinetuneConfig,
    exec: Exec,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(SiameseModel<f32>, MetricsReport)> {
    cfg.validate()?;
    let lineages = pretrained.config.lineages;
    match data {
        Dataset::Forecast { train, test } => {
            if cfg.task != Task::Forecast {
                return Err(Error::Config("forecast data needs task = forecast".into()));
            }
            let model = prepare(pretrained, cfg.head_spec(lineages, 0), cfg.mode, cfg.seed)?;
            let out = finetune_forecast(model, train, cfg, exec, on_epoch)?;
            let row = evaluate_forecast(&out.model, test, exec)?.ok_or_else(|| {
                Error::Data(format!(
                    "test split is too short for horizon {}",
                    cfg.horizon
                ))
            })?;
            Ok((out.model, MetricsReport::Forecast(ForecastReport { rows: vec![row] })))
        }
        Dataset::Classify {
            train,
            test,
            classes,
        } => {
            if cfg.task != Task::Classify {
                return Err(Error::Config("labelled data needs task = classify".into()));
            }
            let model = prepare(pretrained, cfg.head_spec(lineages, classes), cfg.mode, cfg.seed)?;
            let out = finetune_classify(model, train, cfg, exec, on_epoch)?;
            let metrics = evaluate_classify(&out.model, test, exec)?;
            Ok((out.model, MetricsReport::Classify(metrics)))
        }
    }
}

#[cfg(test)]
mod tests;
