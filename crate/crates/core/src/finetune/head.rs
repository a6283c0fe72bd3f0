use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Fusion;
use crate::data::InstanceStats;
use crate::embedding::TokenSequence;
use crate::error::{Error, Result};
use crate::model::{Backbone, Linear, ModelConfig, SiameseModel};
use crate::tensor::{ParamStore, Scalar, Tape, Var};

/// Task-specific head configuration, stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum HeadSpec {
    Forecast { horizon: usize, fusion: Fusion },
    Classify { classes: usize, fusion: Fusion },
}

impl HeadSpec {
    pub fn fusion(&self) -> Fusion {
        match self {
            Self::Forecast { fusion, .. } | Self::Classify { fusion, .. } => *fusion,
        }
    }
}

/// A linear head on top of the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub spec: HeadSpec,
    pub proj: Linear,
}

impl Head {
    pub const PREFIX: &'static str = "head.";

    pub(crate) fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: &ModelConfig,
        spec: HeadSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let (fan_in, fan_out) = match &spec {
            HeadSpec::Forecast { horizon, fusion } => {
                if *horizon == 0 {
                    return Err(Error::Config("forecast horizon must be positive".into()));
                }
                let per_segment = match cfg.backbone {
                    Backbone::Patch => cfg.input_len / cfg.patch_len,
                    Backbone::Variate => 1,
                };
                let segments = match fusion {
                    Fusion::Extended { segments } => *segments,
                    _ => 1,
                };
                (segments * per_segment * cfg.d_model, *horizon)
            }
            HeadSpec::Classify { classes, .. } => {
                if *classes < 2 {
                    return Err(Error::Config(format!(
                        "classification needs at least 2 classes, got {classes}"
                    )));
                }
                (cfg.d_model, *classes)
            }
        };
        Ok(Self {
            proj: Linear::new(store, "head", fan_in, fan_out, rng),
            spec,
        })
    }
}

/// Per-channel flatten and linear map to `O` steps: `[G, M, D] -> [O, C]`,
/// still in instance-normalised units.
pub fn forecast_head<S: Scalar>(
    model: &SiameseModel<S>,
    tape: &mut Tape<'_, S>,
    h: TokenSequence,
) -> Result<Var> {
    let head = model
        .head
        .as_ref()
        .ok_or_else(|| Error::Usage("model has no head".into()))?;
    let c = model.config.channels;
    let (g, m, d) = h.dims(tape);
    let flat = match model.config.backbone {
        Backbone::Patch => tape.reshape(h.var, &[g, m * d])?,
        Backbone::Variate => {
            let segments = m / c;
            let x = tape.reshape(h.var, &[segments, c, d])?;
            let x = tape.permute(x, &[1, 0, 2])?;
            tape.reshape(x, &[c, segments * d])?
        }
    };
    let y = head.proj.forward(tape, flat)?; // [C, O]
    tape.transpose(y)
}

/// Maps a normalised `[O, C]` prediction back through the input's statistics.
pub fn denormalize<S: Scalar>(
    tape: &mut Tape<'_, S>,
    y: Var,
    stats: &InstanceStats,
) -> Result<Var> {
    let dims = tape.dims(y).to_vec();
    let (o, c) = (dims[0], dims[1]);
    let expand = |v: &[f32]| (0..o * c).map(|i| S::from_f32_lossy(v[i % c])).collect();
    let std = tape.constant_from(&[o, c], expand(&stats.std))?;
    let mean = tape.constant_from(&[o, c], expand(&stats.mean))?;
    let scaled = tape.mul(y, std)?;
    tape.add(scaled, mean)
}

/// Mean-pools every token and maps the pooled vector to `K` logits.
pub fn classify_head<S: Scalar>(
    model: &SiameseModel<S>,
    tape: &mut Tape<'_, S>,
    h: TokenSequence,
) -> Result<Var> {
    let head = model
        .head
        .as_ref()
        .ok_or_else(|| Error::Usage("model has no head".into()))?;
    let (g, m, d) = h.dims(tape);
    let flat = tape.reshape(h.var, &[g * m, d])?;
    let pooled = tape.mean_axis(flat, 0)?;
    let pooled = tape.reshape(pooled, &[1, d])?;
    let logits = head.proj.forward(tape, pooled)?;
    let k = tape.dims(logits)[1];
    tape.reshape(logits, &[k])
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<S: PartialOrd + Copy>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
