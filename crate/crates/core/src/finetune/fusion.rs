use serde::{Deserialize, Serialize};

use crate::embedding::{lineage_matching, Stage, TokenSequence};
use crate::error::{Error, Result};
use crate::model::{Backbone, SiameseModel};
use crate::tensor::{Scalar, Tape, Tensor};

/// How a downstream input is turned into a representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Fusion {
    /// One encoding with lineage 0.
    Single,
    /// Mean of encodings under lineages `0..lineages`.
    Fixed { lineages: usize },
    /// `segments · T` steps split into `T`-long segments, each tagged by age.
    Extended { segments: usize },
}

impl Fusion {
    /// Input steps consumed for a model window length `t`.
    pub fn input_len(self, t: usize) -> usize {
        match self {
            Self::Extended { segments } => segments * t,
            _ => t,
        }
    }

    /// Tokens per channel in the fused representation.
    pub fn tokens_per_channel<S: Scalar>(self, model: &SiameseModel<S>) -> usize {
        let cfg = &model.config;
        let per_segment = match cfg.backbone {
            Backbone::Patch => cfg.input_len / cfg.patch_len,
            Backbone::Variate => 1,
        };
        match self {
            Self::Extended { segments } => segments * per_segment,
            _ => per_segment,
        }
    }

    pub fn validate<S: Scalar>(self, model: &SiameseModel<S>) -> Result<()> {
        match self {
            Self::Single => Ok(()),
            Self::Fixed { lineages } => {
                let max = model.config.lineages + 1;
                if lineages == 0 || lineages > max {
                    return Err(Error::Config(format!(
                        "fixed fusion uses between 1 and {max} lineages, got {lineages}"
                    )));
                }
                Ok(())
            }
            Self::Extended { segments } if segments == 0 => {
                Err(Error::Config("extended fusion needs at least one segment".into()))
            }
            Self::Extended { .. } => Ok(()),
        }
    }

    /// Fused encoding of a normalised input of [`Fusion::input_len`] steps.
    pub fn encode<S: Scalar>(
        self,
        model: &SiameseModel<S>,
        tape: &mut Tape<'_, S>,
        input: &Tensor<S>,
    ) -> Result<TokenSequence> {
        match self {
            Self::Single => model.encode_window(tape, input, 0),
            Self::Fixed { lineages } => fuse_fixed(model, tape, input, lineages),
            Self::Extended { segments } => {
                let got = fuse_extended(model, tape, input)?;
                let expect = segments * model.config.input_len;
                if input.rows() != expect {
                    return Err(Error::Config(format!(
                        "extended input has {} steps, fusion expects {expect}",
                        input.rows()
                    )));
                }
                Ok(got)
            }
        }
    }
}

/// Elementwise mean of the encodings of `window` under lineages `0..n`.
pub fn fuse_fixed<S: Scalar>(
    model: &SiameseModel<S>,
    tape: &mut Tape<'_, S>,
    window: &Tensor<S>,
    n: usize,
) -> Result<TokenSequence> {
    Fusion::Fixed { lineages: n }.validate(model)?;
    let z = model.embed(tape, window)?;
    let mut acc = None;
    for i in 0..n {
        let tagged = model.with_lineage(tape, z, i)?;
        let h = model.encode(tape, tagged)?.var;
        acc = Some(match acc {
            None => h,
            Some(a) => tape.add(a, h)?,
        });
    }
    let mut out = acc.expect("n >= 1");
    if n > 1 {
        out = tape.scale(out, S::one() / S::from_usize_lossy(n));
    }
    Ok(TokenSequence::new(out, Stage::Encoded))
}

/// Splits `input` (a positive multiple of `T` steps) into `T`-long segments
/// counted back from the newest; segment `i` is encoded with the lineage of
/// distance `i·T` (clamped to the sampling range). Token sequences are
/// concatenated oldest first.
pub fn fuse_extended<S: Scalar>(
    model: &SiameseModel<S>,
    tape: &mut Tape<'_, S>,
    input: &Tensor<S>,
) -> Result<TokenSequence> {
    let cfg = &model.config;
    let t = cfg.input_len;
    let len = input.rows();
    if len == 0 || !len.is_multiple_of(t) {
        return Err(Error::Config(format!(
            "extended input of {len} steps: length must be a multiple of {t}"
        )));
    }
    let segments = len / t;
    let max_d = cfg.max_distance();
    let mut encoded = Vec::with_capacity(segments);
    for i in (0..segments).rev() {
        let start = len - (i + 1) * t;
        let seg = input.slice_rows(start, start + t);
        let lineage = lineage_matching((i * t).min(max_d), t, cfg.sampling_range, cfg.lineages)?;
        encoded.push(model.encode_window(tape, &seg, lineage)?.var);
    }
    let var = if encoded.len() == 1 {
        encoded[0]
    } else {
        tape.concat(&encoded, 1)?
    };
    Ok(TokenSequence::new(var, Stage::Encoded))
}
