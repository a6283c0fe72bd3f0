use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Geometric};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where masked steps are placed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskRule {
    /// Uniformly chosen steps, shared by all channels.
    Binomial,
    /// Uniformly chosen steps, drawn independently per channel.
    ChannelBinomial,
    /// Geometric-length segments, shared by all channels.
    Continuous,
    /// Geometric-length segments, drawn independently per channel.
    ChannelContinuous,
    /// The final steps of every channel.
    MaskLast,
}

impl MaskRule {
    pub const ALL: [MaskRule; 5] = [
        MaskRule::Binomial,
        MaskRule::ChannelBinomial,
        MaskRule::Continuous,
        MaskRule::ChannelContinuous,
        MaskRule::MaskLast,
    ];

    pub fn is_per_channel(self) -> bool {
        matches!(self, MaskRule::ChannelBinomial | MaskRule::ChannelContinuous)
    }

    pub fn name(self) -> &'static str {
        match self {
            MaskRule::Binomial => "binomial",
            MaskRule::ChannelBinomial => "channel_binomial",
            MaskRule::Continuous => "continuous",
            MaskRule::ChannelContinuous => "channel_continuous",
            MaskRule::MaskLast => "mask_last",
        }
    }
}

impl std::str::FromStr for MaskRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskRule::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mask rule `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSpec {
    pub rule: MaskRule,
    pub ratio: f64,
    /// Mean segment length for the continuous rules.
    pub mean_segment_length: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            rule: MaskRule::ChannelContinuous,
            ratio: 0.25,
            mean_segment_length: 12,
        }
    }
}

impl MaskSpec {
    pub fn new(rule: MaskRule, ratio: f64) -> Self {
        Self {
            rule,
            ratio,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("mask ratio {} outside [0, 1]", self.ratio)));
        }
        if self.mean_segment_length == 0 {
            return Err(Error::Config("mean_segment_length must be positive".into()));
        }
        Ok(())
    }

    /// Masked steps per masked unit: `round(ratio · T)`.
    pub fn masked_count(&self, t: usize) -> usize {
        ((self.ratio * t as f64).round() as usize).min(t)
    }
}

/// Exactly `k` distinct steps out of `t`, uniformly.
fn binomial_steps(t: usize, k: usize, rng: &mut impl Rng) -> Vec<bool> {
    let mut m = vec![false; t];
    for i in index::sample(rng, t, k) {
        m[i] = true;
    }
    m
}

/// Geometric segments at uniform starts until at least `k` steps are
/// covered; the overshoot is trimmed from the tail of the last segment.
fn continuous_steps(t: usize, k: usize, mean_len: usize, rng: &mut impl Rng) -> Vec<bool> {
    let mut m = vec![false; t];
    if k == 0 {
        return m;
    }
    let geo = Geometric::new(1.0 / mean_len as f64).expect("p in (0, 1]");
    let mut count = 0;
    loop {
        let len = 1 + geo.sample(rng) as usize;
        let start = rng.random_range(0..t);
        let mut added = Vec::new();
        for i in start..(start + len).min(t) {
            if !m[i] {
                m[i] = true;
                added.push(i);
            }
        }
        count += added.len();
        if count >= k {
            for &i in added.iter().rev().take(count - k) {
                m[i] = false;
            }
            return m;
        }
    }
}

/// Masks a `[T, C]` window in place of zeros; returns the masked copy and the
/// row-major `T × C` mask (true = masked).
pub fn apply_mask(
    window: &Tensor<f32>,
    spec: &MaskSpec,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, Vec<bool>)> {
    spec.validate()?;
    let (t, c) = (window.rows(), window.cols());
    let k = spec.masked_count(t);
    let column = |rng: &mut _| -> Vec<bool> {
        match spec.rule {
            MaskRule::Binomial | MaskRule::ChannelBinomial => binomial_steps(t, k, rng),
            MaskRule::Continuous | MaskRule::ChannelContinuous => {
                continuous_steps(t, k, spec.mean_segment_length, rng)
            }
            MaskRule::MaskLast => (0..t).map(|i| i >= t - k).collect(),
        }
    };
    let columns: Vec<Vec<bool>> = if spec.rule.is_per_channel() {
        (0..c).map(|_| column(rng)).collect()
    } else {
        vec![column(rng); c]
    };
    let mut mask = vec![false; t * c];
    let mut out = window.clone();
    for (j, col) in columns.iter().enumerate() {
        for (i, &masked) in col.iter().enumerate() {
            if masked {
                mask[i * c + j] = true;
                out.data_mut()[i * c + j] = 0.0;
            }
        }
    }
    Ok((out, mask))
}
