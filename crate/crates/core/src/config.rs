//! Run configuration: one TOML file with `seed` plus `model.*`,
//! `pretrain.*`, `finetune.*` and `data.*` keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    chronological_split, load_csv, synthetic_series, SplitSizes, StandardScaler, TimeSeriesFrame,
};
use crate::error::{Error, Result};
use crate::finetune::FinetuneConfig;
use crate::model::ModelConfig;
use crate::training::PretrainConfig;

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "TIMESIAM_SEED";

/// Where the series comes from and how it is split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    /// First CSV column holds timestamps.
    pub timestamp_column: bool,
    /// Train/validation/test fractions, in time order.
    pub split: [f64; 3],
    /// Overrides `split` with absolute lengths.
    pub split_lengths: Option<[usize; 3]>,
    /// Length of the bundled synthetic series.
    pub synthetic_len: usize,
    pub synthetic_channels: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            timestamp_column: true,
            split: [0.7, 0.1, 0.2],
            split_lengths: None,
            synthetic_len: 4000,
            synthetic_channels: 3,
        }
    }
}

impl DataConfig {
    pub fn sizes(&self) -> SplitSizes {
        match self.split_lengths {
            Some([a, b, c]) => SplitSizes::Fixed(a, b, c),
            None => SplitSizes::Ratios(self.split[0], self.split[1], self.split[2]),
        }
    }

    pub fn load(&self, path: &Path) -> Result<TimeSeriesFrame> {
        load_csv(path, self.timestamp_column)
    }

    pub fn synthetic(&self, seed: u64) -> TimeSeriesFrame {
        synthetic_series(self.synthetic_len, self.synthetic_channels, seed)
    }
}

/// Train/validation/test frames standardised with train-split statistics.
///
/// Validation and test frames start `lookback` steps early so that their
/// first forecast target begins at the split boundary.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: TimeSeriesFrame,
    pub val: TimeSeriesFrame,
    pub test: TimeSeriesFrame,
    pub scaler: StandardScaler,
}

impl Splits {
    pub fn new(frame: &TimeSeriesFrame, sizes: SplitSizes, lookback: usize) -> Result<Self> {
        let spec = crate::data::SplitSpec::new(frame.len(), sizes)?;
        let (train, _, _) = chronological_split(frame, sizes)?;
        if train.len() < 2 {
            return Err(Error::Data(format!(
                "training split has {} steps",
                train.len()
            )));
        }
        let scaler = StandardScaler::fit(&train)?;
        let widen = |r: std::ops::Range<usize>| {
            if r.is_empty() {
                r
            } else {
                r.start.saturating_sub(lookback)..r.end
            }
        };
        Ok(Self {
            train: scaler.transform(&train),
            val: scaler.transform(&frame.slice(widen(spec.val))),
            test: scaler.transform(&frame.slice(widen(spec.test))),
            scaler,
        })
    }
}

/// Everything a command needs, with preset defaults for unspecified keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub data: DataConfig,
}


impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.set_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Effective configuration as TOML; reloading it reproduces `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
    }

    /// Applies [`SEED_ENV`] if set.
    pub fn apply_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let seed = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an integer")))?;
                self.set_seed(seed);
                Ok(())
            }
            Err(_) => Ok(()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()
    }
}
