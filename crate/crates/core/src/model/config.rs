use serde::{Deserialize, Serialize};

use crate::data::MaskSpec;
use crate::error::{Error, Result};

/// How a window is turned into tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Non-overlapping patches per channel; channels are independent groups.
    #[default]
    Patch,
    /// One token per channel holding its whole series.
    Variate,
}

/// Which positions the reconstruction loss averages over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    #[default]
    All,
    MaskedOnly,
}

/// Architecture and augmentation hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Window length T.
    pub input_len: usize,
    /// Channel count C.
    pub channels: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub e_layers: usize,
    pub d_layers: usize,
    /// Number of past lineages N; the lineage table has N + 1 rows.
    pub lineages: usize,
    /// Sampling range r; the largest past distance is `input_len * r`.
    pub sampling_range: usize,
    pub patch_len: usize,
    pub backbone: Backbone,
    pub dropout: f64,
    /// When false, lineage embeddings are never added (ablation).
    pub use_lineage: bool,
    pub mask: MaskSpec,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::base(7)
    }
}

impl ModelConfig {
    /// 3 encoder / 1 decoder layers, d_model 128, d_ff 256, 8 heads.
    pub fn base(channels: usize) -> Self {
        Self {
            input_len: 96,
            channels,
            d_model: 128,
            d_ff: 256,
            n_heads: 8,
            e_layers: 3,
            d_layers: 1,
            lineages: 3,
            sampling_range: 6,
            patch_len: 12,
            backbone: Backbone::Patch,
            dropout: 0.1,
            use_lineage: true,
            mask: MaskSpec::default(),
        }
    }

    /// 5 encoder / 2 decoder layers, d_model 128, d_ff 1024, 16 heads.
    pub fn large(channels: usize) -> Self {
        Self {
            d_ff: 1024,
            n_heads: 16,
            e_layers: 5,
            d_layers: 2,
            ..Self::base(channels)
        }
    }

    /// Smallest useful model, for gradient checks and smoke tests.
    pub fn tiny(channels: usize) -> Self {
        Self {
            input_len: 8,
            channels,
            d_model: 8,
            d_ff: 16,
            n_heads: 2,
            e_layers: 1,
            d_layers: 1,
            lineages: 2,
            sampling_range: 2,
            patch_len: 4,
            dropout: 0.0,
            mask: MaskSpec {
                mean_segment_length: 2,
                ..MaskSpec::default()
            },
            ..Self::base(channels)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_len == 0 || self.channels == 0 {
            return fail("input_len and channels must be positive".into());
        }
        if self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return fail("d_model, d_ff and n_heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.e_layers == 0 || self.d_layers == 0 {
            return fail("e_layers and d_layers must be at least 1".into());
        }
        if self.lineages == 0 {
            return fail("lineages must be at least 1".into());
        }
        if self.backbone == Backbone::Patch {
            if self.patch_len == 0 || self.patch_len > self.input_len {
                return fail(format!(
                    "patch_len {} must be in 1..={}",
                    self.patch_len, self.input_len
                ));
            }
            if !self.input_len.is_multiple_of(self.patch_len) {
                return fail(format!(
                    "input_len {} is not a multiple of patch_len {}",
                    self.input_len, self.patch_len
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        self.mask.validate()
    }

    /// Largest past distance `T · r`.
    pub fn max_distance(&self) -> usize {
        self.input_len * self.sampling_range
    }

    /// Tokens per group for a window of `len` steps.
    pub fn tokens_for(&self, len: usize) -> usize {
        match self.backbone {
            Backbone::Patch => len / self.patch_len,
            Backbone::Variate => self.channels,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
