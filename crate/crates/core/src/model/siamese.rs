use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{DecoderLayer, EncoderLayer, LayerNormParams, Linear};
use super::{Backbone, LossMode, ModelConfig};
use crate::data::SiamesePair;
use crate::embedding::{lineage_matching, Embedding, LineageSet, Stage, TokenSequence};
use crate::error::{Error, Result};
use crate::finetune::{Head, HeadSpec};
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

/// Nodes produced by [`SiameseModel::pretrain_forward`].
#[derive(Clone, Copy, Debug)]
pub struct PretrainOutput {
    pub loss: Var,
    /// Reconstruction `[T, C]`.
    pub x_hat: Var,
    pub lineage: usize,
}

/// One embedding stack, one lineage table, one encoder, one decoder and one
/// projector. Both Siamese branches run the same encoder parameters.
#[derive(Clone, Debug)]
pub struct SiameseModel<S: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub embedding: Embedding,
    pub lineage: LineageSet,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: LayerNormParams,
    pub decoder: Vec<DecoderLayer>,
    pub projector: Linear,
    /// Downstream head, present after [`SiameseModel::attach_head`].
    pub head: Option<Head>,
}

impl<S: Scalar> SiameseModel<S> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let cfg = &config;
        let embedding = Embedding::new(&mut params, cfg, &mut rng);
        let lineage = LineageSet::new(&mut params, cfg.lineages, cfg.d_model, &mut rng);
        let encoder = (0..cfg.e_layers)
            .map(|i| {
                EncoderLayer::new(
                    &mut params,
                    &format!("encoder.{i}"),
                    cfg.d_model,
                    cfg.d_ff,
                    cfg.n_heads,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let encoder_norm = LayerNormParams::new(&mut params, "encoder.norm", cfg.d_model);
        let decoder = (0..cfg.d_layers)
            .map(|i| {
                DecoderLayer::new(
                    &mut params,
                    &format!("decoder.{i}"),
                    cfg.d_model,
                    cfg.d_ff,
                    cfg.n_heads,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let out = match cfg.backbone {
            Backbone::Patch => cfg.patch_len,
            Backbone::Variate => cfg.input_len,
        };
        let projector = Linear::new(&mut params, "projector", cfg.d_model, out, &mut rng);
        Ok(Self {
            config,
            params,
            embedding,
            lineage,
            encoder,
            encoder_norm,
            decoder,
            projector,
            head: None,
        })
    }

    /// Adds freshly initialised head parameters (named `head.*`).
    pub fn attach_head(&mut self, spec: HeadSpec, seed: u64) -> Result<()> {
        if self.head.is_some() {
            return Err(Error::Usage("model already has a head".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.head = Some(Head::new(&mut self.params, &self.config, spec, &mut rng)?);
        Ok(())
    }

    pub fn head_spec(&self) -> Option<HeadSpec> {
        self.head.as_ref().map(|h| h.spec.clone())
    }

    /// Total learnable scalars.
    pub fn count_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    /// Same architecture with every parameter converted to `T`.
    pub fn cast<T: Scalar>(&self) -> SiameseModel<T> {
        SiameseModel {
            config: self.config.clone(),
            params: self.params.cast(),
            embedding: self.embedding,
            lineage: self.lineage,
            encoder: self.encoder.clone(),
            encoder_norm: self.encoder_norm,
            decoder: self.decoder.clone(),
            projector: self.projector,
            head: self.head.clone(),
        }
    }

    /// Sets every lineage row to zero.
    pub fn zero_lineage(&mut self) {
        self.params
            .get_mut(self.lineage.table)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = S::zero());
    }

    /// Whether a parameter belongs to the lineage table.
    pub fn is_lineage_param(name: &str) -> bool {
        name == LineageSet::PARAM_NAME
    }

    pub fn tape(&self) -> Tape<'_, S> {
        Tape::with_params(&self.params)
    }

    pub fn embed(&self, tape: &mut Tape<'_, S>, window: &Tensor<S>) -> Result<TokenSequence> {
        let (t, c) = (window.rows(), window.cols());
        if c != self.config.channels {
            return Err(Error::shape(
                "embed",
                format!("window has {c} channels, model expects {}", self.config.channels),
            ));
        }
        if t != self.config.input_len {
            return Err(Error::shape(
                "embed",
                format!("window has {t} steps, model expects {}", self.config.input_len),
            ));
        }
        self.embedding.forward(tape, window)
    }

    /// Adds lineage row `index`; a no-op when lineages are disabled.
    pub fn with_lineage(
        &self,
        tape: &mut Tape<'_, S>,
        tokens: TokenSequence,
        index: usize,
    ) -> Result<TokenSequence> {
        if !self.config.use_lineage {
            return Ok(tokens);
        }
        self.lineage.apply(tape, tokens, index)
    }

    pub fn encode(&self, tape: &mut Tape<'_, S>, tokens: TokenSequence) -> Result<TokenSequence> {
        let mut x = tokens.var;
        for layer in &self.encoder {
            x = layer.forward(tape, x)?;
        }
        let x = self.encoder_norm.forward(tape, x)?;
        Ok(TokenSequence::new(x, Stage::Encoded))
    }

    /// Embeds a `[T, C]` window, tags it with lineage `index` and encodes it.
    pub fn encode_window(
        &self,
        tape: &mut Tape<'_, S>,
        window: &Tensor<S>,
        index: usize,
    ) -> Result<TokenSequence> {
        let z = self.embed(tape, window)?;
        let z = self.with_lineage(tape, z, index)?;
        self.encode(tape, z)
    }

    pub fn decode(
        &self,
        tape: &mut Tape<'_, S>,
        current: TokenSequence,
        past: TokenSequence,
    ) -> Result<TokenSequence> {
        let (gc, _, dc) = current.dims(tape);
        let (gp, _, dp) = past.dims(tape);
        if gc != gp || dc != dp {
            return Err(Error::shape(
                "decode",
                format!("current has {gc} groups of dim {dc}, past has {gp} of dim {dp}"),
            ));
        }
        let mut x = current.var;
        for layer in &self.decoder {
            x = layer.forward(tape, x, past.var)?;
        }
        Ok(TokenSequence::new(x, Stage::Decoded))
    }

    /// Decoded tokens back to a `[T, C]` window.
    pub fn project(&self, tape: &mut Tape<'_, S>, tokens: TokenSequence) -> Result<Var> {
        let (t, c) = (self.config.input_len, self.config.channels);
        let y = self.projector.forward(tape, tokens.var)?;
        let y = tape.reshape(y, &[c, t])?;
        tape.transpose(y)
    }

    pub fn reconstruction_loss(
        &self,
        tape: &mut Tape<'_, S>,
        x_hat: Var,
        target: &Tensor<S>,
        mask: &[bool],
        mode: LossMode,
    ) -> Result<Var> {
        let target = tape.constant(target);
        match mode {
            LossMode::All => tape.mse(x_hat, target),
            LossMode::MaskedOnly => tape.masked_mse(x_hat, target, mask),
        }
    }

    /// Past-to-current reconstruction of one normalised, masked pair.
    pub fn pretrain_forward(
        &self,
        tape: &mut Tape<'_, S>,
        pair: &SiamesePair,
        mode: LossMode,
    ) -> Result<PretrainOutput> {
        let cfg = &self.config;
        let lineage = lineage_matching(pair.d, cfg.input_len, cfg.sampling_range, cfg.lineages)?;
        let past = self.encode_window(tape, &pair.x_past.cast(), lineage)?;
        let curr = self.encode_window(tape, &pair.x_curr_masked.cast(), 0)?;
        let decoded = self.decode(tape, curr, past)?;
        let x_hat = self.project(tape, decoded)?;
        let loss = self.reconstruction_loss(tape, x_hat, &pair.x_curr.cast(), &pair.mask, mode)?;
        Ok(PretrainOutput {
            loss,
            x_hat,
            lineage,
        })
    }
}

#[cfg(test)]
#[path = "siamese_tests.rs"]
mod tests;
