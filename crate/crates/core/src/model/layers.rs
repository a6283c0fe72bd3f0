use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Uniform in ±sqrt(6 / (fan_in + fan_out)).
pub(crate) fn xavier<S: Scalar>(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<S> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| {
        S::from_f64(rng.random_range(-a..=a)).unwrap()
    })
}

/// Normal(0, 0.02), used for embedding tables.
pub(crate) fn embedding_init<S: Scalar>(dims: &[usize], rng: &mut impl Rng) -> Tensor<S> {
    let n = Normal::new(0.0, 0.02).unwrap();
    Tensor::from_fn(dims, |_| S::from_f64(n.sample(rng)).unwrap())
}

/// Affine map over the last axis; the weight is stored `[in, out]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: store.add(format!("{name}.weight"), xavier(fan_in, fan_out, rng)),
            b: store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let (w, b) = (tape.param(self.w), tape.param(self.b));
        tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[d], S::one())),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d])),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let (g, b) = (tape.param(self.gamma), tape.param(self.beta));
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

/// Multi-head scaled dot-product attention over `[G, M, D]` token groups;
/// groups never attend to each other.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_model: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "d_model {d_model} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng),
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
            o: Linear::new(store, &format!("{name}.o"), d_model, d_model, rng),
            heads,
        })
    }

    /// `[G, M, D] -> [G·H, M, D/H]`
    fn split_heads<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let (g, m, d) = dims3(tape, x)?;
        let h = self.heads;
        let x = tape.reshape(x, &[g, m, h, d / h])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[g * h, m, d / h])
    }

    /// Attention of `query` tokens over `key_value` tokens.
    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        query: Var,
        key_value: Var,
    ) -> Result<Var> {
        let (g, mq, d) = dims3(tape, query)?;
        let (gk, mk, dk) = dims3(tape, key_value)?;
        if g != gk || d != dk {
            return Err(Error::shape(
                "attention",
                format!("query [{g},{mq},{d}] vs key/value [{gk},{mk},{dk}]"),
            ));
        }
        let h = self.heads;
        let q = self.q.forward(tape, query)?;
        let k = self.k.forward(tape, key_value)?;
        let v = self.v.forward(tape, key_value)?;
        let q = self.split_heads(tape, q)?;
        let k = self.split_heads(tape, k)?;
        let v = self.split_heads(tape, v)?;
        let kt = tape.transpose(k)?;
        let scores = tape.bmm(q, kt)?;
        let scale = S::one() / S::from_usize_lossy(d / h).sqrt();
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax(scores);
        let weights = tape.dropout(weights);
        let ctx = tape.bmm(weights, v)?; // [G·H, Mq, D/H]
        let ctx = tape.reshape(ctx, &[g, h, mq, d / h])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[g, mq, d])?;
        self.o.forward(tape, ctx)
    }
}

fn dims3<S: Scalar>(tape: &Tape<'_, S>, x: Var) -> Result<(usize, usize, usize)> {
    match *tape.dims(x) {
        [g, m, d] => Ok((g, m, d)),
        ref other => Err(Error::shape("tokens", format!("expected [G, M, D], got {other:?}"))),
    }
}

/// `Linear → GELU → Linear → dropout`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_model: usize,
        d_ff: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), d_model, d_ff, rng),
            down: Linear::new(store, &format!("{name}.down"), d_ff, d_model, rng),
        }
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let h = self.up.forward(tape, x)?;
        let h = tape.gelu(h);
        let h = self.down.forward(tape, h)?;
        Ok(tape.dropout(h))
    }
}

/// Pre-norm block: `x + Attn(LN(x))`, then `x + FFN(LN(x))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderLayer {
    pub norm_attn: LayerNormParams,
    pub attn: Attention,
    pub norm_ff: LayerNormParams,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_model: usize,
        d_ff: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            norm_attn: LayerNormParams::new(store, &format!("{name}.norm_attn"), d_model),
            attn: Attention::new(store, &format!("{name}.attn"), d_model, heads, rng)?,
            norm_ff: LayerNormParams::new(store, &format!("{name}.norm_ff"), d_model),
            ff: FeedForward::new(store, &format!("{name}.ff"), d_model, d_ff, rng),
        })
    }

    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, x: Var) -> Result<Var> {
        let n = self.norm_attn.forward(tape, x)?;
        let a = self.attn.forward(tape, n, n)?;
        let x = tape.add(x, a)?;
        let n = self.norm_ff.forward(tape, x)?;
        let f = self.ff.forward(tape, n)?;
        tape.add(x, f)
    }
}

/// Post-norm decoder block: cross-attention from the current tokens to the
/// past tokens, then self-attention, then a feed-forward network, each
/// wrapped as `LayerNorm(x + sublayer(x))`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderLayer {
    pub cross: Attention,
    pub norm_cross: LayerNormParams,
    pub self_attn: Attention,
    pub norm_self: LayerNormParams,
    pub ff: FeedForward,
    pub norm_ff: LayerNormParams,
}

impl DecoderLayer {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        name: &str,
        d_model: usize,
        d_ff: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            cross: Attention::new(store, &format!("{name}.cross"), d_model, heads, rng)?,
            norm_cross: LayerNormParams::new(store, &format!("{name}.norm_cross"), d_model),
            self_attn: Attention::new(store, &format!("{name}.self_attn"), d_model, heads, rng)?,
            norm_self: LayerNormParams::new(store, &format!("{name}.norm_self"), d_model),
            ff: FeedForward::new(store, &format!("{name}.ff"), d_model, d_ff, rng),
            norm_ff: LayerNormParams::new(store, &format!("{name}.norm_ff"), d_model),
        })
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        current: Var,
        past: Var,
    ) -> Result<Var> {
        let c = self.cross.forward(tape, current, past)?;
        let x = tape.add(current, c)?;
        let x = self.norm_cross.forward(tape, x)?;
        let s = self.self_attn.forward(tape, x, x)?;
        let x2 = tape.add(x, s)?;
        let x = self.norm_self.forward(tape, x2)?;
        let f = self.ff.forward(tape, x)?;
        let x3 = tape.add(x, f)?;
        self.norm_ff.forward(tape, x3)
    }
}
