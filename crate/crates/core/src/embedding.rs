//! Window tokenisation and lineage embeddings.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{Backbone, Linear, ModelConfig};
use crate::tensor::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Where a token sequence sits in the pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Embedded,
    Encoded,
    Decoded,
}

/// Tokens `[G, M, D]` on a tape: `G` independent groups of `M` tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub var: Var,
    pub stage: Stage,
}

impl TokenSequence {
    pub fn new(var: Var, stage: Stage) -> Self {
        Self { var, stage }
    }

    /// `(groups, tokens, d_model)`.
    pub fn dims<S: Scalar>(&self, tape: &Tape<'_, S>) -> (usize, usize, usize) {
        let d = tape.dims(self.var);
        (d[0], d[1], d[2])
    }
}

/// Lineage index for a past distance `d`: `0` only for `d = 0`, otherwise
/// one of `N` equal-width bins over `(0, T·r]`.
pub fn lineage_matching(d: usize, t: usize, r: usize, n: usize) -> Result<usize> {
    if n == 0 {
        return Err(Error::Usage("lineage count must be at least 1".into()));
    }
    let max_d = t * r;
    if d > max_d {
        return Err(Error::Usage(format!(
            "distance {d} exceeds the sampling range {max_d}"
        )));
    }
    if d == 0 {
        return Ok(0);
    }
    Ok(n.min(1 + (d - 1) * n / max_d))
}

/// Reorders a `[T, C]` window into per-channel patches `[C, T/P, P]`.
pub fn patchify<S: Scalar>(window: &Tensor<S>, patch_len: usize) -> Result<Tensor<S>> {
    let (t, c) = (window.rows(), window.cols());
    if patch_len == 0 || patch_len > t {
        return Err(Error::Config(format!(
            "patch_len {patch_len} must be in 1..={t}"
        )));
    }
    if t % patch_len != 0 {
        return Err(Error::Config(format!(
            "window length {t} is not a multiple of patch_len {patch_len}"
        )));
    }
    expect_2d(window, "patch_embed")?;
    window.transpose().reshape(&[c, t / patch_len, patch_len])
}

fn expect_2d<S: Scalar>(window: &Tensor<S>, op: &'static str) -> Result<()> {
    if window.dims().len() != 2 {
        return Err(Error::shape(op, format!("expected [T, C], got {:?}", window.dims())));
    }
    Ok(())
}

/// Linear patch projection plus a learnable embedding per token position.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchEmbedding {
    pub proj: Linear,
    pub position: ParamId,
    pub patch_len: usize,
    pub tokens: usize,
}

impl PatchEmbedding {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let tokens = cfg.input_len / cfg.patch_len;
        Self {
            proj: Linear::new(store, "embed.patch", cfg.patch_len, cfg.d_model, rng),
            position: store.add(
                "embed.position",
                crate::model::embedding_init(&[tokens, cfg.d_model], rng),
            ),
            patch_len: cfg.patch_len,
            tokens,
        }
    }

    /// `[T, C] -> [C, T/P, D]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, window: &Tensor<S>) -> Result<Var> {
        let patches = patchify(window, self.patch_len)?;
        if patches.dims()[1] != self.tokens {
            return Err(Error::shape(
                "patch_embed",
                format!(
                    "window gives {} patches, embedding expects {}",
                    patches.dims()[1],
                    self.tokens
                ),
            ));
        }
        let x = tape.constant(&patches);
        let z = self.proj.forward(tape, x)?;
        let pos = tape.param(self.position);
        tape.add_broadcast(z, pos)
    }
}

/// One token per channel: a linear map of the channel's whole series.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VariateEmbedding {
    pub proj: Linear,
    pub input_len: usize,
}

impl VariateEmbedding {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            proj: Linear::new(store, "embed.variate", cfg.input_len, cfg.d_model, rng),
            input_len: cfg.input_len,
        }
    }

    /// `[T, C] -> [1, C, D]`.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<'_, S>, window: &Tensor<S>) -> Result<Var> {
        let (t, c) = (window.rows(), window.cols());
        if t != self.input_len {
            return Err(Error::shape(
                "variate_embed",
                format!("window length {t}, expected {}", self.input_len),
            ));
        }
        expect_2d(window, "variate_embed")?;
        let series = window.transpose().reshape(&[1, c, t])?;
        let x = tape.constant(&series);
        self.proj.forward(tape, x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Embedding {
    Patch(PatchEmbedding),
    Variate(VariateEmbedding),
}

impl Embedding {
    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: &ModelConfig,
        rng: &mut impl Rng,
    ) -> Self {
        match cfg.backbone {
            Backbone::Patch => Self::Patch(PatchEmbedding::new(store, cfg, rng)),
            Backbone::Variate => Self::Variate(VariateEmbedding::new(store, cfg, rng)),
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        window: &Tensor<S>,
    ) -> Result<TokenSequence> {
        let var = match self {
            Self::Patch(p) => p.forward(tape, window)?,
            Self::Variate(v) => v.forward(tape, window)?,
        };
        Ok(TokenSequence::new(var, Stage::Embedded))
    }
}

/// `(N + 1) × D` table of lineage embeddings; row 0 tags the current window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LineageSet {
    pub table: ParamId,
    pub lineages: usize,
}

impl LineageSet {
    pub const PARAM_NAME: &'static str = "lineage.table";

    pub fn new<S: Scalar>(
        store: &mut ParamStore<S>,
        lineages: usize,
        d_model: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            table: store.add(
                Self::PARAM_NAME,
                crate::model::embedding_init(&[lineages + 1, d_model], rng),
            ),
            lineages,
        }
    }

    /// Adds row `index` to every token.
    pub fn apply<S: Scalar>(
        &self,
        tape: &mut Tape<'_, S>,
        tokens: TokenSequence,
        index: usize,
    ) -> Result<TokenSequence> {
        if index > self.lineages {
            return Err(Error::Usage(format!(
                "lineage index {index} outside 0..={}",
                self.lineages
            )));
        }
        let table = tape.param(self.table);
        let e = tape.select_row(table, index)?;
        add_lineage(tape, tokens, e)
    }
}

/// Broadcast-adds a `[D]` vector to every token of every group.
pub fn add_lineage<S: Scalar>(
    tape: &mut Tape<'_, S>,
    tokens: TokenSequence,
    e: Var,
) -> Result<TokenSequence> {
    let d = *tape.dims(tokens.var).last().unwrap_or(&0);
    if tape.dims(e) != [d] {
        return Err(Error::shape(
            "add_lineage",
            format!("embedding {:?} vs token dim {d}", tape.dims(e)),
        ));
    }
    let var = tape.add_broadcast(tokens.var, e)?;
    Ok(TokenSequence::new(var, tokens.stage))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn lineage_boundaries() {
        assert_eq!(lineage_matching(0, 96, 6, 3).unwrap(), 0);
        let got: Vec<usize> = [1, 192, 193, 384, 385, 576]
            .iter()
            .map(|&d| lineage_matching(d, 96, 6, 3).unwrap())
            .collect();
        assert_eq!(got, [1, 1, 2, 2, 3, 3]);
        for d in 1..=20 {
            assert_eq!(lineage_matching(d, 4, 5, 1).unwrap(), 1);
        }
        assert!(lineage_matching(577, 96, 6, 3).is_err());
        assert_eq!(lineage_matching(0, 96, 0, 3).unwrap(), 0);
    }

    proptest! {
        #[test]
        fn lineage_is_monotone_and_surjective(t in 1usize..50, r in 1usize..8, n in 1usize..6) {
            prop_assume!(t * r >= n);
            let idx: Vec<usize> = (0..=t * r).map(|d| lineage_matching(d, t, r, n).unwrap()).collect();
            prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(idx.iter().filter(|&&i| i == 0).count(), 1);
            for k in 1..=n {
                prop_assert!(idx.contains(&k));
            }
        }
    }

    fn setup(cfg: &ModelConfig) -> (ParamStore<f64>, Embedding) {
        let mut store = ParamStore::new();
        let emb = Embedding::new(&mut store, cfg, &mut ChaCha8Rng::seed_from_u64(3));
        (store, emb)
    }

    fn random_window(t: usize, c: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[t, c], |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn patch_token_counts() {
        let mut cfg = ModelConfig::base(2);
        let (store, emb) = setup(&cfg);
        let mut tape = Tape::with_params(&store);
        let z = emb.forward(&mut tape, &random_window(96, 2, 0)).unwrap();
        assert_eq!(z.dims(&tape), (2, 8, 128));

        cfg.input_len = 12;
        let (store, emb) = setup(&cfg);
        let mut tape = Tape::with_params(&store);
        let z = emb.forward(&mut tape, &random_window(12, 2, 0)).unwrap();
        assert_eq!(z.dims(&tape), (2, 1, 128));
    }

    #[test]
    fn bad_patch_lengths_are_config_errors() {
        let w = random_window(8, 1, 0);
        assert!(matches!(patchify(&w, 16), Err(Error::Config(_))));
        assert!(matches!(patchify(&w, 3), Err(Error::Config(_))));
    }

    #[test]
    fn zero_window_gives_positional_embeddings() {
        let cfg = ModelConfig::tiny(3);
        let (store, emb) = setup(&cfg);
        let Embedding::Patch(p) = emb else { unreachable!() };
        let mut tape = Tape::with_params(&store);
        let z = emb.forward(&mut tape, &Tensor::zeros(&[8, 3])).unwrap();
        let pos = store.get(p.position).data();
        for (i, v) in tape.value(z.var).iter().enumerate() {
            assert_eq!(*v, pos[i % pos.len()]);
        }
    }

    #[test]
    fn patch_embedding_matches_explicit_oracle() {
        let cfg = ModelConfig::tiny(2);
        let (store, emb) = setup(&cfg);
        let Embedding::Patch(p) = emb else { unreachable!() };
        let x = random_window(8, 2, 5);
        let mut tape = Tape::with_params(&store);
        let z = emb.forward(&mut tape, &x).unwrap();
        let (w, b, pos) = (
            store.get(p.proj.w).data(),
            store.get(p.proj.b).data(),
            store.get(p.position).data(),
        );
        let (pl, d, m) = (4, 8, 2);
        let got = tape.value(z.var);
        for c in 0..2 {
            for tok in 0..m {
                for j in 0..d {
                    let mut acc = b[j] + pos[tok * d + j];
                    for k in 0..pl {
                        acc += x.at(tok * pl + k, c) * w[k * d + j];
                    }
                    let g = got[(c * m + tok) * d + j];
                    assert!((g - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn variate_embedding_matches_explicit_oracle() {
        let cfg = ModelConfig {
            backbone: Backbone::Variate,
            ..ModelConfig::tiny(3)
        };
        let (store, emb) = setup(&cfg);
        let Embedding::Variate(v) = emb else { unreachable!() };
        let x = random_window(8, 3, 9);
        let mut tape = Tape::with_params(&store);
        let z = emb.forward(&mut tape, &x).unwrap();
        assert_eq!(z.dims(&tape), (1, 3, 8));
        let (w, b) = (store.get(v.proj.w).data(), store.get(v.proj.b).data());
        let got = tape.value(z.var);
        for c in 0..3 {
            for j in 0..8 {
                let acc: f64 = b[j] + (0..8).map(|t| x.at(t, c) * w[t * 8 + j]).sum::<f64>();
                assert!((got[c * 8 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn identical_channels_give_identical_variate_tokens() {
        let cfg = ModelConfig {
            backbone: Backbone::Variate,
            ..ModelConfig::tiny(2)
        };
        let (store, emb) = setup(&cfg);
        let col = random_window(8, 1, 1);
        let x = Tensor::from_fn(&[8, 2], |i| col.data()[i / 2]);
        let mut tape = Tape::with_params(&store);
        let z = emb.forward(&mut tape, &x).unwrap();
        let v = tape.value(z.var);
        assert_eq!(v[..8], v[8..]);
    }

    #[test]
    fn embedding_is_affine_in_the_window() {
        let cfg = ModelConfig::tiny(2);
        let (store, emb) = setup(&cfg);
        let x = random_window(8, 2, 2);
        let x3 = Tensor::from_fn(&[8, 2], |i| 3.0 * x.data()[i]);
        let mut tape = Tape::with_params(&store);
        let z0 = emb.forward(&mut tape, &Tensor::zeros(&[8, 2])).unwrap();
        let z1 = emb.forward(&mut tape, &x).unwrap();
        let z3 = emb.forward(&mut tape, &x3).unwrap();
        let (a, b, c) = (tape.value(z0.var), tape.value(z1.var), tape.value(z3.var));
        for i in 0..a.len() {
            // f(3x) - f(0) = 3 (f(x) - f(0))
            assert!(((c[i] - a[i]) - 3.0 * (b[i] - a[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn add_lineage_broadcast_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tokens = Tensor::<f64>::from_fn(&[3, 4, 5], |_| rng.random_range(-1.0..1.0));
        let e = Tensor::<f64>::from_fn(&[5], |_| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let tv = TokenSequence::new(tape.constant(&tokens), Stage::Embedded);
        let ev = tape.constant(&e);
        let out = add_lineage(&mut tape, tv, ev).unwrap();
        let got = tape.value(out.var);
        for g in 0..3 {
            for m in 0..4 {
                for j in 0..5 {
                    let i = (g * 4 + m) * 5 + j;
                    assert_eq!(got[i], tokens.data()[i] + e.data()[j]);
                }
            }
        }
        let zero = tape.constant(&Tensor::zeros(&[5]));
        let same = add_lineage(&mut tape, tv, zero).unwrap();
        assert_eq!(tape.value(same.var), tokens.data());
        let bad = tape.constant(&Tensor::zeros(&[4]));
        assert!(add_lineage(&mut tape, tv, bad).is_err());
    }

    #[test]
    fn lineage_set_rejects_out_of_range_rows() {
        let mut store = ParamStore::<f64>::new();
        let set = LineageSet::new(&mut store, 3, 4, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::with_params(&store);
        let z = TokenSequence::new(tape.constant(&Tensor::zeros(&[1, 2, 4])), Stage::Embedded);
        let out = set.apply(&mut tape, z, 2).unwrap();
        let row = &store.get(set.table).data()[8..12];
        assert_eq!(&tape.value(out.var)[4..8], row);
        assert!(set.apply(&mut tape, z, 4).is_err());
    }
}
