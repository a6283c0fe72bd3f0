use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{apply_mask, instance_normalize, synthetic_series};
use crate::tensor::{grad_check, ParamId};

fn tiny(c: usize) -> SiameseModel<f64> {
    SiameseModel::new(ModelConfig::tiny(c), 11).unwrap()
}

fn random_window(t: usize, c: usize, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(&[t, c], |_| rng.random_range(-2.0..2.0))
}

/// Normalised, masked pair from a synthetic series with a chosen distance.
fn toy_pair(cfg: &ModelConfig, d: usize, seed: u64) -> SiamesePair {
    let frame = synthetic_series(200, cfg.channels, seed);
    let start = 100;
    let (x_past, _) = instance_normalize(&frame.window(start - d, cfg.input_len).unwrap());
    let (x_curr, _) = instance_normalize(&frame.window(start, cfg.input_len).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x_curr_masked, mask) = apply_mask(&x_curr, &cfg.mask, &mut rng).unwrap();
    SiamesePair {
        x_past,
        x_curr,
        x_curr_masked,
        mask,
        d,
        curr_start: start,
    }
}

#[test]
fn preset_parameter_counts_are_near_reference() {
    let base = SiameseModel::<f32>::new(ModelConfig::base(7), 0).unwrap().count_parameters();
    let large = SiameseModel::<f32>::new(ModelConfig::large(7), 0).unwrap().count_parameters();
    let within = |n: usize, r: f64| (n as f64 - r).abs() <= 0.2 * r;
    assert!(within(base, 709_344.0), "base {base}");
    assert!(within(large, 2_554_720.0), "large {large}");
    assert!(large > base);
}

#[test]
fn branches_share_weights() {
    let model = tiny(2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random_window(8, 2, &mut rng);
    let mut tape = model.tape();
    let a = model.encode_window(&mut tape, &x, 0).unwrap();
    let b = model.encode_window(&mut tape, &x, 0).unwrap();
    assert_eq!(tape.value(a.var), tape.value(b.var));
    let encoder_params = model
        .params
        .iter()
        .filter(|(_, n, _)| n.starts_with("encoder."))
        .count();
    // 16 tensors per pre-norm block plus the final norm
    assert_eq!(encoder_params, 16 * model.config.e_layers + 2);
}

#[test]
fn encoder_and_projector_shapes_hold_for_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    for _ in 0..50 {
        let heads = rng.random_range(1..=3);
        let patch_len = rng.random_range(1..=4);
        let cfg = ModelConfig {
            input_len: patch_len * rng.random_range(1..=4),
            channels: rng.random_range(1..=3),
            d_model: heads * rng.random_range(1..=3),
            d_ff: rng.random_range(1..=8),
            n_heads: heads,
            e_layers: rng.random_range(1..=2),
            d_layers: rng.random_range(1..=2),
            patch_len,
            backbone: if rng.random_bool(0.5) {
                Backbone::Patch
            } else {
                Backbone::Variate
            },
            ..ModelConfig::tiny(1)
        };
        let model = SiameseModel::<f64>::new(cfg.clone(), rng.random()).unwrap();
        let x = random_window(cfg.input_len, cfg.channels, &mut rng);
        let mut tape = model.tape();
        let z = model.embed(&mut tape, &x).unwrap();
        let h = model.encode(&mut tape, z).unwrap();
        assert_eq!(tape.dims(z.var), tape.dims(h.var));
        let dec = model.decode(&mut tape, h, h).unwrap();
        let y = model.project(&mut tape, dec).unwrap();
        assert_eq!(tape.dims(y), &[cfg.input_len, cfg.channels]);
    }
}

#[test]
fn decoder_keeps_query_count_for_any_past_length() {
    let model = tiny(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for past_tokens in 1..5 {
        let mut tape = model.tape();
        let curr = tape.constant(&Tensor::from_fn(&[1, 2, 8], |_| rng.random_range(-1.0..1.0)));
        let past = tape.constant(&Tensor::from_fn(&[1, past_tokens, 8], |_| {
            rng.random_range(-1.0..1.0)
        }));
        let out = model
            .decode(
                &mut tape,
                TokenSequence::new(curr, Stage::Encoded),
                TokenSequence::new(past, Stage::Encoded),
            )
            .unwrap();
        assert_eq!(tape.dims(out.var), &[1, 2, 8]);
    }
    let mut tape = model.tape();
    let a = tape.constant(&Tensor::zeros(&[2, 2, 8]));
    let b = tape.constant(&Tensor::zeros(&[1, 2, 8]));
    assert!(model
        .decode(
            &mut tape,
            TokenSequence::new(a, Stage::Encoded),
            TokenSequence::new(b, Stage::Encoded)
        )
        .is_err());
}

// ---- scalar oracle of one decoder layer ----

type Rows = Vec<Vec<f64>>;

fn p<'a>(m: &'a SiameseModel<f64>, name: &str) -> &'a [f64] {
    m.params.get(m.params.id(name).unwrap()).data()
}

fn o_linear(m: &SiameseModel<f64>, name: &str, x: &Rows) -> Rows {
    let (w, b) = (p(m, &format!("{name}.weight")), p(m, &format!("{name}.bias")));
    let out = b.len();
    x.iter()
        .map(|row| {
            (0..out)
                .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i * out + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

fn o_layer_norm(m: &SiameseModel<f64>, name: &str, x: &Rows) -> Rows {
    let (g, b) = (p(m, &format!("{name}.gamma")), p(m, &format!("{name}.beta")));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| g[j] * (v - mean) / (var + 1e-5).sqrt() + b[j])
                .collect()
        })
        .collect()
}

fn o_attention(m: &SiameseModel<f64>, name: &str, q_in: &Rows, kv_in: &Rows, heads: usize) -> Rows {
    let q = o_linear(m, &format!("{name}.q"), q_in);
    let k = o_linear(m, &format!("{name}.k"), kv_in);
    let v = o_linear(m, &format!("{name}.v"), kv_in);
    let d = q[0].len();
    let dh = d / heads;
    let mut ctx = vec![vec![0.0; d]; q.len()];
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for (i, qi) in q.iter().enumerate() {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| cols.clone().map(|c| qi[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                ctx[i][c] = e.iter().zip(&v).map(|(w, vj)| w * vj[c]).sum::<f64>() / z;
            }
        }
    }
    o_linear(m, &format!("{name}.o"), &ctx)
}

fn o_gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn add_rows(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

fn o_decoder_layer(m: &SiameseModel<f64>, curr: &Rows, past: &Rows) -> Rows {
    let heads = m.config.n_heads;
    let c = o_attention(m, "decoder.0.cross", curr, past, heads);
    let x = o_layer_norm(m, "decoder.0.norm_cross", &add_rows(curr, &c));
    let s = o_attention(m, "decoder.0.self_attn", &x, &x, heads);
    let x = o_layer_norm(m, "decoder.0.norm_self", &add_rows(&x, &s));
    let h: Rows = o_linear(m, "decoder.0.ff.up", &x)
        .into_iter()
        .map(|r| r.into_iter().map(o_gelu).collect())
        .collect();
    let f = o_linear(m, "decoder.0.ff.down", &h);
    o_layer_norm(m, "decoder.0.norm_ff", &add_rows(&x, &f))
}

fn to_rows(t: &Tensor<f64>) -> Rows {
    let d = *t.dims().last().unwrap();
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

#[test]
fn decoder_matches_scalar_oracle() {
    let mut model = tiny(1);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    // non-trivial norm parameters so the oracle exercises them
    let norm_ids: Vec<ParamId> = model
        .params
        .iter()
        .filter(|(_, n, _)| n.contains("norm"))
        .map(|(id, _, _)| id)
        .collect();
    for id in norm_ids {
        for v in model.params.get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let curr = Tensor::from_fn(&[1, 2, 8], |_| rng.random_range(-1.0..1.0));
    let past = Tensor::from_fn(&[1, 3, 8], |_| rng.random_range(-1.0..1.0));
    let mut tape = model.tape();
    let (cv, pv) = (tape.constant(&curr), tape.constant(&past));
    let out = model
        .decode(
            &mut tape,
            TokenSequence::new(cv, Stage::Encoded),
            TokenSequence::new(pv, Stage::Encoded),
        )
        .unwrap();
    let expect = o_decoder_layer(&model, &to_rows(&curr), &to_rows(&past));
    for (a, b) in tape.value(out.var).iter().zip(expect.iter().flatten()) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn zeroed_sublayers_leave_the_residual_path() {
    let mut model = tiny(1);
    let names = ["cross.o", "self_attn.o", "ff.down"];
    for n in names {
        for suffix in ["weight", "bias"] {
            let id = model.params.id(&format!("decoder.0.{n}.{suffix}")).unwrap();
            model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let curr = Tensor::from_fn(&[1, 2, 8], |_| rng.random_range(-1.0..1.0));
    let past = Tensor::from_fn(&[1, 2, 8], |_| rng.random_range(-1.0..1.0));
    let mut tape = model.tape();
    let (cv, pv) = (tape.constant(&curr), tape.constant(&past));
    let out = model
        .decode(
            &mut tape,
            TokenSequence::new(cv, Stage::Encoded),
            TokenSequence::new(pv, Stage::Encoded),
        )
        .unwrap();
    let mut expect = to_rows(&curr);
    for _ in 0..3 {
        expect = o_layer_norm(&model, "decoder.0.norm_cross", &expect);
    }
    for (a, b) in tape.value(out.var).iter().zip(expect.iter().flatten()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn projector_is_linear_and_shaped() {
    let mut model = tiny(2);
    let id = model.projector.b;
    model.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut tape = model.tape();
    let z = tape.constant(&Tensor::zeros(&[2, 2, 8]));
    let y = model.project(&mut tape, TokenSequence::new(z, Stage::Decoded)).unwrap();
    assert_eq!(tape.dims(y), &[8, 2]);
    assert!(tape.value(y).iter().all(|&v| v == 0.0));
}

#[test]
fn identity_projector_reproduces_the_token() {
    // variate mode with D = T and one channel: an identity projector returns
    // the decoded token as the series
    let cfg = ModelConfig {
        backbone: Backbone::Variate,
        ..ModelConfig::tiny(1)
    };
    let mut model = SiameseModel::<f64>::new(cfg, 0).unwrap();
    let w = model.projector.w;
    let b = model.projector.b;
    *model.params.get_mut(w) = Tensor::from_fn(&[8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
    model.params.get_mut(b).data_mut().iter_mut().for_each(|v| *v = 0.0);
    let token: Vec<f64> = (0..8).map(|i| i as f64 * 0.5 - 1.0).collect();
    let mut tape = model.tape();
    let z = tape.constant_from(&[1, 1, 8], token.clone()).unwrap();
    let y = model.project(&mut tape, TokenSequence::new(z, Stage::Decoded)).unwrap();
    assert_eq!(tape.value(y), token.as_slice());
}

#[test]
fn reconstruction_loss_matches_double_loop() {
    let model = tiny(3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_window(8, 3, &mut rng);
    let b = random_window(8, 3, &mut rng);
    let mask: Vec<bool> = (0..24).map(|_| rng.random_bool(0.3)).collect();
    let mut tape = model.tape();
    let av = tape.constant(&a);
    let all = model.reconstruction_loss(&mut tape, av, &b, &mask, LossMode::All).unwrap();
    let masked = model
        .reconstruction_loss(&mut tape, av, &b, &mask, LossMode::MaskedOnly)
        .unwrap();
    let (mut s_all, mut s_m, mut n_m) = (0.0, 0.0, 0.0);
    for t in 0..8 {
        for c in 0..3 {
            let e = (a.at(t, c) - b.at(t, c)).powi(2);
            s_all += e;
            if mask[t * 3 + c] {
                s_m += e;
                n_m += 1.0;
            }
        }
    }
    assert!((tape.scalar(all) - s_all / 24.0).abs() < 1e-12);
    assert!((tape.scalar(masked) - s_m / n_m).abs() < 1e-12);
    let same = model.reconstruction_loss(&mut tape, av, &a, &mask, LossMode::All).unwrap();
    assert_eq!(tape.scalar(same), 0.0);
    assert!(model
        .reconstruction_loss(&mut tape, av, &b, &[false; 24], LossMode::MaskedOnly)
        .is_err());
}

#[test]
fn every_parameter_group_receives_gradient() {
    let model = tiny(2);
    let pair = toy_pair(&model.config, 3, 5);
    let mut tape = model.tape();
    let out = model.pretrain_forward(&mut tape, &pair, LossMode::All).unwrap();
    assert!(out.lineage >= 1);
    let grads = tape.backward(out.loss).unwrap().param_grads();
    for prefix in ["embed.", "lineage.", "encoder.", "decoder.", "projector."] {
        let norm: f64 = model
            .params
            .iter()
            .filter(|(_, n, _)| n.starts_with(prefix))
            .filter_map(|(id, _, _)| grads[id.index()].as_ref())
            .flatten()
            .map(|g| g * g)
            .sum();
        assert!(norm > 0.0, "no gradient reaches {prefix}");
    }
}

#[test]
fn pretrain_loss_golden_value() {
    let model = SiameseModel::<f64>::new(ModelConfig::tiny(2), 2024).unwrap();
    let pair = toy_pair(&model.config, 7, 2024);
    let mut tape = model.tape();
    let out = model.pretrain_forward(&mut tape, &pair, LossMode::All).unwrap();
    let loss = tape.scalar(out.loss);
    assert!((loss - GOLDEN_LOSS).abs() < 1e-9, "loss {loss:.12}");
}

const GOLDEN_LOSS: f64 = 2.701_338_732_317;

#[test]
fn zeroed_lineage_makes_output_independent_of_distance() {
    let mut model = tiny(1);
    model.zero_lineage();
    let near = toy_pair(&model.config, 2, 3);
    let far = SiamesePair { d: 16, ..near.clone() };
    let mut tape = model.tape();
    let a = model.pretrain_forward(&mut tape, &near, LossMode::All).unwrap();
    let b = model.pretrain_forward(&mut tape, &far, LossMode::All).unwrap();
    assert_ne!(a.lineage, b.lineage);
    assert_eq!(tape.value(a.x_hat), tape.value(b.x_hat));

    let mut model = tiny(1);
    model.config.use_lineage = false;
    let mut tape = model.tape();
    let a = model.pretrain_forward(&mut tape, &near, LossMode::All).unwrap();
    let b = model.pretrain_forward(&mut tape, &far, LossMode::All).unwrap();
    assert_eq!(tape.value(a.x_hat), tape.value(b.x_hat));
}

#[test]
fn end_to_end_gradient_check() {
    let model = tiny(2);
    let pair = toy_pair(&model.config, 5, 6);
    let report = grad_check(
        &model.params,
        |tape| Ok(model.pretrain_forward(tape, &pair, LossMode::All)?.loss),
        150,
        1e-5,
        7,
        |_| true,
    )
    .unwrap();
    assert!(report.coords_checked >= 100);
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

#[test]
fn wrong_window_shape_is_rejected() {
    let model = tiny(2);
    let mut tape = model.tape();
    assert!(model.embed(&mut tape, &Tensor::zeros(&[8, 3])).is_err());
    assert!(model.embed(&mut tape, &Tensor::zeros(&[16, 2])).is_err());
}
