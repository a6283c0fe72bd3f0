use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t64(dims: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
}

fn random(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
}

/// Independent triple-loop product.
fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = s;
        }
    }
    out
}

#[test]
fn matmul_identity_and_projector() {
    let mut tape = Tape::<f64>::new();
    let i2 = tape.constant(&t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(&t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let out = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(out), &[1.0, 2.0, 3.0, 4.0]);

    let p = tape.constant(&t64(&[2, 2], &[1.0, 0.0, 0.0, 0.0]));
    let b = tape.constant(&t64(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let out = tape.matmul(p, b).unwrap();
    assert_eq!(tape.value(out), &[5.0, 6.0, 0.0, 0.0]);
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let mut tape = Tape::<f64>::new();
    let (va, vb) = (tape.constant(&a), tape.constant(&b));
    let out = tape.matmul(va, vb).unwrap();
    assert_eq!(tape.value(out), triple_loop(a.data(), b.data(), 3, 4, 2).as_slice());
}

#[test]
fn matmul_rejects_mismatch() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(&Tensor::zeros(&[2, 3]));
    let b = tape.constant(&Tensor::zeros(&[2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(crate::Error::Shape { .. })));
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(&t64(&[1, 4], &[0.0; 4]));
    let s = tape.softmax(z);
    assert_eq!(tape.value(s), &[0.25; 4]);

    let big = tape.constant(&t64(&[1, 2], &[1000.0, 1000.0]));
    let s = tape.softmax(big);
    assert_eq!(tape.value(s), &[0.5, 0.5]);

    let l3 = tape.constant(&t64(&[1, 2], &[0.0, 3f64.ln()]));
    let s = tape.softmax(l3);
    let v = tape.value(s);
    assert!((v[0] - 0.25).abs() < 1e-12 && (v[1] - 0.75).abs() < 1e-12);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in proptest::collection::vec(-80.0f32..80.0, 12)) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(&Tensor::new(vec![3, 4], rows).unwrap());
        let s = tape.softmax(x);
        for row in tape.value(s).chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }
}

fn layer_norm_plain(row: &[f64]) -> Vec<f64> {
    let tape_ln = |row: &[f64]| {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(&t64(&[1, row.len()], row));
        let g = tape.constant(&Tensor::full(&[row.len()], 1.0));
        let b = tape.constant(&Tensor::zeros(&[row.len()]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        tape.value(y).to_vec()
    };
    tape_ln(row)
}

#[test]
fn layer_norm_examples() {
    assert!(layer_norm_plain(&[2.5; 5]).iter().all(|&v| v == 0.0));

    let v = layer_norm_plain(&[-1.0, 1.0]);
    assert!((v[0] + 1.0).abs() < 1e-5 && (v[1] - 1.0).abs() < 1e-5);

    // scalar oracle: mean 2, variance 2/3
    let v = layer_norm_plain(&[1.0, 2.0, 3.0]);
    let rs = 1.0 / (2.0f64 / 3.0 + 1e-5).sqrt();
    for (got, x) in v.iter().zip([1.0, 2.0, 3.0]) {
        assert!((got - (x - 2.0) * rs).abs() < 1e-12);
    }
}

#[test]
fn layer_norm_rows_are_standardised() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let row: Vec<f64> = (0..16).map(|_| rng.random_range(-5.0..5.0)).collect();
    let v = layer_norm_plain(&row);
    let mean: f64 = v.iter().sum::<f64>() / 16.0;
    let var: f64 = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 16.0;
    assert!(mean.abs() < 1e-5 && (var - 1.0).abs() < 1e-5);
}

#[test]
fn small_op_identities() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(&Tensor::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap());
    let m = tape.mse(x, x).unwrap();
    assert_eq!(tape.scalar(m), 0.0);
    let z = tape.constant(&Tensor::zeros(&[2]));
    let o = tape.constant(&Tensor::full(&[2], 1.0));
    let m = tape.mse(z, o).unwrap();
    assert_eq!(tape.scalar(m), 1.0);
    let g = tape.gelu(z);
    assert_eq!(tape.value(g), &[0.0, 0.0]);
    assert!(tape.add(x, z).is_err());
}

#[test]
fn concat_and_mean_axis() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(&t64(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(&t64(&[2, 2, 2], &[5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
    let c = tape.concat(&[a, b], 1).unwrap();
    assert_eq!(tape.dims(c), &[2, 3, 2]);
    assert_eq!(
        tape.value(c),
        &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
    );
    let m = tape.mean_axis(c, 1).unwrap();
    assert_eq!(tape.dims(m), &[2, 2]);
    for (got, want) in tape.value(m).iter().zip([13.0, 16.0, 23.0, 26.0]) {
        assert!((got - want / 3.0).abs() < 1e-12);
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(&Tensor::full(&[2, 3, 2], 0.3).with_requires_grad(true));
    let s = tape.sum(x);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.of(x).unwrap(), &[1.0; 12]);
}

#[test]
fn backward_needs_a_scalar() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(&Tensor::full(&[2], 1.0).with_requires_grad(true));
    assert!(matches!(tape.backward(x), Err(crate::Error::Usage(_))));
}

#[test]
fn linear_regression_gradient_closed_form() {
    // loss = mean((w·x − y)²) over n points; dL/dw = 2·Σ x(wx − y) / n
    let xs = [0.5, -1.0, 2.0, 3.0];
    let ys = [1.0, 0.0, -2.0, 4.0];
    let w0 = 0.7;
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", t64(&[1, 1], &[w0]));
    let mut tape = Tape::with_params(&store);
    let x = tape.constant(&t64(&[4, 1], &xs));
    let y = tape.constant(&t64(&[4, 1], &ys));
    let wv = tape.param(w);
    let pred = tape.matmul(x, wv).unwrap();
    let loss = tape.mse(pred, y).unwrap();
    let grads = tape.backward(loss).unwrap().param_grads();
    let expect: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| 2.0 * x * (w0 * x - y))
        .sum::<f64>()
        / 4.0;
    assert!((grads[0].as_ref().unwrap()[0] - expect).abs() < 1e-12);
}

#[test]
fn unreached_and_frozen_params() {
    let mut store = ParamStore::<f64>::new();
    let a = store.add("a", t64(&[2], &[1.0, 2.0]));
    store.add("unused", t64(&[3], &[1.0, 2.0, 3.0]));
    let f = store.add("frozen", t64(&[2], &[1.0, 1.0]));
    store.get_mut(f).requires_grad = false;
    let mut tape = Tape::with_params(&store);
    let (va, vf) = (tape.param(a), tape.param(f));
    let p = tape.mul(va, vf).unwrap();
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap().param_grads();
    assert_eq!(g[0].as_deref(), Some(&[1.0, 1.0][..]));
    assert_eq!(g[1].as_deref(), Some(&[0.0, 0.0, 0.0][..]));
    assert!(g[2].is_none());
}

#[test]
fn shared_parameter_accumulates() {
    // loss = sum(w ⊙ w) uses w twice through one registration
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", t64(&[2], &[3.0, -1.0]));
    let mut tape = Tape::with_params(&store);
    let a = tape.param(w);
    let b = tape.param(w);
    assert_eq!(a, b);
    let p = tape.mul(a, b).unwrap();
    let s = tape.sum(p);
    let g = tape.backward(s).unwrap().param_grads();
    assert_eq!(g[0].as_deref(), Some(&[6.0, -2.0][..]));
}

#[test]
fn layer_norm_parameters_pass_grad_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&[4, 6], &mut rng);
    let mut store = ParamStore::<f64>::new();
    let g = store.add("gamma", random(&[6], &mut rng));
    let b = store.add("beta", random(&[6], &mut rng));
    let target = random(&[4, 6], &mut rng);
    let report = grad_check(
        &store,
        |tape| {
            let xv = tape.constant(&x);
            let (gv, bv) = (tape.param(g), tape.param(b));
            let y = tape.layer_norm(xv, gv, bv, 1e-5)?;
            let t = tape.constant(&target);
            tape.mse(y, t)
        },
        100,
        1e-6,
        0,
        |_| true,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-3, "{report:?}");
}

/// Every differentiable op composed into one graph, checked with respect to
/// its input leaf.
#[test]
fn composed_graph_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::<f64>::new();
    let x = store.add("x", random(&[2, 3, 4], &mut rng));
    let w = store.add("w", random(&[4, 4], &mut rng));
    let bias = store.add("b", random(&[4], &mut rng));
    let row = store.add("row", random(&[3, 4], &mut rng));
    let gamma = store.add("gamma", random(&[4], &mut rng));
    let beta = store.add("beta", random(&[4], &mut rng));
    let target = random(&[2, 3, 4], &mut rng);
    let report = grad_check(
        &store,
        |tape| {
            let xv = tape.param(x);
            let (wv, bv0) = (tape.param(w), tape.param(bias));
            let lin = tape.linear(xv, wv, Some(bv0))?;
            let r = tape.param(row);
            let r1 = tape.select_row(r, 1)?;
            let bc = tape.add_broadcast(lin, r1)?;
            let act = tape.gelu(bc);
            let (gv, bv) = (tape.param(gamma), tape.param(beta));
            let ln = tape.layer_norm(act, gv, bv, 1e-5)?;
            let sm = tape.softmax(ln);
            let kt = tape.transpose(xv)?;
            let att = tape.bmm(sm, kt)?; // [2,3,3]
            let flat = tape.reshape(att, &[2, 9])?;
            let p = tape.permute(flat, &[1, 0])?;
            let mean = tape.mean_axis(p, 1)?; // [9]
            let cat = tape.concat(&[mean, mean], 0)?;
            let sc = tape.scale(cat, 0.5);
            let s = tape.sum(sc);
            let t = tape.constant(&target);
            let diff = tape.sub(xv, t)?;
            let sq = tape.mul(diff, diff)?;
            let s2 = tape.sum(sq);
            let logits = tape.mean_axis(ln, 0)?; // [3,4]
            let l0 = tape.select_row(logits, 0)?;
            let ce = tape.cross_entropy(l0, 2)?;
            let mm = tape.masked_mse(xv, t, &(0..24).map(|i| i % 3 == 0).collect::<Vec<_>>())?;
            let total = tape.add(s, s2)?;
            let total = tape.add(total, ce)?;
            tape.add(total, mm)
        },
        200,
        1e-6,
        3,
        |_| true,
    )
    .unwrap();
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn dropout_is_seeded_and_identity_in_eval() {
    let x = Tensor::<f32>::full(&[64], 1.0);
    let run = |seed| {
        let mut tape = Tape::<f32>::new().train_mode(0.1, seed);
        let v = tape.constant(&x);
        let d = tape.dropout(v);
        tape.value(d).to_vec()
    };
    assert_eq!(run(3), run(3));
    assert!(run(3).iter().any(|&v| v == 0.0));
    let mut tape = Tape::<f32>::new();
    let v = tape.constant(&x);
    assert_eq!(tape.dropout(v), v);
}
