use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::kernels::{
    gelu, gelu_grad, invert_axes, matmul_a_bt_acc, matmul_acc, matmul_at_b_acc, permute,
    softmax_in_place,
};
use super::params::{ParamGrads, ParamId, ParamStore};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Scale(Var, S),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Gelu(Var),
    Dropout(Var, Vec<S>),
    Concat(Vec<Var>, usize),
    MeanAxis(Var, usize),
    SelectRow(Var, usize),
    Sum(Var),
    Mse(Var, Var),
    MaskedMse(Var, Var, Vec<bool>, usize),
    CrossEntropy(Var, usize, Vec<S>),
}

struct Node<S> {
    dims: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    needs_grad: bool,
}

struct DropoutState {
    p: f64,
    rng: ChaCha8Rng,
}

/// Records operations in topological order and replays them backwards.
///
/// Parameters are read by reference from a [`ParamStore`]; each parameter is
/// registered at most once per tape, so using it twice (e.g. one encoder
/// applied to two inputs) accumulates both gradient contributions.
pub struct Tape<'p, S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    params: Option<&'p ParamStore<S>>,
    param_vars: Vec<Option<Var>>,
    dropout: Option<DropoutState>,
}

impl<S: Scalar> Default for Tape<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, S: Scalar> Tape<'p, S> {
    /// Tape with no parameter store; only constants and leaves.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            param_vars: Vec::new(),
            dropout: None,
        }
    }

    pub fn with_params(params: &'p ParamStore<S>) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(params),
            param_vars: vec![None; params.len()],
            dropout: None,
        }
    }

    /// Enables dropout with probability `p`, driven by a dedicated seeded stream.
    pub fn train_mode(mut self, p: f64, seed: u64) -> Self {
        self.set_train_mode(p, seed);
        self
    }

    pub fn set_train_mode(&mut self, p: f64, seed: u64) {
        self.dropout = (p > 0.0).then(|| DropoutState {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        });
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].dims
    }

    pub fn value(&self, v: Var) -> &[S] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.expect("param node without store").get(id).data(),
            _ => &node.value,
        }
    }

    /// Copies a node out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor<S> {
        Tensor::new(self.dims(v).to_vec(), self.value(v).to_vec()).expect("node shape is valid")
    }

    pub fn scalar(&self, v: Var) -> S {
        self.value(v)[0]
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, dims: Vec<usize>, value: Vec<S>, op: Op<S>, needs_grad: bool) -> Var {
        debug_assert!(
            matches!(op, Op::Param(_)) || dims.iter().product::<usize>() == value.len()
        );
        self.nodes.push(Node {
            dims,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input that never receives gradients.
    pub fn constant(&mut self, t: &Tensor<S>) -> Var {
        self.push(t.dims().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, dims: &[usize], data: Vec<S>) -> Result<Var> {
        let n: usize = dims.iter().product();
        if n != data.len() || n == 0 {
            return Err(Error::shape("constant", format!("{dims:?} vs {} values", data.len())));
        }
        Ok(self.push(dims.to_vec(), data, Op::Leaf, false))
    }

    /// A leaf input; receives a gradient when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.push(
            t.dims().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    /// Registers (once) and returns the node for a stored parameter.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let store = self.params.expect("tape has no parameter store");
        let t = store.get(id);
        let v = self.push(t.dims().to_vec(), Vec::new(), Op::Param(id), t.requires_grad);
        self.param_vars[id.0] = Some(v);
        v
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(Error::shape("matmul", format!("{ad:?} x {bd:?}")));
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let mut out = vec![S::zero(); m * n];
        matmul_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), ng))
    }

    /// Batched product of `[B, m, k]` and `[B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if ad.len() != 3 || bd.len() != 3 || ad[0] != bd[0] || ad[2] != bd[1] {
            return Err(Error::shape("bmm", format!("{ad:?} x {bd:?}")));
        }
        let (bt, m, k, n) = (ad[0], ad[1], ad[2], bd[2]);
        let mut out = vec![S::zero(); bt * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..bt {
                matmul_acc(
                    &av[i * m * k..(i + 1) * m * k],
                    &bv[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![bt, m, n], out, Op::BatchMatMul(a, b), ng))
    }

    /// `x · w (+ b)` applied over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xd, wd) = (self.dims(x).to_vec(), self.dims(w));
        if wd.len() != 2 || xd.last() != Some(&wd[0]) {
            return Err(Error::shape("linear", format!("{xd:?} x {wd:?}")));
        }
        let (k, n) = (wd[0], wd[1]);
        if let Some(b) = b {
            if self.dims(b) != [n] {
                return Err(Error::shape("linear", format!("bias {:?}, want [{n}]", self.dims(b))));
            }
        }
        let m = self.value(x).len() / k;
        let mut out = vec![S::zero(); m * n];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        matmul_acc(self.value(x), self.value(w), &mut out, m, k, n);
        let mut dims = xd;
        *dims.last_mut().unwrap() = n;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(dims, out, Op::Linear { x, w, b }, ng))
    }

    fn same_dims(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.dims(a), self.dims(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Var {
        let out: Vec<S> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let ng = self.needs(a) || self.needs(b);
        self.push(self.dims(a).to_vec(), out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// `a + b` where `b`'s dims are a suffix of `a`'s; `b` repeats over the
    /// leading axes.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ad, bd) = (self.dims(a), self.dims(b));
        if bd.len() > ad.len() || ad[ad.len() - bd.len()..] != *bd {
            return Err(Error::shape("add_broadcast", format!("{ad:?} + {bd:?}")));
        }
        let bv = self.value(b);
        let n = bv.len();
        let out: Vec<S> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(self.dims(a).to_vec(), out, Op::AddBroadcast(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let ng = self.needs(a);
        self.push(self.dims(a).to_vec(), out, Op::Scale(a, s), ng)
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let n: usize = dims.iter().product();
        if n != self.value(a).len() {
            return Err(Error::shape("reshape", format!("{:?} -> {dims:?}", self.dims(a))));
        }
        let out = self.value(a).to_vec();
        let ng = self.needs(a);
        Ok(self.push(dims.to_vec(), out, Op::Reshape(a), ng))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let d = self.dims(a);
        let mut seen = vec![false; d.len()];
        if axes.len() != d.len() || axes.iter().any(|&x| x >= d.len() || std::mem::replace(&mut seen[x], true)) {
            return Err(Error::shape("permute", format!("{d:?} by {axes:?}")));
        }
        let (dims, out) = permute(self.value(a), d, axes);
        let ng = self.needs(a);
        Ok(self.push(dims, out, Op::Permute(a, axes.to_vec()), ng))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let r = self.dims(a).len();
        if r < 2 {
            return Err(Error::shape("transpose", format!("{:?}", self.dims(a))));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let n = *self.dims(a).last().unwrap();
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let ng = self.needs(a);
        self.push(self.dims(a).to_vec(), out, Op::Softmax(a), ng)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.dims(x).last().unwrap();
        if self.dims(gamma) != [d] || self.dims(beta) != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("x {:?}, gamma {:?}, beta {:?}", self.dims(x), self.dims(gamma), self.dims(beta)),
            ));
        }
        let eps = S::from_f64(eps).unwrap();
        let dn = S::from_usize_lossy(d);
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / d;
        let mut xhat = vec![S::zero(); xv.len()];
        let mut rstd = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            self.dims(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let ng = self.needs(a);
        self.push(self.dims(a).to_vec(), out, Op::Gelu(a), ng)
    }

    /// Inverted dropout; the identity outside training mode.
    pub fn dropout(&mut self, a: Var) -> Var {
        let Some(state) = self.dropout.as_mut() else {
            return a;
        };
        let keep = 1.0 - state.p;
        let scale = S::from_f64(1.0 / keep).unwrap();
        let n = self.nodes[a.0].dims.iter().product::<usize>();
        let mask: Vec<S> = (0..n)
            .map(|_| {
                if state.rng.random::<f64>() < keep {
                    scale
                } else {
                    S::zero()
                }
            })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let ng = self.needs(a);
        self.push(self.dims(a).to_vec(), out, Op::Dropout(a, mask), ng)
    }

    /// Concatenates along `axis`; all other dims must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.dims(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let d = self.dims(v);
            if d.len() != base.len()
                || d.iter().enumerate().any(|(i, &x)| i != axis && x != base[i])
            {
                return Err(Error::shape("concat", format!("{base:?} vs {d:?}")));
            }
            total += d[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.dims(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        let mut dims = base;
        dims[axis] = total;
        let ng = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(dims, out, Op::Concat(inputs.to_vec(), axis), ng))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let d = self.dims(a).to_vec();
        if axis >= d.len() {
            return Err(Error::shape("mean_axis", format!("axis {axis} for {d:?}")));
        }
        let outer: usize = d[..axis].iter().product();
        let len = d[axis];
        let inner: usize = d[axis + 1..].iter().product();
        let inv = S::one() / S::from_usize_lossy(len);
        let v = self.value(a);
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &v[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (dst, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        for x in &mut out {
            *x *= inv;
        }
        let mut dims = d;
        dims.remove(axis);
        if dims.is_empty() {
            dims.push(1);
        }
        let ng = self.needs(a);
        Ok(self.push(dims, out, Op::MeanAxis(a, axis), ng))
    }

    /// Row `i` of a 2-D node.
    pub fn select_row(&mut self, a: Var, i: usize) -> Result<Var> {
        let d = self.dims(a);
        if d.len() != 2 || i >= d[0] {
            return Err(Error::shape("select_row", format!("row {i} of {d:?}")));
        }
        let c = d[1];
        let out = self.value(a)[i * c..(i + 1) * c].to_vec();
        let ng = self.needs(a);
        Ok(self.push(vec![c], out, Op::SelectRow(a, i), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let ng = self.needs(a);
        self.push(vec![1], vec![s], Op::Sum(a), ng)
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_dims("mse", a, b)?;
        let n = S::from_usize_lossy(self.value(a).len());
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<S>()
            / n;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![1], vec![s], Op::Mse(a, b), ng))
    }

    /// Mean of squared differences over positions where `mask` is true.
    pub fn masked_mse(&mut self, a: Var, b: Var, mask: &[bool]) -> Result<Var> {
        self.same_dims("masked_mse", a, b)?;
        if mask.len() != self.value(a).len() {
            return Err(Error::shape("masked_mse", "mask length differs from inputs"));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Usage("masked-only loss with an empty mask".into()));
        }
        let s = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|((&x, &y), _)| (x - y) * (x - y))
            .sum::<S>()
            / S::from_usize_lossy(count);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(vec![1], vec![s], Op::MaskedMse(a, b, mask.to_vec(), count), ng))
    }

    /// Softmax cross-entropy of a `[K]` logit vector against class `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let d = self.dims(logits);
        if d.len() != 1 || target >= d[0] {
            return Err(Error::shape("cross_entropy", format!("target {target} for {d:?}")));
        }
        let mut probs = self.value(logits).to_vec();
        softmax_in_place(&mut probs);
        let loss = -probs[target].max(S::min_positive_value()).ln();
        let ng = self.needs(logits);
        Ok(self.push(vec![1], vec![loss], Op::CrossEntropy(logits, target, probs), ng))
    }

    /// Checks a node for NaN/Inf.
    pub fn ensure_finite(&self, v: Var, op: &'static str) -> Result<()> {
        if self.value(v).iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got dims {:?}",
                self.dims(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Ok(Grads {
            grads,
            param_vars: self.param_vars.clone(),
            param_sizes: self
                .params
                .map(|p| p.tensors().iter().map(|t| (t.numel(), t.requires_grad)).collect())
                .unwrap_or_default(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut Vec<S>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n]))
    }

    fn backprop(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ad, bd) = (self.dims(*a), self.dims(*b));
                let (m, k, n) = (ad[0], ad[1], bd[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    matmul_a_bt_acc(g, self.value(*b), ga, m, k, n);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    matmul_at_b_acc(self.value(*a), g, gb, m, k, n);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (ad, bd) = (self.dims(*a), self.dims(*b));
                let (bt, m, k, n) = (ad[0], ad[1], ad[2], bd[2]);
                if let Some(ga) = self.slot(grads, *a) {
                    let bv = self.value(*b);
                    for t in 0..bt {
                        matmul_a_bt_acc(
                            &g[t * m * n..(t + 1) * m * n],
                            &bv[t * k * n..(t + 1) * k * n],
                            &mut ga[t * m * k..(t + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let av = self.value(*a);
                    for t in 0..bt {
                        matmul_at_b_acc(
                            &av[t * m * k..(t + 1) * m * k],
                            &g[t * m * n..(t + 1) * m * n],
                            &mut gb[t * k * n..(t + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let wd = self.dims(*w);
                let (k, n) = (wd[0], wd[1]);
                let m = g.len() / n;
                if let Some(gx) = self.slot(grads, *x) {
                    matmul_a_bt_acc(g, self.value(*w), gx, m, k, n);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    matmul_at_b_acc(self.value(*x), g, gw, m, k, n);
                }
                if let Some(b) = b {
                    if let Some(gb) = self.slot(grads, *b) {
                        for row in g.chunks(n) {
                            for (d, &v) in gb.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        for (d, &x) in gv.iter_mut().zip(g) {
                            *d += x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (d, &x) in ga.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (d, &x) in gb.iter_mut().zip(g) {
                        *d -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &x), &y) in ga.iter_mut().zip(g).zip(self.value(*b)) {
                        *d += x * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, &x), &y) in gb.iter_mut().zip(g).zip(self.value(*a)) {
                        *d += x * y;
                    }
                }
            }
            Op::AddBroadcast(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (d, &x) in ga.iter_mut().zip(g) {
                        *d += x;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let n = gb.len();
                    for (j, &x) in g.iter().enumerate() {
                        gb[j % n] += x;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (d, &x) in ga.iter_mut().zip(g) {
                        *d += x * *s;
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for (d, &x) in ga.iter_mut().zip(g) {
                        *d += x;
                    }
                }
            }
            Op::Permute(a, axes) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let (_, back) = permute(g, &node.dims, &invert_axes(axes));
                    for (d, x) in ga.iter_mut().zip(back) {
                        *d += x;
                    }
                }
            }
            Op::Softmax(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let n = *node.dims.last().unwrap();
                    for ((grow, yrow), drow) in g.chunks(n).zip(node.value.chunks(n)).zip(ga.chunks_mut(n)) {
                        let dot: S = grow.iter().zip(yrow).map(|(&gv, &y)| gv * y).sum();
                        for ((d, &gv), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += y * (gv - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *node.dims.last().unwrap();
                let dn = S::from_usize_lossy(d);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((acc, &gv), &h) in gg.iter_mut().zip(grow).zip(hrow) {
                            *acc += gv * h;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for grow in g.chunks(d) {
                        for (acc, &gv) in gb.iter_mut().zip(grow) {
                            *acc += gv;
                        }
                    }
                }
                let gamma_v = self.value(*gamma).to_vec();
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dxhat = vec![S::zero(); d];
                    for (r, ((grow, hrow), xrow)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        for j in 0..d {
                            dxhat[j] = grow[j] * gamma_v[j];
                        }
                        let mean_d = dxhat.iter().copied().sum::<S>() / dn;
                        let mean_dh = dxhat.iter().zip(hrow).map(|(&a, &h)| a * h).sum::<S>() / dn;
                        for j in 0..d {
                            xrow[j] += rstd[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gv), &x) in ga.iter_mut().zip(g).zip(self.value(*a)) {
                        *d += gv * gelu_grad(x);
                    }
                }
            }
            Op::Dropout(a, mask) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, &gv), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            Op::Concat(inputs, axis) => {
                let outer: usize = node.dims[..*axis].iter().product();
                let inner: usize = node.dims[axis + 1..].iter().product();
                let row = node.dims[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.dims(v)[*axis] * inner;
                    if let Some(gv) = self.slot(grads, v) {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + len];
                            for (d, &x) in gv[o * len..(o + 1) * len].iter_mut().zip(src) {
                                *d += x;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::MeanAxis(a, axis) => {
                let ad = self.dims(*a).to_vec();
                if let Some(ga) = self.slot(grads, *a) {
                    let outer: usize = ad[..*axis].iter().product();
                    let len = ad[*axis];
                    let inner: usize = ad[axis + 1..].iter().product();
                    let inv = S::one() / S::from_usize_lossy(len);
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut ga[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, &x) in dst.iter_mut().zip(src) {
                                *d += x * inv;
                            }
                        }
                    }
                }
            }
            Op::SelectRow(a, r) => {
                if let Some(ga) = self.slot(grads, *a) {
                    let c = g.len();
                    for (d, &x) in ga[r * c..(r + 1) * c].iter_mut().zip(g) {
                        *d += x;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mse(a, b) => {
                let n = S::from_usize_lossy(self.value(*a).len());
                let two = S::from_f64(2.0).unwrap();
                let coef = two * g[0] / n;
                let diff: Vec<S> = self
                    .value(*a)
                    .iter()
                    .zip(self.value(*b))
                    .map(|(&x, &y)| coef * (x - y))
                    .collect();
                if let Some(ga) = self.slot(grads, *a) {
                    for (d, &x) in ga.iter_mut().zip(&diff) {
                        *d += x;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (d, &x) in gb.iter_mut().zip(&diff) {
                        *d -= x;
                    }
                }
            }
            Op::MaskedMse(a, b, mask, count) => {
                let two = S::from_f64(2.0).unwrap();
                let coef = two * g[0] / S::from_usize_lossy(*count);
                let diff: Vec<S> = self
                    .value(*a)
                    .iter()
                    .zip(self.value(*b))
                    .zip(mask)
                    .map(|((&x, &y), &m)| if m { coef * (x - y) } else { S::zero() })
                    .collect();
                if let Some(ga) = self.slot(grads, *a) {
                    for (d, &x) in ga.iter_mut().zip(&diff) {
                        *d += x;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (d, &x) in gb.iter_mut().zip(&diff) {
                        *d -= x;
                    }
                }
            }
            Op::CrossEntropy(logits, target, probs) => {
                if let Some(gl) = self.slot(grads, *logits) {
                    for (k, (d, &p)) in gl.iter_mut().zip(probs).enumerate() {
                        let y = if k == *target { S::one() } else { S::zero() };
                        *d += g[0] * (p - y);
                    }
                }
            }
        }
    }
}

/// Result of [`Tape::backward`]: gradients for every node reached.
pub struct Grads<S> {
    grads: Vec<Option<Vec<S>>>,
    param_vars: Vec<Option<Var>>,
    param_sizes: Vec<(usize, bool)>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of the loss with respect to `v`, if it was reached.
    pub fn of(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient table aligned with the parameter store. Trainable parameters
    /// that did not influence the loss get zeros; frozen ones get `None`.
    pub fn param_grads(&self) -> ParamGrads<S> {
        self.param_sizes
            .iter()
            .enumerate()
            .map(|(i, &(n, trainable))| {
                if !trainable {
                    return None;
                }
                let g = self.param_vars[i].and_then(|v| self.grads[v.0].clone());
                Some(g.unwrap_or_else(|| vec![S::zero(); n]))
            })
            .collect()
    }
}
