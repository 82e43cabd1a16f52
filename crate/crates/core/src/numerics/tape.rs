//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Graph`] records every operation applied during a forward pass. Values
//! are computed eagerly; [`Graph::backward`] walks the tape in reverse once and
//! leaves a gradient on every node that requires one.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::linalg::{gemm, MatRef};
use super::params::{ParamId, ParamStore};
use super::tensor::{softmax_in_place, Tensor};
use crate::error::{EalmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Sparse attention pattern: for each query row, the key rows it may attend
/// to and an optional relative-position class per (query, key) pair.
#[derive(Debug, Clone)]
pub struct AttnMask {
    offsets: Vec<usize>,
    keys: Vec<usize>,
    classes: Vec<Option<usize>>,
}

impl Default for AttnMask {
    fn default() -> Self {
        AttnMask {
            offsets: vec![0],
            keys: Vec::new(),
            classes: Vec::new(),
        }
    }
}

impl AttnMask {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a query row. Panics if `keys` is empty.
    pub fn push_query(&mut self, keys: impl IntoIterator<Item = (usize, Option<usize>)>) {
        for (k, c) in keys {
            self.keys.push(k);
            self.classes.push(c);
        }
        assert!(
            *self.offsets.last().unwrap() < self.keys.len(),
            "attention query with no visible keys"
        );
        self.offsets.push(self.keys.len());
    }

    /// Causal attention within each of the packed sequences.
    pub fn causal(lengths: &[usize]) -> Self {
        let mut mask = AttnMask::new();
        let mut start = 0;
        for &len in lengths {
            for i in 0..len {
                mask.push_query((start..=start + i).map(|k| (k, None)));
            }
            start += len;
        }
        mask
    }

    pub fn num_queries(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn keys_of(&self, query: usize) -> &[usize] {
        &self.keys[self.offsets[query]..self.offsets[query + 1]]
    }

    pub fn classes_of(&self, query: usize) -> &[Option<usize>] {
        &self.classes[self.offsets[query]..self.offsets[query + 1]]
    }
}

#[derive(Debug)]
enum Op {
    Leaf {
        param: Option<(u64, ParamId)>,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    GatherRows {
        src: Var,
        idx: Rc<Vec<usize>>,
    },
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        mask: Rc<AttnMask>,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
    ConcatCols(Vec<Var>),
    GroupWeightedSum {
        weights: Var,
        rows: Var,
    },
    Reshape(Var),
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording context for one forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    training: bool,
    grad_enabled: bool,
    rng: ChaCha8Rng,
    backward_done: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Graph {
    /// Graph for training: dropout active, parameters track gradients.
    pub fn train(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            training: true,
            grad_enabled: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            backward_done: false,
        }
    }

    /// Graph for evaluation: no dropout, no gradients on parameters.
    pub fn inference() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            training: false,
            grad_enabled: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            backward_done: false,
        }
    }

    /// Gradients enabled but dropout off. Used by gradient checks.
    pub fn deterministic() -> Self {
        Graph {
            training: false,
            ..Graph::train(0)
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf { param: None }, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Loads a parameter as a leaf. Frozen parameters never require a gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let frozen = store.is_frozen(id);
        self.push(
            store.get(id).clone(),
            Op::Leaf {
                param: Some((store.uid(), id)),
            },
            !frozen,
        )
    }

    pub fn check_finite(&self, v: Var, name: &str) -> Result<()> {
        self.value(v).check_finite(name)
    }

    // ---- operations -----------------------------------------------------

    fn mat<'a>(&'a self, v: Var) -> MatRef<'a> {
        let t = &self.nodes[v.0].value;
        assert_eq!(t.ndim(), 2, "matmul operand must be 2-D, got {:?}", t.shape());
        MatRef::new(t.data(), t.shape()[0], t.shape()[1])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let am = if ta { self.mat(a).t() } else { self.mat(a) };
        let bm = if tb { self.mat(b).t() } else { self.mat(b) };
        let (m, n) = (am.logical_rows(), bm.logical_cols());
        let mut out = vec![0.0; m * n];
        gemm(am, bm, 0.0, &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(
            Tensor::new(vec![m, n], out).unwrap(),
            Op::MatMul { a, b, ta, tb },
            rg,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    /// Adds a `[n]` row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        let c = x.cols();
        assert_eq!(r.len(), c, "row broadcast width mismatch");
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + r.data()[i % c])
            .collect();
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(row);
        self.push(t, Op::AddRow(a, row), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shape mismatch");
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let x = self.value(a);
        let t = Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v * c).collect()).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = x
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let t = Tensor::new(x.shape().to_vec(), data).unwrap();
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (n, d) = (xv.rows(), xv.cols());
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        assert_eq!(g.len(), d);
        assert_eq!(b.len(), d);
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + EPS).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out).unwrap();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// Selects rows of a matrix; also serves as embedding lookup.
    pub fn gather_rows(&mut self, src: Var, idx: Rc<Vec<usize>>) -> Var {
        let s = self.value(src);
        let c = s.cols();
        let rows = s.rows();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            assert!(i < rows, "row index {i} out of range for {rows} rows");
            data.extend_from_slice(s.row(i));
        }
        let t = Tensor::new(vec![idx.len(), c], data).unwrap();
        let rg = self.rg(src);
        self.push(t, Op::GatherRows { src, idx }, rg)
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        self.gather_rows(table, Rc::new(ids.to_vec()))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        let c = t.cols();
        for row in t.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        self.push(t, Op::SoftmaxRows(a), rg)
    }

    /// Multi-head scaled dot-product attention over packed rows.
    ///
    /// `q`, `k`, `v` are `[n, d]`; `bias`, when present, is `[heads, classes]`
    /// and is added to the score of every (query, key) pair carrying a class.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        mask: Rc<AttnMask>,
        heads: usize,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n_q, d) = (qv.rows(), qv.cols());
        assert_eq!(mask.num_queries(), n_q, "mask/query count mismatch");
        assert_eq!(kv.cols(), d);
        assert_eq!(vv.cols(), d);
        assert_eq!(d % heads, 0, "width {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let bias_t = bias.map(|b| self.value(b));
        let n_cls = bias_t.map_or(0, |b| b.cols());
        let mut probs = vec![0.0; mask.keys.len() * heads];
        let mut out = vec![0.0; n_q * d];
        for i in 0..n_q {
            let keys = mask.keys_of(i);
            let classes = mask.classes_of(i);
            let cnt = keys.len();
            let base = mask.offsets[i] * heads;
            for h in 0..heads {
                let qs = &qv.row(i)[h * dh..(h + 1) * dh];
                let p = &mut probs[base + h * cnt..base + (h + 1) * cnt];
                for (j, &key) in keys.iter().enumerate() {
                    let ks = &kv.row(key)[h * dh..(h + 1) * dh];
                    let mut s = qs.iter().zip(ks).map(|(a, b)| a * b).sum::<f64>() * scale;
                    if let (Some(b), Some(c)) = (bias_t, classes[j]) {
                        s += b.data()[h * n_cls + c];
                    }
                    p[j] = s;
                }
                softmax_in_place(p);
                let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, &key) in keys.iter().enumerate() {
                    let vs = &vv.row(key)[h * dh..(h + 1) * dh];
                    for (oo, vvv) in o.iter_mut().zip(vs) {
                        *oo += p[j] * vvv;
                    }
                }
            }
        }
        let t = Tensor::new(vec![n_q, d], out).unwrap();
        let rg = self.rg(q) || self.rg(k) || self.rg(v) || bias.is_some_and(|b| self.rg(b));
        self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                bias,
                mask,
                heads,
                probs,
            },
            rg,
        )
    }

    /// Mean token cross-entropy from logits `[n, V]`; rows with
    /// `ignore[i] == true` contribute nothing.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        super::tensor::check_targets(lv, targets, ignore)?;
        let v = lv.cols();
        let mut probs = lv.data().to_vec();
        let mut total = 0.0;
        let mut count = 0;
        for (i, row) in probs.chunks_mut(v).enumerate() {
            if ignore[i] {
                continue;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
            row.iter_mut().for_each(|x| *x = (*x - lse).exp());
            count += 1;
        }
        if count == 0 {
            return Err(EalmError::EmptyBatch("every position is masked".into()));
        }
        let loss = Tensor::scalar(total / count as f64);
        loss.check_finite("cross-entropy loss")?;
        let rg = self.rg(logits);
        Ok(self.push(
            loss,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore: ignore.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.value(p).rows(), n, "concat row mismatch");
                self.value(p).cols()
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = Tensor::new(vec![n, total], data).unwrap();
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(t, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// `out[g] = Σ_j weights[g, j] · rows[g·m + j]` for weights `[G, m]` and
    /// rows `[G·m, d]`.
    pub fn group_weighted_sum(&mut self, weights: Var, rows: Var) -> Var {
        let (w, r) = (self.value(weights), self.value(rows));
        let (g, m) = (w.rows(), w.cols());
        let d = r.cols();
        assert_eq!(r.rows(), g * m, "group_weighted_sum row count mismatch");
        let mut out = vec![0.0; g * d];
        for gi in 0..g {
            let o = &mut out[gi * d..(gi + 1) * d];
            for j in 0..m {
                let wj = w.data()[gi * m + j];
                for (oo, rv) in o.iter_mut().zip(r.row(gi * m + j)) {
                    *oo += wj * rv;
                }
            }
        }
        let t = Tensor::new(vec![g, d], out).unwrap();
        let rg = self.rg(weights) || self.rg(rows);
        self.push(t, Op::GroupWeightedSum { weights, rows }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let t = self.value(a).clone().reshape(shape).expect("reshape size mismatch");
        let rg = self.rg(a);
        self.push(t, Op::Reshape(a), rg)
    }

    /// Inverted dropout; identity outside training graphs.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        if !self.training || p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let scale: Vec<f64> = (0..n)
            .map(|_| if self.rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&scale).map(|(a, s)| a * s).collect();
        let t = Tensor::new(xv.shape().to_vec(), data).unwrap();
        let rg = self.rg(x);
        self.push(t, Op::Dropout { x, scale }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    // ---- backward -------------------------------------------------------

    /// Populates gradients of `loss` with respect to every node that requires
    /// one. May be called once per graph.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(EalmError::usage("backward already ran on this graph"));
        }
        if self.value(loss).len() != 1 {
            return Err(EalmError::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.check_finite(loss, "loss")?;
        self.backward_done = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout);
            self.grads[idx] = Some(gout);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                    return Err(EalmError::numeric(
                        format!("gradient of node {i}"),
                        format!("non-finite value {bad}"),
                    ));
                }
            }
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta.to_vec()),
        }
    }

    fn grad_buf(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&mut self, idx: usize, gout: &[f64]) {
        // Temporarily move the op out so we can borrow other nodes freely.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf { param: None });
        match &op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b, ta, tb } => {
                let (a, b, ta, tb) = (*a, *b, *ta, *tb);
                let out = &self.nodes[idx].value;
                let (m, n) = (out.shape()[0], out.shape()[1]);
                let gm = MatRef::new(gout, m, n);
                if self.rg(a) {
                    let bm = if tb { self.mat(b).t() } else { self.mat(b) };
                    let mut da = vec![0.0; self.value(a).len()];
                    if ta {
                        gemm(bm, gm.t(), 0.0, &mut da);
                    } else {
                        gemm(gm, bm.t(), 0.0, &mut da);
                    }
                    self.acc(a, &da);
                }
                if self.rg(b) {
                    let am = if ta { self.mat(a).t() } else { self.mat(a) };
                    let mut db = vec![0.0; self.value(b).len()];
                    if tb {
                        gemm(gm.t(), am, 0.0, &mut db);
                    } else {
                        gemm(am.t(), gm, 0.0, &mut db);
                    }
                    self.acc(b, &db);
                }
            }
            Op::Add(a, b) => {
                self.acc(*a, gout);
                self.acc(*b, gout);
            }
            Op::AddRow(a, row) => {
                self.acc(*a, gout);
                if self.rg(*row) {
                    let c = self.value(*row).len();
                    let mut dr = vec![0.0; c];
                    for chunk in gout.chunks(c) {
                        dr.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
                    }
                    self.acc(*row, &dr);
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if self.rg(a) {
                    let d: Vec<f64> = gout
                        .iter()
                        .zip(self.value(b).data())
                        .map(|(g, y)| g * y)
                        .collect();
                    self.acc(a, &d);
                }
                if self.rg(b) {
                    let d: Vec<f64> = gout
                        .iter()
                        .zip(self.value(a).data())
                        .map(|(g, x)| g * x)
                        .collect();
                    self.acc(b, &d);
                }
            }
            Op::Scale(a, c) => {
                let d: Vec<f64> = gout.iter().map(|g| g * c).collect();
                self.acc(*a, &d);
            }
            Op::Gelu(a) => {
                let d: Vec<f64> = gout
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, &x)| {
                        let inner = GELU_C * (x + 0.044715 * x * x * x);
                        let th = inner.tanh();
                        let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)
                    })
                    .collect();
                self.acc(*a, &d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let d = self.value(gain).len();
                let n = rstd.len();
                if self.rg(gain) || self.rg(bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            dg[j] += gout[i * d + j] * xhat[i * d + j];
                            db[j] += gout[i * d + j];
                        }
                    }
                    self.acc(gain, &dg);
                    self.acc(bias, &db);
                }
                if self.rg(x) {
                    let g = self.value(gain).data().to_vec();
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        let gh: Vec<f64> = (0..d).map(|j| gout[i * d + j] * g[j]).collect();
                        let mean_gh = gh.iter().sum::<f64>() / d as f64;
                        let mean_ghx = (0..d).map(|j| gh[j] * xhat[i * d + j]).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[i * d + j] = rstd[i] * (gh[j] - mean_gh - xhat[i * d + j] * mean_ghx);
                        }
                    }
                    self.acc(x, &dx);
                }
            }
            Op::GatherRows { src, idx: rows } => {
                let src = *src;
                let c = self.value(src).cols();
                if let Some(buf) = self.grad_buf(src) {
                    for (k, &r) in rows.iter().enumerate() {
                        for j in 0..c {
                            buf[r * c + j] += gout[k * c + j];
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let c = y.cols();
                let mut d = vec![0.0; y.len()];
                for (i, (yr, gr)) in y.data().chunks(c).zip(gout.chunks(c)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for j in 0..c {
                        d[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.acc(*a, &d);
            }
            Op::Attention {
                q,
                k,
                v,
                bias,
                mask,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *bias, mask, *heads, probs, gout),
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                probs,
                count,
            } => {
                let v = self.value(*logits).cols();
                let s = gout[0] / *count as f64;
                let mut d = vec![0.0; probs.len()];
                for (i, (&t, &skip)) in targets.iter().zip(ignore).enumerate() {
                    if skip {
                        continue;
                    }
                    for j in 0..v {
                        d[i * v + j] = probs[i * v + j] * s;
                    }
                    d[i * v + t] -= s;
                }
                self.acc(*logits, &d);
            }
            Op::ConcatCols(parts) => {
                let n = self.nodes[idx].value.rows();
                let total = self.nodes[idx].value.cols();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for i in 0..n {
                            d.extend_from_slice(&gout[i * total + off..i * total + off + w]);
                        }
                        self.acc(p, &d);
                    }
                    off += w;
                }
            }
            Op::GroupWeightedSum { weights, rows } => {
                let (weights, rows) = (*weights, *rows);
                let (g, m) = (self.value(weights).rows(), self.value(weights).cols());
                let d = self.value(rows).cols();
                if self.rg(weights) {
                    let r = self.value(rows);
                    let mut dw = vec![0.0; g * m];
                    for gi in 0..g {
                        let go = &gout[gi * d..(gi + 1) * d];
                        for j in 0..m {
                            dw[gi * m + j] = go.iter().zip(r.row(gi * m + j)).map(|(a, b)| a * b).sum();
                        }
                    }
                    self.acc(weights, &dw);
                }
                if self.rg(rows) {
                    let w = self.value(weights).data().to_vec();
                    let mut dr = vec![0.0; g * m * d];
                    for gi in 0..g {
                        let go = &gout[gi * d..(gi + 1) * d];
                        for j in 0..m {
                            let wj = w[gi * m + j];
                            let base = (gi * m + j) * d;
                            for c in 0..d {
                                dr[base + c] = wj * go[c];
                            }
                        }
                    }
                    self.acc(rows, &dr);
                }
            }
            Op::Reshape(a) => self.acc(*a, gout),
            Op::Dropout { x, scale } => {
                let d: Vec<f64> = gout.iter().zip(scale).map(|(g, s)| g * s).collect();
                self.acc(*x, &d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.acc(*a, &vec![gout[0]; n]);
            }
        }
        self.nodes[idx].op = op;
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        bias: Option<Var>,
        mask: &AttnMask,
        heads: usize,
        probs: &[f64],
        gout: &[f64],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n_q, d) = (qv.rows(), qv.cols());
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n_cls = bias.map_or(0, |b| self.value(b).cols());
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let mut dbias = vec![0.0; heads * n_cls];
        let mut ds = Vec::new();
        for i in 0..n_q {
            let keys = mask.keys_of(i);
            let classes = mask.classes_of(i);
            let cnt = keys.len();
            let base = mask.offsets[i] * heads;
            for h in 0..heads {
                let p = &probs[base + h * cnt..base + (h + 1) * cnt];
                let go = &gout[i * d + h * dh..i * d + (h + 1) * dh];
                ds.clear();
                for (j, &key) in keys.iter().enumerate() {
                    let vs = &vv.row(key)[h * dh..(h + 1) * dh];
                    ds.push(go.iter().zip(vs).map(|(a, b)| a * b).sum::<f64>());
                    let dvs = &mut dv[key * d + h * dh..key * d + (h + 1) * dh];
                    dvs.iter_mut().zip(go).for_each(|(a, g)| *a += p[j] * g);
                }
                let dot: f64 = p.iter().zip(&ds).map(|(a, b)| a * b).sum();
                for j in 0..cnt {
                    ds[j] = p[j] * (ds[j] - dot);
                }
                let qs = &qv.row(i)[h * dh..(h + 1) * dh];
                for (j, &key) in keys.iter().enumerate() {
                    let g = ds[j];
                    if g == 0.0 {
                        continue;
                    }
                    if let Some(c) = classes[j] {
                        if n_cls > 0 {
                            dbias[h * n_cls + c] += g;
                        }
                    }
                    let ks = &kv.row(key)[h * dh..(h + 1) * dh];
                    let dqs = &mut dq[i * d + h * dh..i * d + (h + 1) * dh];
                    dqs.iter_mut().zip(ks).for_each(|(a, b)| *a += g * scale * b);
                    let dks = &mut dk[key * d + h * dh..key * d + (h + 1) * dh];
                    dks.iter_mut().zip(qs).for_each(|(a, b)| *a += g * scale * b);
                }
            }
        }
        self.acc(q, &dq);
        self.acc(k, &dk);
        self.acc(v, &dv);
        if let Some(b) = bias {
            self.acc(b, &dbias);
        }
    }

    // ---- gradient access ------------------------------------------------

    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::new(self.shape(v).to_vec(), g.clone()).unwrap())
    }

    /// Gradients of every parameter of `store` that appeared on this graph.
    ///
    /// A parameter loaded more than once has its gradients summed. Returns a
    /// contract error if a frozen parameter of the store carries a gradient.
    pub fn param_grads(&self, store: &ParamStore) -> Result<Vec<(ParamId, Tensor)>> {
        if !self.backward_done {
            return Err(EalmError::usage("param_grads called before backward"));
        }
        let mut out: Vec<(ParamId, Tensor)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let Op::Leaf {
                param: Some((uid, id)),
            } = node.op
            else {
                continue;
            };
            if uid != store.uid() {
                continue;
            }
            let Some(g) = &self.grads[i] else { continue };
            if store.is_frozen(id) {
                return Err(EalmError::contract(format!(
                    "gradient reached frozen parameter {}",
                    store.name(id)
                )));
            }
            match out.iter_mut().find(|(pid, _)| *pid == id) {
                Some((_, t)) => t
                    .data_mut()
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b),
                None => out.push((id, Tensor::new(node.value.shape().to_vec(), g.clone()).unwrap())),
            }
        }
        out.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}
