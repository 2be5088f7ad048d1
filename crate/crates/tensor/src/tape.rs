//! Recording tape for reverse-mode differentiation.
//!
//! Every primitive appends one node holding its output value plus whatever
//! the backward pass needs. [`Tape::backward`] walks the nodes in reverse
//! record order, which visits each node after all of its consumers.

use crate::error::{arg_err, shape_err, Result, TensorError};
use crate::float::{gemm, Float, MatView};
use crate::kernels::{axis_split, check_layer_norm, gelu_grad_from_cdf, normal_cdf, layer_norm_rows, softmax_into};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout and masking of a fused multi-head attention call.
///
/// Queries are `[batch * q_len, model_dim]`, keys and values
/// `[batch * k_len, model_dim]`; heads split `model_dim` into equal slices.
#[derive(Debug, Clone)]
pub struct AttentionSpec {
    pub batch: usize,
    pub heads: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// Query `i` may only see keys `j <= i`.
    pub causal: bool,
    /// `[batch * k_len]`, `true` marks a key that must receive zero weight.
    pub key_padding: Option<Vec<bool>>,
}

enum Op<F: Float> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, F),
    MaskMul { x: Var, mask: Vec<F> },
    Gelu { x: Var, cdf: Vec<F> },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    Embedding { table: Var, ids: Vec<usize> },
    GatherRows { x: Var, rows: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<F>, drop: Option<Vec<F>> },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<F>, eps: F, probs: Vec<F>, norm: F },
    Sum(Var),
    Mean(Var),
}

struct Node<F: Float> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Ordered record of primitive operations. One tape belongs to one thread.
pub struct Tape<F: Float = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Gradients are tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, mut t: Tensor<F>) -> Var {
        t.grad = None;
        let needs_grad = t.requires_grad;
        self.nodes.push(Node { value: t, op: Op::Leaf, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut t: Tensor<F>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// Gradient of a leaf after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<F>> {
        self.nodes[v.0].value.grad.take()
    }

    /// Resets every leaf gradient to zero.
    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Op::Leaf = node.op {
                if node.needs_grad {
                    let n = node.value.len();
                    node.value.grad = Some(vec![F::zero(); n]);
                }
            }
        }
    }

    /// Attention probabilities `[batch, heads, q_len, k_len]` saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor<F>> {
        match &self.nodes[v.0].op {
            Op::Attention { spec, probs, .. } => Some(
                Tensor::from_vec(&[spec.batch, spec.heads, spec.q_len, spec.k_len], probs.clone())
                    .expect("attention probs sized by spec"),
            ),
            _ => None,
        }
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    // ----- primitives -------------------------------------------------------

    /// `a b`, or `a bᵀ` when `trans_b`. Both operands are 2-D.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return shape_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return shape_err("matmul", format!("{sa:?} x {sb:?} (trans_b = {trans_b})"));
        }
        let bv = if trans_b { MatView::dense(0, n, k).transposed() } else { MatView::dense(0, k, n) };
        let mut out = vec![F::zero(); m * n];
        gemm(F::one(), self.data(a), MatView::dense(0, m, k), self.data(b), bv, F::zero(), &mut out, MatView::dense(0, m, n));
        let value = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("add", format!("{:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let out: Vec<F> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let value = Tensor::from_vec(self.shape(a), out)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a vector to every row along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.shape(bias) != [d] {
            return shape_err("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(bias)));
        }
        let b = self.data(bias);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(d.max(1)) {
            row.iter_mut().zip(b).for_each(|(o, &v)| *o = *o + v);
        }
        let value = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.push(value, Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("mul", format!("{:?} * {:?}", self.shape(a), self.shape(b)));
        }
        let out: Vec<F> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(self.shape(a), out)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    /// Elementwise product with a fixed mask (dropout).
    pub fn mask_mul(&mut self, x: Var, mask: Vec<F>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return shape_err("mask_mul", format!("mask of {} for {:?}", mask.len(), self.shape(x)));
        }
        let out: Vec<F> = self.data(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.push(value, Op::MaskMul { x, mask }, &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let cdf: Vec<F> = self.data(x).iter().map(|&v| normal_cdf(v)).collect();
        let out = self.data(x).iter().zip(&cdf).map(|(&v, &c)| v * c).collect();
        let value = Tensor::from_vec(self.shape(x), out).expect("same shape");
        self.push(value, Op::Gelu { x, cdf }, &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (outer, len, inner) = axis_split(self.shape(x), axis)?;
        let mut out = vec![F::zero(); self.value(x).len()];
        softmax_into(self.data(x), &mut out, outer, len, inner);
        let value = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.push(value, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        check_layer_norm(self.value(x), self.value(gain), self.value(bias), eps)?;
        let n = self.value(x).len();
        let mut out = vec![F::zero(); n];
        let mut xhat = vec![F::zero(); n];
        let rstd = layer_norm_rows(self.data(x), self.data(gain), self.data(bias), eps, &mut out, &mut xhat);
        let value = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Row lookup `table[ids[i]]`, giving `[ids.len(), dim]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return shape_err("embedding", format!("table {st:?}"));
        }
        let (rows, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return arg_err("embedding", format!("id {bad} >= table rows {rows}"));
        }
        let t = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let value = Tensor::from_vec(&[ids.len(), d], out)?;
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    /// Selects rows of a 2-D tensor.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return shape_err("gather_rows", format!("{sx:?}"));
        }
        let (m, d) = (sx[0], sx[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= m) {
            return arg_err("gather_rows", format!("row {bad} >= {m}"));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            out.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let value = Tensor::from_vec(&[rows.len(), d], out)?;
        Ok(self.push(value, Op::GatherRows { x, rows: rows.to_vec() }, &[x]))
    }

    /// Fused scaled dot-product multi-head attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        self.attention_with_dropout(q, k, v, spec, None)
    }

    /// Attention whose probabilities are multiplied by `drop` (same layout as
    /// the saved probabilities) before weighting the values. The saved maps
    /// are the undropped probabilities.
    pub fn attention_with_dropout(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        drop: Option<Vec<F>>,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sk != sv {
            return shape_err("attention", format!("q {sq:?}, k {sk:?}, v {sv:?}"));
        }
        let d = sq[1];
        if sk[1] != d
            || spec.heads == 0
            || d % spec.heads != 0
            || sq[0] != spec.batch * spec.q_len
            || sk[0] != spec.batch * spec.k_len
        {
            return shape_err("attention", format!("q {sq:?}, k {sk:?} with {spec:?}"));
        }
        if let Some(p) = &spec.key_padding {
            if p.len() != spec.batch * spec.k_len {
                return shape_err("attention", format!("key padding of {} entries", p.len()));
            }
        }
        let (b_n, h_n, lq, lk) = (spec.batch, spec.heads, spec.q_len, spec.k_len);
        if drop.as_ref().is_some_and(|m| m.len() != b_n * h_n * lq * lk) {
            return shape_err("attention", "dropout mask does not match probabilities");
        }
        let dh = d / h_n;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![F::zero(); b_n * h_n * lq * lk];
        let mut dropped = vec![F::zero(); if drop.is_some() { lq * lk } else { 0 }];
        let mut out = vec![F::zero(); b_n * lq * d];
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        for b in 0..b_n {
            for h in 0..h_n {
                let p_off = (b * h_n + h) * lq * lk;
                let qv = MatView { offset: b * lq * d + h * dh, rows: lq, cols: dh, row_stride: d, col_stride: 1 };
                let kv = MatView { offset: b * lk * d + h * dh, rows: lk, cols: dh, row_stride: d, col_stride: 1 };
                gemm(scale, qd, qv, kd, kv.transposed(), F::zero(), &mut probs, MatView::dense(p_off, lq, lk));
                for i in 0..lq {
                    let row = &mut probs[p_off + i * lk..p_off + (i + 1) * lk];
                    let mut any = false;
                    for (j, s) in row.iter_mut().enumerate() {
                        let masked = (spec.causal && j > i)
                            || spec.key_padding.as_ref().is_some_and(|p| p[b * lk + j]);
                        if masked {
                            *s = F::neg_infinity();
                        } else {
                            any = true;
                        }
                    }
                    if any {
                        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
                        let mut sum = F::zero();
                        for s in row.iter_mut() {
                            *s = (*s - max).exp();
                            sum = sum + *s;
                        }
                        let inv = F::one() / sum;
                        row.iter_mut().for_each(|s| *s = *s * inv);
                    } else {
                        debug_assert!(false, "attention row with every key masked");
                        let u = F::one() / F::from_usize(lk).unwrap();
                        row.iter_mut().for_each(|s| *s = u);
                    }
                }
                let ov = MatView { offset: b * lq * d + h * dh, rows: lq, cols: dh, row_stride: d, col_stride: 1 };
                if let Some(mask) = &drop {
                    for i in 0..lq * lk {
                        dropped[i] = probs[p_off + i] * mask[p_off + i];
                    }
                    gemm(F::one(), &dropped, MatView::dense(0, lq, lk), vd, kv, F::zero(), &mut out, ov);
                } else {
                    gemm(F::one(), &probs, MatView::dense(p_off, lq, lk), vd, kv, F::zero(), &mut out, ov);
                }
            }
        }
        let value = Tensor::from_vec(&[b_n * lq, d], out)?;
        Ok(self.push(value, Op::Attention { q, k, v, spec, probs, drop }, &[q, k, v]))
    }

    /// Label-smoothed cross-entropy averaged over weighted rows.
    ///
    /// Row `i` contributes `weights[i] * -(sum_v y'_v log softmax(logits_i)_v)`
    /// with `y' = (1 - eps) onehot(targets[i]) + eps / V`; the total is divided
    /// by `sum(weights)`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[F], eps: F) -> Result<Var> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[0] != targets.len() || weights.len() != targets.len() {
            return shape_err(
                "cross_entropy",
                format!("logits {sl:?}, {} targets, {} weights", targets.len(), weights.len()),
            );
        }
        let (n, vocab) = (sl[0], sl[1]);
        if eps < F::zero() || eps >= F::one() {
            return arg_err("cross_entropy", "smoothing must lie in [0, 1)");
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= vocab) {
            return arg_err("cross_entropy", format!("target {bad} >= vocabulary {vocab}"));
        }
        let norm: F = weights.iter().copied().sum();
        if norm <= F::zero() {
            return arg_err("cross_entropy", "no positions carry weight");
        }
        let x = self.data(logits);
        let mut probs = vec![F::zero(); n * vocab];
        let uniform = eps / F::from_usize(vocab).unwrap();
        let mut total = F::zero();
        for i in 0..n {
            let row = &x[i * vocab..(i + 1) * vocab];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for (p, &l) in probs[i * vocab..(i + 1) * vocab].iter_mut().zip(row) {
                *p = (l - max).exp();
                sum = sum + *p;
            }
            let log_z = max + sum.ln();
            let inv = F::one() / sum;
            probs[i * vocab..(i + 1) * vocab].iter_mut().for_each(|p| *p = *p * inv);
            if weights[i] == F::zero() {
                continue;
            }
            let mut loss = -(F::one() - eps) * (row[targets[i]] - log_z);
            if eps > F::zero() {
                let sum_logp: F = row.iter().map(|&l| l - log_z).sum();
                loss = loss - uniform * sum_logp;
            }
            total = total + weights[i] * loss;
        }
        let value = Tensor::scalar(total / norm);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), eps, probs, norm };
        Ok(self.push(value, op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = F::from_usize(self.value(x).len().max(1)).unwrap();
        let s: F = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s / n), Op::Mean(x), &[x])
    }

    // ----- backward ---------------------------------------------------------

    /// Accumulates `d loss / d leaf` into every leaf that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = self.nodes[idx].op {
                let slot = &mut self.nodes[idx].value.grad;
                match slot {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }
        for node in &mut self.nodes[..=loss.0] {
            if matches!(node.op, Op::Leaf) && node.needs_grad && node.value.grad.is_none() {
                node.value.grad = Some(vec![F::zero(); node.value.len()]);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        macro_rules! acc {
            ($v:expr) => {
                accumulator(grads, nodes, $v)
            };
        }
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
                let (m, k) = (sa[0], sa[1]);
                let n = if *trans_b { sb[0] } else { sb[1] };
                let gv = MatView::dense(0, m, n);
                let bview = if *trans_b { MatView::dense(0, n, k) } else { MatView::dense(0, k, n).transposed() };
                if wants(*a) {
                    let da = acc!(*a);
                    // da[m,k] += g[m,n] * (b as [n,k])
                    gemm(F::one(), g, gv, nodes[b.0].value.data(), bview, F::one(), da, MatView::dense(0, m, k));
                }
                if wants(*b) {
                    let db = acc!(*b);
                    let av = MatView::dense(0, m, k);
                    if *trans_b {
                        // db[n,k] += g^T[n,m] a[m,k]
                        gemm(F::one(), g, gv.transposed(), nodes[a.0].value.data(), av, F::one(), db, MatView::dense(0, n, k));
                    } else {
                        // db[k,n] += a^T[k,m] g[m,n]
                        gemm(F::one(), nodes[a.0].value.data(), av.transposed(), g, gv, F::one(), db, MatView::dense(0, k, n));
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        acc!(v).iter_mut().zip(g).for_each(|(d, &x)| *d = *d + x);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if wants(*x) {
                    acc!(*x).iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
                }
                if wants(*bias) {
                    let db = acc!(*bias);
                    let d = db.len().max(1);
                    for row in g.chunks_exact(d) {
                        db.iter_mut().zip(row).for_each(|(o, &v)| *o = *o + v);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(*a) {
                    let da = acc!(*a);
                    for i in 0..g.len() {
                        da[i] = da[i] + g[i] * bd[i];
                    }
                }
                if wants(*b) {
                    let db = acc!(*b);
                    for i in 0..g.len() {
                        db[i] = db[i] + g[i] * ad[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                acc!(*x).iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * *c);
            }
            Op::MaskMul { x, mask } => {
                let dx = acc!(*x);
                for i in 0..g.len() {
                    dx[i] = dx[i] + g[i] * mask[i];
                }
            }
            Op::Gelu { x, cdf } => {
                let xd = nodes[x.0].value.data();
                let dx = acc!(*x);
                for i in 0..g.len() {
                    dx[i] = dx[i] + g[i] * gelu_grad_from_cdf(xd[i], cdf[i]);
                }
            }
            Op::Softmax { x, outer, len, inner } => {
                let y = nodes[idx].value.data();
                let dx = acc!(*x);
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let dot: F = (0..*len).map(|j| y[base + j * inner] * g[base + j * inner]).sum();
                        for j in 0..*len {
                            let p = base + j * inner;
                            dx[p] = dx[p] + y[p] * (g[p] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let gd = nodes[gain.0].value.data();
                let d = gd.len();
                let rows = rstd.len();
                if wants(*gain) {
                    let dg = acc!(*gain);
                    for (i, &v) in g.iter().enumerate() {
                        dg[i % d] = dg[i % d] + v * xhat[i];
                    }
                }
                if wants(*bias) {
                    let db = acc!(*bias);
                    for (i, &v) in g.iter().enumerate() {
                        db[i % d] = db[i % d] + v;
                    }
                }
                if wants(*x) {
                    let dx = acc!(*x);
                    let inv_d = F::one() / F::from_usize(d).unwrap();
                    let mut dxhat = vec![F::zero(); d];
                    for r in 0..rows {
                        let off = r * d;
                        let mut mean_dxhat = F::zero();
                        let mut mean_dxhat_xhat = F::zero();
                        for c in 0..d {
                            dxhat[c] = g[off + c] * gd[c];
                            mean_dxhat = mean_dxhat + dxhat[c];
                            mean_dxhat_xhat = mean_dxhat_xhat + dxhat[c] * xhat[off + c];
                        }
                        mean_dxhat = mean_dxhat * inv_d;
                        mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                        for c in 0..d {
                            dx[off + c] =
                                dx[off + c] + rstd[r] * (dxhat[c] - mean_dxhat - xhat[off + c] * mean_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let dt = acc!(*table);
                let d = nodes[table.0].value.last_dim();
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..d {
                        dt[id * d + c] = dt[id * d + c] + g[r * d + c];
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                let dx = acc!(*x);
                let d = nodes[x.0].value.last_dim();
                for (r, &src) in rows.iter().enumerate() {
                    for c in 0..d {
                        dx[src * d + c] = dx[src * d + c] + g[r * d + c];
                    }
                }
            }
            Op::Attention { q, k, v, spec, probs, drop } => {
                let d = nodes[q.0].value.last_dim();
                let (b_n, h_n, lq, lk) = (spec.batch, spec.heads, spec.q_len, spec.k_len);
                let dh = d / h_n;
                let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
                let (qd, kd, vd) = (nodes[q.0].value.data(), nodes[k.0].value.data(), nodes[v.0].value.data());
                let mut dp = vec![F::zero(); lq * lk];
                let mut dropped = vec![F::zero(); if drop.is_some() { lq * lk } else { 0 }];
                for b in 0..b_n {
                    for h in 0..h_n {
                        let p_off = (b * h_n + h) * lq * lk;
                        let pv = MatView::dense(p_off, lq, lk);
                        let qv = MatView { offset: b * lq * d + h * dh, rows: lq, cols: dh, row_stride: d, col_stride: 1 };
                        let kv = MatView { offset: b * lk * d + h * dh, rows: lk, cols: dh, row_stride: d, col_stride: 1 };
                        if let Some(mask) = drop {
                            for i in 0..lq * lk {
                                dropped[i] = probs[p_off + i] * mask[p_off + i];
                            }
                        }
                        if wants(*v) {
                            // dV[lk,dh] += P^T[lk,lq] dO[lq,dh]
                            let dv = acc!(*v);
                            if drop.is_some() {
                                gemm(F::one(), &dropped, MatView::dense(0, lq, lk).transposed(), g, qv, F::one(), dv, kv);
                            } else {
                                gemm(F::one(), probs, pv.transposed(), g, qv, F::one(), dv, kv);
                            }
                        }
                        if !(wants(*q) || wants(*k)) {
                            continue;
                        }
                        // dP[lq,lk] = dO[lq,dh] V^T[dh,lk]
                        gemm(F::one(), g, qv, vd, kv.transposed(), F::zero(), &mut dp, MatView::dense(0, lq, lk));
                        if let Some(mask) = drop {
                            for i in 0..lq * lk {
                                dp[i] = dp[i] * mask[p_off + i];
                            }
                        }
                        for i in 0..lq {
                            let prow = &probs[p_off + i * lk..p_off + (i + 1) * lk];
                            let drow = &mut dp[i * lk..(i + 1) * lk];
                            let dot: F = prow.iter().zip(drow.iter()).map(|(&p, &x)| p * x).sum();
                            for (x, &p) in drow.iter_mut().zip(prow) {
                                *x = p * (*x - dot) * scale;
                            }
                        }
                        if wants(*q) {
                            // dQ[lq,dh] += dS[lq,lk] K[lk,dh]
                            let dq = acc!(*q);
                            gemm(F::one(), &dp, MatView::dense(0, lq, lk), kd, kv, F::one(), dq, qv);
                        }
                        if wants(*k) {
                            // dK[lk,dh] += dS^T[lk,lq] Q[lq,dh]
                            let dk = acc!(*k);
                            gemm(F::one(), &dp, MatView::dense(0, lq, lk).transposed(), qd, qv, F::one(), dk, kv);
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, eps, probs, norm } => {
                let vocab = nodes[logits.0].value.last_dim();
                let uniform = *eps / F::from_usize(vocab).unwrap();
                let dl = acc!(*logits);
                for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == F::zero() {
                        continue;
                    }
                    let c = g[0] * w / *norm;
                    for j in 0..vocab {
                        let mut target = uniform;
                        if j == t {
                            target = target + F::one() - *eps;
                        }
                        dl[i * vocab + j] = dl[i * vocab + j] + c * (probs[i * vocab + j] - target);
                    }
                }
            }
            Op::Sum(x) => {
                acc!(*x).iter_mut().for_each(|d| *d = *d + g[0]);
            }
            Op::Mean(x) => {
                let n = F::from_usize(nodes[x.0].value.len().max(1)).unwrap();
                acc!(*x).iter_mut().for_each(|d| *d = *d + g[0] / n);
            }
        }
    }
}

fn accumulator<'g, F: Float>(grads: &'g mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var) -> &'g mut Vec<F> {
    let n = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![F::zero(); n])
}
