//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records primitive applications in creation order, which is
//! a topological order by construction. [`Graph::backward`] walks the tape
//! once in reverse and accumulates gradients for every node reachable from
//! the loss.

use crate::error::{shape_err, Error, Result};

use super::scalar::{MatView, Scalar};
use super::tensor::{gelu_grad_scalar, log_softmax_row, matmul_ex, row_moments, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Masking applied by [`Graph::softmax_masked`] to `[groups, rows, keys]` scores.
///
/// `key_lens[g]` keys are visible to group `g`; with `causal`, query `q`
/// additionally sees only keys `<= q`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    pub causal: bool,
    pub key_lens: Vec<usize>,
}

impl AttentionMask {
    /// Visible keys for a query are always `0..visible_prefix`.
    fn visible_prefix(&self, group: usize, query: usize) -> usize {
        let len = self.key_lens[group];
        if self.causal {
            len.min(query + 1)
        } else {
            len
        }
    }
}

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var, transpose_b: bool },
    BatchMatMul { a: Var, b: Var, transpose_b: bool },
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    Mul(Var, Var),
    Scale { x: Var, factor: S },
    Sum(Var),
    WeightedSum { a: Var, wa: S, b: Var, wb: S },
    Gelu(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<S>, rstd: Vec<S> },
    Softmax { x: Var, inv_t: S },
    Gather { table: Var, ids: Vec<usize> },
    SelectRows { x: Var, rows: Vec<usize> },
    SplitHeads { x: Var, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Var, batch: usize, seq: usize, heads: usize },
    CrossEntropy { logits: Var, labels: Vec<Option<usize>>, probs: Vec<S>, count: usize },
    KlDiv { student: Var, target: Tensor<S>, student_probs: Vec<S>, rows: Vec<bool>, inv_t: S, factor: S, count: usize },
    FakeQuant { w: Var, limit: S },
}

#[derive(Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Gradients of a scalar loss with respect to graph leaves.
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// `None` when the leaf does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient or zeros shaped like `like` for disconnected leaves.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<S>) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[derive(Debug, Default)]
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
}

fn same_shape<S: Scalar>(op: &'static str, a: &Tensor<S>, b: &Tensor<S>) -> Result<()> {
    if a.shape() != b.shape() {
        return shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

fn dims3<S: Scalar>(t: &Tensor<S>, op: &'static str) -> Result<(usize, usize, usize)> {
    match t.shape() {
        [g, r, c] => Ok((*g, *r, *c)),
        s => shape_err(op, format!("expected rank-3 tensor, got {s:?}")),
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ex(a, b, false)
    }

    /// `a · bᵀ` when `transpose_b`.
    pub fn matmul_ex(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let out = matmul_ex(self.value(a), self.value(b), transpose_b)?;
        Ok(self.push(out, Op::MatMul { a, b, transpose_b }))
    }

    /// Per-group product of `[g, m, k]` and `[g, k, n]` (or `[g, n, k]` transposed).
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (g, m, k) = dims3(self.value(a), "batch_matmul")?;
        let (gb, br, bc) = dims3(self.value(b), "batch_matmul")?;
        let (kb, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if g != gb || k != kb {
            return shape_err(
                "batch_matmul",
                format!("{:?} x {:?} (transpose_b={transpose_b})", self.value(a).shape(), self.value(b).shape()),
            );
        }
        let mut out = vec![S::zero(); g * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for gi in 0..g {
                let a_s = &ad[gi * m * k..(gi + 1) * m * k];
                let b_s = &bd[gi * k * n..(gi + 1) * k * n];
                let bview = if transpose_b { MatView::transposed(b_s, k) } else { MatView::row_major(b_s, n) };
                S::gemm_raw(m, k, n, MatView::row_major(a_s, k), bview, &mut out[gi * m * n..(gi + 1) * m * n], false);
            }
        }
        let t = Tensor::new(vec![g, m, n], out)?;
        Ok(self.push(t, Op::BatchMatMul { a, b, transpose_b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let mut out = self.value(a).clone();
        out.add_assign_tensor(self.value(b));
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// Adds `bias` (length = last dim of `x`) to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(bias).len() != d {
            return shape_err("add_bias", format!("row width {d}, bias {:?}", self.value(bias).shape()));
        }
        let mut out = self.value(x).clone();
        let b = self.value(bias).data();
        for row in out.data_mut().chunks_mut(d) {
            for (o, &bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias { x, bias }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let bd = self.value(b).data();
        let data = self.value(a).data().iter().zip(bd).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push(out, Op::Scale { x, factor })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// `wa * a + wb * b` for scalar nodes.
    pub fn weighted_sum(&mut self, a: Var, wa: S, b: Var, wb: S) -> Result<Var> {
        if self.value(a).len() != 1 || self.value(b).len() != 1 {
            return shape_err("weighted_sum", "operands must be scalars");
        }
        let v = wa * self.value(a).data()[0] + wb * self.value(b).data()[0];
        Ok(self.push(Tensor::scalar(v), Op::WeightedSum { a, wa, b, wb }))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = super::tensor::gelu(self.value(x));
        self.push(out, Op::Gelu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: S) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != d || b.len() != d {
            return shape_err("layer_norm", format!("row width {d}, gain {:?}, bias {:?}", g.shape(), b.shape()));
        }
        let rows = xv.rows();
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let (m, r) = row_moments(row, eps);
            mean.push(m);
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                out.push((v - m) * r * g.data()[j] + b.data()[j]);
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, mean, rstd }))
    }

    /// Softmax of `x / temperature` along the last axis.
    pub fn softmax(&mut self, x: Var, temperature: S) -> Result<Var> {
        self.softmax_impl(x, temperature, None)
    }

    /// Softmax over the last axis of `[groups, rows, keys]` with masked keys
    /// receiving probability zero.
    pub fn softmax_masked(&mut self, x: Var, temperature: S, mask: AttentionMask) -> Result<Var> {
        let (g, _, _) = dims3(self.value(x), "softmax_masked")?;
        if mask.key_lens.len() != g || mask.key_lens.contains(&0) {
            return shape_err("softmax_masked", format!("{} key lengths for {g} groups", mask.key_lens.len()));
        }
        self.softmax_impl(x, temperature, Some(mask))
    }

    fn softmax_impl(&mut self, x: Var, temperature: S, mask: Option<AttentionMask>) -> Result<Var> {
        if !(temperature > S::zero()) {
            return Err(Error::Validation("softmax temperature must be positive".into()));
        }
        let xv = self.value(x);
        xv.ensure_finite("softmax input")?;
        let inv_t = S::one() / temperature;
        let n = xv.last_dim();
        let rows_per_group = if xv.shape().len() >= 2 { xv.shape()[xv.shape().len() - 2] } else { 1 };
        let mut out = xv.data().to_vec();
        for (r, row) in out.chunks_mut(n).enumerate() {
            let (group, query) = (r / rows_per_group, r % rows_per_group);
            let limit = mask.as_ref().map_or(n, |m| m.visible_prefix(group, query).min(n));
            let (vis, hidden) = row.split_at_mut(limit);
            let mx = vis.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
            let mut denom = S::zero();
            for v in vis.iter_mut() {
                let e = ((*v - mx) * inv_t).exp();
                *v = e;
                denom += e;
            }
            let inv = S::one() / denom;
            for v in vis.iter_mut() {
                *v *= inv;
            }
            hidden.fill(S::zero());
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(t, Op::Softmax { x, inv_t }))
    }

    /// Rows of `table` selected by `ids`: `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let d = tv.last_dim();
        let rows = tv.rows();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return shape_err("gather", format!("row {i} of {rows}"));
            }
            out.extend_from_slice(&tv.data()[i * d..(i + 1) * d]);
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.push(t, Op::Gather { table, ids: ids.to_vec() }))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let node = self.gather(x, rows)?;
        let op = std::mem::replace(&mut self.nodes[node.0].op, Op::Leaf);
        if let Op::Gather { table, ids } = op {
            self.nodes[node.0].op = Op::SelectRows { x: table, rows: ids };
        }
        Ok(node)
    }

    /// `[batch*seq, heads*hd]` to `[batch*heads, seq, hd]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if xv.rows() != batch * seq || d % heads != 0 {
            return shape_err("split_heads", format!("{:?} into b={batch} n={seq} h={heads}", xv.shape()));
        }
        let hd = d / heads;
        let src = xv.data();
        let mut out = vec![S::zero(); xv.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let s = (b * seq + t) * d + h * hd;
                    let o = ((b * heads + h) * seq + t) * hd;
                    out[o..o + hd].copy_from_slice(&src[s..s + hd]);
                }
            }
        }
        let tns = Tensor::new(vec![batch * heads, seq, hd], out)?;
        Ok(self.push(tns, Op::SplitHeads { x, batch, seq, heads }))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let (g, n, hd) = dims3(self.value(x), "merge_heads")?;
        if g != batch * heads || n != seq {
            return shape_err("merge_heads", format!("{:?} into b={batch} n={seq} h={heads}", self.value(x).shape()));
        }
        let out = merge_heads_data(self.value(x).data(), batch, seq, heads, hd);
        let t = Tensor::new(vec![batch * seq, heads * hd], out)?;
        Ok(self.push(t, Op::MergeHeads { x, batch, seq, heads }))
    }

    /// Mean cross-entropy over rows whose label is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.last_dim();
        if lv.rows() != labels.len() {
            return shape_err("cross_entropy", format!("{} rows vs {} labels", lv.rows(), labels.len()));
        }
        let mut probs = vec![S::zero(); lv.len()];
        let mut total = S::zero();
        let mut count = 0usize;
        for ((row, p), y) in lv.data().chunks(c).zip(probs.chunks_mut(c)).zip(labels) {
            let Some(y) = *y else { continue };
            if y >= c {
                return Err(Error::LabelOutOfRange { label: y, classes: c });
            }
            log_softmax_row(row, p);
            total -= p[y];
            for v in p.iter_mut() {
                *v = v.exp();
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyDataset);
        }
        let loss = total / S::from_usize(count).unwrap();
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross_entropy".into()));
        }
        let labels = labels.to_vec();
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, labels, probs, count }))
    }

    /// `factor * mean_rows KL(softmax(teacher / τ) ‖ softmax(student / τ))`.
    ///
    /// `teacher` holds fixed logits; rows with `rows[i] == false` are
    /// skipped. Both sides go through the same log-softmax, so equal logits
    /// give exactly zero.
    pub fn kl_divergence(
        &mut self,
        student: Var,
        teacher: &Tensor<S>,
        rows: &[bool],
        temperature: S,
        factor: S,
    ) -> Result<Var> {
        if !(temperature > S::zero()) {
            return Err(Error::Validation("temperature must be positive".into()));
        }
        let sv = self.value(student);
        if sv.len() != teacher.len() || sv.last_dim() != teacher.last_dim() {
            return shape_err("kl_divergence", format!("student {:?} vs teacher {:?}", sv.shape(), teacher.shape()));
        }
        teacher.ensure_finite("teacher logits")?;
        let c = sv.last_dim();
        if rows.len() != sv.rows() {
            return shape_err("kl_divergence", format!("{} row flags for {} rows", rows.len(), sv.rows()));
        }
        let inv_t = S::one() / temperature;
        let mut student_probs = vec![S::zero(); sv.len()];
        let mut target = vec![S::zero(); sv.len()];
        let mut scaled = vec![S::zero(); c];
        let mut total = S::zero();
        let mut count = 0usize;
        let rows_iter = sv.data().chunks(c).zip(teacher.data().chunks(c));
        for (r, ((srow, trow), (q, p))) in rows_iter.zip(student_probs.chunks_mut(c).zip(target.chunks_mut(c))).enumerate() {
            if !rows[r] {
                continue;
            }
            for (s, &v) in scaled.iter_mut().zip(trow) {
                *s = v * inv_t;
            }
            log_softmax_row(&scaled, p);
            for (s, &v) in scaled.iter_mut().zip(srow) {
                *s = v * inv_t;
            }
            log_softmax_row(&scaled, q);
            for (qv, pv) in q.iter_mut().zip(p.iter_mut()) {
                let lp = *pv;
                *pv = lp.exp();
                total += *pv * (lp - *qv);
                *qv = qv.exp();
            }
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyDataset);
        }
        let loss = factor * total / S::from_usize(count).unwrap();
        if !loss.is_finite() {
            return Err(Error::NonFinite("kl_divergence".into()));
        }
        let target = Tensor::new(sv.shape().to_vec(), target)?;
        let node = Op::KlDiv { student, target, student_probs, rows: rows.to_vec(), inv_t, factor, count };
        Ok(self.push(Tensor::scalar(loss), node))
    }

    /// Symmetric per-tensor int8 quantize∘dequantize with a straight-through
    /// gradient inside the clamp range.
    pub fn fake_quant(&mut self, w: Var) -> Var {
        let wv = self.value(w);
        let scale = crate::compressor::quant::symmetric_scale(wv);
        let out = wv.map(|x| crate::compressor::quant::fake_quant_value(x, scale));
        let limit = scale * S::lit(127.0);
        self.push(out, Op::FakeQuant { w, limit })
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return shape_err("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul { a, b, transpose_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = (av.shape()[0], av.shape()[1]);
                    let n = g.last_dim();
                    let mut da = vec![S::zero(); m * k];
                    let bview = if *transpose_b { MatView::row_major(bv.data(), k) } else { MatView::transposed(bv.data(), n) };
                    S::gemm_raw(m, n, k, MatView::row_major(g.data(), n), bview, &mut da, false);
                    accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                    let mut db = vec![S::zero(); k * n];
                    if *transpose_b {
                        S::gemm_raw(n, m, k, MatView::transposed(g.data(), n), MatView::row_major(av.data(), k), &mut db, false);
                    } else {
                        S::gemm_raw(k, m, n, MatView::transposed(av.data(), k), MatView::row_major(g.data(), n), &mut db, false);
                    }
                    accumulate(&mut grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
                Op::BatchMatMul { a, b, transpose_b } => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (groups, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                    let n = g.last_dim();
                    let mut da = vec![S::zero(); av.len()];
                    let mut db = vec![S::zero(); bv.len()];
                    for gi in 0..groups {
                        let gs = &g.data()[gi * m * n..(gi + 1) * m * n];
                        let a_s = &av.data()[gi * m * k..(gi + 1) * m * k];
                        let b_s = &bv.data()[gi * k * n..(gi + 1) * k * n];
                        let da_s = &mut da[gi * m * k..(gi + 1) * m * k];
                        let bview = if *transpose_b { MatView::row_major(b_s, k) } else { MatView::transposed(b_s, n) };
                        S::gemm_raw(m, n, k, MatView::row_major(gs, n), bview, da_s, false);
                        let db_s = &mut db[gi * k * n..(gi + 1) * k * n];
                        if *transpose_b {
                            S::gemm_raw(n, m, k, MatView::transposed(gs, n), MatView::row_major(a_s, k), db_s, false);
                        } else {
                            S::gemm_raw(k, m, n, MatView::transposed(a_s, k), MatView::row_major(gs, n), db_s, false);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                    accumulate(&mut grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::AddBias { x, bias } => {
                    let d = g.last_dim();
                    let mut db = vec![S::zero(); d];
                    for row in g.data().chunks(d) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(&mut grads, *bias, Tensor::new(self.value(*bias).shape().to_vec(), db)?);
                    accumulate(&mut grads, *x, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = g.data().iter().zip(bv.data()).map(|(&gv, &y)| gv * y).collect();
                    let db = g.data().iter().zip(av.data()).map(|(&gv, &x)| gv * x).collect();
                    accumulate(&mut grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                    accumulate(&mut grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    accumulate(&mut grads, *x, g.map(|v| v * f));
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *x, Tensor::full(self.value(*x).shape(), gv));
                }
                Op::WeightedSum { a, wa, b, wb } => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::scalar(gv * *wa));
                    accumulate(&mut grads, *b, Tensor::scalar(gv * *wb));
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let dx = g.data().iter().zip(xv.data()).map(|(&gv, &v)| gv * gelu_grad_scalar(v)).collect();
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::LayerNorm { x, gain, bias, mean, rstd } => {
                    let xv = self.value(*x);
                    let gainv = self.value(*gain).data();
                    let d = xv.last_dim();
                    let dn = S::from_usize(d).unwrap();
                    let mut dx = vec![S::zero(); xv.len()];
                    let mut dgain = vec![S::zero(); d];
                    let mut dbias = vec![S::zero(); d];
                    let mut dxhat = vec![S::zero(); d];
                    let mut xhat = vec![S::zero(); d];
                    for r in 0..xv.rows() {
                        let xs = &xv.data()[r * d..(r + 1) * d];
                        let gs = &g.data()[r * d..(r + 1) * d];
                        let mut mean_d = S::zero();
                        let mut mean_dx = S::zero();
                        for j in 0..d {
                            xhat[j] = (xs[j] - mean[r]) * rstd[r];
                            dgain[j] += gs[j] * xhat[j];
                            dbias[j] += gs[j];
                            dxhat[j] = gs[j] * gainv[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xhat[j];
                        }
                        mean_d /= dn;
                        mean_dx /= dn;
                        for j in 0..d {
                            dx[r * d + j] = rstd[r] * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                    accumulate(&mut grads, *gain, Tensor::new(self.value(*gain).shape().to_vec(), dgain)?);
                    accumulate(&mut grads, *bias, Tensor::new(self.value(*bias).shape().to_vec(), dbias)?);
                }
                Op::Softmax { x, inv_t } => {
                    let y = &node.value;
                    let n = y.last_dim();
                    let mut dx = vec![S::zero(); y.len()];
                    for ((ys, gs), ds) in y.data().chunks(n).zip(g.data().chunks(n)).zip(dx.chunks_mut(n)) {
                        let mut dot = S::zero();
                        for (&yv, &gv) in ys.iter().zip(gs) {
                            dot += yv * gv;
                        }
                        for ((d, &yv), &gv) in ds.iter_mut().zip(ys).zip(gs) {
                            *d = *inv_t * yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
                }
                Op::Gather { table: x, ids } | Op::SelectRows { x, rows: ids } => {
                    let tv = self.value(*x);
                    let d = tv.last_dim();
                    let mut dt = vec![S::zero(); tv.len()];
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += g.data()[r * d + j];
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(tv.shape().to_vec(), dt)?);
                }
                Op::SplitHeads { x, batch, seq, heads } => {
                    let hd = g.last_dim();
                    let dx = merge_heads_data(g.data(), *batch, *seq, *heads, hd);
                    accumulate(&mut grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx)?);
                }
                Op::MergeHeads { x, batch, seq, heads } => {
                    let xv = self.value(*x);
                    let hd = xv.last_dim();
                    let d = heads * hd;
                    let mut dx = vec![S::zero(); xv.len()];
                    for b in 0..*batch {
                        for t in 0..*seq {
                            for h in 0..*heads {
                                let s = (b * seq + t) * d + h * hd;
                                let o = ((b * heads + h) * seq + t) * hd;
                                dx[o..o + hd].copy_from_slice(&g.data()[s..s + hd]);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                Op::CrossEntropy { logits, labels, probs, count } => {
                    let lv = self.value(*logits);
                    let c = lv.last_dim();
                    let scale = g.data()[0] / S::from_usize(*count).unwrap();
                    let mut dl = vec![S::zero(); lv.len()];
                    for (r, y) in labels.iter().enumerate() {
                        let Some(y) = *y else { continue };
                        for j in 0..c {
                            dl[r * c + j] = probs[r * c + j] * scale;
                        }
                        dl[r * c + y] -= scale;
                    }
                    accumulate(&mut grads, *logits, Tensor::new(lv.shape().to_vec(), dl)?);
                }
                Op::KlDiv { student, target, student_probs, rows, inv_t, factor, count } => {
                    let sv = self.value(*student);
                    let c = sv.last_dim();
                    let scale = g.data()[0] * *factor * *inv_t / S::from_usize(*count).unwrap();
                    let mut ds = vec![S::zero(); sv.len()];
                    for (r, &keep) in rows.iter().enumerate() {
                        if !keep {
                            continue;
                        }
                        for j in 0..c {
                            let k = r * c + j;
                            ds[k] = scale * (student_probs[k] - target.data()[k]);
                        }
                    }
                    accumulate(&mut grads, *student, Tensor::new(sv.shape().to_vec(), ds)?);
                }
                Op::FakeQuant { w, limit } => {
                    let wv = self.value(*w);
                    let lim = *limit;
                    let dw = g.data().iter().zip(wv.data()).map(|(&gv, &x)| if x.abs() <= lim { gv } else { S::zero() }).collect();
                    accumulate(&mut grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn merge_heads_data<S: Scalar>(src: &[S], batch: usize, seq: usize, heads: usize, hd: usize) -> Vec<S> {
    let d = heads * hd;
    let mut out = vec![S::zero(); src.len()];
    for b in 0..batch {
        for t in 0..seq {
            for h in 0..heads {
                let o = (b * seq + t) * d + h * hd;
                let s = ((b * heads + h) * seq + t) * hd;
                out[o..o + hd].copy_from_slice(&src[s..s + hd]);
            }
        }
    }
    out
}

fn accumulate<S: Scalar>(grads: &mut [Option<Tensor<S>>], v: Var, g: Tensor<S>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign_tensor(&g),
        slot => *slot = Some(g),
    }
}
