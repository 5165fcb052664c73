use crate::error::{shape_err, Error, Result};

use super::scalar::{MatView, Scalar};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(
                "tensor",
                format!("shape {shape:?} needs {n} elements, got {}", data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![S::zero(); n] }
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: S) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| S::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Size of the last dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Number of rows when viewed as `[len / last_dim, last_dim]`.
    pub fn rows(&self) -> usize {
        let d = self.last_dim();
        if d == 0 {
            0
        } else {
            self.data.len() / d
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn sum(&self) -> S {
        let mut acc = S::zero();
        for &x in &self.data {
            acc += x;
        }
        acc
    }

    pub(crate) fn add_assign_tensor(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| T::lit(x.to_f64_lossy())).collect(),
        }
    }
}

fn dims2<S: Scalar>(t: &Tensor<S>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => shape_err(op, format!("expected rank-2 tensor, got {s:?}")),
    }
}

/// Matrix product `a (m x k) · b (k x n)`, or `a · bᵀ` when `transpose_b` (b is `n x k`).
pub fn matmul_ex<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, transpose_b: bool) -> Result<Tensor<S>> {
    let (m, k) = dims2(a, "matmul")?;
    let (br, bc) = dims2(b, "matmul")?;
    let (kb, n) = if transpose_b { (bc, br) } else { (br, bc) };
    if k != kb {
        return shape_err("matmul", format!("{:?} x {:?} (transpose_b={transpose_b})", a.shape(), b.shape()));
    }
    let bview = if transpose_b { MatView::transposed(b.data(), bc) } else { MatView::row_major(b.data(), bc) };
    let mut out = vec![S::zero(); m * n];
    S::gemm_raw(m, k, n, MatView::row_major(a.data(), k), bview, &mut out, false);
    Tensor::new(vec![m, n], out)
}

pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    matmul_ex(a, b, false)
}

/// Numerically stable softmax of `x / temperature` along `axis`.
pub fn softmax<S: Scalar>(x: &Tensor<S>, axis: usize, temperature: S) -> Result<Tensor<S>> {
    if axis >= x.shape().len() {
        return shape_err("softmax", format!("axis {axis} for shape {:?}", x.shape()));
    }
    if !(temperature > S::zero()) {
        return Err(Error::Validation("softmax temperature must be positive".into()));
    }
    x.ensure_finite("softmax input")?;
    let len = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let outer: usize = x.shape()[..axis].iter().product();
    let mut out = x.data().to_vec();
    let inv_t = S::one() / temperature;
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let idx = |j: usize| base + j * inner;
            let mut mx = S::neg_infinity();
            for j in 0..len {
                mx = mx.max(out[idx(j)]);
            }
            let mut denom = S::zero();
            for j in 0..len {
                let e = ((out[idx(j)] - mx) * inv_t).exp();
                out[idx(j)] = e;
                denom += e;
            }
            for j in 0..len {
                out[idx(j)] /= denom;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Row statistics used by layer normalization: `(mean, 1/sqrt(var + eps))` per row.
pub(crate) fn row_moments<S: Scalar>(row: &[S], eps: S) -> (S, S) {
    let d = S::from_usize(row.len()).unwrap();
    let mut mean = S::zero();
    for &v in row {
        mean += v;
    }
    mean /= d;
    let mut var = S::zero();
    for &v in row {
        var += (v - mean) * (v - mean);
    }
    var /= d;
    let denom = (var + eps).sqrt();
    let rstd = if denom > S::zero() { S::one() / denom } else { S::zero() };
    (mean, rstd)
}

/// Normalizes each row over the last dimension, then applies `gain` and `bias`.
pub fn layer_normalize<S: Scalar>(x: &Tensor<S>, gain: &Tensor<S>, bias: &Tensor<S>, eps: S) -> Result<Tensor<S>> {
    let d = x.last_dim();
    if gain.len() != d || bias.len() != d {
        return shape_err("layer_normalize", format!("row width {d}, gain {:?}, bias {:?}", gain.shape(), bias.shape()));
    }
    let mut out = Vec::with_capacity(x.len());
    for row in x.data().chunks(d) {
        let (mean, rstd) = row_moments(row, eps);
        for (j, &v) in row.iter().enumerate() {
            out.push((v - mean) * rstd * gain.data()[j] + bias.data()[j]);
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

const GELU_C: f64 = 0.044715;

// tanh through a single exp; libm's tanh is several times slower here.
fn tanh_via_exp<S: Scalar>(u: S) -> S {
    let e = (S::lit(2.0) * u.abs()).exp();
    (S::one() - S::lit(2.0) / (e + S::one())).copysign(u)
}

fn gelu_scalar<S: Scalar>(x: S) -> S {
    let k = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let half = S::lit(0.5);
    half * x * (S::one() + tanh_via_exp(k * (x + S::lit(GELU_C) * x * x * x)))
}

pub(crate) fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let k = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = S::lit(GELU_C);
    let half = S::lit(0.5);
    let u = k * (x + c * x * x * x);
    let t = tanh_via_exp(u);
    let du = k * (S::one() + S::lit(3.0) * c * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

/// Tanh-approximation GELU.
pub fn gelu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(gelu_scalar)
}

/// Log-softmax of one row.
pub(crate) fn log_softmax_row<S: Scalar>(row: &[S], out: &mut [S]) {
    let mx = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let mut denom = S::zero();
    for &v in row {
        denom += (v - mx).exp();
    }
    let lse = mx + denom.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`, rows of `[B x C]`.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<S> {
    let c = logits.last_dim();
    if logits.rows() != labels.len() {
        return shape_err("cross_entropy", format!("{} rows vs {} labels", logits.rows(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut lp = vec![S::zero(); c];
    let mut total = S::zero();
    for (row, &y) in logits.data().chunks(c).zip(labels) {
        if y >= c {
            return Err(Error::LabelOutOfRange { label: y, classes: c });
        }
        log_softmax_row(row, &mut lp);
        total -= lp[y];
    }
    let loss = total / S::from_usize(labels.len()).unwrap();
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy".into()));
    }
    Ok(loss)
}
