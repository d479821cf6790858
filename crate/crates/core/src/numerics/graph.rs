//! Taped reverse-mode differentiation over [`Tensor2D`] values.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Leaves borrowed from a [`ParamStore`] of kind [`StoreKind::Trainable`]
//! require gradients; frozen stores and plain inputs do not, and no gradient
//! is ever computed for a node whose ancestors are all non-differentiable.

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::Arc;

use super::{ParamGrads, ParamId, ParamStore, Real, StoreKind, Tensor2D};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    AddCol(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gelu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    SumAll(Var),
    L2NormalizeRows(Var, Vec<T>),
    KlSoftmaxRows {
        lhs: Var,
        rhs: Var,
        p: Vec<T>,
        q: Vec<T>,
        log_ratio: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<T>,
    },
    DiscreteSurvivalNll {
        logits: Var,
        bin: usize,
        event: bool,
    },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor2D<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward pass worth of recorded computation.
pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    bound: HashMap<(usize, usize), Var>,
    trainable: Vec<(usize, ParamId, Var)>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let inner = T::lit(SQRT_2_OVER_PI) * (x + T::lit(GELU_CUBIC) * x * x * x);
    T::lit(0.5) * x * (T::one() + inner.tanh())
}

pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let c = T::lit(SQRT_2_OVER_PI);
    let k = T::lit(GELU_CUBIC);
    let t = (c * (x + k * x * x * x)).tanh();
    let half = T::lit(0.5);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

fn log_softmax_row<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            trainable: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor2D<T>>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, value: Tensor2D<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), op, requires_grad)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor2D<T> {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Non-differentiable owned leaf.
    pub fn constant(&mut self, t: Tensor2D<T>) -> Var {
        self.push_owned(t, Op::Leaf, false)
    }

    /// Non-differentiable borrowed leaf.
    pub fn constant_ref(&mut self, t: &'a Tensor2D<T>) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    /// Owned leaf whose gradient can be read back with [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor2D<T>, requires_grad: bool) -> Var {
        self.push_owned(t, Op::Leaf, requires_grad)
    }

    /// Leaf borrowed from a parameter store; bound at most once per graph.
    pub fn param(&mut self, store: &'a ParamStore<T>, id: ParamId) -> Var {
        let key = (store as *const ParamStore<T> as usize, id.0);
        if let Some(&v) = self.bound.get(&key) {
            return v;
        }
        let trainable = store.kind() == StoreKind::Trainable;
        let v = self.push(Cow::Borrowed(store.get(id)), Op::Leaf, trainable);
        if trainable {
            self.trainable.push((key.0, id, v));
        }
        self.bound.insert(key, v);
        v
    }

    pub fn ensure_finite(&self, v: Var, context: impl FnOnce() -> String) -> Result<()> {
        if self.value(v).is_finite() {
            Ok(())
        } else {
            Err(Error::numeric(context(), "non-finite value"))
        }
    }

    fn rg2(&self, a: Var, b: Var) -> bool {
        self.requires_grad(a) || self.requires_grad(b)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg2(a, b);
        Ok(self.push_owned(out, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::dim("matmul_nt", format!("{m}x{k} by ({n}x{k2})^T")));
        }
        let mut out = Tensor2D::zeros(m, n);
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (1, k as isize),
            T::zero(),
            out.data_mut(),
            (n as isize, 1),
        );
        let rg = self.rg2(a, b);
        Ok(self.push_owned(out, Op::MatMulNt(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg2(a, b);
        Ok(self.push_owned(out, Op::Add(a, b), rg))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::dim(
                "add_row",
                format!("{r}x{c} + {:?}", self.shape(row)),
            ));
        }
        let mut out = self.value(a).clone();
        let bias = self.value(row).data();
        for i in 0..r {
            for (o, &b) in out.row_mut(i).iter_mut().zip(bias) {
                *o += b;
            }
        }
        let rg = self.rg2(a, row);
        Ok(self.push_owned(out, Op::AddRow(a, row), rg))
    }

    /// Adds a `rows x 1` column to every column of `a`.
    pub fn add_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(col) != (r, 1) {
            return Err(Error::dim(
                "add_col",
                format!("{r}x{c} + {:?}", self.shape(col)),
            ));
        }
        let mut out = self.value(a).clone();
        let bias = self.value(col).data();
        for (i, &b) in bias.iter().enumerate() {
            out.row_mut(i).iter_mut().for_each(|o| *o += b);
        }
        let rg = self.rg2(a, col);
        Ok(self.push_owned(out, Op::AddCol(a, col), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor2D::new(va.rows(), va.cols(), data)?;
        let rg = self.rg2(a, b);
        Ok(self.push_owned(out, Op::Mul(a, b), rg))
    }

    /// Multiplies every row of `a` elementwise by a `1 x cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(a);
        if self.shape(row) != (1, c) {
            return Err(Error::dim(
                "mul_row",
                format!("{r}x{c} * {:?}", self.shape(row)),
            ));
        }
        let mut out = self.value(a).clone();
        let gain = self.value(row).data();
        for i in 0..r {
            for (o, &g) in out.row_mut(i).iter_mut().zip(gain) {
                *o *= g;
            }
        }
        let rg = self.rg2(a, row);
        Ok(self.push_owned(out, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        let rg = self.requires_grad(a);
        self.push_owned(out, Op::Scale(a, s), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.requires_grad(a);
        self.push_owned(out, Op::Transpose(a), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let src = self.value(a);
        if src.len() != rows * cols {
            return Err(Error::dim(
                "reshape",
                format!("{:?} into {rows}x{cols}", src.shape()),
            ));
        }
        let out = Tensor2D::new(rows, cols, src.data().to_vec())?;
        let rg = self.requires_grad(a);
        Ok(self.push_owned(out, Op::Reshape(a), rg))
    }

    /// Row-wise softmax. `mask[r * cols + c] == false` forces a zero weight.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&Arc<Vec<bool>>>) -> Result<Var> {
        let src = self.value(a);
        let (r, c) = src.shape();
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::dim("softmax_rows", "mask size"));
            }
        }
        let mut out = Tensor2D::zeros(r, c);
        for i in 0..r {
            let row = src.row(i);
            let allowed = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                return Err(Error::numeric(
                    "softmax_rows",
                    format!("row {i} has no admissible entry"),
                ));
            }
            let dst = out.row_mut(i);
            let mut total = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - max).exp();
                    dst[j] = e;
                    total += e;
                }
            }
            dst.iter_mut().for_each(|v| *v /= total);
        }
        let rg = self.requires_grad(a);
        Ok(self.push_owned(out, Op::Softmax(a), rg))
    }

    /// Per-row normalization followed by a `1 x cols` affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::arg("layer_norm eps must be positive"));
        }
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) || self.shape(bias) != (1, c) {
            return Err(Error::dim("layer_norm", "affine parameters must be 1 x cols"));
        }
        let src = self.value(x);
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let n = T::lit(c as f64);
        let eps = T::lit(eps);
        let mut out = Tensor2D::zeros(r, c);
        let mut xhat = vec![T::zero(); r * c];
        let mut inv_std = vec![T::zero(); r];
        for i in 0..r {
            let row = src.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            inv_std[i] = is;
            let dst = out.row_mut(i);
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                dst[j] = h * g[j] + b[j];
            }
        }
        let rg = self.requires_grad(x) || self.rg2(gain, bias);
        Ok(self.push_owned(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu_scalar);
        let rg = self.requires_grad(a);
        self.push_owned(out, Op::Gelu(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::arg("concat_rows of an empty list"))?;
        let cols = self.shape(first).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::dim(
                    "concat_rows",
                    format!("width {} vs {cols}", v.cols()),
                ));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor2D::new(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push_owned(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::arg("concat_cols of an empty list"))?;
        let rows = self.shape(first).0;
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor2D::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push_owned(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        let rg = self.requires_grad(a);
        Ok(self.push_owned(out, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let src = self.value(a);
        let (r, c) = src.shape();
        if start + len > c {
            return Err(Error::dim(
                "slice_cols",
                format!("cols {start}..{} of {c}", start + len),
            ));
        }
        let out = Tensor2D::from_fn(r, len, |i, j| src.get(i, start + j));
        let rg = self.requires_grad(a);
        Ok(self.push_owned(out, Op::SliceCols(a, start), rg))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let out = self.value(a).mean_rows();
        let rg = self.requires_grad(a);
        self.push_owned(out, Op::MeanRows(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.requires_grad(a);
        self.push_owned(Tensor2D::filled(1, 1, s), Op::SumAll(a), rg)
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let src = self.value(a);
        let (r, c) = src.shape();
        let mut out = Tensor2D::zeros(r, c);
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let n = src.row(i).iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(n > T::zero()) || !n.is_finite() {
                return Err(Error::numeric(
                    "l2_normalize_rows",
                    format!("row {i} has norm {n}"),
                ));
            }
            norms.push(n);
            for (o, &v) in out.row_mut(i).iter_mut().zip(src.row(i)) {
                *o = v / n;
            }
        }
        let rg = self.requires_grad(a);
        Ok(self.push_owned(out, Op::L2NormalizeRows(a, norms), rg))
    }

    /// `sum_r KL(softmax(lhs_r) || softmax(rhs_r))`, as a `1 x 1` scalar.
    pub fn kl_softmax_rows(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.same_shape("kl_softmax_rows", lhs, rhs)?;
        let (r, c) = self.shape(lhs);
        let mut logp = vec![T::zero(); r * c];
        let mut logq = vec![T::zero(); r * c];
        for i in 0..r {
            log_softmax_row(self.value(lhs).row(i), &mut logp[i * c..(i + 1) * c]);
            log_softmax_row(self.value(rhs).row(i), &mut logq[i * c..(i + 1) * c]);
        }
        let p: Vec<T> = logp.iter().map(|v| v.exp()).collect();
        let q: Vec<T> = logq.iter().map(|v| v.exp()).collect();
        let log_ratio: Vec<T> = logp.iter().zip(&logq).map(|(&a, &b)| a - b).collect();
        let total = p.iter().zip(&log_ratio).map(|(&pi, &h)| pi * h).sum::<T>();
        let rg = self.rg2(lhs, rhs);
        Ok(self.push_owned(
            Tensor2D::filled(1, 1, total),
            Op::KlSoftmaxRows {
                lhs,
                rhs,
                p,
                q,
                log_ratio,
            },
            rg,
        ))
    }

    /// Softmax cross-entropy of a `1 x classes` logit row.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if r != 1 || target >= c {
            return Err(Error::dim(
                "cross_entropy",
                format!("logits {r}x{c}, target {target}"),
            ));
        }
        let mut lp = vec![T::zero(); c];
        log_softmax_row(self.value(logits).row(0), &mut lp);
        let loss = -lp[target];
        let probs = lp.iter().map(|v| v.exp()).collect();
        let rg = self.requires_grad(logits);
        Ok(self.push_owned(
            Tensor2D::filled(1, 1, loss),
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    /// Negative log-likelihood of a discrete-time survival model with
    /// per-bin hazards `sigmoid(logits)`.
    ///
    /// An event in bin `b` contributes `-log S(b-1) - log h(b)`; a patient
    /// censored in bin `b` contributes `-log S(b)`.
    pub fn discrete_survival_nll(&mut self, logits: Var, bin: usize, event: bool) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if r != 1 || bin >= c {
            return Err(Error::dim(
                "discrete_survival_nll",
                format!("logits {r}x{c}, bin {bin}"),
            ));
        }
        let l = self.value(logits).row(0);
        // -log(1 - sigmoid(x)) = softplus(x); -log(sigmoid(x)) = softplus(-x)
        let softplus = |x: T| {
            if x > T::zero() {
                x + (-x).exp().ln_1p()
            } else {
                x.exp().ln_1p()
            }
        };
        let mut loss = T::zero();
        let last_survived = if event { bin } else { bin + 1 };
        for &x in &l[..last_survived] {
            loss += softplus(x);
        }
        if event {
            loss += softplus(-l[bin]);
        }
        let rg = self.requires_grad(logits);
        Ok(self.push_owned(
            Tensor2D::filled(1, 1, loss),
            Op::DiscreteSurvivalNll { logits, bin, event },
            rg,
        ))
    }

    /// Reverse sweep from a `1 x 1` scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::dim(
                "backward",
                format!("loss must be 1x1, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor2D<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.requires_grad(loss) {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor2D::filled(1, 1, T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor2D<T>>], v: Var, g: Tensor2D<T>) {
        if !self.requires_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        node: &Node<'a, T>,
        g: &Tensor2D<T>,
        grads: &mut [Option<Tensor2D<T>>],
    ) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let va = self.value(a);
                let vb = self.value(b);
                let (m, k) = va.shape();
                let n = vb.cols();
                if self.requires_grad(a) {
                    let mut da = Tensor2D::zeros(m, k);
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        (n as isize, 1),
                        vb.data(),
                        (1, n as isize),
                        T::zero(),
                        da.data_mut(),
                        (k as isize, 1),
                    );
                    self.accumulate(grads, a, da);
                }
                if self.requires_grad(b) {
                    let mut db = Tensor2D::zeros(k, n);
                    T::gemm(
                        k,
                        m,
                        n,
                        T::one(),
                        va.data(),
                        (1, k as isize),
                        g.data(),
                        (n as isize, 1),
                        T::zero(),
                        db.data_mut(),
                        (n as isize, 1),
                    );
                    self.accumulate(grads, b, db);
                }
            }
            &Op::MatMulNt(a, b) => {
                let va = self.value(a);
                let vb = self.value(b);
                let (m, k) = va.shape();
                let n = vb.rows();
                if self.requires_grad(a) {
                    let mut da = Tensor2D::zeros(m, k);
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        g.data(),
                        (n as isize, 1),
                        vb.data(),
                        (k as isize, 1),
                        T::zero(),
                        da.data_mut(),
                        (k as isize, 1),
                    );
                    self.accumulate(grads, a, da);
                }
                if self.requires_grad(b) {
                    let mut db = Tensor2D::zeros(n, k);
                    T::gemm(
                        n,
                        m,
                        k,
                        T::one(),
                        g.data(),
                        (1, n as isize),
                        va.data(),
                        (k as isize, 1),
                        T::zero(),
                        db.data_mut(),
                        (k as isize, 1),
                    );
                    self.accumulate(grads, b, db);
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.clone());
                if self.requires_grad(row) {
                    self.accumulate(grads, row, column_sums(g));
                }
            }
            &Op::AddCol(a, col) => {
                self.accumulate(grads, a, g.clone());
                if self.requires_grad(col) {
                    let sums = (0..g.rows())
                        .map(|i| g.row(i).iter().copied().sum::<T>())
                        .collect();
                    self.accumulate(grads, col, Tensor2D::new(g.rows(), 1, sums)?);
                }
            }
            &Op::Mul(a, b) => {
                if self.requires_grad(a) {
                    self.accumulate(grads, a, hadamard(g, self.value(b)));
                }
                if self.requires_grad(b) {
                    self.accumulate(grads, b, hadamard(g, self.value(a)));
                }
            }
            &Op::MulRow(a, row) => {
                let va = self.value(a);
                let vr = self.value(row);
                if self.requires_grad(a) {
                    let mut da = g.clone();
                    for i in 0..da.rows() {
                        for (d, &s) in da.row_mut(i).iter_mut().zip(vr.data()) {
                            *d *= s;
                        }
                    }
                    self.accumulate(grads, a, da);
                }
                if self.requires_grad(row) {
                    self.accumulate(grads, row, column_sums(&hadamard(g, va)));
                }
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.map(|v| v * s)),
            &Op::Transpose(a) => self.accumulate(grads, a, g.transpose()),
            &Op::Reshape(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(grads, a, Tensor2D::new(r, c, g.data().to_vec())?);
            }
            &Op::Softmax(a) => {
                let p = &node.value;
                let mut da = Tensor2D::zeros(p.rows(), p.cols());
                for i in 0..p.rows() {
                    let pr = p.row(i);
                    let gr = g.row(i);
                    let dot = pr.iter().zip(gr).map(|(&x, &y)| x * y).sum::<T>();
                    for (j, d) in da.row_mut(i).iter_mut().enumerate() {
                        *d = pr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, a, da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = g.shape();
                let gv = self.value(*gain).data();
                if self.requires_grad(*x) {
                    let n = T::lit(c as f64);
                    let mut dx = Tensor2D::zeros(r, c);
                    for i in 0..r {
                        let gr = g.row(i);
                        let xh = &xhat[i * c..(i + 1) * c];
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for j in 0..c {
                            let d = gr[j] * gv[j];
                            sum_d += d;
                            sum_dx += d * xh[j];
                        }
                        let scale = inv_std[i] / n;
                        for (j, out) in dx.row_mut(i).iter_mut().enumerate() {
                            let d = gr[j] * gv[j];
                            *out = scale * (n * d - sum_d - xh[j] * sum_dx);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.requires_grad(*gain) {
                    let mut dg = Tensor2D::zeros(1, c);
                    for i in 0..r {
                        for j in 0..c {
                            dg.data_mut()[j] += g.get(i, j) * xhat[i * c + j];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.requires_grad(*bias) {
                    self.accumulate(grads, *bias, column_sums(g));
                }
            }
            &Op::Gelu(a) => {
                let x = self.value(a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xi, &gi)| gi * gelu_grad_scalar(xi))
                    .collect();
                self.accumulate(grads, a, Tensor2D::new(x.rows(), x.cols(), data)?);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.shape(p).0;
                    if self.requires_grad(p) {
                        self.accumulate(grads, p, g.slice_rows(off, rows)?);
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.requires_grad(p) {
                        let dp = Tensor2D::from_fn(rows, cols, |i, j| g.get(i, off + j));
                        self.accumulate(grads, p, dp);
                    }
                    off += cols;
                }
            }
            &Op::SliceRows(a, start) => {
                let (r, c) = self.shape(a);
                let mut da = Tensor2D::zeros(r, c);
                for i in 0..g.rows() {
                    da.row_mut(start + i).copy_from_slice(g.row(i));
                }
                self.accumulate(grads, a, da);
            }
            &Op::SliceCols(a, start) => {
                let (r, c) = self.shape(a);
                let mut da = Tensor2D::zeros(r, c);
                for i in 0..r {
                    da.row_mut(i)[start..start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, a, da);
            }
            &Op::MeanRows(a) => {
                let (r, c) = self.shape(a);
                let inv = T::one() / T::lit(r as f64);
                let da = Tensor2D::from_fn(r, c, |_, j| g.get(0, j) * inv);
                self.accumulate(grads, a, da);
            }
            &Op::SumAll(a) => {
                let (r, c) = self.shape(a);
                self.accumulate(grads, a, Tensor2D::filled(r, c, g.get(0, 0)));
            }
            Op::L2NormalizeRows(a, norms) => {
                let u = &node.value;
                let (r, c) = u.shape();
                let mut da = Tensor2D::zeros(r, c);
                for i in 0..r {
                    let ur = u.row(i);
                    let gr = g.row(i);
                    let dot = ur.iter().zip(gr).map(|(&x, &y)| x * y).sum::<T>();
                    for (j, d) in da.row_mut(i).iter_mut().enumerate() {
                        *d = (gr[j] - ur[j] * dot) / norms[i];
                    }
                }
                self.accumulate(grads, *a, da);
            }
            Op::KlSoftmaxRows {
                lhs,
                rhs,
                p,
                q,
                log_ratio,
            } => {
                let scale = g.get(0, 0);
                let (r, c) = self.shape(*lhs);
                if self.requires_grad(*lhs) {
                    let mut d = Tensor2D::zeros(r, c);
                    for i in 0..r {
                        let pr = &p[i * c..(i + 1) * c];
                        let hr = &log_ratio[i * c..(i + 1) * c];
                        let mean = pr.iter().zip(hr).map(|(&a, &b)| a * b).sum::<T>();
                        for (j, out) in d.row_mut(i).iter_mut().enumerate() {
                            *out = scale * pr[j] * (hr[j] - mean);
                        }
                    }
                    self.accumulate(grads, *lhs, d);
                }
                if self.requires_grad(*rhs) {
                    let data = q.iter().zip(p).map(|(&qi, &pi)| scale * (qi - pi)).collect();
                    self.accumulate(grads, *rhs, Tensor2D::new(r, c, data)?);
                }
            }
            Op::CrossEntropy {
                logits,
                target,
                probs,
            } => {
                let scale = g.get(0, 0);
                let mut d: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                d[*target] -= scale;
                self.accumulate(grads, *logits, Tensor2D::row_vector(d));
            }
            &Op::DiscreteSurvivalNll { logits, bin, event } => {
                let scale = g.get(0, 0);
                let l = self.value(logits).row(0);
                let mut d = vec![T::zero(); l.len()];
                let last_survived = if event { bin } else { bin + 1 };
                for (k, dk) in d.iter_mut().enumerate().take(last_survived) {
                    *dk += sigmoid(l[k]);
                }
                if event {
                    d[bin] -= T::one() - sigmoid(l[bin]);
                }
                d.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(grads, logits, Tensor2D::row_vector(d));
            }
        }
        Ok(())
    }

    /// Trainable parameters of `store` bound into this graph, in binding
    /// order.
    pub fn bound_params<'s>(&'s self, store: &ParamStore<T>) -> impl Iterator<Item = (ParamId, Var)> + 's {
        let key = store as *const ParamStore<T> as usize;
        self.trainable
            .iter()
            .filter(move |(k, _, _)| *k == key)
            .map(|&(_, id, v)| (id, v))
    }
}

fn column_sums<T: Real>(g: &Tensor2D<T>) -> Tensor2D<T> {
    let mut out = Tensor2D::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

fn hadamard<T: Real>(a: &Tensor2D<T>, b: &Tensor2D<T>) -> Tensor2D<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor2D::new(a.rows(), a.cols(), data).expect("hadamard of equal shapes")
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor2D<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor2D<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of the parameters of `store` bound into `graph`.
    pub fn param_grads(&self, graph: &Graph<'_, T>, store: &ParamStore<T>) -> ParamGrads<T> {
        let mut out = ParamGrads::new(store.len());
        for (id, v) in graph.bound_params(store) {
            if let Some(g) = self.wrt(v) {
                out.accumulate(id, g);
            }
        }
        out
    }
}
