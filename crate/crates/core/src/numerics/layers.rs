use std::sync::Arc;

use rand::Rng;

use super::rng::{splitmix64, stable_hash, unit_f64};
use super::{Graph, ParamId, ParamStore, Real, Tensor2D, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Numerically stable softmax of a plain vector.
pub fn softmax_vec<T: Real>(v: &[T]) -> Vec<T> {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let total = e.iter().copied().sum::<T>();
    e.into_iter().map(|x| x / total).collect()
}

/// `y = x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add_uniform(format!("{name}.weight"), in_dim, out_dim, bound, rng);
        let b = bias.then(|| store.add_zeros(format!("{name}.bias"), 1, out_dim));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'a, T: Real>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add_filled(format!("{name}.gain"), 1, dim, 1.0),
            bias: store.add_zeros(format!("{name}.bias"), 1, dim),
        }
    }

    pub fn forward<'a, T: Real>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        x: Var,
    ) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Multi-head attention projections, no biases.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub n_heads: usize,
    pub head_dim: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

pub struct AttentionOutput {
    pub out: Var,
    /// One `n_query x n_key` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

impl AttentionParams {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        n_heads: usize,
        bound: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_heads == 0 || dim % n_heads != 0 {
            return Err(Error::arg(format!(
                "{n_heads} heads do not divide width {dim}"
            )));
        }
        let mut proj = |p: &str| store.add_uniform(format!("{name}.{p}"), dim, dim, bound, rng);
        Ok(Self {
            n_heads,
            head_dim: dim / n_heads,
            w_q: proj("w_q"),
            w_k: proj("w_k"),
            w_v: proj("w_v"),
            w_o: proj("w_o"),
        })
    }

    pub fn dim(&self) -> usize {
        self.n_heads * self.head_dim
    }

    /// Scaled dot-product attention of `q_in` rows over `kv_in` rows.
    /// `mask` is `n_query x n_key`, row-major, `true` where attention is allowed.
    pub fn forward<'a, T: Real>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        q_in: Var,
        kv_in: Var,
        mask: Option<&Arc<Vec<bool>>>,
    ) -> Result<AttentionOutput> {
        let d = self.dim();
        for (what, v) in [("query", q_in), ("key/value", kv_in)] {
            if g.shape(v).1 != d {
                return Err(Error::dim(
                    "attention",
                    format!("{what} width {} != {d}", g.shape(v).1),
                ));
            }
        }
        let wq = g.param(store, self.w_q);
        let wk = g.param(store, self.w_k);
        let wv = g.param(store, self.w_v);
        let wo = g.param(store, self.w_o);
        let q = g.matmul(q_in, wq)?;
        let k = g.matmul(kv_in, wk)?;
        let v = g.matmul(kv_in, wv)?;
        let scale = T::one() / T::lit(self.head_dim as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let off = h * self.head_dim;
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, off, self.head_dim)?,
                    g.slice_cols(k, off, self.head_dim)?,
                    g.slice_cols(v, off, self.head_dim)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale);
            let a = g.softmax_rows(scores, mask)?;
            heads.push(g.matmul(a, vh)?);
            weights.push(a);
        }
        let ctx = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let out = g.matmul(ctx, wo)?;
        Ok(AttentionOutput { out, weights })
    }
}

/// Deterministic dropout stream keyed by (seed, layer, step).
#[derive(Clone, Copy, Debug)]
pub struct Dropout {
    train: bool,
    seed: u64,
    step: u64,
    scope: u64,
}

impl Dropout {
    pub fn eval() -> Self {
        Self {
            train: false,
            seed: 0,
            step: 0,
            scope: 0,
        }
    }

    pub fn train(seed: u64, step: u64) -> Self {
        Self {
            train: true,
            seed,
            step,
            scope: 0,
        }
    }

    /// Same stream, distinguished by an extra key (e.g. the task index).
    pub fn scoped(self, scope: u64) -> Self {
        Self {
            scope: splitmix64(self.scope ^ scope),
            ..self
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    fn key(&self, layer: &str) -> u64 {
        splitmix64(
            splitmix64(self.seed ^ stable_hash(layer)) ^ self.step.wrapping_mul(0x9e37_79b9)
                ^ self.scope,
        )
    }
}

/// Inverted dropout; the identity (same node) in eval mode or at rate 0.
pub fn dropout<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    rate: f64,
    ctx: Dropout,
    layer: &str,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::arg(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !ctx.train || rate == 0.0 {
        return Ok(x);
    }
    let (r, c) = g.shape(x);
    let key = ctx.key(layer);
    let keep = T::lit(1.0 / (1.0 - rate));
    let mask = Tensor2D::from_fn(r, c, |i, j| {
        let u = unit_f64(splitmix64(key ^ ((i * c + j) as u64).wrapping_mul(0xd6e8_feb8_6659_fd93)));
        if u < rate {
            T::zero()
        } else {
            keep
        }
    });
    let m = g.constant(mask);
    g.mul(x, m)
}

/// `linear -> GELU -> dropout -> linear`.
#[derive(Clone, Debug)]
pub struct MlpBlock {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
    name: String,
}

impl MlpBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden_ratio: f64,
        out_dim: usize,
        dropout: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if !(hidden_ratio > 0.0) {
            return Err(Error::arg("hidden_ratio must be positive"));
        }
        let hidden = ((in_dim as f64 * hidden_ratio).round() as usize).max(1);
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), in_dim, hidden, true, rng),
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, out_dim, true, rng),
            dropout,
            name: name.to_string(),
        })
    }

    pub fn forward<'a, T: Real>(
        &self,
        g: &mut Graph<'a, T>,
        store: &'a ParamStore<T>,
        x: Var,
        ctx: Dropout,
    ) -> Result<Var> {
        let h = self.fc1.forward(g, store, x)?;
        let h = g.gelu(h);
        let h = dropout(g, h, self.dropout, ctx, &self.name)?;
        self.fc2.forward(g, store, h)
    }
}
