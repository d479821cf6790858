//! Central finite-difference verification of analytic gradients.

use super::{Graph, ParamGrads, ParamStore, Real, Tensor2D, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Perturbation half-width.
    pub eps: f64,
    /// Lower bound on the relative-error denominator, so that entries whose
    /// true gradient is ~0 are judged on absolute error instead.
    pub floor: f64,
}

impl GradCheckOptions {
    pub fn f64() -> Self {
        Self {
            eps: 1e-4,
            floor: 1e-5,
        }
    }

    pub fn f32() -> Self {
        Self {
            eps: 4e-2,
            floor: 1e-2,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// `(tensor index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradReport {
    fn record(&mut self, t: usize, e: usize, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let rel = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if rel > self.max_rel_err || self.worst.is_none() {
            self.max_rel_err = self.max_rel_err.max(rel);
            self.worst = Some((t, e, analytic, numeric));
        }
    }
}

/// Compare `analytic[t]` against central differences of `f` around `params`.
pub fn grad_check<T: Real>(
    params: &[Tensor2D<T>],
    analytic: &[Tensor2D<T>],
    opts: GradCheckOptions,
    mut f: impl FnMut(&[Tensor2D<T>]) -> Result<T>,
) -> Result<GradReport> {
    if !(opts.eps > 0.0) {
        return Err(Error::arg("finite-difference eps must be positive"));
    }
    if params.len() != analytic.len() {
        return Err(Error::arg("one analytic gradient per parameter tensor required"));
    }
    let mut work: Vec<Tensor2D<T>> = params.to_vec();
    let mut report = GradReport::default();
    let mut eval = |work: &[Tensor2D<T>], t: usize, e: usize| -> Result<f64> {
        let v = f(work)?.as_f64();
        if !v.is_finite() {
            return Err(Error::numeric(
                "grad_check",
                format!("objective is {v} with tensor {t} element {e} perturbed"),
            ));
        }
        Ok(v)
    };
    for t in 0..params.len() {
        if analytic[t].shape() != params[t].shape() {
            return Err(Error::dim("grad_check", format!("gradient {t} shape")));
        }
        for e in 0..params[t].len() {
            let x0 = params[t].data()[e];
            let mut at = |k: f64| -> Result<f64> {
                work[t].data_mut()[e] = x0 + T::lit(k * opts.eps);
                eval(&work, t, e)
            };
            // fourth-order central stencil
            let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
            work[t].data_mut()[e] = x0;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * opts.eps);
            report.record(t, e, analytic[t].data()[e].as_f64(), numeric, opts.floor);
        }
    }
    Ok(report)
}

/// Gradient check of a graph-built scalar with respect to owned inputs.
pub fn check_graph<T: Real>(
    inputs: &[Tensor2D<T>],
    opts: GradCheckOptions,
    build: impl for<'g> Fn(&mut Graph<'g, T>, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let run = |inputs: &[Tensor2D<T>], want_grad: bool| -> Result<(T, Vec<Tensor2D<T>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), want_grad)).collect();
        let loss = build(&mut g, &vars)?;
        let value = g.value(loss).get(0, 0);
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let per_input = vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| {
                grads
                    .wrt(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor2D::zeros(t.rows(), t.cols()))
            })
            .collect();
        Ok((value, per_input))
    };
    let (_, analytic) = run(inputs, true)?;
    grad_check(inputs, &analytic, opts, |p| run(p, false).map(|(v, _)| v))
}

/// Gradient check over every tensor of a trainable store.
///
/// `f` returns the loss and, when asked, the analytic gradients.
pub fn check_store<T: Real>(
    store: &ParamStore<T>,
    opts: GradCheckOptions,
    f: impl Fn(&ParamStore<T>, bool) -> Result<(T, Option<ParamGrads<T>>)>,
) -> Result<GradReport> {
    let (_, grads) = f(store, true)?;
    let grads = grads.ok_or_else(|| Error::arg("objective returned no gradients"))?;
    let params: Vec<Tensor2D<T>> = store.iter().map(|(_, _, t)| t.clone()).collect();
    let analytic: Vec<Tensor2D<T>> = store
        .iter()
        .map(|(id, _, t)| {
            grads
                .get(id)
                .cloned()
                .unwrap_or_else(|| Tensor2D::zeros(t.rows(), t.cols()))
        })
        .collect();
    let mut scratch = store.clone();
    grad_check(&params, &analytic, opts, |p| {
        for (id, t) in store.ids().zip(p) {
            *scratch.get_mut(id) = t.clone();
        }
        f(&scratch, false).map(|(v, _)| v)
    })
}
