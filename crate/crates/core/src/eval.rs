//! Feature extraction, linear probing, survival statistics and
//! interpretability.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::adapter::{AdapterState, ForwardOptions, TASK_GENERAL};
use crate::encoder::{FeatureBag, SlideEncoder};
use crate::error::{Error, Result};
use crate::modal::ModalInputs;
use crate::numerics::{Graph, Real, Tensor2D};

/// One row per patient.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct FeatureMatrix {
    pub ids: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn width(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn select(&self, ids: &[String]) -> Result<FeatureMatrix> {
        let index: std::collections::HashMap<&str, usize> =
            self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let rows = ids
            .iter()
            .map(|id| {
                index
                    .get(id.as_str())
                    .map(|&i| self.rows[i].clone())
                    .ok_or_else(|| Error::arg(format!("no features for patient {id}")))
            })
            .collect::<Result<_>>()?;
        Ok(FeatureMatrix {
            ids: ids.to_vec(),
            rows,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["patient_id".to_string()];
        header.extend((0..self.width()).map(|k| format!("f{k}")));
        w.write_record(&header)?;
        for (id, row) in self.ids.iter().zip(&self.rows) {
            let mut rec = vec![id.clone()];
            rec.extend(row.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<FeatureMatrix> {
        let mut r = csv::Reader::from_path(path)?;
        let mut out = FeatureMatrix::default();
        for rec in r.records() {
            let rec = rec?;
            let mut it = rec.iter();
            let id = it.next().ok_or_else(|| Error::format("features", "empty row"))?;
            let row = it
                .map(|v| v.parse::<f64>().map_err(|_| Error::format("features", format!("bad value {v:?}"))))
                .collect::<Result<Vec<_>>>()?;
            if !out.rows.is_empty() && row.len() != out.width() {
                return Err(Error::format("features", format!("ragged row for {id}")));
            }
            out.ids.push(id.to_string());
            out.rows.push(row);
        }
        Ok(out)
    }
}

/// Eval-mode general-prompt `z_comb` per patient.
pub fn extract_features<'p, T: Real>(
    encoder: &SlideEncoder<T>,
    adapter: &AdapterState<T>,
    patients: impl IntoIterator<Item = (&'p FeatureBag, &'p ModalInputs)>,
) -> Result<FeatureMatrix> {
    let mut out = FeatureMatrix::default();
    for (bag, inputs) in patients {
        let o = adapter.evaluate(encoder, bag, inputs, TASK_GENERAL)?;
        out.ids.push(bag.patient_id.clone());
        out.rows.push(o.z_comb.iter().map(|v| v.as_f64()).collect());
    }
    Ok(out)
}

/// Column-wise standardization with training statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    /// Zero-variance columns keep unit scale.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::arg("no rows to standardize"));
        }
        let p = rows[0].len();
        let mut mean = vec![0.0; p];
        for r in rows {
            if r.len() != p {
                return Err(Error::dim("standardize", "ragged rows"));
            }
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v / n as f64;
            }
        }
        let mut var = vec![0.0; p];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2) / n as f64;
            }
        }
        let scale = var
            .into_iter()
            .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, rows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        rows.iter()
            .map(|r| {
                if r.len() != self.mean.len() {
                    return Err(Error::dim("standardize", format!("{} != {}", r.len(), self.mean.len())));
                }
                Ok(r.iter()
                    .zip(&self.mean)
                    .zip(&self.scale)
                    .map(|((v, m), s)| (v - m) / s)
                    .collect())
            })
            .collect()
    }
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != p) {
        return Err(Error::dim("feature matrix", "ragged rows"));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::numeric("feature matrix", "non-finite value"));
    }
    Ok(DMatrix::from_fn(n, p, |i, j| rows[i][j]))
}

/// Mean of per-class recalls over the classes present in `y_true`.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::dim("balanced_accuracy", "label vectors differ in length"));
    }
    if y_true.is_empty() {
        return Err(Error::arg("no labels"));
    }
    let k = y_true.iter().chain(y_pred).max().copied().unwrap_or(0) + 1;
    let mut hit = vec![0usize; k];
    let mut tot = vec![0usize; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        tot[t] += 1;
        hit[t] += usize::from(t == p);
    }
    let absent: Vec<usize> = (0..k).filter(|&c| tot[c] == 0).collect();
    if !absent.is_empty() {
        log::warn!("classes {absent:?} absent from y_true; excluded from balanced accuracy");
    }
    let recalls: Vec<f64> = (0..k)
        .filter(|&c| tot[c] > 0)
        .map(|c| hit[c] as f64 / tot[c] as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Multinomial logistic regression with an L2 penalty `||W||^2 / (2C)` on
/// the weights (intercepts unpenalized), fitted by damped Newton steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticProbe {
    /// Original label value for each internal class.
    pub classes: Vec<usize>,
    /// `classes x (p + 1)`, intercept last.
    pub coef: Vec<Vec<f64>>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct ProbeOptions {
    pub c: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            c: 1.0,
            max_iter: 200,
            tol: 1e-8,
        }
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

struct LogitProblem<'x> {
    x: &'x DMatrix<f64>,
    y: Vec<usize>,
    k: usize,
    inv_c: f64,
}

impl LogitProblem<'_> {
    fn q(&self) -> usize {
        self.x.ncols() + 1
    }

    fn probs(&self, theta: &DVector<f64>, i: usize) -> Vec<f64> {
        let (p, q) = (self.x.ncols(), self.q());
        let mut z: Vec<f64> = (0..self.k)
            .map(|c| {
                let w = theta.rows(c * q, q);
                (0..p).map(|f| w[f] * self.x[(i, f)]).sum::<f64>() + w[p]
            })
            .collect();
        softmax_in_place(&mut z);
        z
    }

    fn objective(&self, theta: &DVector<f64>) -> f64 {
        let q = self.q();
        let mut f = 0.0;
        for i in 0..self.x.nrows() {
            let pr = self.probs(theta, i);
            f -= pr[self.y[i]].max(1e-300).ln();
        }
        for c in 0..self.k {
            for j in 0..q - 1 {
                f += 0.5 * self.inv_c * theta[c * q + j].powi(2);
            }
        }
        f
    }

    fn grad_hess(&self, theta: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (n, p, q, k) = (self.x.nrows(), self.x.ncols(), self.q(), self.k);
        let xa = DMatrix::from_fn(n, q, |i, j| if j < p { self.x[(i, j)] } else { 1.0 });
        let probs: Vec<Vec<f64>> = (0..n).map(|i| self.probs(theta, i)).collect();
        let mut g = DVector::zeros(k * q);
        for c in 0..k {
            let r = DVector::from_fn(n, |i, _| probs[i][c] - f64::from(u8::from(self.y[i] == c)));
            let gc = xa.tr_mul(&r);
            for j in 0..q {
                g[c * q + j] = gc[j] + if j < p { self.inv_c * theta[c * q + j] } else { 0.0 };
            }
        }
        let mut h = DMatrix::zeros(k * q, k * q);
        for a in 0..k {
            for b in a..k {
                let mut xw = xa.clone();
                for i in 0..n {
                    let w = probs[i][a] * (f64::from(u8::from(a == b)) - probs[i][b]);
                    xw.row_mut(i).scale_mut(w);
                }
                let blk = xa.tr_mul(&xw);
                h.view_mut((a * q, b * q), (q, q)).copy_from(&blk);
                if a != b {
                    h.view_mut((b * q, a * q), (q, q)).copy_from(&blk.transpose());
                }
            }
        }
        for c in 0..k {
            for j in 0..q {
                // intercepts get a vanishing ridge; the softmax is invariant to a
                // common shift, which leaves that direction flat
                h[(c * q + j, c * q + j)] += if j < p { self.inv_c } else { 1e-9 };
            }
        }
        (g, h)
    }
}

impl LogisticProbe {
    pub fn fit(x: &[Vec<f64>], labels: &[usize], opts: ProbeOptions) -> Result<Self> {
        if x.len() != labels.len() {
            return Err(Error::dim("fit_linear_probe", "features and labels differ in length"));
        }
        if !(opts.c > 0.0) {
            return Err(Error::arg("regularization strength must be positive"));
        }
        let mut classes: Vec<usize> = labels.to_vec();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::Degenerate(format!(
                "linear probe needs at least 2 classes, found {}",
                classes.len()
            )));
        }
        let xm = to_matrix(x)?;
        let prob = LogitProblem {
            x: &xm,
            y: labels
                .iter()
                .map(|l| classes.binary_search(l).expect("label in class list"))
                .collect(),
            k: classes.len(),
            inv_c: 1.0 / opts.c,
        };
        let q = prob.q();
        let mut theta = DVector::zeros(prob.k * q);
        let mut f = prob.objective(&theta);
        let mut converged = false;
        let mut it = 0;
        while it < opts.max_iter {
            let (g, h) = prob.grad_hess(&theta);
            if g.amax() < opts.tol {
                converged = true;
                break;
            }
            it += 1;
            let step = solve_spd(h, &g)?;
            let mut t = 1.0;
            loop {
                let cand = &theta - &step * t;
                let fc = prob.objective(&cand);
                if fc <= f - 1e-4 * t * g.dot(&step) || t < 1e-10 {
                    theta = cand;
                    f = fc;
                    break;
                }
                t *= 0.5;
            }
        }
        if !converged {
            let (g, _) = prob.grad_hess(&theta);
            converged = g.amax() < opts.tol;
            if !converged {
                log::warn!("logistic probe stopped after {it} iterations (max |grad| {:e})", g.amax());
            }
        }
        let coef = (0..prob.k).map(|c| theta.rows(c * q, q).iter().copied().collect()).collect();
        Ok(Self {
            classes,
            coef,
            iterations: it,
            converged,
        })
    }

    pub fn decision(&self, row: &[f64]) -> Result<Vec<f64>> {
        let p = self.coef[0].len() - 1;
        if row.len() != p {
            return Err(Error::dim("probe predict", format!("{} != {p}", row.len())));
        }
        Ok(self
            .coef
            .iter()
            .map(|w| w[..p].iter().zip(row).map(|(a, b)| a * b).sum::<f64>() + w[p])
            .collect())
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<usize>> {
        x.iter()
            .map(|r| {
                let z = self.decision(r)?;
                let best = z
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                    .0;
                Ok(self.classes[best])
            })
            .collect()
    }
}

fn solve_spd(mut h: DMatrix<f64>, g: &DVector<f64>) -> Result<DVector<f64>> {
    let mut ridge = 0.0;
    for _ in 0..12 {
        if let Some(ch) = h.clone().cholesky() {
            return Ok(ch.solve(g));
        }
        let bump = if ridge == 0.0 { 1e-10 } else { ridge * 10.0 };
        for i in 0..h.nrows() {
            h[(i, i)] += bump - ridge;
        }
        ridge = bump;
    }
    Err(Error::numeric("newton step", "system not positive definite"))
}

/// Standardize on train, fit the probe, score balanced accuracy on test.
pub fn probe_balanced_accuracy(
    train_x: &[Vec<f64>],
    train_y: &[usize],
    test_x: &[Vec<f64>],
    test_y: &[usize],
) -> Result<f64> {
    let s = Standardizer::fit(train_x)?;
    let probe = LogisticProbe::fit(&s.apply(train_x)?, train_y, ProbeOptions::default())?;
    balanced_accuracy(test_y, &probe.predict(&s.apply(test_x)?)?)
}

/// Durations and event indicators.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct SurvivalData {
    pub durations: Vec<f64>,
    pub events: Vec<bool>,
}

impl SurvivalData {
    pub fn new(durations: Vec<f64>, events: Vec<bool>) -> Result<Self> {
        if durations.len() != events.len() {
            return Err(Error::dim("survival data", "durations and events differ in length"));
        }
        if durations.iter().any(|d| !(*d >= 0.0 && d.is_finite())) {
            return Err(Error::arg("durations must be finite and nonnegative"));
        }
        Ok(Self { durations, events })
    }

    pub fn len(&self) -> usize {
        self.durations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.durations.is_empty()
    }

    pub fn n_events(&self) -> usize {
        self.events.iter().filter(|&&e| e).count()
    }
}

/// Penalized Cox model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxModel {
    pub beta: Vec<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

impl CoxModel {
    pub fn risk(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        x.iter()
            .map(|r| {
                if r.len() != self.beta.len() {
                    return Err(Error::dim("cox risk", format!("{} != {}", r.len(), self.beta.len())));
                }
                Ok(r.iter().zip(&self.beta).map(|(a, b)| a * b).sum())
            })
            .collect()
    }
}

/// Breslow partial log-likelihood with gradient and Hessian.
pub fn cox_partial_likelihood(
    x: &DMatrix<f64>,
    surv: &SurvivalData,
    beta: &DVector<f64>,
    want_hessian: bool,
) -> (f64, DVector<f64>, Option<DMatrix<f64>>) {
    let (n, p) = (x.nrows(), x.ncols());
    let eta = x * beta;
    let shift = eta.max();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| surv.durations[b].total_cmp(&surv.durations[a]));
    let mut s0 = 0.0;
    let mut s1 = DVector::zeros(p);
    let mut s2 = DMatrix::zeros(if want_hessian { p } else { 0 }, if want_hessian { p } else { 0 });
    let mut ll = 0.0;
    let mut g = DVector::zeros(p);
    let mut h = want_hessian.then(|| DMatrix::zeros(p, p));
    let mut i = 0;
    while i < n {
        let t = surv.durations[order[i]];
        let mut j = i;
        while j < n && surv.durations[order[j]] == t {
            let r = order[j];
            let w = (eta[r] - shift).exp();
            let xr = x.row(r).transpose();
            s0 += w;
            s1.axpy(w, &xr, 1.0);
            if want_hessian {
                s2.ger(w, &xr, &xr, 1.0);
            }
            j += 1;
        }
        let mean = &s1 / s0;
        for &r in &order[i..j] {
            if !surv.events[r] {
                continue;
            }
            ll += eta[r] - (s0.ln() + shift);
            g += x.row(r).transpose() - &mean;
            if let Some(h) = h.as_mut() {
                *h -= &s2 / s0 - &mean * mean.transpose();
            }
        }
        i = j;
    }
    (ll, g, h)
}

/// Maximize `PL(beta)/n - penalizer * ||beta||^2` by Newton iteration with
/// step halving.
pub fn fit_cph(x: &[Vec<f64>], surv: &SurvivalData, penalizer: f64) -> Result<CoxModel> {
    if x.len() != surv.len() {
        return Err(Error::dim("fit_cph", "features and survival data differ in length"));
    }
    if surv.n_events() == 0 {
        return Err(Error::Degenerate("CPH needs at least one event".into()));
    }
    if !(penalizer >= 0.0) {
        return Err(Error::arg("penalizer must be nonnegative"));
    }
    let xm = to_matrix(x)?;
    let (n, p) = (xm.nrows() as f64, xm.ncols());
    let objective = |b: &DVector<f64>| {
        let (ll, g, h) = cox_partial_likelihood(&xm, surv, b, true);
        let f = ll / n - penalizer * b.norm_squared();
        let grad = g / n - b * (2.0 * penalizer);
        let mut neg_h = -(h.expect("hessian requested") / n);
        for k in 0..p {
            neg_h[(k, k)] += 2.0 * penalizer;
        }
        (f, grad, neg_h)
    };
    let value = |b: &DVector<f64>| cox_partial_likelihood(&xm, surv, b, false).0 / n - penalizer * b.norm_squared();
    let mut beta = DVector::zeros(p);
    let (mut f, mut grad, mut neg_h) = objective(&beta);
    for it in 0..=100 {
        let gn = grad.norm();
        if gn < 1e-6 {
            return Ok(CoxModel {
                beta: beta.iter().copied().collect(),
                iterations: it,
                grad_norm: gn,
            });
        }
        if it == 100 {
            return Err(Error::Convergence {
                iterations: 100,
                grad_norm: gn,
            });
        }
        let step = solve_spd(neg_h.clone(), &grad)?;
        let mut t = 1.0;
        loop {
            let cand = &beta + &step * t;
            let fc = value(&cand);
            if fc.is_finite() && (fc >= f || t < 1e-12) {
                beta = cand;
                break;
            }
            t *= 0.5;
        }
        (f, grad, neg_h) = objective(&beta);
    }
    unreachable!("loop returns at iteration 100")
}

/// Fraction of comparable pairs ordered correctly; a pair is comparable when
/// the strictly earlier time is an event, and risk ties count one half.
pub fn concordance_index(risk: &[f64], surv: &SurvivalData) -> Result<f64> {
    if risk.len() != surv.len() {
        return Err(Error::dim("concordance_index", "risk and survival differ in length"));
    }
    let mut num = 0.0;
    let mut den = 0usize;
    for i in 0..risk.len() {
        if !surv.events[i] {
            continue;
        }
        for j in 0..risk.len() {
            if surv.durations[j] > surv.durations[i] {
                den += 1;
                if risk[i] > risk[j] {
                    num += 1.0;
                } else if risk[i] == risk[j] {
                    num += 0.5;
                }
            }
        }
    }
    if den == 0 {
        return Err(Error::Degenerate("no comparable pairs".into()));
    }
    Ok(num / den as f64)
}

/// Product-limit step curve.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
}

impl KmCurve {
    /// Survival just after time `t`.
    pub fn at(&self, t: f64) -> f64 {
        self.times
            .iter()
            .zip(&self.survival)
            .take_while(|(&s, _)| s <= t)
            .last()
            .map_or(1.0, |(_, &v)| v)
    }
}

fn group_members(surv: &SurvivalData, mask: &[bool], group: bool) -> Vec<usize> {
    (0..surv.len()).filter(|&i| mask[i] == group).collect()
}

/// Kaplan–Meier estimate over the patients with `mask[i] == true`.
pub fn kaplan_meier(surv: &SurvivalData, mask: &[bool]) -> Result<KmCurve> {
    if mask.len() != surv.len() {
        return Err(Error::dim("kaplan_meier", "mask length"));
    }
    let members = group_members(surv, mask, true);
    if members.is_empty() {
        return Err(Error::arg("empty group"));
    }
    let mut times: Vec<f64> = members.iter().map(|&i| surv.durations[i]).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut s = 1.0;
    let mut curve = KmCurve {
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
    };
    for &t in &times {
        let n = members.iter().filter(|&&i| surv.durations[i] >= t).count();
        let d = members
            .iter()
            .filter(|&&i| surv.durations[i] == t && surv.events[i])
            .count();
        if d > 0 {
            s *= 1.0 - d as f64 / n as f64;
        }
        curve.times.push(t);
        curve.survival.push(s);
        curve.at_risk.push(n);
        curve.events.push(d);
    }
    Ok(curve)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRank {
    pub statistic: f64,
    pub p_value: f64,
    pub observed: [f64; 2],
    pub expected: [f64; 2],
    pub variance: f64,
    /// Set when either group has no events.
    pub group_without_events: bool,
}

/// Two-group log-rank test (`mask[i] == true` is group 1).
pub fn log_rank(surv: &SurvivalData, mask: &[bool]) -> Result<LogRank> {
    if mask.len() != surv.len() {
        return Err(Error::dim("log_rank", "mask length"));
    }
    let g1 = group_members(surv, mask, true);
    let g0 = group_members(surv, mask, false);
    if g1.is_empty() || g0.is_empty() {
        return Err(Error::arg("both groups must be nonempty"));
    }
    if surv.n_events() == 0 {
        return Err(Error::Degenerate("log-rank needs at least one event".into()));
    }
    let mut times: Vec<f64> = (0..surv.len())
        .filter(|&i| surv.events[i])
        .map(|i| surv.durations[i])
        .collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let count = |g: &[usize], f: &dyn Fn(usize) -> bool| g.iter().filter(|&&i| f(i)).count() as f64;
    let (mut o1, mut e1, mut o0, mut e0, mut v) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &t in &times {
        let n1 = count(&g1, &|i| surv.durations[i] >= t);
        let n0 = count(&g0, &|i| surv.durations[i] >= t);
        let d1 = count(&g1, &|i| surv.durations[i] == t && surv.events[i]);
        let d0 = count(&g0, &|i| surv.durations[i] == t && surv.events[i]);
        let (n, d) = (n1 + n0, d1 + d0);
        o1 += d1;
        o0 += d0;
        e1 += d * n1 / n;
        e0 += d * n0 / n;
        if n > 1.0 {
            v += d * (n1 / n) * (n0 / n) * (n - d) / (n - 1.0);
        }
    }
    let statistic = if v > 0.0 { (o1 - e1).powi(2) / v } else { 0.0 };
    let chi = ChiSquared::new(1.0).map_err(|e| Error::numeric("log_rank", e.to_string()))?;
    Ok(LogRank {
        statistic,
        p_value: chi.sf(statistic),
        observed: [o0, o1],
        expected: [e0, e1],
        variance: v,
        group_without_events: o0 == 0.0 || o1 == 0.0,
    })
}

/// `true` for the high-risk group: risk strictly above the median.
pub fn median_split(risk: &[f64]) -> Vec<bool> {
    let mut s = risk.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return Vec::new();
    }
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    };
    risk.iter().map(|&r| r > median).collect()
}

/// Standardize on train, fit CPH, score C-index on test.
pub fn cph_concordance(
    train_x: &[Vec<f64>],
    train: &SurvivalData,
    test_x: &[Vec<f64>],
    test: &SurvivalData,
    penalizer: f64,
) -> Result<(f64, Standardizer, CoxModel)> {
    let s = Standardizer::fit(train_x)?;
    let model = fit_cph(&s.apply(train_x)?, train, penalizer)?;
    let c = concordance_index(&model.risk(&s.apply(test_x)?)?, test)?;
    Ok((c, s, model))
}

/// Path-integral attributions and the completeness reference.
#[derive(Clone, Debug, PartialEq)]
pub struct IgResult {
    /// Same shape as the input.
    pub attributions: Vec<f64>,
    pub f_input: f64,
    pub f_baseline: f64,
}

impl IgResult {
    pub fn delta(&self) -> f64 {
        self.f_input - self.f_baseline
    }

    pub fn total(&self) -> f64 {
        self.attributions.iter().sum()
    }

    /// Sums over contiguous chunks of `width` entries (one per token row).
    pub fn per_row(&self, width: usize) -> Vec<f64> {
        self.attributions.chunks(width).map(|c| c.iter().sum()).collect()
    }
}

/// Midpoint Riemann integrated gradients; `f` returns the value and its
/// gradient at a point.
pub fn integrated_gradients(
    input: &[f64],
    baseline: &[f64],
    steps: usize,
    f: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<IgResult> {
    integrated_gradients_graded(input, baseline, steps, 1.0, f)
}

/// Riemann integrated gradients over the partition `alpha_k = (k/steps)^grading`,
/// tagged at the image of each interval midpoint. `grading > 1` refines the
/// intervals next to the baseline.
pub fn integrated_gradients_graded(
    input: &[f64],
    baseline: &[f64],
    steps: usize,
    grading: f64,
    mut f: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
) -> Result<IgResult> {
    if steps == 0 {
        return Err(Error::arg("integrated gradients need at least one step"));
    }
    if !(grading >= 1.0) {
        return Err(Error::arg("grading must be at least 1"));
    }
    if input.len() != baseline.len() {
        return Err(Error::dim("integrated_gradients", "input and baseline shapes differ"));
    }
    let n = steps as f64;
    let mut avg = vec![0.0; input.len()];
    let mut point = vec![0.0; input.len()];
    for k in 0..steps {
        let (lo, hi) = ((k as f64 / n).powf(grading), ((k + 1) as f64 / n).powf(grading));
        let a = ((k as f64 + 0.5) / n).powf(grading);
        for ((p, x), b) in point.iter_mut().zip(input).zip(baseline) {
            *p = b + a * (x - b);
        }
        let (_, g) = f(&point)?;
        if g.len() != input.len() {
            return Err(Error::dim("integrated_gradients", "gradient shape"));
        }
        for (s, gi) in avg.iter_mut().zip(&g) {
            *s += gi * (hi - lo);
        }
    }
    let attributions = avg
        .iter()
        .zip(input)
        .zip(baseline)
        .map(|((g, x), b)| g * (x - b))
        .collect();
    Ok(IgResult {
        attributions,
        f_input: f(input)?.0,
        f_baseline: f(baseline)?.0,
    })
}

/// Linear CPH risk on standardized general-prompt features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskReadout {
    pub standardizer: Standardizer,
    pub beta: Vec<f64>,
}

impl RiskReadout {
    pub fn risk(&self, z: &[f64]) -> f64 {
        z.iter()
            .zip(&self.standardizer.mean)
            .zip(&self.standardizer.scale)
            .zip(&self.beta)
            .map(|(((v, m), s), b)| (v - m) / s * b)
            .sum()
    }
}

/// Partition grading of the model-level path. LayerNorm on near-zero
/// tokens makes the integrand steep next to the zero baseline.
pub const MODEL_IG_GRADING: f64 = 3.0;

/// Integrated gradients of the CPH risk over one patient's compressed
/// pathway tokens, from a zero baseline.
pub fn model_integrated_gradients<T: Real>(
    encoder: &SlideEncoder<T>,
    adapter: &AdapterState<T>,
    bag: &FeatureBag,
    inputs: &ModalInputs,
    readout: &RiskReadout,
    steps: usize,
) -> Result<IgResult> {
    let (tokens, shape) = {
        let mut g = Graph::new();
        let p = adapter.pathway_tokens(&mut g, inputs, crate::numerics::Dropout::eval())?;
        let v = g.value(p);
        (v.to_f64_vec(), v.shape())
    };
    let w: Vec<f64> = readout
        .beta
        .iter()
        .zip(&readout.standardizer.scale)
        .map(|(b, s)| b / s)
        .collect();
    let offset: f64 = readout.standardizer.mean.iter().zip(&w).map(|(m, w)| m * w).sum();
    if w.len() != adapter.config().d_final {
        return Err(Error::dim("model_integrated_gradients", "readout width differs from D_final"));
    }
    let wt = Tensor2D::<T>::from_f64(w.len(), 1, &w)?;
    let eval = |point: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new();
        let p = g.input(Tensor2D::from_f64(shape.0, shape.1, point)?, true);
        let vars = adapter.forward(&mut g, encoder, bag, inputs, &[TASK_GENERAL], Some(p), ForwardOptions::eval())?;
        let wv = g.constant(wt.clone());
        let r = g.matmul(vars[0].z_comb, wv)?;
        let value = g.value(r).get(0, 0).as_f64() - offset;
        let grads = g.backward(r)?;
        let grad = grads
            .wrt(p)
            .map(|t| t.to_f64_vec())
            .unwrap_or_else(|| vec![0.0; point.len()]);
        Ok((value, grad))
    };
    integrated_gradients_graded(&tokens, &vec![0.0; tokens.len()], steps, MODEL_IG_GRADING, eval)
}

/// Attention summaries for one patient, rows renormalized over patches.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionMaps {
    pub block: usize,
    /// Final-block CLS attention over patches, per head.
    pub cls_to_patch: Vec<Vec<f64>>,
    /// Injector patch-to-pathway attention averaged over pathway tokens,
    /// per head.
    pub patch_to_pathway: Vec<Vec<f64>>,
    /// `(task, per-head map)` of injector patch-to-prompt attention.
    pub patch_to_task: Vec<(usize, Vec<Vec<f64>>)>,
}

fn renormalize(v: Vec<f64>) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.into_iter().map(|x| x / s).collect()
    } else {
        v
    }
}

pub fn attention_maps<T: Real>(
    encoder: &SlideEncoder<T>,
    adapter: &AdapterState<T>,
    bag: &FeatureBag,
    inputs: &ModalInputs,
) -> Result<AttentionMaps> {
    let tasks: Vec<usize> = (1..=adapter.n_tasks()).collect();
    let mut g = Graph::new();
    let vars = adapter.forward(&mut g, encoder, bag, inputs, &tasks, None, ForwardOptions::traced())?;
    let block = adapter.n_blocks() - 1;
    let n = bag.n_patches();
    let n_path = adapter
        .modal_encoders()
        .map_or(adapter.n_modal_tokens(), |m| m.n_pathway_tokens());
    let n_mm = adapter.n_modal_tokens();
    let general = &vars[0].trace[block];
    let cls_to_patch = general
        .encoder
        .iter()
        .map(|&h| {
            let w = g.value(h);
            renormalize((1..=n).map(|c| w.get(0, c).as_f64()).collect())
        })
        .collect();
    let patch_to_pathway = general
        .injector
        .iter()
        .map(|&h| {
            let w = g.value(h);
            renormalize(
                (1..=n)
                    .map(|r| (0..n_path).map(|c| w.get(r, c).as_f64()).sum::<f64>() / n_path as f64)
                    .collect(),
            )
        })
        .collect();
    let patch_to_task = vars
        .iter()
        .map(|v| {
            let maps = v.trace[block]
                .injector
                .iter()
                .map(|&h| {
                    let w = g.value(h);
                    renormalize((1..=n).map(|r| w.get(r, n_mm).as_f64()).collect())
                })
                .collect();
            (v.task, maps)
        })
        .collect();
    Ok(AttentionMaps {
        block,
        cls_to_patch,
        patch_to_pathway,
        patch_to_task,
    })
}

/// One line of the metrics table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub metric: String,
    pub task: String,
    pub site: String,
    pub split: String,
    pub value: f64,
    pub seed: u64,
}

pub fn write_metrics(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut body = String::from("metric,task,site,split,value,seed\n");
    for r in rows {
        body.push_str(&format!(
            "{},{},{},{},{:.6},{}\n",
            r.metric, r.task, r.site, r.split, r.value, r.seed
        ));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
