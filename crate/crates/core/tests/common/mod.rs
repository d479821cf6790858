//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use num_rational::Ratio;
use rand::{Rng, RngCore};

pub type Q = Ratio<i128>;

fn q(n: i128, d: i128) -> Q {
    Ratio::new(n, d)
}

pub fn to_f64(r: Q) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Mean per-class recall over classes present in `truth`, in exact arithmetic.
pub fn balanced_accuracy(truth: &[usize], pred: &[usize]) -> Option<Q> {
    let mut classes: Vec<usize> = truth.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return None;
    }
    let mut total = q(0, 1);
    for &c in &classes {
        let n = truth.iter().filter(|&&t| t == c).count() as i128;
        let hit = truth.iter().zip(pred).filter(|(&t, &p)| t == c && p == c).count() as i128;
        total += q(hit, n);
    }
    Some(total / q(classes.len() as i128, 1))
}

/// Harrell's C over unordered pairs; `None` without comparable pairs.
pub fn concordance(risk: &[i64], time: &[i64], event: &[bool]) -> Option<Q> {
    let (mut twice_hits, mut pairs) = (0i128, 0i128);
    for i in 0..risk.len() {
        for j in i + 1..risk.len() {
            let (a, b) = if time[i] < time[j] { (i, j) } else { (j, i) };
            if time[a] == time[b] || !event[a] {
                continue;
            }
            pairs += 1;
            twice_hits += match risk[a].cmp(&risk[b]) {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    (pairs > 0).then(|| q(twice_hits, 2 * pairs))
}

/// Product-limit survival at `t` from the raw definition.
pub fn km_at(time: &[i64], event: &[bool], t: i64) -> Q {
    let mut s = q(1, 1);
    let mut event_times: Vec<i64> = (0..time.len()).filter(|&i| event[i]).map(|i| time[i]).collect();
    event_times.sort_unstable();
    event_times.dedup();
    for u in event_times.into_iter().filter(|&u| u <= t) {
        let at_risk = time.iter().filter(|&&x| x >= u).count() as i128;
        let deaths = (0..time.len()).filter(|&i| time[i] == u && event[i]).count() as i128;
        s *= q(at_risk - deaths, at_risk);
    }
    s
}

/// Log-rank statistic from per-time 2x2 tables; `None` when the variance is 0.
pub fn log_rank_statistic(time: &[i64], event: &[bool], group: &[bool]) -> Option<Q> {
    let mut event_times: Vec<i64> = (0..time.len()).filter(|&i| event[i]).map(|i| time[i]).collect();
    event_times.sort_unstable();
    event_times.dedup();
    let (mut o_minus_e, mut var) = (q(0, 1), q(0, 1));
    for u in event_times {
        let mut table = [[0i128; 2]; 2]; // [group][dead, alive-at-risk]
        for i in 0..time.len() {
            if time[i] >= u {
                let dead = time[i] == u && event[i];
                table[usize::from(group[i])][usize::from(!dead)] += 1;
            }
        }
        let n1 = table[1][0] + table[1][1];
        let n0 = table[0][0] + table[0][1];
        let d = table[0][0] + table[1][0];
        let n = n0 + n1;
        o_minus_e += q(table[1][0], 1) - q(d * n1, n);
        if n > 1 {
            var += q(d * n1 * n0 * (n - d), n * n * (n - 1));
        }
    }
    (var != q(0, 1)).then(|| o_minus_e * o_minus_e / var)
}

/// Breslow partial log-likelihood and gradient by direct risk-set sums.
pub fn breslow(x: &[Vec<f64>], time: &[f64], event: &[bool], beta: &[f64]) -> (f64, Vec<f64>) {
    let p = beta.len();
    let eta: Vec<f64> = x.iter().map(|r| r.iter().zip(beta).map(|(a, b)| a * b).sum()).collect();
    let mut ll = 0.0;
    let mut grad = vec![0.0; p];
    for i in 0..x.len() {
        if !event[i] {
            continue;
        }
        let risk: Vec<usize> = (0..x.len()).filter(|&j| time[j] >= time[i]).collect();
        let w: Vec<f64> = risk.iter().map(|&j| eta[j].exp()).collect();
        let s0: f64 = w.iter().sum();
        ll += eta[i] - s0.ln();
        for k in 0..p {
            let s1: f64 = risk.iter().zip(&w).map(|(&j, wj)| x[j][k] * wj).sum();
            grad[k] += x[i][k] - s1 / s0;
        }
    }
    (ll, grad)
}

/// Random survival instance with heavy ties: times in 1..=6.
pub fn tied_survival(rng: &mut impl RngCore, n: usize) -> (Vec<i64>, Vec<bool>) {
    let time = (0..n).map(|_| rng.random_range(1..=6)).collect();
    let event = (0..n).map(|_| rng.random_bool(0.6)).collect();
    (time, event)
}
