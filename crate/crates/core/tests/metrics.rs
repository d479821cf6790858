mod common;

use modaltune_core::eval::{
    balanced_accuracy, concordance_index, fit_cph, integrated_gradients_graded, kaplan_meier, log_rank, median_split,
    SurvivalData,
};
use proptest::prelude::*;

fn survival() -> impl Strategy<Value = (Vec<i64>, Vec<bool>, Vec<i64>)> {
    (2usize..=12).prop_flat_map(|n| {
        (
            prop::collection::vec(1i64..=6, n),
            prop::collection::vec(any::<bool>(), n),
            prop::collection::vec(-3i64..=3, n),
        )
    })
}

fn data(time: &[i64], event: &[bool]) -> SurvivalData {
    SurvivalData::new(time.iter().map(|&t| t as f64).collect(), event.to_vec()).unwrap()
}

fn f(v: &[i64]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

proptest! {
    #[test]
    fn cindex_matches_oracle((time, event, risk) in survival()) {
        let got = concordance_index(&f(&risk), &data(&time, &event));
        match common::concordance(&risk, &time, &event) {
            Some(o) => prop_assert!((got.unwrap() - common::to_f64(o)).abs() < 1e-12),
            None => prop_assert!(got.is_err()),
        }
    }

    #[test]
    fn cindex_of_negated_risk_is_complement((time, event, risk) in survival()) {
        let s = data(&time, &event);
        if let Ok(c) = concordance_index(&f(&risk), &s) {
            let neg: Vec<f64> = risk.iter().map(|&r| -(r as f64)).collect();
            prop_assert!((c + concordance_index(&neg, &s).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cindex_is_invariant_to_monotone_transforms((time, event, risk) in survival()) {
        let s = data(&time, &event);
        if let Ok(c) = concordance_index(&f(&risk), &s) {
            let warped: Vec<f64> = risk.iter().map(|&r| (r as f64 * 0.7).exp() + 3.0).collect();
            prop_assert_eq!(c, concordance_index(&warped, &s).unwrap());
        }
    }

    #[test]
    fn km_matches_oracle_and_is_monotone((time, event, _r) in survival()) {
        let km = kaplan_meier(&data(&time, &event), &vec![true; time.len()]).unwrap();
        let mut last = 1.0;
        for t in 0..=7 {
            let v = km.at(t as f64);
            prop_assert!((v - common::to_f64(common::km_at(&time, &event, t))).abs() < 1e-12);
            prop_assert!(v <= last + 1e-15 && (0.0..=1.0).contains(&v));
            last = v;
        }
    }

    #[test]
    fn log_rank_matches_oracle_and_is_symmetric(
        (time, event, risk) in survival(),
    ) {
        let mut group: Vec<bool> = risk.iter().map(|&r| r > 0).collect();
        group[0] = true;
        let last = group.len() - 1;
        group[last] = false;
        let s = data(&time, &event);
        let swapped: Vec<bool> = group.iter().map(|g| !g).collect();
        match (log_rank(&s, &group), common::log_rank_statistic(&time, &event, &group)) {
            (Ok(lr), Some(o)) => {
                prop_assert!((lr.statistic - common::to_f64(o)).abs() <= 1e-12 * common::to_f64(o).max(1.0));
                let other = log_rank(&s, &swapped).unwrap();
                prop_assert!((lr.statistic - other.statistic).abs() <= 1e-12 * lr.statistic.max(1.0));
                prop_assert!((0.0..=1.0).contains(&lr.p_value));
            }
            (Ok(lr), None) => prop_assert_eq!(lr.statistic, 0.0),
            (Err(_), None) => prop_assert!(!event.iter().any(|&e| e)),
            (Err(e), Some(_)) => prop_assert!(false, "rejected a valid input: {e}"),
        }
    }

    #[test]
    fn balanced_accuracy_matches_oracle(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..=12),
    ) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let o = common::to_f64(common::balanced_accuracy(&truth, &pred).unwrap());
        prop_assert!((balanced_accuracy(&truth, &pred).unwrap() - o).abs() < 1e-12);
        prop_assert_eq!(balanced_accuracy(&truth, &truth).unwrap(), 1.0);
    }

    #[test]
    fn balanced_accuracy_ignores_class_names(
        pairs in prop::collection::vec((0usize..3, 0usize..3), 1..=12),
    ) {
        let (truth, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let relabel = |v: &[usize]| v.iter().map(|&c| [2, 0, 1][c]).collect::<Vec<_>>();
        let a = balanced_accuracy(&truth, &pred).unwrap();
        let b = balanced_accuracy(&relabel(&truth), &relabel(&pred)).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn median_split_halves_distinct_risks(risk in prop::collection::btree_set(-1000i64..1000, 2..40)) {
        let r: Vec<f64> = risk.iter().map(|&v| v as f64).collect();
        let high = median_split(&r).iter().filter(|&&h| h).count();
        prop_assert_eq!(high, r.len() / 2);
    }

    #[test]
    fn ig_is_exact_on_linear_functions(
        w in prop::collection::vec(-2.0f64..2.0, 1..20),
        steps in 1usize..64,
        grading in 1.0f64..4.0,
    ) {
        let x: Vec<f64> = w.iter().enumerate().map(|(i, _)| (i as f64).sin()).collect();
        let base = vec![0.0; w.len()];
        let ig = integrated_gradients_graded(&x, &base, steps, grading, |z| {
            Ok((z.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>(), w.clone()))
        })
        .unwrap();
        prop_assert!((ig.total() - ig.delta()).abs() < 1e-10);
    }
}

#[test]
fn cph_gradient_vanishes_under_the_brute_force_objective() {
    use rand::Rng;
    let mut rng = modaltune_core::numerics::rng::seeded(11, "cph-brute");
    for _ in 0..5 {
        let n = 50;
        let x: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let (t, e) = common::tied_survival(&mut rng, n);
        let time: Vec<f64> = t.iter().map(|&v| v as f64).collect();
        let m = fit_cph(&x, &SurvivalData::new(time.clone(), e.clone()).unwrap(), 0.1).unwrap();
        let (_, g) = common::breslow(&x, &time, &e, &m.beta);
        let norm: f64 = g
            .iter()
            .zip(&m.beta)
            .map(|(gk, b)| (gk / n as f64 - 0.2 * b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(norm < 1e-6, "{norm}");
    }
}

#[test]
fn cph_is_invariant_to_covariate_shift() {
    use rand::Rng;
    let mut rng = modaltune_core::numerics::rng::seeded(12, "cph-shift");
    let x: Vec<Vec<f64>> = (0..60).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let (t, e) = common::tied_survival(&mut rng, 60);
    let s = SurvivalData::new(t.iter().map(|&v| v as f64).collect(), e).unwrap();
    let shifted: Vec<Vec<f64>> = x.iter().map(|r| vec![r[0] + 5.0, r[1] - 2.0]).collect();
    let a = fit_cph(&x, &s, 0.1).unwrap();
    let b = fit_cph(&shifted, &s, 0.1).unwrap();
    for (u, v) in a.beta.iter().zip(&b.beta) {
        assert!((u - v).abs() < 1e-6, "{u} {v}");
    }
}
