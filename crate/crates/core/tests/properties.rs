use proptest::prelude::*;

use lmt_core::metrics::{quadratic_weighted_kappa, roc_auc};
use lmt_core::mixing::{mix_scalar, mix_tensors, soft_label};
use lmt_core::odesolve::{solve_ivp, LinearField, SolverConfig};
use lmt_core::progression::interpolate_fraction;
use lmt_core::{Profile, SeverityGrade, Tensor};

fn grade() -> impl Strategy<Value = SeverityGrade> {
    (0u8..5).prop_map(|g| SeverityGrade::new(g).unwrap())
}

fn profile() -> impl Strategy<Value = Profile> {
    prop_oneof![Just(Profile::Linear), Just(Profile::Exponential)]
}

proptest! {
    #[test]
    fn mix_is_symmetric_and_bounded(a in -1e3f64..1e3, b in -1e3f64..1e3, l in 0.0f64..=1.0) {
        let m = mix_scalar(a, b, l);
        prop_assert_eq!(m, mix_scalar(b, a, 1.0 - l));
        prop_assert!(a.min(b) - 1e-9 <= m && m <= a.max(b) + 1e-9);
        prop_assert_eq!(mix_scalar(a, a, l), a);
    }

    #[test]
    fn mix_tensors_endpoints(v in prop::collection::vec(-10.0f64..10.0, 1..12), w in -10.0f64..10.0) {
        let a = Tensor::row(&v);
        let b = Tensor::row(&vec![w; v.len()]);
        prop_assert_eq!(mix_tensors(&a, &b, 1.0).unwrap(), a.clone());
        prop_assert_eq!(mix_tensors(&a, &b, 0.0).unwrap(), b);
    }

    #[test]
    fn profiles_stay_between_grades(p in profile(), a in grade(), b in grade(), f in 0.0f64..=1.0) {
        let s = interpolate_fraction(p, a, b, f).unwrap();
        let (lo, hi) = (a.as_f64().min(b.as_f64()), a.as_f64().max(b.as_f64()));
        prop_assert!(lo - 1e-12 <= s && s <= hi + 1e-12);
    }

    #[test]
    fn profiles_are_monotone(p in profile(), a in grade(), b in grade(), f in 0.0f64..1.0, d in 0.0f64..1.0) {
        let g = (f + d * (1.0 - f)).min(1.0);
        let (x, y) = (interpolate_fraction(p, a, b, f).unwrap(), interpolate_fraction(p, a, b, g).unwrap());
        let dir = (b.as_f64() - a.as_f64()).signum();
        prop_assert!(dir * (y - x) >= -1e-12);
    }

    #[test]
    fn soft_label_mean_is_the_severity(s in 0.0f64..=4.0) {
        let p = soft_label(s);
        let p = p.probs();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mean: f64 = p.iter().enumerate().map(|(i, w)| i as f64 * w).sum();
        prop_assert!((mean - s).abs() < 1e-12);
        prop_assert!(p.iter().all(|&w| (0.0..=1.0).contains(&w)));
    }

    #[test]
    fn auc_is_rank_based(
        data in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..80)
    ) {
        let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
        let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let auc = roc_auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| s.tanh() * 3.0 + 1.0).collect();
        let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((0.0..=1.0).contains(&auc));
        prop_assert!((roc_auc(&squashed, &labels).unwrap() - auc).abs() < 1e-12);
        prop_assert!((roc_auc(&negated, &labels).unwrap() - (1.0 - auc)).abs() < 1e-12);
    }

    #[test]
    fn kappa_is_symmetric(pairs in prop::collection::vec((0usize..5, 0usize..5), 2..60)) {
        let a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let (ab, ba) = (quadratic_weighted_kappa(&a, &b, 5), quadratic_weighted_kappa(&b, &a, 5));
        match (ab, ba) {
            (Ok(x), Ok(y)) => {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&x));
            }
            (Err(_), Err(_)) => {}
            _ => prop_assert!(false, "asymmetric definedness"),
        }
    }

    #[test]
    fn kappa_of_self_is_one(a in prop::collection::vec(0usize..5, 2..60)) {
        prop_assume!(a.iter().any(|&g| g != a[0]));
        prop_assert!((quadratic_weighted_kappa(&a, &a, 5).unwrap() - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn solves_compose(m in prop::collection::vec(-1.0f64..1.0, 4), z in prop::collection::vec(-2.0f64..2.0, 2), t1 in 0.0f64..1.0, t2 in 0.0f64..1.0) {
        let f = LinearField::from_system_matrix(&Tensor::from_rows(&[m[..2].to_vec(), m[2..].to_vec()]).unwrap()).unwrap();
        let cfg = SolverConfig::dopri5(1e-10, 1e-12);
        let z0 = Tensor::row(&z);
        let direct = solve_ivp(&f, &z0, 0.0, t1 + t2, &cfg).unwrap().z;
        let mid = solve_ivp(&f, &z0, 0.0, t1, &cfg).unwrap().z;
        let split = solve_ivp(&f, &mid, t1, t1 + t2, &cfg).unwrap().z;
        for (x, y) in direct.data().iter().zip(split.data()) {
            prop_assert!((x - y).abs() < 1e-7, "{x} vs {y}");
        }
    }

    #[test]
    fn backward_solve_inverts_forward(m in prop::collection::vec(-1.0f64..1.0, 4), z in prop::collection::vec(-2.0f64..2.0, 2), t in 0.01f64..1.5) {
        let f = LinearField::from_system_matrix(&Tensor::from_rows(&[m[..2].to_vec(), m[2..].to_vec()]).unwrap()).unwrap();
        let cfg = SolverConfig::dopri5(1e-10, 1e-12);
        let z0 = Tensor::row(&z);
        let fwd = solve_ivp(&f, &z0, 0.0, t, &cfg).unwrap();
        prop_assert_eq!(fwd.knots.first().copied(), Some(0.0));
        prop_assert_eq!(fwd.knots.last().copied(), Some(t));
        let back = solve_ivp(&f, &fwd.z, t, 0.0, &cfg).unwrap().z;
        for (x, y) in back.data().iter().zip(z0.data()) {
            prop_assert!((x - y).abs() < 1e-7, "{x} vs {y}");
        }
    }
}
