//! Property-based invariants of the solver and the estimators.

mod common;

use common::*;
use extbal::basis::{align_target_summary, evaluate_basis_with, Standardize};
use extbal::estimators::{estimate, estimator_weights, Estimator, EstimatorOptions};
use extbal::solver::{
    balance_residuals, dual_objective, solve_ebal_h_only, solve_extended, solve_josey_two_step, DualParams, SolverOptions,
};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;

fn instance_strategy(max_kh: usize, max_kg: usize) -> impl Strategy<Value = (u64, usize, usize, usize)> {
    (any::<u64>(), 50usize..=300, 1..=max_kh, 0..=max_kg)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, ..ProptestConfig::default() })]

    #[test]
    fn gradient_is_balance_residual((seed, n, kh, kg) in instance_strategy(4, 3)) {
        let mut rng = seeded(seed);
        let inst = random_instance(&mut rng, n, kh, kg);
        let (d, t) = inst.design();
        let arms = inst.arms();
        let theta = DVector::from_fn(2 * kh + kg, |_, _| rng.random_range(-0.7..0.7));
        let p = DualParams::unstack(&theta, kh, kg);
        let eval = dual_objective(&p, &d, &t, &arms, 30.0);
        let w: Vec<f64> = (0..n)
            .map(|i| {
                let h: Vec<f64> = d.h.row(i).iter().copied().collect();
                let g: Vec<f64> = d.g.row(i).iter().copied().collect();
                let treated = inst.sample.treatment()[i];
                let lam = if treated { &p.lambda1 } else { &p.lambda0 };
                let sign = if treated { 1.0 } else { -1.0 };
                let s: f64 = lam.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>()
                    + sign * p.gamma.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
                s.exp()
            })
            .collect();
        let r = balance_residuals(&d, &t, &arms, &w);
        prop_assert!((eval.gradient - r).amax() <= 1e-12);
    }

    #[test]
    fn dual_is_convex((seed, n, kh, kg) in instance_strategy(4, 3)) {
        let mut rng = seeded(seed);
        let inst = random_instance(&mut rng, n, kh, kg);
        let (d, t) = inst.design();
        let theta = DVector::from_fn(2 * kh + kg, |_, _| rng.random_range(-1.0..1.0));
        let eval = dual_objective(&DualParams::unstack(&theta, kh, kg), &d, &t, &inst.arms(), 30.0);
        prop_assert!(!eval.capped);
        let h = &eval.hessian;
        prop_assert!((h - h.transpose()).amax() == 0.0);
        let min_eig = h.clone().symmetric_eigenvalues().min();
        prop_assert!(min_eig >= -1e-10, "min eigenvalue {}", min_eig);
    }

    #[test]
    fn one_step_equals_two_step((seed, n, kh, _kg) in instance_strategy(4, 0)) {
        let mut rng = seeded(seed);
        let inst = random_instance(&mut rng, n, kh.max(2), 0);
        let (d, t) = inst.design();
        let arms = inst.arms();
        let opts = SolverOptions::default();
        let two = solve_josey_two_step(&d, &t, &arms, &opts).unwrap();
        let (_, one) = solve_ebal_h_only(&d, &t, &arms, &opts).unwrap();
        prop_assert!(sup(two.weights.iter().zip(&one.weights).map(|(a, b)| a - b)) <= 1e-6);
    }

    #[test]
    fn standardization_does_not_change_weights((seed, n, kh, kg) in instance_strategy(4, 3)) {
        let mut rng = seeded(seed);
        let inst = random_instance(&mut rng, n, kh, kg);
        let opts = SolverOptions { tol: 1e-13, ..SolverOptions::default() };
        let solve = |mode| {
            let d = evaluate_basis_with(&inst.spec, &inst.sample, mode).unwrap();
            let t = align_target_summary(&inst.spec, &inst.raw_target, &d).unwrap();
            solve_extended(&d, &t, &inst.arms(), &opts).map(|(_, w)| w.weights)
        };
        let (a, b) = (solve(Standardize::Yes), solve(Standardize::No));
        prop_assume!(a.is_ok() && b.is_ok());
        let (a, b) = (a.unwrap(), b.unwrap());
        prop_assert!(sup(a.iter().zip(&b).map(|(x, y)| x - y)) <= 1e-10);
        let (ra, rb) = (raw_residuals(&inst, &a), raw_residuals(&inst, &b));
        prop_assert!(sup(ra.iter().zip(&rb).map(|(x, y)| x - y)) <= 1e-12);
    }

    #[test]
    fn outcome_location_and_scale_equivariance(
        (seed, n, kh, kg) in instance_strategy(3, 2),
        shift in -50.0f64..50.0,
        scale in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0],
    ) {
        let mut rng = seeded(seed);
        let inst = random_instance(&mut rng, n, kh.max(2), kg);
        let opts = EstimatorOptions::default();
        let y = inst.sample.outcome();
        let shifted = inst.sample.with_outcome(y.iter().map(|v| v + shift).collect()).unwrap();
        let scaled = inst.sample.with_outcome(y.iter().map(|v| v * scale).collect()).unwrap();
        for m in Estimator::ALL {
            let Ok(base) = estimate(m, &inst.sample, &inst.spec, &inst.raw_target, &opts) else { continue };
            let s = estimate(m, &shifted, &inst.spec, &inst.raw_target, &opts).unwrap();
            let c = estimate(m, &scaled, &inst.spec, &inst.raw_target, &opts).unwrap();
            let tol = 1e-9 * (1.0 + base.tau_hat.abs() + shift.abs());
            prop_assert!((s.tau_hat - base.tau_hat).abs() <= tol, "{m}: shift");
            prop_assert!((c.tau_hat - scale * base.tau_hat).abs() <= 1e-9 * (1.0 + (scale * base.tau_hat).abs()), "{m}: scale");
        }
    }

    #[test]
    fn treatment_label_symmetry((seed, n, kh, kg) in instance_strategy(3, 2)) {
        let mut rng = seeded(seed);
        let inst = random_instance(&mut rng, n, kh.max(2), kg);
        let opts = EstimatorOptions::default();
        let flipped = inst.sample.flip_treatment();
        let flipped = flipped.with_outcome(flipped.outcome().iter().map(|v| -v).collect()).unwrap();
        for m in Estimator::ALL {
            let (Ok(a), Ok(b)) = (
                estimate(m, &inst.sample, &inst.spec, &inst.raw_target, &opts),
                estimate(m, &flipped, &inst.spec, &inst.raw_target, &opts),
            ) else { continue };
            prop_assert!((a.tau_hat - b.tau_hat).abs() <= 1e-8 * (1.0 + a.tau_hat.abs()), "{m}: {} vs {}", a.tau_hat, b.tau_hat);
        }
    }

    #[test]
    fn normalized_weights_positive_with_arm_sums_n((seed, n, kh, kg) in instance_strategy(3, 2)) {
        let mut rng = seeded(seed);
        let inst = random_instance(&mut rng, n, kh.max(2), kg);
        let arms = inst.arms();
        for m in Estimator::ALL {
            let Ok(w) = estimator_weights(m, &inst.sample, &inst.spec, &inst.raw_target, &EstimatorOptions::default()) else { continue };
            prop_assert!(w.weights.normalized);
            prop_assert!(w.weights.weights.iter().all(|v| *v > 0.0 && v.is_finite()));
            let (t, c) = w.weights.arm_sums(&arms);
            prop_assert!((t - n as f64).abs() <= 1e-9 * n as f64 && (c - n as f64).abs() <= 1e-9 * n as f64);
        }
    }
}
