use extbal::estimators::{estimate, Estimator, EstimatorOptions};
use extbal::simulation::{
    draw_replicate, psi, psi_split, replicate_seed, run_grid, scenario_key, BaselineModel, CateModel, GridOptions,
    PropensityModel, ScenarioConfig,
};

#[test]
fn source_sizes_stay_in_range() {
    let config = ScenarioConfig::builtin(PropensityModel::P2, CateModel::T2, BaselineModel::M2);
    let key = scenario_key(&config.name);
    let sizes: Vec<usize> =
        (0..400).map(|r| draw_replicate(&config, replicate_seed(11, key, r)).unwrap().source.n()).collect();
    let mean = sizes.iter().sum::<usize>() as f64 / sizes.len() as f64;
    assert!(sizes.iter().all(|&n| (320..=450).contains(&n)), "{sizes:?}");
    assert!((370.0..=410.0).contains(&mean), "mean {mean}");
}

#[test]
fn holdout_rows_never_reach_the_estimators() {
    let config = ScenarioConfig::builtin(PropensityModel::P1, CateModel::T1, BaselineModel::M2);
    let rep = draw_replicate(&config, 77).unwrap();
    let mut corrupted = rep.clone();
    corrupted.holdout.fill(f64::NAN);
    let opts = EstimatorOptions::default();
    for m in Estimator::ALL {
        let a = estimate(m, &rep.source, &config.basis, &rep.target_means, &opts).unwrap();
        let b = estimate(m, &corrupted.source, &config.basis, &corrupted.target_means, &opts).unwrap();
        assert_eq!(a.tau_hat.to_bits(), b.tau_hat.to_bits(), "{m}");
    }
}

#[test]
fn target_means_summarize_the_holdout() {
    let config = ScenarioConfig::builtin(PropensityModel::P2, CateModel::T1, BaselineModel::M1);
    let rep = draw_replicate(&config, 5).unwrap();
    assert_eq!(rep.holdout.nrows(), rep.n_t);
    assert_eq!(rep.source.n() + rep.n_t, config.n);
    for (k, col) in [0usize, 1, 2].into_iter().enumerate() {
        let mean = rep.holdout.column(col).mean();
        assert!((rep.target_means[k + 1] - mean).abs() < 1e-12);
    }
}

#[test]
fn replicates_are_reproducible_and_distinct() {
    let config = ScenarioConfig::builtin(PropensityModel::P1, CateModel::T1, BaselineModel::M1);
    let a = draw_replicate(&config, 9).unwrap();
    let b = draw_replicate(&config, 9).unwrap();
    let c = draw_replicate(&config, 10).unwrap();
    assert_eq!(a.source.outcome(), b.source.outcome());
    assert_ne!(a.source.outcome(), c.source.outcome());
}

#[test]
fn tiny_scenarios_redraw_degenerate_samples() {
    let mut config = ScenarioConfig::builtin(PropensityModel::P1, CateModel::T1, BaselineModel::M1);
    config.n = 4;
    let redraws: usize = (0..50).map(|s| draw_replicate(&config, s).map(|r| r.redraws).unwrap_or(0)).sum();
    assert!(redraws > 0);
    for s in 0..50 {
        if let Ok(r) = draw_replicate(&config, s) {
            let arms = r.source.arms();
            assert!(!arms.treated.is_empty() && !arms.control.is_empty() && r.n_t > 0);
        }
    }
}

#[test]
fn grid_reports_are_independent_of_scenario_order() {
    let mut a = ScenarioConfig::builtin(PropensityModel::P1, CateModel::T1, BaselineModel::M1);
    let mut b = ScenarioConfig::builtin(PropensityModel::P2, CateModel::T2, BaselineModel::M2);
    a.replicates = 6;
    b.replicates = 6;
    let opts = GridOptions { jobs: 2, master_seed: Some(3), ..GridOptions::default() };
    let methods = [Estimator::Ebal, Estimator::Extended];
    let forward = run_grid(&[a.clone(), b.clone()], &methods, &opts).unwrap();
    let backward = run_grid(&[b, a], &methods, &opts).unwrap();
    assert_eq!(forward[0], backward[1]);
    assert_eq!(forward[1], backward[0]);
}

#[test]
fn extended_is_nearly_unbiased_on_a_linear_scenario() {
    let mut config = ScenarioConfig::builtin(PropensityModel::P1, CateModel::T1, BaselineModel::M1);
    config.replicates = 200;
    let opts = GridOptions { jobs: 0, master_seed: Some(12), ..GridOptions::default() };
    let report = run_grid(&[config], &[Estimator::Extended], &opts).unwrap();
    let s = report[0].method(Estimator::Extended).unwrap();
    let se = s.sd / (s.successes as f64).sqrt();
    assert!(s.bias.abs() <= 4.0 * se, "bias {} se {se}", s.bias);
}

#[test]
fn psi_split_follows_its_probabilities() {
    assert!((psi(0.0) - 0.5).abs() < 1e-15);
    assert!(psi(-40.0) >= 0.1 && psi(40.0) <= 0.9);
    let scores = vec![1.0; 100_000];
    let share = psi_split(&scores, 1.0, 4).iter().filter(|&&s| s).count() as f64 / 1e5;
    assert!((share - psi(1.0)).abs() < 0.005);
    assert_eq!(psi_split(&scores[..100], 0.5, 8), psi_split(&scores[..100], 0.5, 8));
}
