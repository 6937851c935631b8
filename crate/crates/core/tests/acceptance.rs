//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line each;
//! exits non-zero if any criterion fails.

mod common;

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use common::*;
use extbal::basis::evaluate_basis;
use extbal::estimators::{Estimator, EstimatorOptions};
use extbal::io::{self, CsvSchema, LoadedSource, LoadedTarget, ReportFormat};
use extbal::quadrature::CovariateLaw;
use extbal::simulation::{
    draw_replicate, run_grid, BaselineModel, CateModel, Expr, GridOptions, PropensityModel, ScenarioConfig,
};
use extbal::solver::{
    balance_residuals, dual_objective, solve_ebal_h_only, solve_extended, solve_josey_two_step, DualParams, SolverOptions,
};
use extbal::theory::{asymptotic_variance, OracleContext, TruthFunctions};
use extbal::BasisSpec;
use nalgebra::DVector;
use rand::Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = seeded(101);
    let opts = SolverOptions::default();
    let (mut worst_res, mut worst_grad) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(50..=500);
        let kh = rng.random_range(1..=4);
        let kg = rng.random_range(0..=3);
        let inst = random_instance(&mut rng, n, kh, kg);
        let (d, t) = inst.design();
        let arms = inst.arms();
        let (sol, ws) = solve_extended(&d, &t, &arms, &opts).map_err(|e| format!("solver failed: {e}"))?;
        worst_res = worst_res.max(sup(raw_residuals(&inst, &ws.weights)));
        let grad = dual_objective(&sol.params(), &d, &t, &arms, opts.score_cap).gradient;
        let resid = balance_residuals(&d, &t, &arms, &ws.weights);
        worst_grad = worst_grad.max((grad - resid).amax());
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        worst_res <= 1e-8 && worst_grad <= 1e-12 && secs < 10.0,
        format!("max residual {worst_res:.2e}, max |gradient − residual| {worst_grad:.2e}, {secs:.2}s"),
    )
}

fn criterion_2() -> Outcome {
    let mut rng = seeded(202);
    let opts = SolverOptions::default();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(50..=500);
        let kh = rng.random_range(2..=4);
        let inst = random_instance(&mut rng, n, kh, 0);
        let (d, t) = inst.design();
        let arms = inst.arms();
        let two = solve_josey_two_step(&d, &t, &arms, &opts).map_err(|e| format!("two-step failed: {e}"))?;
        let (_, one) = solve_ebal_h_only(&d, &t, &arms, &opts).map_err(|e| format!("one-step failed: {e}"))?;
        worst = worst.max(sup(two.weights.iter().zip(&one.weights).map(|(a, b)| a - b)));
    }
    check(worst <= 1e-6, format!("max weight difference {worst:.2e}"))
}

fn criterion_3() -> Outcome {
    let mut rng = seeded(303);
    let opts = SolverOptions::default();
    let mut worst = 0.0f64;
    let mut done = 0;
    let mut skipped = 0;
    while done < 20 {
        let n = rng.random_range(20..=30);
        let kh = rng.random_range(1..=3);
        let kg = rng.random_range(0..=2);
        let inst = random_instance(&mut rng, n, kh, kg);
        let (d, t) = inst.design();
        // near-infeasible draws are not comparable; both solvers must succeed
        let Ok((_, ws)) = solve_extended(&d, &t, &inst.arms(), &opts) else {
            skipped += 1;
            continue;
        };
        let primal = primal_extended(&inst).ok_or("primal solver failed on a dual-feasible instance")?;
        worst = worst.max(sup(ws.weights.iter().zip(&primal).map(|(a, b)| a - b)));
        done += 1;
    }
    check(worst <= 1e-5, format!("max weight difference {worst:.2e} over 20 instances ({skipped} infeasible draws skipped)"))
}

fn criterion_4() -> Outcome {
    let mut rng = seeded(404);
    let (mut worst_g, mut worst_h) = (0.0f64, 0.0f64);
    for _ in 0..20 {
        let n = rng.random_range(50..=300);
        let kh = rng.random_range(1..=4);
        let kg = rng.random_range(0..=3);
        let inst = random_instance(&mut rng, n, kh, kg);
        let (d, t) = inst.design();
        let arms = inst.arms();
        let theta = DVector::from_fn(2 * kh + kg, |_, _| rng.random_range(-0.5..0.5));
        let params = |x: &DVector<f64>| DualParams::unstack(x, kh, kg);
        let eval = dual_objective(&params(&theta), &d, &t, &arms, 30.0);
        let fd_g = central_gradient(|x| dual_objective(&params(x), &d, &t, &arms, 30.0).value, &theta, 1e-5);
        let fd_h = central_jacobian(|x| dual_objective(&params(x), &d, &t, &arms, 30.0).gradient, &theta, 1e-5);
        worst_g = worst_g.max((eval.gradient - fd_g).amax());
        worst_h = worst_h.max((eval.hessian - fd_h).amax());
    }
    check(worst_g <= 1e-6 && worst_h <= 1e-6, format!("max gradient error {worst_g:.2e}, max Hessian error {worst_h:.2e}"))
}

const PATTERN_SEED: u64 = 20240601;

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let mut configs = Vec::new();
    for p in [PropensityModel::P1, PropensityModel::P2, PropensityModel::P3] {
        for t in [CateModel::T1, CateModel::T2] {
            configs.push(ScenarioConfig::builtin(p.clone(), t, BaselineModel::M1));
        }
    }
    let opts = GridOptions { jobs: 0, master_seed: Some(PATTERN_SEED), estimator: EstimatorOptions::default() };
    let reports = run_grid(&configs, &Estimator::ALL, &opts).map_err(|e| e.to_string())?;
    let get = |scenario: &str, m: Estimator| {
        reports.iter().find(|r| r.scenario == scenario).and_then(|r| r.method(m)).cloned().expect("scenario present")
    };
    let mut failures = Vec::new();
    let mut notes = Vec::new();
    let p1 = |m| get("P1-T1-M1", m);
    let (eb, ex, ipw) = (p1(Estimator::Ebal), p1(Estimator::Extended), p1(Estimator::Ipw));
    notes.push(format!(
        "P1-T1-M1 bias ebal {:.4} extended {:.4} ipw {:.4}; sd extended {:.4} ebal {:.4}",
        eb.bias, ex.bias, ipw.bias, ex.sd, eb.sd
    ));
    if eb.bias.abs() > 0.03 || ex.bias.abs() > 0.03 || ipw.bias.abs() < 0.05 || ex.sd >= eb.sd {
        failures.push("(i)");
    }
    for s in ["P2-T1-M1", "P3-T1-M1"] {
        let (ex, eb) = (get(s, Estimator::Extended), get(s, Estimator::Ebal));
        notes.push(format!("{s} bias extended {:.4} ebal {:.4}", ex.bias, eb.bias));
        if ex.bias.abs() > 0.04 || eb.bias.abs() < 2.0 * ex.bias.abs() {
            failures.push("(ii)");
        }
    }
    for r in &reports {
        let (ex, et) = (r.method(Estimator::Extended).unwrap(), r.method(Estimator::IpwEt).unwrap());
        if ex.rmse > et.rmse {
            failures.push("(iii)");
            notes.push(format!("{} rmse extended {:.4} > ipw_et {:.4}", r.scenario, ex.rmse, et.rmse));
        }
        let failed: usize = r.methods.iter().map(|m| m.failures).sum();
        if failed > 0 {
            notes.push(format!("{}: {failed} failed fits", r.scenario));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if secs > 900.0 {
        failures.push("runtime");
    }
    notes.push(format!("{secs:.1}s"));
    check(failures.is_empty(), format!("{}{}", failures.join(" "), notes.join("; ")))
}

fn criterion_6() -> Outcome {
    let mut config = ScenarioConfig::builtin(PropensityModel::P2, CateModel::T1, BaselineModel::M1);
    config.n = 100_000;
    let rep = draw_replicate(&config, 606).map_err(|e| e.to_string())?;
    let design = evaluate_basis(&config.basis, &rep.source).map_err(|e| e.to_string())?;
    let target = extbal::basis::align_target_summary(&config.basis, &rep.target_means, &design).map_err(|e| e.to_string())?;
    let (sol, _) = solve_extended(&design, &target, &rep.source.arms(), &SolverOptions::default()).map_err(|e| e.to_string())?;
    let raw = sol.to_raw(&design);
    let truth = config.truth();
    let grid = config.covariates.default_grid();
    let ctx = OracleContext::new(&truth, &config.basis, &grid).map_err(|e| e.to_string())?;
    let limit = ctx.limiting_dual().dual_limits();
    let dist = raw.sup_distance(&limit);
    check(dist <= 0.05, format!("n_s = {}, sup distance to the limits {dist:.4}", rep.source.n()))
}

fn criterion_7() -> Outcome {
    // (a) Monte Carlo variance against the formula
    let mut config = ScenarioConfig::builtin(PropensityModel::P2, CateModel::T1, BaselineModel::M1);
    config.n = 20_000;
    config.replicates = 2_000;
    let opts = GridOptions { jobs: 0, master_seed: Some(707), estimator: EstimatorOptions::default() };
    let report = run_grid(std::slice::from_ref(&config), &[Estimator::Extended], &opts).map_err(|e| e.to_string())?;
    let summary = &report[0].methods[0];
    let mc = config.n as f64 * summary.sd.powi(2);
    let theory = asymptotic_variance(&config.truth(), &config.basis, &config.covariates.default_grid()).map_err(|e| e.to_string())?;
    let rel = (mc - theory.total).abs() / theory.total;

    // (b) conditions (a), (b), (c) all hold: participation built from the tilted form
    let law = CovariateLaw::Uniform { low: -2.0, high: 2.0, dim: 5 };
    let eta = PropensityModel::P2.expr();
    let lam = [0.1, 0.3, -0.2, 0.25];
    let gamma_half = [0.2 / 2.0, -0.7 / 2.0];
    let eta_r = eta.clone();
    let rho = Arc::new(move |x: &[f64]| {
        let e = eta_r.eval(x);
        let tilt = lam[0] + lam[1] * x[0] + lam[2] * x[1] + lam[3] * x[2] + gamma_half[0] * x[3] + gamma_half[1] * x[4];
        1.0 / (1.0 + tilt.exp() / (1.0 + e.exp()))
    });
    let baseline = Expr::linear(&[(0, 0.5), (1, 0.3), (2, 0.3)]);
    let tau = CateModel::T1.expr();
    let truth = TruthFunctions::from_baseline(
        law,
        Arc::new(move |x: &[f64]| 1.0 / (1.0 + (-eta.eval(x)).exp())),
        rho,
        Arc::new(move |x: &[f64]| baseline.eval(x)),
        Arc::new(move |x: &[f64]| tau.eval(x)),
        1.0,
    );
    let spec = BasisSpec::linear(&[0, 1, 2], &[3, 4]).unwrap();
    let r = asymptotic_variance(&truth, &spec, &law.default_grid()).map_err(|e| e.to_string())?;
    let cond = r.conditions.a && r.conditions.b && r.conditions.c;
    let bound_rel = (r.total - r.efficiency_bound).abs() / r.efficiency_bound;
    check(
        rel <= 0.15 && cond && r.v3.abs() <= 1e-8 * r.total && bound_rel <= 0.01,
        format!(
            "MC n·Var {mc:.3} vs formula {:.3} (rel {rel:.3}, {} failures); constructed case V3 {:.1e}, total {:.4} vs bound {:.4} (rel {bound_rel:.1e}), conditions a/b/c {}/{}/{}",
            theory.total, summary.failures, r.v3, r.total, r.efficiency_bound, r.conditions.a, r.conditions.b, r.conditions.c
        ),
    )
}

fn run_cli(args: &[&str]) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_extbal")).args(args).output().expect("binary runs").status.code().unwrap_or(-1)
}

fn criterion_8() -> Outcome {
    let mut problems = Vec::new();

    let mut configs = vec![
        ScenarioConfig::builtin(PropensityModel::P1, CateModel::T2, BaselineModel::M2),
        ScenarioConfig::builtin(PropensityModel::P3, CateModel::T1, BaselineModel::M1),
    ];
    configs.iter_mut().for_each(|c| c.replicates = 48);
    let renders: Vec<(String, String)> = [1usize, 4, 16]
        .iter()
        .map(|&jobs| {
            let opts = GridOptions { jobs, master_seed: Some(808), estimator: EstimatorOptions::default() };
            let r = run_grid(&configs, &Estimator::ALL, &opts).expect("grid runs");
            (io::render_grid(&r, ReportFormat::Json, 1.0), io::render_replicates(&r))
        })
        .collect();
    if renders.iter().any(|r| r != &renders[0]) {
        problems.push("grid output depends on jobs".to_string());
    }

    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = ScenarioConfig::builtin(PropensityModel::P2, CateModel::T1, BaselineModel::M1);
    let rep = draw_replicate(&config, 11).map_err(|e| e.to_string())?;
    let schema = CsvSchema::default();
    let src = LoadedSource { sample: rep.source.clone(), levels: Default::default() };
    let csv_path = dir.path().join("source.csv");
    io::write_source_csv(&src, &schema, &csv_path).map_err(|e| e.to_string())?;
    if io::load_source_csv(&csv_path, &schema).map_err(|e| e.to_string())? != src {
        problems.push("CSV round trip changed values".into());
    }
    let names = rep.source.names().to_vec();
    let target = LoadedTarget { values: rep.target_means.clone(), n_t: Some(rep.n_t as f64), labels: config.basis.h_labels(&names) };
    let t_path = dir.path().join("target.json");
    std::fs::write(&t_path, io::target_summary_json(&target)).map_err(|e| e.to_string())?;
    if io::load_target_summary(&t_path, &config.basis, &names).map_err(|e| e.to_string())? != target {
        problems.push("target summary round trip changed values".into());
    }
    let scen_path = dir.path().join("scenario.json");
    std::fs::write(&scen_path, serde_json::to_string(&config).unwrap()).unwrap();
    if io::load_scenarios(&scen_path).map_err(|e| e.to_string())? != vec![config.clone()] {
        problems.push("scenario round trip changed values".into());
    }

    let s = csv_path.to_str().unwrap();
    let t = t_path.to_str().unwrap();
    let basis = "H: x1, x2, x3; G: x4, x5";
    let p = |name: &str| dir.path().join(name);
    std::fs::write(p("bad_treat.csv"), "x1,treatment,outcome\n1,2,0\n").unwrap();
    std::fs::write(p("extreme.json"), r#"{"const":1,"x1":50,"x2":0,"x3":0}"#).unwrap();
    std::fs::write(p("unknown.json"), r#"{"x1":0,"x2":0,"x3":0,"x9":1}"#).unwrap();
    let blocker = p("blocker");
    std::fs::write(&blocker, "").unwrap();
    let out_blocked = blocker.join("sub");
    let cases: Vec<(&str, Vec<String>, i32)> = vec![
        ("success", vec!["estimate", "--source", s, "--target-summary", t, "--basis", basis].into_iter().map(String::from).collect(), 0),
        ("bad flag", vec!["estimate".into(), "--bogus".into()], 2),
        ("missing file", vec!["estimate", "--source", "/nonexistent.csv", "--target-summary", t, "--basis", basis].into_iter().map(String::from).collect(), 2),
        (
            "non-binary treatment",
            vec!["estimate".into(), "--source".into(), p("bad_treat.csv").display().to_string(), "--target-summary".into(), t.into(), "--basis".into(), "H: x1".into()],
            2,
        ),
        ("unknown term", vec!["estimate".into(), "--source".into(), s.into(), "--target-summary".into(), p("unknown.json").display().to_string(), "--basis".into(), basis.into()], 2),
        ("empty methods", vec!["estimate", "--source", s, "--target-summary", t, "--basis", basis, "--methods", ""].into_iter().map(String::from).collect(), 2),
        (
            "non-convergence",
            vec!["estimate".into(), "--source".into(), s.into(), "--target-summary".into(), p("extreme.json").display().to_string(), "--basis".into(), basis.into(), "--methods".into(), "extended".into()],
            3,
        ),
        (
            "unwritable output",
            vec!["estimate".into(), "--source".into(), s.into(), "--target-summary".into(), t.into(), "--basis".into(), basis.into(), "--out".into(), out_blocked.display().to_string()],
            4,
        ),
    ];
    for (name, args, want) in &cases {
        let argv: Vec<&str> = args.iter().map(String::as_str).collect();
        let got = run_cli(&argv);
        if got != *want {
            problems.push(format!("CLI {name}: exit {got}, expected {want}"));
        }
    }
    if Path::new(&out_blocked).exists() {
        problems.push("output created despite error".into());
    }
    check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("jobs 1/4/16 identical, CSV/JSON round trips exact, {} CLI exit codes as documented", cases.len())
        } else {
            problems.join("; ")
        },
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 8] = [
        ("dual-primal residuals", criterion_1),
        ("one-step/two-step equivalence", criterion_2),
        ("primal oracle agreement", criterion_3),
        ("gradient/Hessian finite differences", criterion_4),
        ("simulation pattern", criterion_5),
        ("finite-sample duals near their limits", criterion_6),
        ("asymptotic variance", criterion_7),
        ("determinism, round trips, exit codes", criterion_8),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {}: {name} ({detail}) [{secs:.1}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {}: {name} ({detail}) [{secs:.1}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
