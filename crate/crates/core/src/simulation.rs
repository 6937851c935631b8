//! Monte Carlo study: covariate-shift scenarios, replicate generation, and
//! bias/RMSE aggregation of the compared estimators.
//!
//! Covariates are drawn from the configured law, participation `S` from
//! `logistic(participation(x))`, treatment within the source from
//! `logistic(propensity(x))`, and outcomes as `m(x) + (A − ½)τ(x) + σε`. Only
//! the H means of the `S = 0` rows reach the estimators.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::BasisSpec;
use crate::data::SourceSample;
use crate::estimators::{estimate, logistic, EstimatorOptions, Estimator};
use crate::quadrature::{CovariateLaw, IntegrationGrid};
use crate::theory::TruthFunctions;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("scenario `{scenario}`: no usable replicate after {attempts} draws")]
    Degenerate { scenario: String, attempts: usize },
    #[error("scenario `{0}`: {1}")]
    Invalid(String, String),
    #[error("could not build worker pool: {0}")]
    Pool(String),
}

/// One term of a model expression. Variable indices are 0-based (`var: 0` is x₁).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExprTerm {
    Linear { var: usize, coef: f64 },
    Square { var: usize, coef: f64 },
    /// `coef · max(x_a, x_b)`
    Max { a: usize, b: usize, coef: f64 },
    /// `coef · exp(intercept + Σ w_j x_j)`
    Exp {
        coef: f64,
        #[serde(default)]
        intercept: f64,
        weights: Vec<(usize, f64)>,
    },
}

impl ExprTerm {
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ExprTerm::Linear { var, coef } => coef * x[*var],
            ExprTerm::Square { var, coef } => coef * x[*var] * x[*var],
            ExprTerm::Max { a, b, coef } => coef * x[*a].max(x[*b]),
            ExprTerm::Exp { coef, intercept, weights } => {
                coef * (intercept + weights.iter().map(|(j, w)| w * x[*j]).sum::<f64>()).exp()
            }
        }
    }

    fn max_var(&self) -> usize {
        match self {
            ExprTerm::Linear { var, .. } | ExprTerm::Square { var, .. } => *var,
            ExprTerm::Max { a, b, .. } => *a.max(b),
            ExprTerm::Exp { weights, .. } => weights.iter().map(|(j, _)| *j).max().unwrap_or(0),
        }
    }
}

/// Scalar function of the covariates: intercept plus a sum of terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Expr {
    #[serde(default)]
    pub intercept: f64,
    pub terms: Vec<ExprTerm>,
}

impl Expr {
    pub fn linear(coefs: &[(usize, f64)]) -> Self {
        Expr { intercept: 0.0, terms: coefs.iter().map(|&(var, coef)| ExprTerm::Linear { var, coef }).collect() }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.intercept + self.terms.iter().map(|t| t.eval(x)).sum::<f64>()
    }

    fn max_var(&self) -> Option<usize> {
        self.terms.iter().map(ExprTerm::max_var).max()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PropensityModel {
    P1,
    P2,
    P3,
    #[serde(rename = "custom")]
    Custom(Expr),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum CateModel {
    T1,
    T2,
    #[serde(rename = "custom")]
    Custom(Expr),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BaselineModel {
    M1,
    M2,
    #[serde(rename = "custom")]
    Custom(Expr),
}

impl PropensityModel {
    /// Logit of π(x).
    pub fn expr(&self) -> Expr {
        match self {
            PropensityModel::P1 => Expr::linear(&[(1, 0.7), (2, 0.5)]),
            PropensityModel::P2 => Expr::linear(&[(1, 0.35), (2, 0.25), (3, 0.2), (4, -0.7)]),
            PropensityModel::P3 => Expr {
                intercept: 0.0,
                terms: vec![
                    ExprTerm::Linear { var: 1, coef: 0.35 },
                    ExprTerm::Max { a: 2, b: 3, coef: -0.4 },
                    ExprTerm::Linear { var: 4, coef: -0.7 },
                ],
            },
            PropensityModel::Custom(e) => e.clone(),
        }
    }

    fn tag(&self) -> &str {
        match self {
            PropensityModel::P1 => "P1",
            PropensityModel::P2 => "P2",
            PropensityModel::P3 => "P3",
            PropensityModel::Custom(_) => "Pc",
        }
    }
}

impl CateModel {
    pub fn expr(&self) -> Expr {
        match self {
            CateModel::T1 => Expr::linear(&[(0, 1.0), (1, -0.6), (2, -0.4)]),
            CateModel::T2 => Expr {
                intercept: 0.0,
                terms: vec![
                    ExprTerm::Linear { var: 0, coef: 1.0 },
                    ExprTerm::Exp { coef: -0.5, intercept: 0.0, weights: vec![(1, 1.0), (2, -0.5)] },
                ],
            },
            CateModel::Custom(e) => e.clone(),
        }
    }

    fn tag(&self) -> &str {
        match self {
            CateModel::T1 => "T1",
            CateModel::T2 => "T2",
            CateModel::Custom(_) => "Tc",
        }
    }
}

impl BaselineModel {
    pub fn expr(&self) -> Expr {
        match self {
            BaselineModel::M1 => Expr::linear(&[(0, 0.5), (1, 0.3), (2, 0.3), (3, -0.4), (4, -0.5)]),
            BaselineModel::M2 => Expr {
                intercept: 0.0,
                terms: vec![
                    ExprTerm::Linear { var: 0, coef: 0.5 },
                    ExprTerm::Square { var: 1, coef: 0.3 },
                    ExprTerm::Exp { coef: 0.2, intercept: -1.0, weights: vec![(2, 1.0), (3, -1.0)] },
                    ExprTerm::Linear { var: 4, coef: -0.5 },
                ],
            },
            BaselineModel::Custom(e) => e.clone(),
        }
    }

    fn tag(&self) -> &str {
        match self {
            BaselineModel::M1 => "M1",
            BaselineModel::M2 => "M2",
            BaselineModel::Custom(_) => "Mc",
        }
    }
}

fn default_law() -> CovariateLaw {
    CovariateLaw::Uniform { low: -2.0, high: 2.0, dim: 5 }
}

/// logit ρ(x) = 0.4x₁ + 0.3x₂ − 0.2x₄
pub fn default_participation() -> Expr {
    Expr::linear(&[(0, 0.4), (1, 0.3), (3, -0.2)])
}

/// H = (1, x₁, x₂, x₃), G = (x₄, x₅)
pub fn default_basis() -> BasisSpec {
    BasisSpec::linear(&[0, 1, 2], &[3, 4]).expect("default basis is valid")
}

fn default_noise() -> f64 {
    1.0
}
fn default_n() -> usize {
    800
}
fn default_replicates() -> usize {
    400
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    #[serde(default = "default_law")]
    pub covariates: CovariateLaw,
    /// Logit of the participation probability ρ(x).
    #[serde(default = "default_participation")]
    pub participation: Expr,
    pub propensity: PropensityModel,
    pub cate: CateModel,
    pub baseline: BaselineModel,
    #[serde(default = "default_noise")]
    pub noise_sd: f64,
    /// Total sample size (source plus target).
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_basis")]
    pub basis: BasisSpec,
}

impl ScenarioConfig {
    pub fn builtin(propensity: PropensityModel, cate: CateModel, baseline: BaselineModel) -> Self {
        let name = format!("{}-{}-{}", propensity.tag(), cate.tag(), baseline.tag());
        ScenarioConfig {
            name,
            covariates: default_law(),
            participation: default_participation(),
            propensity,
            cate,
            baseline,
            noise_sd: 1.0,
            n: 800,
            replicates: 400,
            seed: 0,
            basis: default_basis(),
        }
    }

    /// All twelve (P, T, M) combinations.
    pub fn builtin_grid() -> Vec<Self> {
        let mut out = Vec::new();
        for p in [PropensityModel::P1, PropensityModel::P2, PropensityModel::P3] {
            for t in [CateModel::T1, CateModel::T2] {
                for m in [BaselineModel::M1, BaselineModel::M2] {
                    out.push(ScenarioConfig::builtin(p.clone(), t.clone(), m));
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let p = self.covariates.dim();
        let bad = |msg: String| Err(SimError::Invalid(self.name.clone(), msg));
        for (what, e) in [
            ("participation", &self.participation),
            ("propensity", &self.propensity.expr()),
            ("cate", &self.cate.expr()),
            ("baseline", &self.baseline.expr()),
        ] {
            if let Some(j) = e.max_var() {
                if j >= p {
                    return bad(format!("{what} model uses covariate index {j} but dimension is {p}"));
                }
            }
        }
        if let Some(j) = self.basis.max_column() {
            if j >= p {
                return bad(format!("basis uses covariate index {j} but dimension is {p}"));
            }
        }
        if self.n < 4 {
            return bad("total sample size must be at least 4".into());
        }
        if !(self.noise_sd >= 0.0) {
            return bad("noise_sd must be non-negative".into());
        }
        Ok(())
    }

    pub fn truth(&self) -> TruthFunctions {
        let (pe, re, me, te) = (self.propensity.expr(), self.participation.clone(), self.baseline.expr(), self.cate.expr());
        TruthFunctions::from_baseline(
            self.covariates,
            Arc::new(move |x| logistic(pe.eval(x))),
            Arc::new(move |x| logistic(re.eval(x))),
            Arc::new(move |x| me.eval(x)),
            Arc::new(move |x| te.eval(x)),
            self.noise_sd * self.noise_sd,
        )
    }
}

/// τ* = E[τ(X) | S = 0] on the given grid.
pub fn true_target_ate_on(config: &ScenarioConfig, grid: &IntegrationGrid) -> f64 {
    let rho = &config.participation;
    let tau = config.cate.expr();
    let num = grid.expect(|x| (1.0 - logistic(rho.eval(x))) * tau.eval(x));
    let den = grid.expect(|x| 1.0 - logistic(rho.eval(x)));
    num / den
}

pub fn true_target_ate(config: &ScenarioConfig) -> f64 {
    true_target_ate_on(config, &config.covariates.default_grid())
}

/// One simulated data set, split into what the estimators may see and the
/// held-out target rows.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub source: SourceSample,
    /// Raw target means of the H terms, constant first.
    pub target_means: Vec<f64>,
    pub n_t: usize,
    /// Covariates of the target rows; never passed to estimators.
    pub holdout: DMatrix<f64>,
    /// Number of discarded degenerate draws before this one.
    pub redraws: usize,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable 64-bit key of a scenario name (FNV-1a).
pub fn scenario_key(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed for one replicate, independent of scheduling order.
pub fn replicate_seed(master: u64, scenario: u64, replicate: u64) -> u64 {
    splitmix(splitmix(splitmix(master) ^ scenario) ^ replicate)
}

const MAX_REDRAWS: usize = 100;

fn draw_covariate(rng: &mut ChaCha8Rng, law: &CovariateLaw) -> f64 {
    match *law {
        CovariateLaw::Uniform { low, high, .. } => rng.random_range(low..high),
        CovariateLaw::Normal { .. } => rng.sample(StandardNormal),
    }
}

/// Draws one replicate; degenerate draws (empty arm or empty target) are
/// redrawn with the next sub-seed.
pub fn draw_replicate(config: &ScenarioConfig, seed: u64) -> Result<Replicate, SimError> {
    config.validate()?;
    let p = config.covariates.dim();
    let (pe, te, me) = (config.propensity.expr(), config.cate.expr(), config.baseline.expr());
    for attempt in 0..MAX_REDRAWS {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix(seed ^ (attempt as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)));
        let mut src_x = Vec::new();
        let mut tgt_x = Vec::new();
        let mut a = Vec::new();
        let mut y = Vec::new();
        let mut x = vec![0.0; p];
        for _ in 0..config.n {
            for v in x.iter_mut() {
                *v = draw_covariate(&mut rng, &config.covariates);
            }
            let in_source = rng.random_bool(logistic(config.participation.eval(&x)));
            let treated = rng.random_bool(logistic(pe.eval(&x)));
            let eps: f64 = rng.sample(StandardNormal);
            if in_source {
                let ai = if treated { 1.0 } else { 0.0 };
                y.push(me.eval(&x) + (ai - 0.5) * te.eval(&x) + config.noise_sd * eps);
                a.push(treated);
                src_x.extend_from_slice(&x);
            } else {
                tgt_x.extend_from_slice(&x);
            }
        }
        let n_s = a.len();
        let n_t = config.n - n_s;
        let n_treated = a.iter().filter(|&&t| t).count();
        if n_t == 0 || n_treated == 0 || n_treated == n_s {
            continue;
        }
        let holdout = DMatrix::from_row_slice(n_t, p, &tgt_x);
        let mut target_means = vec![0.0; config.basis.h_len()];
        for row in tgt_x.chunks_exact(p) {
            for (k, v) in config.basis.eval_h(row).into_iter().enumerate() {
                target_means[k] += v;
            }
        }
        for m in target_means.iter_mut() {
            *m /= n_t as f64;
        }
        target_means[0] = 1.0;
        let source = SourceSample::new(DMatrix::from_row_slice(n_s, p, &src_x), a, y)
            .map_err(|e| SimError::Invalid(config.name.clone(), e.to_string()))?;
        return Ok(Replicate { source, target_means, n_t, holdout, redraws: attempt });
    }
    Err(SimError::Degenerate { scenario: config.name.clone(), attempts: MAX_REDRAWS })
}

/// Ψ(z) = 0.8 Φ(z) + 0.1, a selection probability bounded in [0.1, 0.9].
pub fn psi(z: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    0.8 * Normal::standard().cdf(z) + 0.1
}

/// Marks each unit as a source member with probability Ψ(κ·score_i); the
/// remaining units form the target. Deterministic given `seed`.
pub fn psi_split(scores: &[f64], kappa: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    scores.iter().map(|&z| rng.random_bool(psi(kappa * z))).collect()
}

/// Five-number summary with 1.5·IQR whiskers and outliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub lower_whisker: f64,
    pub upper_whisker: f64,
    pub outliers: Vec<f64>,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl BoxplotStats {
    pub fn from_values(values: &[f64]) -> Self {
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        let (q1, q3) = (quantile(&s, 0.25), quantile(&s, 0.75));
        let iqr = q3 - q1;
        let (lo_fence, hi_fence) = (q1 - 1.5 * iqr, q3 + 1.5 * iqr);
        let inside: Vec<f64> = s.iter().copied().filter(|v| *v >= lo_fence && *v <= hi_fence).collect();
        BoxplotStats {
            min: s.first().copied().unwrap_or(f64::NAN),
            q1,
            median: quantile(&s, 0.5),
            q3,
            max: s.last().copied().unwrap_or(f64::NAN),
            lower_whisker: inside.first().copied().unwrap_or(f64::NAN),
            upper_whisker: inside.last().copied().unwrap_or(f64::NAN),
            outliers: s.iter().copied().filter(|v| *v < lo_fence || *v > hi_fence).collect(),
        }
    }
}

/// Aggregates of one estimator's errors `τ̂ − τ*` over successful replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Estimator,
    pub successes: usize,
    pub failures: usize,
    pub bias: f64,
    pub sd: f64,
    pub rmse: f64,
    pub boxplot: BoxplotStats,
}

impl MethodSummary {
    /// `sd` uses the divide-by-count convention so that rmse² = bias² + sd².
    pub fn from_errors(method: Estimator, errors: &[f64], failures: usize) -> Self {
        let k = errors.len() as f64;
        let bias = errors.iter().sum::<f64>() / k;
        let sd = (errors.iter().map(|e| (e - bias).powi(2)).sum::<f64>() / k).sqrt();
        let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / k).sqrt();
        MethodSummary { method, successes: errors.len(), failures, bias, sd, rmse, boxplot: BoxplotStats::from_values(errors) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub n_s: usize,
    /// One entry per method, in the report's method order; `None` marks a failure.
    pub errors: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateReport {
    pub scenario: String,
    pub tau_star: f64,
    pub replicates: usize,
    pub n_s_min: usize,
    pub n_s_max: usize,
    pub n_s_mean: f64,
    pub redraws: usize,
    pub methods: Vec<MethodSummary>,
    pub records: Vec<ReplicateRecord>,
}

impl ReplicateReport {
    pub fn method(&self, m: Estimator) -> Option<&MethodSummary> {
        self.methods.iter().find(|s| s.method == m)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GridOptions {
    /// Worker threads; 0 uses the rayon default.
    pub jobs: usize,
    /// Overrides every scenario's own seed when set.
    pub master_seed: Option<u64>,
    pub estimator: EstimatorOptions,
}

struct Outcome {
    n_s: usize,
    redraws: usize,
    estimates: Vec<Option<f64>>,
}

fn run_one(config: &ScenarioConfig, seed: u64, methods: &[Estimator], opts: &EstimatorOptions) -> Result<Outcome, SimError> {
    let rep = draw_replicate(config, seed)?;
    let estimates = methods
        .iter()
        .map(|&m| estimate(m, &rep.source, &config.basis, &rep.target_means, opts).ok().map(|r| r.tau_hat))
        .collect();
    Ok(Outcome { n_s: rep.source.n(), redraws: rep.redraws, estimates })
}

/// Runs every scenario's replicates for the given estimators. Results are
/// bit-identical for any `jobs` value.
pub fn run_grid(configs: &[ScenarioConfig], methods: &[Estimator], opts: &GridOptions) -> Result<Vec<ReplicateReport>, SimError> {
    for c in configs {
        c.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.jobs).build().map_err(|e| SimError::Pool(e.to_string()))?;
    let mut reports = Vec::with_capacity(configs.len());
    for config in configs {
        let tau_star = true_target_ate(config);
        let master = opts.master_seed.unwrap_or(config.seed);
        let key = scenario_key(&config.name);
        let seeds: Vec<u64> = (0..config.replicates as u64).map(|r| replicate_seed(master, key, r)).collect();
        let outcomes: Vec<Result<Outcome, SimError>> =
            pool.install(|| seeds.par_iter().map(|&s| run_one(config, s, methods, &opts.estimator)).collect());
        let outcomes = outcomes.into_iter().collect::<Result<Vec<_>, _>>()?;
        let records: Vec<ReplicateRecord> = outcomes
            .iter()
            .zip(&seeds)
            .enumerate()
            .map(|(i, (o, &seed))| ReplicateRecord {
                replicate: i,
                seed,
                n_s: o.n_s,
                errors: o.estimates.iter().map(|e| e.map(|t| t - tau_star)).collect(),
            })
            .collect();
        let summaries = methods
            .iter()
            .enumerate()
            .map(|(k, &m)| {
                let errs: Vec<f64> = records.iter().filter_map(|r| r.errors[k]).collect();
                MethodSummary::from_errors(m, &errs, records.len() - errs.len())
            })
            .collect();
        let n_s: Vec<usize> = outcomes.iter().map(|o| o.n_s).collect();
        reports.push(ReplicateReport {
            scenario: config.name.clone(),
            tau_star,
            replicates: config.replicates,
            n_s_min: n_s.iter().copied().min().unwrap_or(0),
            n_s_max: n_s.iter().copied().max().unwrap_or(0),
            n_s_mean: n_s.iter().sum::<usize>() as f64 / n_s.len().max(1) as f64,
            redraws: outcomes.iter().map(|o| o.redraws).sum(),
            methods: summaries,
            records,
        });
    }
    Ok(reports)
}
