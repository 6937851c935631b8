//! Weighted ATE estimators: IPW, IPW with exponential-tilting shift
//! calibration, H-only entropy balancing, and extended entropy balancing.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{align_target_summary, evaluate_basis, BasisError, BasisSpec};
use crate::data::{Arms, SourceSample};
use crate::solver::{
    solve_ebal_h_only, solve_et_calibration, solve_extended, Method, SolveError, SolverOptions, WeightSet,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EstimateError {
    #[error(transparent)]
    Basis(#[from] BasisError),
    #[error(transparent)]
    Solve(#[from] SolveError),
    #[error("logistic regression separation detected (coefficient norm {norm:.3e} after {iterations} iterations)")]
    Separation { norm: f64, iterations: usize },
    #[error("logistic regression did not converge after {iterations} iterations (score sup-norm {score:.3e})")]
    LogisticNonConverged { iterations: usize, score: f64 },
    #[error("{0}")]
    Invalid(String),
}

impl EstimateError {
    /// True when the failure is a solver or fit that did not converge.
    pub fn is_convergence(&self) -> bool {
        matches!(
            self,
            EstimateError::Solve(SolveError::NonConverged { .. })
                | EstimateError::Separation { .. }
                | EstimateError::LogisticNonConverged { .. }
        )
    }
}

/// The four estimators compared in the simulation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Ipw,
    IpwEt,
    Ebal,
    Extended,
}

impl Estimator {
    pub const ALL: [Estimator; 4] = [Estimator::Ipw, Estimator::IpwEt, Estimator::Ebal, Estimator::Extended];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Ipw => "ipw",
            Estimator::IpwEt => "ipw_et",
            Estimator::Ebal => "ebal",
            Estimator::Extended => "extended",
        }
    }

    /// Provenance tag of the weights this estimator uses.
    pub fn method(self) -> Method {
        match self {
            Estimator::Ipw => Method::Ipw,
            Estimator::IpwEt => Method::IpwEt,
            Estimator::Ebal => Method::EbalHOnly,
            Estimator::Extended => Method::Extended,
        }
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Estimator {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace(['-', '+'], "_").as_str() {
            "ipw" => Ok(Estimator::Ipw),
            "ipw_et" => Ok(Estimator::IpwEt),
            "ebal" => Ok(Estimator::Ebal),
            "extended" | "proposed" => Ok(Estimator::Extended),
            other => Err(format!("unknown method `{other}` (expected ipw, ipw_et, ebal, extended)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticOptions {
    pub max_iter: usize,
    /// Sup-norm tolerance on the score equations.
    pub tol: f64,
    /// Coefficient norm above which the fit is declared separated.
    pub divergence: f64,
}

impl Default for LogisticOptions {
    fn default() -> Self {
        LogisticOptions { max_iter: 100, tol: 1e-8, divergence: 1e3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorOptions {
    pub solver: SolverOptions,
    pub logistic: LogisticOptions,
    /// Covariate columns used as propensity regressors; all columns when `None`.
    pub ipw_regressors: Option<Vec<usize>>,
    /// Optional propensity clip, e.g. `(0.01, 0.99)`. Off by default.
    pub propensity_clip: Option<(f64, f64)>,
}

impl Default for EstimatorOptions {
    /// Solver defaults with per-arm normalization switched on.
    fn default() -> Self {
        EstimatorOptions {
            solver: SolverOptions { normalize: true, ..SolverOptions::default() },
            logistic: LogisticOptions::default(),
            ipw_regressors: None,
            propensity_clip: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    /// Intercept first, then one coefficient per regressor.
    pub coefficients: DVector<f64>,
    pub fitted: Vec<f64>,
    pub iterations: usize,
    pub score_norm: f64,
    pub converged: bool,
}

impl LogisticModel {
    pub fn predict(&self, z: &[f64]) -> f64 {
        let eta = self.coefficients[0] + self.coefficients.iter().skip(1).zip(z).map(|(b, v)| b * v).sum::<f64>();
        logistic(eta)
    }
}

pub fn logistic(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

fn log_likelihood(x: &DMatrix<f64>, a: &[bool], beta: &DVector<f64>) -> f64 {
    let eta = x * beta;
    eta.iter()
        .zip(a)
        .map(|(&e, &ai)| {
            // log(1 + e^e) computed stably
            let softplus = if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            if ai {
                e - softplus
            } else {
                -softplus
            }
        })
        .sum()
}

const SEPARATION_PROB: f64 = 1e-10;

/// Maximum-likelihood logistic regression of `treatment` on an intercept plus
/// the columns of `regressors`, by iteratively reweighted least squares.
pub fn fit_logistic(
    regressors: &DMatrix<f64>,
    treatment: &[bool],
    opts: &LogisticOptions,
) -> Result<LogisticModel, EstimateError> {
    let n = regressors.nrows();
    if treatment.len() != n {
        return Err(EstimateError::Invalid(format!("{} treatment values for {} rows", treatment.len(), n)));
    }
    Arms::from_treatment(treatment).check_nonempty().map_err(|e| EstimateError::Invalid(e.to_string()))?;
    let q = regressors.ncols() + 1;
    let mut x = DMatrix::from_element(n, q, 1.0);
    x.columns_mut(1, q - 1).copy_from(regressors);
    let rank = crate::basis::matrix_rank(&x);
    if rank.deficient {
        return Err(EstimateError::Invalid(format!("propensity design is rank deficient: {rank}")));
    }
    let a = DVector::from_iterator(n, treatment.iter().map(|&t| if t { 1.0 } else { 0.0 }));
    let mut beta = DVector::zeros(q);
    let mut ll = log_likelihood(&x, treatment, &beta);
    let mut iterations = 0;
    loop {
        let p = (&x * &beta).map(logistic);
        let score = x.tr_mul(&(&a - &p));
        let score_norm = score.amax();
        if score_norm <= opts.tol {
            // fitted probabilities pinned at 0 or 1 mean the likelihood has no finite maximizer
            if p.iter().any(|&v| !(SEPARATION_PROB..=1.0 - SEPARATION_PROB).contains(&v)) {
                return Err(EstimateError::Separation { norm: beta.norm(), iterations });
            }
            return Ok(LogisticModel { coefficients: beta, fitted: p.iter().copied().collect(), iterations, score_norm, converged: true });
        }
        if beta.norm() > opts.divergence {
            return Err(EstimateError::Separation { norm: beta.norm(), iterations });
        }
        if iterations >= opts.max_iter {
            return Err(EstimateError::LogisticNonConverged { iterations, score: score_norm });
        }
        iterations += 1;
        let mut xw = x.clone();
        for (i, mut row) in xw.row_iter_mut().enumerate() {
            row *= p[i] * (1.0 - p[i]);
        }
        let info = x.tr_mul(&xw);
        let step = match info.clone().cholesky() {
            Some(c) => c.solve(&score),
            None => match info.lu().solve(&score) {
                Some(s) => s,
                // information collapsed: fitted probabilities are at 0/1
                None => return Err(EstimateError::Separation { norm: f64::INFINITY, iterations }),
            },
        };
        let mut t = 1.0;
        loop {
            let cand = &beta + &step * t;
            let cand_ll = log_likelihood(&x, treatment, &cand);
            if cand_ll >= ll - 1e-12 * ll.abs().max(1.0) || t < 1e-8 {
                beta = cand;
                ll = cand_ll;
                break;
            }
            t *= 0.5;
        }
    }
}

/// Logistic fit of the sample's treatment on the chosen covariate columns.
pub fn fit_logistic_irls(
    sample: &SourceSample,
    columns: &[usize],
    opts: &LogisticOptions,
) -> Result<LogisticModel, EstimateError> {
    if let Some(&bad) = columns.iter().find(|&&j| j >= sample.p()) {
        return Err(EstimateError::Invalid(format!("regressor column {bad} out of range (p = {})", sample.p())));
    }
    let x = sample.covariates().select_columns(columns);
    fit_logistic(&x, sample.treatment(), opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightDiagnostics {
    pub min: f64,
    pub max: f64,
    pub ess_treated: f64,
    pub ess_control: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub method: Method,
    pub tau_hat: f64,
    pub weights: WeightDiagnostics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub solver: Option<SolverDiagnostics>,
}

/// Effective sample size `(Σw)² / Σw²`.
pub fn effective_sample_size(w: impl Iterator<Item = f64> + Clone) -> f64 {
    let s: f64 = w.clone().sum();
    let s2: f64 = w.map(|v| v * v).sum();
    s * s / s2
}

/// Weighted difference of arm means after normalizing each arm to sum to n_s.
pub fn estimate_weighted_ate(sample: &SourceSample, weights: &WeightSet) -> Result<EstimateReport, EstimateError> {
    if weights.len() != sample.n() {
        return Err(EstimateError::Invalid(format!("{} weights for {} rows", weights.len(), sample.n())));
    }
    if let Some(i) = weights.weights.iter().position(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(EstimateError::Invalid(format!("weight {i} is not a positive finite number")));
    }
    let arms = sample.arms();
    let mut ws = weights.clone();
    ws.normalize_per_arm(&arms);
    let n = sample.n() as f64;
    let y = sample.outcome();
    let treated: f64 = arms.treated.iter().map(|&i| ws.weights[i] * y[i]).sum::<f64>() / n;
    let control: f64 = arms.control.iter().map(|&i| ws.weights[i] * y[i]).sum::<f64>() / n;
    let w = &ws.weights;
    Ok(EstimateReport {
        method: weights.method,
        tau_hat: treated - control,
        weights: WeightDiagnostics {
            min: w.iter().copied().fold(f64::INFINITY, f64::min),
            max: w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            ess_treated: effective_sample_size(arms.treated.iter().map(|&i| w[i])),
            ess_control: effective_sample_size(arms.control.iter().map(|&i| w[i])),
        },
        solver: None,
    })
}

/// Weights from one estimator plus solver diagnostics where a dual solve is involved.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorWeights {
    pub weights: WeightSet,
    pub solver: Option<SolverDiagnostics>,
}

fn propensity(sample: &SourceSample, opts: &EstimatorOptions) -> Result<Vec<f64>, EstimateError> {
    let all: Vec<usize> = (0..sample.p()).collect();
    let cols = opts.ipw_regressors.as_deref().unwrap_or(&all);
    let model = fit_logistic_irls(sample, cols, &opts.logistic)?;
    Ok(match opts.propensity_clip {
        Some((lo, hi)) => model.fitted.iter().map(|p| p.clamp(lo, hi)).collect(),
        None => model.fitted,
    })
}

fn inverse_propensity(sample: &SourceSample, pi: &[f64], base: Option<&[f64]>, method: Method) -> WeightSet {
    let w = sample
        .treatment()
        .iter()
        .zip(pi)
        .enumerate()
        .map(|(i, (&a, &p))| {
            let q = base.map_or(1.0, |b| b[i]);
            if a {
                q / p
            } else {
                q / (1.0 - p)
            }
        })
        .collect();
    WeightSet::new(w, method)
}

fn aligned(
    spec: &BasisSpec,
    sample: &SourceSample,
    raw_target: &[f64],
) -> Result<(crate::basis::DesignMatrices, crate::basis::TargetSummary), EstimateError> {
    let design = evaluate_basis(spec, sample)?;
    let target = align_target_summary(spec, raw_target, &design)?;
    Ok((design, target))
}

/// Weights for one estimator, rescaled to sum to n_s within each arm when
/// `opts.solver.normalize` is set. `raw_target` holds the raw target means of
/// the H terms of `spec` (constant first); IPW ignores it.
pub fn estimator_weights(
    estimator: Estimator,
    sample: &SourceSample,
    spec: &BasisSpec,
    raw_target: &[f64],
    opts: &EstimatorOptions,
) -> Result<EstimatorWeights, EstimateError> {
    let arms = sample.arms();
    let solver_opts = SolverOptions { normalize: false, ..opts.solver };
    let (mut weights, solver) = match estimator {
        Estimator::Ipw => {
            let pi = propensity(sample, opts)?;
            (inverse_propensity(sample, &pi, None, Method::Ipw), None)
        }
        Estimator::IpwEt => {
            let h_spec = spec.h_only();
            let (design, target) = aligned(&h_spec, sample, raw_target)?;
            let (cal, q) = solve_et_calibration(&design, &target, &solver_opts)?;
            let pi = propensity(sample, opts)?;
            let diag = SolverDiagnostics { iterations: cal.iterations, gradient_norm: cal.gradient_norm, converged: cal.converged };
            (inverse_propensity(sample, &pi, Some(&q.weights), Method::IpwEt), Some(diag))
        }
        Estimator::Ebal | Estimator::Extended => {
            let used = if estimator == Estimator::Ebal { spec.h_only() } else { spec.clone() };
            let (design, target) = aligned(&used, sample, raw_target)?;
            let (sol, ws) = if estimator == Estimator::Ebal {
                solve_ebal_h_only(&design, &target, &arms, &solver_opts)?
            } else {
                solve_extended(&design, &target, &arms, &solver_opts)?
            };
            let diag = SolverDiagnostics { iterations: sol.iterations, gradient_norm: sol.gradient_norm, converged: sol.converged };
            (ws, Some(diag))
        }
    };
    if opts.solver.normalize {
        weights.normalize_per_arm(&arms);
    }
    Ok(EstimatorWeights { weights, solver })
}

pub fn estimate(
    estimator: Estimator,
    sample: &SourceSample,
    spec: &BasisSpec,
    raw_target: &[f64],
    opts: &EstimatorOptions,
) -> Result<EstimateReport, EstimateError> {
    let w = estimator_weights(estimator, sample, spec, raw_target, opts)?;
    let mut report = estimate_weighted_ate(sample, &w.weights)?;
    report.solver = w.solver;
    Ok(report)
}

/// Inverse propensity weighting without target-shift adjustment.
pub fn estimate_ipw(sample: &SourceSample, opts: &EstimatorOptions) -> Result<EstimateReport, EstimateError> {
    estimate(Estimator::Ipw, sample, &BasisSpec::constant(), &[1.0], opts)
}

pub fn estimate_ipw_et(
    sample: &SourceSample,
    spec: &BasisSpec,
    raw_target: &[f64],
    opts: &EstimatorOptions,
) -> Result<EstimateReport, EstimateError> {
    estimate(Estimator::IpwEt, sample, spec, raw_target, opts)
}

pub fn estimate_ebal(
    sample: &SourceSample,
    spec: &BasisSpec,
    raw_target: &[f64],
    opts: &EstimatorOptions,
) -> Result<EstimateReport, EstimateError> {
    estimate(Estimator::Ebal, sample, spec, raw_target, opts)
}

pub fn estimate_extended(
    sample: &SourceSample,
    spec: &BasisSpec,
    raw_target: &[f64],
    opts: &EstimatorOptions,
) -> Result<EstimateReport, EstimateError> {
    estimate(Estimator::Extended, sample, spec, raw_target, opts)
}
