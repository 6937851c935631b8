//! Entropy-balancing weights through their convex duals.
//!
//! The extended problem balances each arm's H means to the target summary
//! and equalizes the arms' G means. Its dual has parameters `(λ₁, λ₀, γ)`
//! and the weights are `exp(λ₁ᵀH + γᵀG)` on treated rows and
//! `exp(λ₀ᵀH − γᵀG)` on control rows. The H-only, whole-sample calibration,
//! two-step and ATT variants are solved by the same Newton engine.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::basis::{check_design_rank, matrix_rank, DesignMatrices, RankReport, TargetSummary};
use crate::data::{Arms, DataError};
use crate::tilting::{TiltFit, Tilting};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverOptions {
    /// Sup-norm gradient tolerance, in standardized coordinates.
    pub tol: f64,
    pub max_iter: usize,
    /// Largest linear score allowed before exponentiation.
    pub score_cap: f64,
    pub armijo: f64,
    pub backtrack: f64,
    /// Rescale each arm's weights to sum to n_s after solving.
    pub normalize: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions { tol: 1e-10, max_iter: 200, score_cap: 30.0, armijo: 1e-4, backtrack: 0.5, normalize: false }
    }
}

/// Which procedure produced a weight set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Method {
    Extended,
    EbalHOnly,
    JoseyTwoStep,
    EtCalibration,
    AttEbal,
    Ipw,
    IpwEt,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Extended => "EXTENDED",
            Method::EbalHOnly => "EBAL_H_ONLY",
            Method::JoseyTwoStep => "JOSEY_TWO_STEP",
            Method::EtCalibration => "ET_CALIBRATION",
            Method::AttEbal => "ATT_EBAL",
            Method::Ipw => "IPW",
            Method::IpwEt => "IPW_ET",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub weights: Vec<f64>,
    pub normalized: bool,
    pub method: Method,
}

impl WeightSet {
    pub fn new(weights: Vec<f64>, method: Method) -> Self {
        WeightSet { weights, normalized: false, method }
    }

    /// Rescales each arm so its weights sum to n_s.
    pub fn normalize_per_arm(&mut self, arms: &Arms) {
        let n = arms.len() as f64;
        for idx in [&arms.treated, &arms.control] {
            let sum: f64 = idx.iter().map(|&i| self.weights[i]).sum();
            for &i in idx.iter() {
                self.weights[i] *= n / sum;
            }
        }
        self.normalized = true;
    }

    pub fn arm_sums(&self, arms: &Arms) -> (f64, f64) {
        let s = |idx: &[usize]| idx.iter().map(|&i| self.weights[i]).sum::<f64>();
        (s(&arms.treated), s(&arms.control))
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Dual parameters of the extended problem.
#[derive(Debug, Clone, PartialEq)]
pub struct DualParams {
    pub lambda1: DVector<f64>,
    pub lambda0: DVector<f64>,
    pub gamma: DVector<f64>,
}

impl DualParams {
    pub fn zeros(h_len: usize, g_len: usize) -> Self {
        DualParams { lambda1: DVector::zeros(h_len), lambda0: DVector::zeros(h_len), gamma: DVector::zeros(g_len) }
    }

    /// `(λ₁, λ₀, γ)` stacked into one vector.
    pub fn stack(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(2 * self.lambda1.len() + self.gamma.len());
        v.extend(self.lambda1.iter());
        v.extend(self.lambda0.iter());
        v.extend(self.gamma.iter());
        DVector::from_vec(v)
    }

    pub fn unstack(theta: &DVector<f64>, h_len: usize, g_len: usize) -> Self {
        DualParams {
            lambda1: theta.rows(0, h_len).into_owned(),
            lambda0: theta.rows(h_len, h_len).into_owned(),
            gamma: theta.rows(2 * h_len, g_len).into_owned(),
        }
    }

    pub fn sup_distance(&self, other: &DualParams) -> f64 {
        (self.stack() - other.stack()).amax()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub lambda1: DVector<f64>,
    pub lambda0: DVector<f64>,
    pub gamma: DVector<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    pub objective: f64,
}

impl DualSolution {
    fn from_fit(fit: &TiltFit, h_len: usize, g_len: usize) -> Self {
        let p = DualParams::unstack(&fit.theta, h_len, g_len);
        DualSolution {
            lambda1: p.lambda1,
            lambda0: p.lambda0,
            gamma: p.gamma,
            iterations: fit.iterations,
            gradient_norm: fit.gradient_norm,
            converged: fit.converged,
            objective: fit.objective,
        }
    }

    pub fn params(&self) -> DualParams {
        DualParams { lambda1: self.lambda1.clone(), lambda0: self.lambda0.clone(), gamma: self.gamma.clone() }
    }

    /// Log-weight of one unit given its standardized H and G rows.
    pub fn log_weight(&self, h: &[f64], g: &[f64], treated: bool) -> f64 {
        let lam = if treated { &self.lambda1 } else { &self.lambda0 };
        let sign = if treated { 1.0 } else { -1.0 };
        let hl: f64 = lam.iter().zip(h).map(|(a, b)| a * b).sum();
        let gl: f64 = self.gamma.iter().zip(g).map(|(a, b)| a * b).sum();
        hl + sign * gl
    }

    /// Parameters expressed against the raw (unstandardized) basis terms.
    pub fn to_raw(&self, design: &DesignMatrices) -> DualParams {
        let unscale = |lam: &DVector<f64>| {
            let mut raw = lam.clone();
            for (k, s) in design.h_scale.iter().enumerate().skip(1) {
                raw[k] = lam[k] / s.scale;
                raw[0] -= lam[k] * s.center / s.scale;
            }
            raw
        };
        let mut lambda1 = unscale(&self.lambda1);
        let mut lambda0 = unscale(&self.lambda0);
        let mut gamma = self.gamma.clone();
        for (k, s) in design.g_scale.iter().enumerate() {
            gamma[k] = self.gamma[k] / s.scale;
            let shift = self.gamma[k] * s.center / s.scale;
            lambda1[0] -= shift;
            lambda0[0] += shift;
        }
        DualParams { lambda1, lambda0, gamma }
    }
}

/// Whole-sample calibration parameters `β` with `q_i = exp(βᵀH_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSolution {
    pub beta: DVector<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    pub objective: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolveError {
    #[error("balancing design is rank deficient: {0}")]
    RankDeficient(RankReport),
    #[error("{method} did not converge after {iterations} iterations (residual sup-norm {residual:.3e})")]
    NonConverged { method: Method, iterations: usize, residual: f64, theta: Vec<f64> },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
}

fn check_inputs(design: &DesignMatrices, target: &TargetSummary, arms: &Arms) -> Result<(), SolveError> {
    if target.len() != design.h_len() {
        return Err(SolveError::Dimension(format!(
            "target summary has {} entries, design has {} H columns",
            target.len(),
            design.h_len()
        )));
    }
    if arms.len() != design.n() {
        return Err(SolveError::Dimension(format!("{} arm indices for {} design rows", arms.len(), design.n())));
    }
    arms.check_nonempty()?;
    Ok(())
}

fn extended_problem(design: &DesignMatrices, target: &TargetSummary, arms: &Arms) -> Tilting {
    let (kh, kg) = (design.h_len(), design.g_len());
    let d = 2 * kh + kg;
    let mut features = DMatrix::zeros(design.n(), d);
    for &i in &arms.treated {
        for k in 0..kh {
            features[(i, k)] = design.h[(i, k)];
        }
        for k in 0..kg {
            features[(i, 2 * kh + k)] = design.g[(i, k)];
        }
    }
    for &i in &arms.control {
        for k in 0..kh {
            features[(i, kh + k)] = design.h[(i, k)];
        }
        for k in 0..kg {
            features[(i, 2 * kh + k)] = -design.g[(i, k)];
        }
    }
    let mut b = DVector::zeros(d);
    b.rows_mut(0, kh).copy_from(&target.values);
    b.rows_mut(kh, kh).copy_from(&target.values);
    Tilting { features, offsets: None, target: b, norm: design.n() as f64 }
}

/// Value, gradient and Hessian of the extended dual.
#[derive(Debug, Clone)]
pub struct DualEval {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    /// A linear score exceeded the cap; value is +∞ and derivatives are not meaningful.
    pub capped: bool,
}

pub fn dual_objective(
    params: &DualParams,
    design: &DesignMatrices,
    target: &TargetSummary,
    arms: &Arms,
    score_cap: f64,
) -> DualEval {
    let problem = extended_problem(design, target, arms);
    let e = problem.evaluate(&params.stack(), score_cap, true);
    let d = problem.dim();
    DualEval {
        value: e.value,
        gradient: e.gradient,
        hessian: e.hessian.unwrap_or_else(|| DMatrix::from_element(d, d, f64::NAN)),
        capped: e.capped,
    }
}

/// Primal constraint residuals of the extended problem for arbitrary weights,
/// ordered as (treated H block, control H block, G difference block).
pub fn balance_residuals(design: &DesignMatrices, target: &TargetSummary, arms: &Arms, weights: &[f64]) -> DVector<f64> {
    let n = design.n() as f64;
    let (kh, kg) = (design.h_len(), design.g_len());
    let mut r = DVector::zeros(2 * kh + kg);
    for k in 0..kh {
        let t: f64 = arms.treated.iter().map(|&i| weights[i] * design.h[(i, k)]).sum();
        let c: f64 = arms.control.iter().map(|&i| weights[i] * design.h[(i, k)]).sum();
        r[k] = t / n - target.values[k];
        r[kh + k] = c / n - target.values[k];
    }
    for k in 0..kg {
        let t: f64 = arms.treated.iter().map(|&i| weights[i] * design.g[(i, k)]).sum();
        let c: f64 = arms.control.iter().map(|&i| weights[i] * design.g[(i, k)]).sum();
        r[2 * kh + k] = t / n - c / n;
    }
    r
}

fn finish(mut ws: WeightSet, arms: &Arms, opts: &SolverOptions) -> WeightSet {
    if opts.normalize {
        ws.normalize_per_arm(arms);
    }
    ws
}

fn solve_dual(
    design: &DesignMatrices,
    target: &TargetSummary,
    arms: &Arms,
    opts: &SolverOptions,
    method: Method,
) -> Result<(DualSolution, WeightSet), SolveError> {
    check_inputs(design, target, arms)?;
    let rank = check_design_rank(design);
    if rank.deficient {
        return Err(SolveError::RankDeficient(rank));
    }
    let problem = extended_problem(design, target, arms);
    let fit = problem.solve(opts);
    if !fit.converged {
        return Err(SolveError::NonConverged {
            method,
            iterations: fit.iterations,
            residual: fit.gradient_norm,
            theta: fit.theta.iter().copied().collect(),
        });
    }
    let solution = DualSolution::from_fit(&fit, design.h_len(), design.g_len());
    let ws = WeightSet::new(problem.weights(&fit.theta), method);
    Ok((solution, finish(ws, arms, opts)))
}

/// Extended entropy balancing: per-arm H calibration to the target plus
/// treated/control balance on G.
pub fn solve_extended(
    design: &DesignMatrices,
    target: &TargetSummary,
    arms: &Arms,
    opts: &SolverOptions,
) -> Result<(DualSolution, WeightSet), SolveError> {
    solve_dual(design, target, arms, opts, Method::Extended)
}

/// One-step entropy balancing on H only; any G columns in `design` are ignored.
pub fn solve_ebal_h_only(
    design: &DesignMatrices,
    target: &TargetSummary,
    arms: &Arms,
    opts: &SolverOptions,
) -> Result<(DualSolution, WeightSet), SolveError> {
    solve_dual(&design.h_only(), target, arms, opts, Method::EbalHOnly)
}

/// Calibrates the whole source sample (no arm distinction) to the target H means.
pub fn solve_et_calibration(
    design: &DesignMatrices,
    target: &TargetSummary,
    opts: &SolverOptions,
) -> Result<(CalibrationSolution, WeightSet), SolveError> {
    if target.len() != design.h_len() {
        return Err(SolveError::Dimension(format!(
            "target summary has {} entries, design has {} H columns",
            target.len(),
            design.h_len()
        )));
    }
    let rank = matrix_rank(&design.h);
    if rank.deficient {
        return Err(SolveError::RankDeficient(rank));
    }
    let problem = Tilting { features: design.h.clone(), offsets: None, target: target.values.clone(), norm: design.n() as f64 };
    let fit = problem.solve(opts);
    if !fit.converged {
        return Err(SolveError::NonConverged {
            method: Method::EtCalibration,
            iterations: fit.iterations,
            residual: fit.gradient_norm,
            theta: fit.theta.iter().copied().collect(),
        });
    }
    let ws = WeightSet { weights: problem.weights(&fit.theta), normalized: false, method: Method::EtCalibration };
    let sol = CalibrationSolution {
        beta: fit.theta,
        iterations: fit.iterations,
        gradient_norm: fit.gradient_norm,
        converged: true,
        objective: fit.objective,
    };
    Ok((sol, ws))
}

/// Second step of the two-step procedure: minimizes `Σ w log(w/q)` subject to
/// each arm's H means matching the q-weighted source means.
pub fn solve_josey_second_step(
    design: &DesignMatrices,
    arms: &Arms,
    base: &[f64],
    opts: &SolverOptions,
) -> Result<WeightSet, SolveError> {
    if base.len() != design.n() {
        return Err(SolveError::Dimension(format!("{} base weights for {} rows", base.len(), design.n())));
    }
    if let Some(i) = base.iter().position(|q| !(*q > 0.0) || !q.is_finite()) {
        return Err(SolveError::Dimension(format!("base weight {i} is not positive")));
    }
    let h_design = design.h_only();
    let n = design.n() as f64;
    let q = DVector::from_column_slice(base);
    let calibrated = TargetSummary { values: design.h.tr_mul(&q) / n, n_t: None };
    check_inputs(&h_design, &calibrated, arms)?;
    let rank = matrix_rank(&design.h);
    if rank.deficient {
        return Err(SolveError::RankDeficient(rank));
    }
    let mut problem = extended_problem(&h_design, &calibrated, arms);
    problem.offsets = Some(q.map(f64::ln));
    let fit = problem.solve(opts);
    if !fit.converged {
        return Err(SolveError::NonConverged {
            method: Method::JoseyTwoStep,
            iterations: fit.iterations,
            residual: fit.gradient_norm,
            theta: fit.theta.iter().copied().collect(),
        });
    }
    let ws = WeightSet::new(problem.weights(&fit.theta), Method::JoseyTwoStep);
    Ok(finish(ws, arms, opts))
}

/// Two-step procedure: whole-sample calibration weights q̂, then per-arm
/// balancing relative to q̂. G columns are ignored.
pub fn solve_josey_two_step(
    design: &DesignMatrices,
    target: &TargetSummary,
    arms: &Arms,
    opts: &SolverOptions,
) -> Result<WeightSet, SolveError> {
    check_inputs(&design.h_only(), target, arms)?;
    let step_opts = SolverOptions { normalize: false, ..*opts };
    let (_, q) = solve_et_calibration(design, target, &step_opts)?;
    solve_josey_second_step(design, arms, &q.weights, opts)
}

/// ATT entropy balancing: control weights whose means of `features` match the
/// treated means, with `Σ_{S₀} w_i / n_s = 1`. Treated rows get `n_s/|S₁|`.
pub fn solve_att_ebal(features: &DMatrix<f64>, arms: &Arms, opts: &SolverOptions) -> Result<WeightSet, SolveError> {
    if features.nrows() != arms.len() {
        return Err(SolveError::Dimension(format!("{} feature rows for {} units", features.nrows(), arms.len())));
    }
    arms.check_nonempty()?;
    let n = arms.len() as f64;
    let n_c = arms.control.len();
    // standardized columns with nonzero spread, plus the normalization column
    let mut cols: Vec<DVector<f64>> = vec![DVector::from_element(n_c, 1.0)];
    let mut target = vec![1.0];
    for j in 0..features.ncols() {
        let col = features.column(j);
        let mean = col.mean();
        let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let treated_mean = arms.treated.iter().map(|&i| col[i]).sum::<f64>() / arms.treated.len() as f64;
        if !(sd > 1e-12 * (1.0 + mean.abs())) {
            continue;
        }
        cols.push(DVector::from_iterator(n_c, arms.control.iter().map(|&i| (col[i] - mean) / sd)));
        target.push((treated_mean - mean) / sd);
    }
    let m = DMatrix::from_columns(&cols);
    let rank = matrix_rank(&m);
    if rank.deficient {
        return Err(SolveError::RankDeficient(rank));
    }
    let problem = Tilting { features: m, offsets: None, target: DVector::from_vec(target), norm: n };
    let fit = problem.solve(opts);
    if !fit.converged {
        return Err(SolveError::NonConverged {
            method: Method::AttEbal,
            iterations: fit.iterations,
            residual: fit.gradient_norm,
            theta: fit.theta.iter().copied().collect(),
        });
    }
    let control_w = problem.weights(&fit.theta);
    let mut weights = vec![n / arms.treated.len() as f64; arms.len()];
    for (&i, w) in arms.control.iter().zip(control_w) {
        weights[i] = w;
    }
    Ok(finish(WeightSet::new(weights, Method::AttEbal), arms, opts))
}
