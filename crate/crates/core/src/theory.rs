//! Population-level quantities of extended entropy balancing under a fully
//! known data-generating process: the limiting density ratio r̃, projections
//! onto Span{H} and Span{G⊥} under the r̃-tilted source law, the asymptotic
//! variance decomposition, and the semiparametric efficiency bound.
//!
//! All expectations are computed on an [`IntegrationGrid`] over the covariate
//! law; conditional expectations given `S = s` are obtained by reweighting with
//! the participation probability.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::basis::BasisSpec;
use crate::estimators::logistic;
use crate::quadrature::{CovariateLaw, IntegrationGrid};
use crate::solver::{DualParams, SolverOptions};
use crate::tilting::Tilting;

pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("limiting dual did not converge (residual sup-norm {0:.3e})")]
    NonConverged(f64),
    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),
    #[error("singular Gram matrix in projection onto {0}")]
    SingularGram(&'static str),
    #[error("grid dimension {grid} does not match covariate dimension {law}")]
    Dimension { grid: usize, law: usize },
}

/// The true nuisance functions of a data-generating process.
#[derive(Clone)]
pub struct TruthFunctions {
    pub law: CovariateLaw,
    /// π(x) = P(A = 1 | X = x, S = 1).
    pub propensity: ScalarFn,
    /// ρ(x) = P(S = 1 | X = x).
    pub participation: ScalarFn,
    pub mu0: ScalarFn,
    pub mu1: ScalarFn,
    /// σ₀²(x)
    pub var0: ScalarFn,
    /// σ₁²(x)
    pub var1: ScalarFn,
}

impl TruthFunctions {
    pub fn cate(&self, x: &[f64]) -> f64 {
        (self.mu1)(x) - (self.mu0)(x)
    }

    pub fn baseline(&self, x: &[f64]) -> f64 {
        0.5 * ((self.mu1)(x) + (self.mu0)(x))
    }

    /// Builds μ₀, μ₁ from a baseline m and CATE τ with homoscedastic noise.
    pub fn from_baseline(
        law: CovariateLaw,
        propensity: ScalarFn,
        participation: ScalarFn,
        baseline: ScalarFn,
        cate: ScalarFn,
        noise_var: f64,
    ) -> Self {
        let (b0, c0) = (baseline.clone(), cate.clone());
        let (b1, c1) = (baseline, cate);
        TruthFunctions {
            law,
            propensity,
            participation,
            mu0: Arc::new(move |x| b0(x) - 0.5 * c0(x)),
            mu1: Arc::new(move |x| b1(x) + 0.5 * c1(x)),
            var0: Arc::new(move |_| noise_var),
            var1: Arc::new(move |_| noise_var),
        }
    }
}

/// Which consistency conditions hold for a truth/basis pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ConditionReport {
    /// logit π ∈ Span{H, G}.
    pub logistic_in_basis: bool,
    /// μ₀, μ₁ ∈ Span{H}.
    pub a: bool,
    /// logistic propensity and the target/source density ratio has the tilted form.
    pub b: bool,
    /// logistic propensity and τ ∈ Span{H}.
    pub c: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AsymptoticReport {
    pub lambda0_star: Vec<f64>,
    pub lambda_pi: Vec<f64>,
    pub gamma_pi: Vec<f64>,
    pub rho: f64,
    pub tau_star: f64,
    pub r_tilde_mean: f64,
    /// Noise term.
    pub v1: f64,
    /// Target-heterogeneity term.
    pub v2: f64,
    /// Excess over the efficiency bound when (b) and (c) hold.
    pub v3: f64,
    pub total: f64,
    pub efficiency_bound: f64,
    pub gap: f64,
    pub conditions: ConditionReport,
    /// True when neither condition (b) nor (c) was detected.
    pub hypothesis_violated: bool,
}

/// Limit of the dual parameters and the induced density ratio r̃.
#[derive(Debug, Clone, PartialEq)]
pub struct LimitingDual {
    pub lambda0_star: DVector<f64>,
    pub lambda_pi: DVector<f64>,
    pub gamma_pi: DVector<f64>,
    pub residual: f64,
    pub iterations: usize,
}

impl LimitingDual {
    /// `r̃(x)` from raw basis values `H(x)`, `G(x)`.
    pub fn r_tilde(&self, h: &[f64], g: &[f64]) -> f64 {
        let dot = |v: &DVector<f64>, x: &[f64]| v.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        let eta = dot(&self.lambda_pi, h) + dot(&self.gamma_pi, g);
        let log_num = dot(&self.lambda0_star, h) + 0.5 * dot(&self.gamma_pi, g);
        // exp(num) / (1 + exp(eta)), computed in log space
        let log_den = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
        (log_num - log_den).exp()
    }

    /// Probability limits `(λ₀* − λ_π, λ₀*, −γ_π/2)` of the raw-unit dual parameters.
    pub fn dual_limits(&self) -> DualParams {
        DualParams {
            lambda1: &self.lambda0_star - &self.lambda_pi,
            lambda0: self.lambda0_star.clone(),
            gamma: &self.gamma_pi * -0.5,
        }
    }
}

/// A projected function: coefficients on its basis and fitted values at the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub coefficients: DVector<f64>,
    pub fitted: Vec<f64>,
}

/// Truth functions and basis evaluated at every grid node, plus the limiting dual.
pub struct OracleContext<'a> {
    truth: &'a TruthFunctions,
    spec: &'a BasisSpec,
    grid: &'a IntegrationGrid,
    h: DMatrix<f64>,
    g: DMatrix<f64>,
    rho: Vec<f64>,
    pi: Vec<f64>,
    rho_bar: f64,
    dual: LimitingDual,
    r_tilde: Vec<f64>,
    /// Source-law weights tilted by r̃: `w_j ρ_j r̃_j / ρ̄`.
    tilted: Vec<f64>,
    /// `G⊥ = G − Π_H(G)` at the nodes.
    g_perp: DMatrix<f64>,
}

fn weighted_projection(values: &[f64], basis: &DMatrix<f64>, measure: &[f64], what: &'static str) -> Result<Projection, OracleError> {
    let k = basis.ncols();
    if k == 0 {
        return Ok(Projection { coefficients: DVector::zeros(0), fitted: vec![0.0; values.len()] });
    }
    let mut gram = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    let mut row = DVector::zeros(k);
    for j in 0..basis.nrows() {
        for c in 0..k {
            row[c] = basis[(j, c)];
        }
        gram.ger(measure[j], &row, &row, 1.0);
        rhs.axpy(measure[j] * values[j], &row, 1.0);
    }
    let rank = crate::basis::matrix_rank(&gram);
    if rank.deficient {
        return Err(OracleError::SingularGram(what));
    }
    let coefficients = gram.cholesky().ok_or(OracleError::SingularGram(what))?.solve(&rhs);
    let fitted = (basis * &coefficients).iter().copied().collect();
    Ok(Projection { coefficients, fitted })
}

// Relative L2 residual of an (unweighted-law) least-squares fit of `values` on `basis`.
fn span_residual(values: &[f64], basis: &DMatrix<f64>, measure: &[f64]) -> f64 {
    let Ok(p) = weighted_projection(values, basis, measure, "span check") else {
        return f64::INFINITY;
    };
    let res: f64 = values.iter().zip(&p.fitted).zip(measure).map(|((v, f), m)| m * (v - f).powi(2)).sum();
    let norm: f64 = values.iter().zip(measure).map(|(v, m)| m * v * v).sum();
    res.sqrt() / (1.0 + norm.sqrt())
}

const SPAN_TOL: f64 = 1e-8;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl<'a> OracleContext<'a> {
    pub fn new(truth: &'a TruthFunctions, spec: &'a BasisSpec, grid: &'a IntegrationGrid) -> Result<Self, OracleError> {
        if grid.dim != truth.law.dim() {
            return Err(OracleError::Dimension { grid: grid.dim, law: truth.law.dim() });
        }
        let n = grid.len();
        let (kh, kg) = (spec.h_len(), spec.g_len());
        let mut h = DMatrix::zeros(n, kh);
        let mut g = DMatrix::zeros(n, kg);
        let mut rho = Vec::with_capacity(n);
        let mut pi = Vec::with_capacity(n);
        for (j, x) in grid.points().enumerate() {
            for (k, v) in spec.eval_h(x).into_iter().enumerate() {
                h[(j, k)] = v;
            }
            for (k, v) in spec.eval_g(x).into_iter().enumerate() {
                g[(j, k)] = v;
            }
            rho.push((truth.participation)(x));
            pi.push((truth.propensity)(x));
        }
        let w = &grid.weights;
        let rho_bar: f64 = rho.iter().zip(w).map(|(r, w)| r * w).sum();
        let source: Vec<f64> = rho.iter().zip(w).map(|(r, w)| w * r / rho_bar).collect();

        // logit π = λ_πᵀH + γ_πᵀG must hold exactly on the grid
        let mut hg = DMatrix::zeros(n, kh + kg);
        hg.columns_mut(0, kh).copy_from(&h);
        hg.columns_mut(kh, kg).copy_from(&g);
        let logits: Vec<f64> = pi.iter().map(|&p| logit(p)).collect();
        let fit = weighted_projection(&logits, &hg, &source, "Span{H, G}")?;
        let resid = span_residual(&logits, &hg, &source);
        if resid > SPAN_TOL {
            return Err(OracleError::HypothesisViolated(format!(
                "logit of the propensity is not in Span{{H, G}} (relative residual {resid:.3e})"
            )));
        }
        let lambda_pi = fit.coefficients.rows(0, kh).into_owned();
        let gamma_pi = fit.coefficients.rows(kh, kg).into_owned();

        // E[H | S = 0]
        let mut target = DVector::zeros(kh);
        for j in 0..n {
            let m = w[j] * (1.0 - rho[j]) / (1.0 - rho_bar);
            for k in 0..kh {
                target[k] += m * h[(j, k)];
            }
        }
        let offsets = DVector::from_iterator(
            n,
            (0..n).map(|j| {
                let eta: f64 = (0..kh).map(|k| lambda_pi[k] * h[(j, k)]).sum::<f64>()
                    + (0..kg).map(|k| gamma_pi[k] * g[(j, k)]).sum::<f64>();
                let half_g: f64 = 0.5 * (0..kg).map(|k| gamma_pi[k] * g[(j, k)]).sum::<f64>();
                let softplus = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
                source[j].ln() + half_g - softplus
            }),
        );
        let problem = Tilting { features: h.clone(), offsets: Some(offsets), target, norm: 1.0 };
        let opts = SolverOptions { tol: 1e-11, max_iter: 500, ..Default::default() };
        let sol = problem.solve(&opts);
        if !(sol.gradient_norm <= 1e-8) {
            return Err(OracleError::NonConverged(sol.gradient_norm));
        }
        let dual = LimitingDual {
            lambda0_star: sol.theta.clone(),
            lambda_pi,
            gamma_pi,
            residual: sol.gradient_norm,
            iterations: sol.iterations,
        };
        let mut r_tilde = Vec::with_capacity(n);
        for j in 0..n {
            let hr: Vec<f64> = h.row(j).iter().copied().collect();
            let gr: Vec<f64> = g.row(j).iter().copied().collect();
            r_tilde.push(dual.r_tilde(&hr, &gr));
        }
        let tilted: Vec<f64> = source.iter().zip(&r_tilde).map(|(s, r)| s * r).collect();

        let mut g_perp = g.clone();
        for k in 0..kg {
            let col: Vec<f64> = g.column(k).iter().copied().collect();
            let p = weighted_projection(&col, &h, &tilted, "Span{H}")?;
            for j in 0..n {
                g_perp[(j, k)] -= p.fitted[j];
            }
        }
        Ok(OracleContext { truth, spec, grid, h, g, rho, pi, rho_bar, dual, r_tilde, tilted, g_perp })
    }

    pub fn limiting_dual(&self) -> &LimitingDual {
        &self.dual
    }

    /// Marginal participation ρ = E[ρ(X)].
    pub fn rho(&self) -> f64 {
        self.rho_bar
    }

    pub fn grid(&self) -> &IntegrationGrid {
        self.grid
    }

    pub fn spec(&self) -> &BasisSpec {
        self.spec
    }

    /// `E[f(X) | S = 1]`.
    pub fn source_mean(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.grid.points().enumerate().map(|(j, x)| self.grid.weights[j] * self.rho[j] * f(x)).sum::<f64>() / self.rho_bar
    }

    /// `E[f(X) | S = 0]`.
    pub fn target_mean(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.grid
            .points()
            .enumerate()
            .map(|(j, x)| self.grid.weights[j] * (1.0 - self.rho[j]) * f(x))
            .sum::<f64>()
            / (1.0 - self.rho_bar)
    }

    /// `E[r̃(X) f(X) | S = 1]`.
    pub fn tilted_mean(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.grid.points().zip(&self.tilted).map(|(x, m)| m * f(x)).sum()
    }

    pub fn r_tilde_at_nodes(&self) -> &[f64] {
        &self.r_tilde
    }

    pub fn values(&self, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        self.grid.points().map(f).collect()
    }

    /// Π_H under the r̃-tilted source law.
    pub fn project_h(&self, f: impl Fn(&[f64]) -> f64) -> Result<Projection, OracleError> {
        self.project_h_values(&self.values(f))
    }

    pub fn project_h_values(&self, values: &[f64]) -> Result<Projection, OracleError> {
        weighted_projection(values, &self.h, &self.tilted, "Span{H}")
    }

    /// Π_{G⊥}; coefficients refer to the columns of G⊥ = G − Π_H(G).
    pub fn project_g_perp(&self, f: impl Fn(&[f64]) -> f64) -> Result<Projection, OracleError> {
        self.project_g_perp_values(&self.values(f))
    }

    pub fn project_g_perp_values(&self, values: &[f64]) -> Result<Projection, OracleError> {
        weighted_projection(values, &self.g_perp, &self.tilted, "Span{G⊥}")
    }

    /// Π_{H+G}: projection onto Span{H, G}.
    pub fn project_hg_values(&self, values: &[f64]) -> Result<Projection, OracleError> {
        let (kh, kg) = (self.h.ncols(), self.g.ncols());
        let mut hg = DMatrix::zeros(self.h.nrows(), kh + kg);
        hg.columns_mut(0, kh).copy_from(&self.h);
        hg.columns_mut(kh, kg).copy_from(&self.g);
        weighted_projection(values, &hg, &self.tilted, "Span{H, G}")
    }

    /// `E[r̃ f² | S = 1]`.
    pub fn tilted_norm_sq(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.tilted).map(|(v, m)| m * v * v).sum()
    }

    fn law_mean(&self, values: impl Iterator<Item = f64>) -> f64 {
        values.zip(&self.grid.weights).map(|(v, w)| v * w).sum()
    }

    pub fn conditions(&self) -> ConditionReport {
        let source: Vec<f64> = self.grid.weights.iter().zip(&self.rho).map(|(w, r)| w * r / self.rho_bar).collect();
        let mu0 = self.values(|x| (self.truth.mu0)(x));
        let mu1 = self.values(|x| (self.truth.mu1)(x));
        let tau: Vec<f64> = mu1.iter().zip(&mu0).map(|(a, b)| a - b).collect();
        let a = span_residual(&mu0, &self.h, &source) <= SPAN_TOL && span_residual(&mu1, &self.h, &source) <= SPAN_TOL;
        let c = span_residual(&tau, &self.h, &source) <= SPAN_TOL;
        // target/source density ratio times (1 + e^η) / e^{γ_πᵀG/2} must be exp-linear in H
        let kh = self.h.ncols();
        let kg = self.g.ncols();
        let lp = &self.dual.lambda_pi;
        let gp = &self.dual.gamma_pi;
        let b_values: Vec<f64> = (0..self.h.nrows())
            .map(|j| {
                let ratio = (1.0 - self.rho[j]) / self.rho[j] * self.rho_bar / (1.0 - self.rho_bar);
                let eta: f64 = (0..kh).map(|k| lp[k] * self.h[(j, k)]).sum::<f64>() + (0..kg).map(|k| gp[k] * self.g[(j, k)]).sum::<f64>();
                let half_g: f64 = 0.5 * (0..kg).map(|k| gp[k] * self.g[(j, k)]).sum::<f64>();
                ratio.ln() + eta.exp().ln_1p() - half_g
            })
            .collect();
        let b = span_residual(&b_values, &self.h, &source) <= SPAN_TOL;
        ConditionReport { logistic_in_basis: true, a, b, c }
    }

    /// Asymptotic variance of `√n (τ̂ − τ*)` with `n` the total sample size,
    /// split into its three terms, together with the efficiency bound.
    pub fn asymptotic_variance(&self) -> Result<AsymptoticReport, OracleError> {
        let t = self.truth;
        let mu0 = self.values(|x| (t.mu0)(x));
        let mu1 = self.values(|x| (t.mu1)(x));
        let var0 = self.values(|x| (t.var0)(x));
        let var1 = self.values(|x| (t.var1)(x));
        let tau: Vec<f64> = mu1.iter().zip(&mu0).map(|(a, b)| a - b).collect();
        let m: Vec<f64> = mu1.iter().zip(&mu0).map(|(a, b)| 0.5 * (a + b)).collect();
        let rho = self.rho_bar;
        let n = self.grid.len();
        let tau_star = self.law_mean((0..n).map(|j| (1.0 - self.rho[j]) * tau[j])) / (1.0 - rho);

        let pi_tau = self.project_h_values(&tau)?;
        let pi_mu1 = self.project_h_values(&mu1)?;
        let pi_mu0 = self.project_h_values(&mu0)?;
        let perp_m = self.project_g_perp_values(&m)?;

        let r = &self.r_tilde;
        let noise = |j: usize| var1[j] / self.pi[j] + var0[j] / (1.0 - self.pi[j]);
        let v1 = self.law_mean((0..n).map(|j| self.rho[j] * r[j] * r[j] * noise(j))) / (rho * rho);
        let v2 = self.law_mean((0..n).map(|j| (1.0 - self.rho[j]) * (pi_tau.fitted[j] - tau_star).powi(2)))
            / ((1.0 - rho) * (1.0 - rho));
        let v3 = self.law_mean((0..n).map(|j| {
            let e1 = mu1[j] - pi_mu1.fitted[j] - perp_m.fitted[j];
            let e0 = mu0[j] - pi_mu0.fitted[j] - perp_m.fitted[j];
            self.rho[j] * r[j] * r[j] * (e1 * e1 / self.pi[j] + e0 * e0 / (1.0 - self.pi[j]))
        })) / (rho * rho);
        let bound = self.law_mean((0..n).map(|j| {
            let q = 1.0 - self.rho[j];
            q * q / self.rho[j] * noise(j) + q * (tau[j] - tau_star).powi(2)
        })) / ((1.0 - rho) * (1.0 - rho));
        let total = v1 + v2 + v3;
        let conditions = self.conditions();
        let r_tilde_mean = self.tilted.iter().sum();
        Ok(AsymptoticReport {
            lambda0_star: self.dual.lambda0_star.iter().copied().collect(),
            lambda_pi: self.dual.lambda_pi.iter().copied().collect(),
            gamma_pi: self.dual.gamma_pi.iter().copied().collect(),
            rho,
            tau_star,
            r_tilde_mean,
            v1,
            v2,
            v3,
            total,
            efficiency_bound: bound,
            gap: total - bound,
            hypothesis_violated: !(conditions.b || conditions.c),
            conditions,
        })
    }
}

/// Solves the population moment equation `E[r̃ H | S=1] = E[H | S=0]` for λ₀*.
pub fn solve_limiting_dual(truth: &TruthFunctions, spec: &BasisSpec, grid: &IntegrationGrid) -> Result<LimitingDual, OracleError> {
    Ok(OracleContext::new(truth, spec, grid)?.dual)
}

pub fn asymptotic_variance(truth: &TruthFunctions, spec: &BasisSpec, grid: &IntegrationGrid) -> Result<AsymptoticReport, OracleError> {
    OracleContext::new(truth, spec, grid)?.asymptotic_variance()
}

/// Propensity `logistic(η(x))` from a linear predictor closure.
pub fn logistic_fn(eta: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> ScalarFn {
    Arc::new(move |x| logistic(eta(x)))
}
