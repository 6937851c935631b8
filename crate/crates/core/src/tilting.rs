//! Damped Newton engine for exponential-tilting duals of the form
//! `f(θ) = (1/N) Σ_i exp(a_iᵀθ + o_i) − bᵀθ`.
//!
//! Every balancing problem in the crate reduces to this shape: rows `a_i`
//! are the (signed, block-placed) basis values of unit `i`, `o_i` an optional
//! log base weight, and `b` the constraint right-hand side. The gradient is
//! the constraint residual and the Hessian the weighted second moment.

use nalgebra::{DMatrix, DVector};

use crate::solver::SolverOptions;

pub(crate) struct Tilting {
    pub features: DMatrix<f64>,
    pub offsets: Option<DVector<f64>>,
    pub target: DVector<f64>,
    pub norm: f64,
}

pub(crate) struct TiltEval {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: Option<DMatrix<f64>>,
    pub capped: bool,
    pub max_score: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct TiltFit {
    pub theta: DVector<f64>,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    pub objective: f64,
}

impl Tilting {
    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn scores(&self, theta: &DVector<f64>) -> DVector<f64> {
        let mut s = &self.features * theta;
        if let Some(o) = &self.offsets {
            s += o;
        }
        s
    }

    pub fn weights(&self, theta: &DVector<f64>) -> Vec<f64> {
        self.scores(theta).iter().map(|s| s.exp()).collect()
    }

    pub fn evaluate(&self, theta: &DVector<f64>, cap: f64, with_hessian: bool) -> TiltEval {
        let scores = self.scores(theta);
        let max_score = scores.max();
        if max_score > cap || !max_score.is_finite() {
            return TiltEval {
                value: f64::INFINITY,
                gradient: DVector::from_element(self.dim(), f64::NAN),
                hessian: None,
                capped: true,
                max_score,
            };
        }
        let w = scores.map(f64::exp);
        let value = w.sum() / self.norm - self.target.dot(theta);
        let gradient = self.features.tr_mul(&w) / self.norm - &self.target;
        let hessian = with_hessian.then(|| {
            let mut scaled = self.features.clone();
            for (i, mut row) in scaled.row_iter_mut().enumerate() {
                row *= w[i] / self.norm;
            }
            let mut h = self.features.tr_mul(&scaled);
            // exact symmetry
            for i in 0..h.nrows() {
                for j in 0..i {
                    let v = 0.5 * (h[(i, j)] + h[(j, i)]);
                    h[(i, j)] = v;
                    h[(j, i)] = v;
                }
            }
            h
        });
        TiltEval { value, gradient, hessian, capped: false, max_score }
    }

    /// Newton with Armijo backtracking from θ = 0.
    pub fn solve(&self, opts: &SolverOptions) -> TiltFit {
        self.solve_from(DVector::zeros(self.dim()), opts)
    }

    pub fn solve_from(&self, mut theta: DVector<f64>, opts: &SolverOptions) -> TiltFit {
        let mut eval = self.evaluate(&theta, opts.score_cap, true);
        if eval.capped {
            return TiltFit { theta, iterations: 0, gradient_norm: f64::INFINITY, converged: false, objective: f64::INFINITY };
        }
        let mut iterations = 0;
        let mut converged = false;
        while iterations < opts.max_iter {
            let gnorm = eval.gradient.amax();
            if gnorm <= opts.tol {
                converged = true;
                break;
            }
            iterations += 1;
            let hess = eval.hessian.take().expect("hessian requested");
            let neg_grad = -&eval.gradient;
            let mut dir = hess
                .cholesky()
                .map(|c| c.solve(&neg_grad))
                .filter(|d| d.iter().all(|v| v.is_finite()))
                .unwrap_or_else(|| neg_grad.clone());
            let mut slope = eval.gradient.dot(&dir);
            if !(slope < 0.0) {
                dir = neg_grad;
                slope = eval.gradient.dot(&dir);
            }
            // Below this decrement the objective cannot resolve an Armijo test.
            let negligible = -slope <= 1e-13 * (1.0 + eval.value.abs());
            let mut step = 1.0;
            let mut accepted = None;
            while step >= 1e-20 {
                let cand = &theta + &dir * step;
                let e = self.evaluate(&cand, opts.score_cap, true);
                if !e.capped {
                    let armijo = e.value <= eval.value + opts.armijo * step * slope;
                    if armijo || (negligible && e.gradient.amax() < gnorm) {
                        accepted = Some((cand, e));
                        break;
                    }
                }
                step *= opts.backtrack;
            }
            match accepted {
                Some((cand, e)) => {
                    theta = cand;
                    eval = e;
                }
                None => break,
            }
        }
        if !converged && eval.gradient.amax() <= opts.tol {
            converged = true;
        }
        // a solution pressed against the score cap is not trusted
        if converged && eval.max_score >= opts.score_cap - 1e-9 {
            converged = false;
        }
        TiltFit { gradient_norm: eval.gradient.amax(), objective: eval.value, theta, iterations, converged }
    }
}
