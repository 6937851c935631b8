//! Shared fixtures for the integration and acceptance tests: random
//! balancing instances, an independent primal solver, and finite differences.
#![allow(dead_code)]

use extbal::basis::{align_target_summary, evaluate_basis, DesignMatrices, TargetSummary};
use extbal::{Arms, BasisSpec, SourceSample};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct Instance {
    pub sample: SourceSample,
    pub spec: BasisSpec,
    /// Raw target means of the H terms, constant first.
    pub raw_target: Vec<f64>,
}

impl Instance {
    pub fn design(&self) -> (DesignMatrices, TargetSummary) {
        let d = evaluate_basis(&self.spec, &self.sample).expect("basis evaluates");
        let t = align_target_summary(&self.spec, &self.raw_target, &d).expect("target aligns");
        (d, t)
    }

    pub fn arms(&self) -> Arms {
        self.sample.arms()
    }

    /// Raw H and G values row by row.
    pub fn raw_basis(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.sample.n();
        let (kh, kg) = (self.spec.h_len(), self.spec.g_len());
        let mut h = DMatrix::zeros(n, kh);
        let mut g = DMatrix::zeros(n, kg);
        for i in 0..n {
            let row = self.sample.row(i);
            for (k, v) in self.spec.eval_h(&row).into_iter().enumerate() {
                h[(i, k)] = v;
            }
            for (k, v) in self.spec.eval_g(&row).into_iter().enumerate() {
                g[(i, k)] = v;
            }
        }
        (h, g)
    }
}

/// Random feasible instance: Gaussian covariates, confounded treatment, and
/// a target equal to the source H means shifted by a small random amount.
/// `kh` counts the constant.
pub fn random_instance(rng: &mut ChaCha8Rng, n: usize, kh: usize, kg: usize) -> Instance {
    assert!(kh >= 1);
    let p = (kh - 1) + kg;
    let x = DMatrix::from_fn(n, p.max(1), |_, _| rng.sample::<f64, _>(StandardNormal));
    let coef: Vec<f64> = (0..p).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut a: Vec<bool> = (0..n)
        .map(|i| {
            let eta: f64 = (0..p).map(|j| coef[j] * x[(i, j)]).sum();
            rng.random_bool(1.0 / (1.0 + (-eta).exp()))
        })
        .collect();
    a[0] = true;
    a[1] = false;
    let y: Vec<f64> = (0..n).map(|i| x[(i, 0)] + rng.sample::<f64, _>(StandardNormal)).collect();
    let sample = SourceSample::new(x, a, y).unwrap();
    let h_cols: Vec<usize> = (0..kh - 1).collect();
    let g_cols: Vec<usize> = (kh - 1..p).collect();
    let spec = BasisSpec::linear(&h_cols, &g_cols).unwrap();
    let mut raw_target = vec![0.0; kh];
    for i in 0..n {
        for (k, v) in spec.eval_h(&sample.row(i)).into_iter().enumerate() {
            raw_target[k] += v / n as f64;
        }
    }
    raw_target[0] = 1.0;
    for v in raw_target.iter_mut().skip(1) {
        *v += rng.random_range(-0.15..0.15);
    }
    Instance { sample, spec, raw_target }
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Solves `min Σ (w log w − w)` subject to `A w = c`, `w > 0`, by the
/// infeasible-start primal-dual Newton method on the KKT system. Rows of `a`
/// are constraints, columns are units.
pub fn primal_entropy_weights(a: &DMatrix<f64>, c: &DVector<f64>, tol: f64) -> Option<Vec<f64>> {
    let n = a.ncols();
    let m = a.nrows();
    let mut w = DVector::from_element(n, 1.0);
    let mut nu = DVector::zeros(m);
    let residual = |w: &DVector<f64>, nu: &DVector<f64>| {
        let r_dual = w.map(f64::ln) + a.tr_mul(nu);
        let r_pri = a * w - c;
        (r_dual, r_pri)
    };
    for _ in 0..500 {
        let (r_dual, r_pri) = residual(&w, &nu);
        let norm = (r_dual.norm_squared() + r_pri.norm_squared()).sqrt();
        if r_pri.amax() <= tol && r_dual.amax() <= tol {
            return Some(w.iter().copied().collect());
        }
        // Hessian of the objective is diag(1/w); eliminate Δw.
        let mut aw = a.clone();
        for j in 0..n {
            aw.column_mut(j).scale_mut(w[j]);
        }
        let schur = &aw * a.transpose();
        let rhs = &r_pri - &aw * &r_dual;
        let dnu = schur.clone().lu().solve(&rhs)?;
        let dw = -(r_dual.component_mul(&w) + aw.tr_mul(&dnu));
        let mut t = 1.0;
        while (0..n).any(|j| w[j] + t * dw[j] <= 0.0) {
            t *= 0.5;
        }
        loop {
            let w_new = &w + &dw * t;
            let nu_new = &nu + &dnu * t;
            let (rd, rp) = residual(&w_new, &nu_new);
            let new_norm = (rd.norm_squared() + rp.norm_squared()).sqrt();
            if new_norm <= (1.0 - 0.01 * t) * norm || t < 1e-12 {
                w = w_new;
                nu = nu_new;
                break;
            }
            t *= 0.5;
        }
    }
    None
}

/// Primal extended balancing in raw units: each arm's H totals equal
/// `n · h̄` and treated G totals equal control G totals.
pub fn primal_extended(inst: &Instance) -> Option<Vec<f64>> {
    let (h, g) = inst.raw_basis();
    let n = inst.sample.n();
    let (kh, kg) = (h.ncols(), g.ncols());
    let treat = inst.sample.treatment();
    let mut a = DMatrix::zeros(2 * kh + kg, n);
    for i in 0..n {
        let off = if treat[i] { 0 } else { kh };
        for k in 0..kh {
            a[(off + k, i)] = h[(i, k)];
        }
        let sign = if treat[i] { 1.0 } else { -1.0 };
        for k in 0..kg {
            a[(2 * kh + k, i)] = sign * g[(i, k)];
        }
    }
    let mut c = DVector::zeros(2 * kh + kg);
    for k in 0..kh {
        c[k] = n as f64 * inst.raw_target[k];
        c[kh + k] = n as f64 * inst.raw_target[k];
    }
    primal_entropy_weights(&a, &c, 1e-13)
}

/// Balance residuals in raw units, divided by n.
pub fn raw_residuals(inst: &Instance, w: &[f64]) -> Vec<f64> {
    let (h, g) = inst.raw_basis();
    let n = inst.sample.n() as f64;
    let treat = inst.sample.treatment();
    let mut out = Vec::new();
    for arm in [true, false] {
        for k in 0..h.ncols() {
            let s: f64 = (0..w.len()).filter(|&i| treat[i] == arm).map(|i| w[i] * h[(i, k)]).sum();
            out.push(s / n - inst.raw_target[k]);
        }
    }
    for k in 0..g.ncols() {
        let s: f64 = (0..w.len()).map(|i| if treat[i] { w[i] } else { -w[i] } * g[(i, k)]).sum();
        out.push(s / n);
    }
    out
}

pub fn sup(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Central difference of a scalar function at `x` along every coordinate.
pub fn central_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    DVector::from_fn(x.len(), |k, _| {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        (f(&xp) - f(&xm)) / (2.0 * h)
    })
}

/// Central difference of a vector function; column `k` is ∂F/∂x_k.
pub fn central_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let m = f(x).len();
    let mut jac = DMatrix::zeros(m, x.len());
    for k in 0..x.len() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[k] += h;
        xm[k] -= h;
        jac.set_column(k, &((f(&xp) - f(&xm)) / (2.0 * h)));
    }
    jac
}
