//! Deterministic integration rules for expectations over a covariate law.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Gauss–Legendre nodes and weights on [-1, 1].
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(order >= 1, "quadrature order must be positive");
    let n = order;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // three-term recurrence for P_n and its derivative
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        if n == 1 {
            dp = 1.0;
            x = 0.0;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// Covariate distributions understood by the integration and sampling code.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum CovariateLaw {
    /// Independent Uniform[low, high] coordinates.
    Uniform { low: f64, high: f64, dim: usize },
    /// Independent standard normal coordinates.
    Normal { dim: usize },
}

impl CovariateLaw {
    pub fn dim(&self) -> usize {
        match *self {
            CovariateLaw::Uniform { dim, .. } | CovariateLaw::Normal { dim } => dim,
        }
    }

    /// Tensor Gauss–Legendre for bounded laws, quasi-random points otherwise.
    pub fn default_grid(&self) -> IntegrationGrid {
        match *self {
            CovariateLaw::Uniform { low, high, dim } => {
                let order = match dim {
                    0..=3 => 24,
                    4 => 16,
                    5 => 12,
                    6 => 8,
                    _ => 0,
                };
                if order > 0 {
                    IntegrationGrid::uniform_box(low, high, dim, order)
                } else {
                    IntegrationGrid::quasi_random(self, 1_000_000)
                }
            }
            CovariateLaw::Normal { .. } => IntegrationGrid::quasi_random(self, 1_000_000),
        }
    }
}

/// Weighted point set approximating a probability measure (weights sum to 1).
#[derive(Debug, Clone, PartialEq)]
pub struct IntegrationGrid {
    pub dim: usize,
    points: Vec<f64>,
    pub weights: Vec<f64>,
}

const PRIMES: [u64; 16] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53];

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let mut out = 0.0;
    let mut f = inv;
    while i > 0 {
        out += (i % base) as f64 * f;
        i /= base;
        f *= inv;
    }
    out
}

impl IntegrationGrid {
    /// Product Gauss–Legendre rule for the uniform law on `[low, high]^dim`.
    pub fn uniform_box(low: f64, high: f64, dim: usize, order: usize) -> Self {
        let (x, w) = gauss_legendre(order);
        let half = 0.5 * (high - low);
        let mid = 0.5 * (high + low);
        let nodes: Vec<f64> = x.iter().map(|v| mid + half * v).collect();
        let probs: Vec<f64> = w.iter().map(|v| 0.5 * v).collect();
        let count = order.pow(dim as u32);
        let mut points = Vec::with_capacity(count * dim);
        let mut weights = Vec::with_capacity(count);
        let mut idx = vec![0usize; dim];
        for _ in 0..count {
            let mut wt = 1.0;
            for &k in &idx {
                points.push(nodes[k]);
                wt *= probs[k];
            }
            weights.push(wt);
            for d in (0..dim).rev() {
                idx[d] += 1;
                if idx[d] < order {
                    break;
                }
                idx[d] = 0;
            }
        }
        IntegrationGrid { dim, points, weights }
    }

    /// Halton points mapped through the law's quantile function, equal weights.
    pub fn quasi_random(law: &CovariateLaw, count: usize) -> Self {
        let dim = law.dim();
        assert!(dim <= PRIMES.len(), "quasi-random rule supports at most {} dimensions", PRIMES.len());
        let normal = Normal::new(0.0, 1.0).expect("standard normal");
        let mut points = Vec::with_capacity(count * dim);
        for i in 1..=count as u64 {
            for &b in PRIMES.iter().take(dim) {
                let u = radical_inverse(i, b);
                points.push(match *law {
                    CovariateLaw::Uniform { low, high, .. } => low + (high - low) * u,
                    CovariateLaw::Normal { .. } => normal.inverse_cdf(u),
                });
            }
        }
        IntegrationGrid { dim, points, weights: vec![1.0 / count as f64; count] }
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.points[j * self.dim..(j + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim.max(1))
    }

    /// `E[f(X)]` under the grid's measure.
    pub fn expect(&self, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.points().zip(&self.weights).map(|(x, w)| w * f(x)).sum()
    }
}
