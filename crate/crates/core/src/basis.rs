//! Covariate-function sets H (summarised in the target) and G (source-only
//! balancing terms), their evaluation on a source sample, and alignment of
//! raw target means to the standardized solver coordinates.

use std::collections::HashSet;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::SourceSample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BasisError {
    #[error("basis must contain exactly one constant term, placed first on the H side")]
    Constant,
    #[error("duplicate basis term `{0}`")]
    Duplicate(String),
    #[error("term `{term}` references covariate {index} but the sample has {p} covariates")]
    IndexOutOfRange { term: String, index: usize, p: usize },
    #[error("power term needs degree >= 2, got {0}")]
    Degree(u32),
    #[error("category {level} of covariate {col} does not occur in the sample")]
    CategoryAbsent { col: usize, level: String },
    #[error("basis term `{0}` has zero variance on the source sample")]
    ZeroVariance(String),
    #[error("basis term `{term}` is not finite at row {row}")]
    NonFinite { term: String, row: usize },
    #[error("target summary has {got} entries, basis has {expected} H terms")]
    Length { expected: usize, got: usize },
    #[error("target summary constant entry must equal 1, got {0}")]
    ConstantEntry(f64),
}

/// Named scalar transforms available to custom terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Log1p,
    /// `exp(x)` with `x` clipped to [-30, 30].
    ExpClip,
    Abs,
}

impl Transform {
    pub const ALL: [Transform; 3] = [Transform::Log1p, Transform::ExpClip, Transform::Abs];

    pub fn name(self) -> &'static str {
        match self {
            Transform::Log1p => "log1p",
            Transform::ExpClip => "expclip",
            Transform::Abs => "abs",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Transform::ALL.into_iter().find(|t| t.name() == name)
    }

    pub fn apply(self, v: f64) -> f64 {
        match self {
            Transform::Log1p => v.ln_1p(),
            Transform::ExpClip => v.clamp(-30.0, 30.0).exp(),
            Transform::Abs => v.abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Term {
    Constant,
    Identity { col: usize },
    Power { col: usize, degree: u32 },
    Indicator {
        col: usize,
        value: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        level: Option<String>,
        #[serde(default)]
        allow_absent: bool,
    },
    Product { a: usize, b: usize },
    Custom { transform: Transform, col: usize },
}

impl Term {
    pub fn eval(&self, row: &[f64]) -> f64 {
        match *self {
            Term::Constant => 1.0,
            Term::Identity { col } => row[col],
            Term::Power { col, degree } => row[col].powi(degree as i32),
            Term::Indicator { col, value, .. } => {
                if row[col] == value {
                    1.0
                } else {
                    0.0
                }
            }
            Term::Product { a, b } => row[a] * row[b],
            Term::Custom { transform, col } => transform.apply(row[col]),
        }
    }

    fn columns(&self) -> Vec<usize> {
        match *self {
            Term::Constant => vec![],
            Term::Identity { col }
            | Term::Power { col, .. }
            | Term::Indicator { col, .. }
            | Term::Custom { col, .. } => vec![col],
            Term::Product { a, b } => vec![a, b],
        }
    }

    /// Human-readable name, used to match target summary entries.
    pub fn label(&self, names: &[String]) -> String {
        let name = |j: usize| names.get(j).cloned().unwrap_or_else(|| format!("x{}", j + 1));
        match self {
            Term::Constant => "const".into(),
            Term::Identity { col } => name(*col),
            Term::Power { col, degree } => format!("{}^{}", name(*col), degree),
            Term::Indicator { col, value, level, .. } => match level {
                Some(l) => format!("{}={}", name(*col), l),
                None => format!("{}={}", name(*col), value),
            },
            Term::Product { a, b } => format!("{}*{}", name(*a), name(*b)),
            Term::Custom { transform, col } => format!("{}({})", transform.name(), name(*col)),
        }
    }

    // Key used for duplicate detection; products are unordered.
    fn key(&self) -> String {
        match *self {
            Term::Product { a, b } => format!("prod:{}:{}", a.min(b), a.max(b)),
            Term::Indicator { col, value, .. } => format!("ind:{col}:{value}"),
            ref other => format!("{other:?}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    H,
    G,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisTerm {
    pub term: Term,
    pub side: Side,
}

/// Validated set of basis terms. The constant is always the first H term.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasisSpec {
    terms: Vec<BasisTerm>,
}

impl<'de> Deserialize<'de> for BasisSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            terms: Vec<BasisTerm>,
        }
        let raw = Raw::deserialize(d)?;
        BasisSpec::new(raw.terms).map_err(serde::de::Error::custom)
    }
}

impl BasisSpec {
    pub fn new(terms: Vec<BasisTerm>) -> Result<Self, BasisError> {
        let constants: Vec<_> = terms.iter().enumerate().filter(|(_, t)| t.term == Term::Constant).collect();
        if constants.len() != 1 || constants[0].1.side != Side::H {
            return Err(BasisError::Constant);
        }
        let first_h = terms.iter().position(|t| t.side == Side::H);
        if first_h != Some(constants[0].0) {
            return Err(BasisError::Constant);
        }
        let mut seen = HashSet::new();
        for t in &terms {
            if let Term::Power { degree, .. } = t.term {
                if degree < 2 {
                    return Err(BasisError::Degree(degree));
                }
            }
            if !seen.insert(t.term.key()) {
                return Err(BasisError::Duplicate(t.term.label(&[])));
            }
        }
        Ok(BasisSpec { terms })
    }

    /// Constant plus identity terms: H = (1, x_h...), G = (x_g...).
    pub fn linear(h_cols: &[usize], g_cols: &[usize]) -> Result<Self, BasisError> {
        let mut terms = vec![BasisTerm { term: Term::Constant, side: Side::H }];
        terms.extend(h_cols.iter().map(|&col| BasisTerm { term: Term::Identity { col }, side: Side::H }));
        terms.extend(g_cols.iter().map(|&col| BasisTerm { term: Term::Identity { col }, side: Side::G }));
        BasisSpec::new(terms)
    }

    /// Constant-only basis.
    pub fn constant() -> Self {
        BasisSpec { terms: vec![BasisTerm { term: Term::Constant, side: Side::H }] }
    }

    pub fn builder() -> BasisBuilder {
        BasisBuilder { terms: vec![BasisTerm { term: Term::Constant, side: Side::H }] }
    }

    pub fn terms(&self) -> &[BasisTerm] {
        &self.terms
    }

    pub fn h_terms(&self) -> impl Iterator<Item = &Term> {
        self.terms.iter().filter(|t| t.side == Side::H).map(|t| &t.term)
    }

    pub fn g_terms(&self) -> impl Iterator<Item = &Term> {
        self.terms.iter().filter(|t| t.side == Side::G).map(|t| &t.term)
    }

    /// Number of H terms including the constant (K_h + 1).
    pub fn h_len(&self) -> usize {
        self.h_terms().count()
    }

    pub fn g_len(&self) -> usize {
        self.g_terms().count()
    }

    pub fn h_labels(&self, names: &[String]) -> Vec<String> {
        self.h_terms().map(|t| t.label(names)).collect()
    }

    pub fn g_labels(&self, names: &[String]) -> Vec<String> {
        self.g_terms().map(|t| t.label(names)).collect()
    }

    /// Drops the G side.
    pub fn h_only(&self) -> Self {
        BasisSpec { terms: self.terms.iter().filter(|t| t.side == Side::H).cloned().collect() }
    }

    /// Raw H(x) at a single covariate vector.
    pub fn eval_h(&self, row: &[f64]) -> Vec<f64> {
        self.h_terms().map(|t| t.eval(row)).collect()
    }

    pub fn eval_g(&self, row: &[f64]) -> Vec<f64> {
        self.g_terms().map(|t| t.eval(row)).collect()
    }

    pub fn max_column(&self) -> Option<usize> {
        self.terms.iter().flat_map(|t| t.term.columns()).max()
    }
}

pub struct BasisBuilder {
    terms: Vec<BasisTerm>,
}

impl BasisBuilder {
    pub fn h(mut self, term: Term) -> Self {
        self.terms.push(BasisTerm { term, side: Side::H });
        self
    }

    pub fn g(mut self, term: Term) -> Self {
        self.terms.push(BasisTerm { term, side: Side::G });
        self
    }

    /// One indicator per level except the first, which is the reference.
    pub fn indicators(mut self, side: Side, col: usize, levels: &[(f64, Option<String>)]) -> Self {
        for (value, level) in levels.iter().skip(1) {
            self.terms.push(BasisTerm {
                term: Term::Indicator { col, value: *value, level: level.clone(), allow_absent: false },
                side,
            });
        }
        self
    }

    pub fn build(self) -> Result<BasisSpec, BasisError> {
        BasisSpec::new(self.terms)
    }
}

/// Affine standardization `(v - center) / scale` of one design column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub center: f64,
    pub scale: f64,
}

impl ColumnScale {
    pub const IDENTITY: ColumnScale = ColumnScale { center: 0.0, scale: 1.0 };

    pub fn apply(&self, v: f64) -> f64 {
        (v - self.center) / self.scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Standardize {
    Yes,
    No,
}

/// H and G evaluated on every source row, in sample order.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrices {
    pub h: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub h_scale: Vec<ColumnScale>,
    pub g_scale: Vec<ColumnScale>,
}

impl DesignMatrices {
    pub fn n(&self) -> usize {
        self.h.nrows()
    }

    pub fn h_len(&self) -> usize {
        self.h.ncols()
    }

    pub fn g_len(&self) -> usize {
        self.g.ncols()
    }

    pub fn h_only(&self) -> DesignMatrices {
        DesignMatrices {
            h: self.h.clone(),
            g: DMatrix::zeros(self.n(), 0),
            h_scale: self.h_scale.clone(),
            g_scale: Vec::new(),
        }
    }

    /// `[H | G]`.
    pub fn combined(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n(), self.h_len() + self.g_len());
        m.columns_mut(0, self.h_len()).copy_from(&self.h);
        m.columns_mut(self.h_len(), self.g_len()).copy_from(&self.g);
        m
    }
}

/// Standardized target means of the H terms (constant entry first, equal to 1).
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSummary {
    pub values: DVector<f64>,
    pub n_t: Option<f64>,
}

impl TargetSummary {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_indices(spec: &BasisSpec, p: usize) -> Result<(), BasisError> {
    for t in spec.terms() {
        if let Some(&bad) = t.term.columns().iter().find(|&&j| j >= p) {
            return Err(BasisError::IndexOutOfRange { term: t.term.label(&[]), index: bad, p });
        }
    }
    Ok(())
}

fn evaluate_columns<'a>(
    terms: impl Iterator<Item = &'a Term>,
    sample: &SourceSample,
    standardize: Standardize,
) -> Result<(DMatrix<f64>, Vec<ColumnScale>), BasisError> {
    let terms: Vec<&Term> = terms.collect();
    let n = sample.n();
    let x = sample.covariates();
    let mut m = DMatrix::zeros(n, terms.len());
    let mut scales = Vec::with_capacity(terms.len());
    let mut row = vec![0.0; sample.p()];
    for i in 0..n {
        for (j, r) in row.iter_mut().enumerate() {
            *r = x[(i, j)];
        }
        for (k, t) in terms.iter().enumerate() {
            let v = t.eval(&row);
            if !v.is_finite() {
                return Err(BasisError::NonFinite { term: t.label(sample.names()), row: i });
            }
            m[(i, k)] = v;
        }
    }
    for (k, t) in terms.iter().enumerate() {
        if let Term::Indicator { col, value, level, allow_absent } = t {
            if !allow_absent && m.column(k).iter().all(|&v| v == 0.0) {
                return Err(BasisError::CategoryAbsent {
                    col: *col,
                    level: level.clone().unwrap_or_else(|| value.to_string()),
                });
            }
        }
        if **t == Term::Constant {
            scales.push(ColumnScale::IDENTITY);
            continue;
        }
        let col = m.column(k);
        let mean = col.mean();
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if !(sd > 1e-12 * (1.0 + mean.abs())) {
            return Err(BasisError::ZeroVariance(t.label(sample.names())));
        }
        let scale = match standardize {
            Standardize::Yes => ColumnScale { center: mean, scale: sd },
            Standardize::No => ColumnScale::IDENTITY,
        };
        m.column_mut(k).apply(|v| *v = scale.apply(*v));
        scales.push(scale);
    }
    Ok((m, scales))
}

/// Materializes H(X_i) and G(X_i), standardizing every non-constant column
/// by its source mean and divide-by-n standard deviation.
pub fn evaluate_basis(spec: &BasisSpec, sample: &SourceSample) -> Result<DesignMatrices, BasisError> {
    evaluate_basis_with(spec, sample, Standardize::Yes)
}

pub fn evaluate_basis_with(
    spec: &BasisSpec,
    sample: &SourceSample,
    standardize: Standardize,
) -> Result<DesignMatrices, BasisError> {
    check_indices(spec, sample.p())?;
    let (h, h_scale) = evaluate_columns(spec.h_terms(), sample, standardize)?;
    let (g, g_scale) = evaluate_columns(spec.g_terms(), sample, standardize)?;
    Ok(DesignMatrices { h, g, h_scale, g_scale })
}

/// Maps raw target means of the H terms into the design's standardized coordinates.
pub fn align_target_summary(
    spec: &BasisSpec,
    raw: &[f64],
    design: &DesignMatrices,
) -> Result<TargetSummary, BasisError> {
    let expected = spec.h_len();
    if raw.len() != expected || design.h_scale.len() != expected {
        return Err(BasisError::Length { expected, got: raw.len() });
    }
    if raw[0] != 1.0 {
        return Err(BasisError::ConstantEntry(raw[0]));
    }
    let values = DVector::from_iterator(expected, raw.iter().zip(&design.h_scale).map(|(v, s)| s.apply(*v)));
    Ok(TargetSummary { values, n_t: None })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankReport {
    pub columns: usize,
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub condition_number: f64,
    pub deficient: bool,
}

impl fmt::Display for RankReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "rank {} of {} columns (condition number {:.3e})",
            self.rank, self.columns, self.condition_number
        )
    }
}

/// Relative singular-value cutoff below which a direction counts as null.
pub const RANK_TOLERANCE: f64 = 1e-10;

pub fn matrix_rank(m: &DMatrix<f64>) -> RankReport {
    let columns = m.ncols();
    if columns == 0 || m.nrows() == 0 {
        return RankReport { columns, rank: 0, singular_values: vec![], condition_number: f64::INFINITY, deficient: columns > 0 };
    }
    let mut sv: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let top = sv[0];
    let rank = sv.iter().filter(|&&s| top > 0.0 && s / top >= RANK_TOLERANCE).count();
    let smallest = if sv.len() < columns { 0.0 } else { *sv.last().unwrap() };
    RankReport {
        columns,
        rank,
        condition_number: if smallest > 0.0 { top / smallest } else { f64::INFINITY },
        singular_values: sv,
        deficient: rank < columns,
    }
}

/// Numerical rank and conditioning of `[H | G]`.
pub fn check_design_rank(design: &DesignMatrices) -> RankReport {
    matrix_rank(&design.combined())
}
