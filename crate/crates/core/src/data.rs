//! Individual-level source study data.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value in {column} at row {row}")]
    NonFinite { row: usize, column: String },
    #[error("treatment arm {0} is empty")]
    EmptyArm(&'static str),
}

/// Source sample: covariates, binary treatment and outcome for each subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSample {
    x: DMatrix<f64>,
    treatment: Vec<bool>,
    outcome: Vec<f64>,
    names: Vec<String>,
}

/// Row indices of the treated (S₁) and control (S₀) groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Arms {
    pub treated: Vec<usize>,
    pub control: Vec<usize>,
}

impl Arms {
    pub fn from_treatment(treatment: &[bool]) -> Self {
        let mut treated = Vec::new();
        let mut control = Vec::new();
        for (i, &a) in treatment.iter().enumerate() {
            if a {
                treated.push(i);
            } else {
                control.push(i);
            }
        }
        Arms { treated, control }
    }

    pub fn len(&self) -> usize {
        self.treated.len() + self.control.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Treatment indicator per row, recovered from the index sets.
    pub fn indicator(&self) -> Vec<bool> {
        let mut out = vec![false; self.len()];
        for &i in &self.treated {
            out[i] = true;
        }
        out
    }

    pub fn check_nonempty(&self) -> Result<(), DataError> {
        if self.treated.is_empty() {
            return Err(DataError::EmptyArm("treated"));
        }
        if self.control.is_empty() {
            return Err(DataError::EmptyArm("control"));
        }
        Ok(())
    }
}

fn default_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("x{j}")).collect()
}

impl SourceSample {
    /// Builds a sample, rejecting non-finite cells and empty arms.
    /// Covariates are named `x1..xp` unless renamed with [`SourceSample::with_names`].
    pub fn new(x: DMatrix<f64>, treatment: Vec<bool>, outcome: Vec<f64>) -> Result<Self, DataError> {
        let n = x.nrows();
        if treatment.len() != n || outcome.len() != n {
            return Err(DataError::Dimension(format!(
                "{} covariate rows, {} treatment values, {} outcomes",
                n,
                treatment.len(),
                outcome.len()
            )));
        }
        let names = default_names(x.ncols());
        for j in 0..x.ncols() {
            for i in 0..n {
                if !x[(i, j)].is_finite() {
                    return Err(DataError::NonFinite { row: i, column: names[j].clone() });
                }
            }
        }
        if let Some(i) = outcome.iter().position(|y| !y.is_finite()) {
            return Err(DataError::NonFinite { row: i, column: "outcome".into() });
        }
        Arms::from_treatment(&treatment).check_nonempty()?;
        Ok(SourceSample { x, treatment, outcome, names })
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self, DataError> {
        if names.len() != self.x.ncols() {
            return Err(DataError::Dimension(format!(
                "{} names for {} covariates",
                names.len(),
                self.x.ncols()
            )));
        }
        self.names = names;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn treatment(&self) -> &[bool] {
        &self.treatment
    }

    pub fn outcome(&self) -> &[f64] {
        &self.outcome
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.row(i).iter().copied().collect()
    }

    pub fn arms(&self) -> Arms {
        Arms::from_treatment(&self.treatment)
    }

    /// Same covariates, new outcome vector.
    pub fn with_outcome(&self, outcome: Vec<f64>) -> Result<Self, DataError> {
        SourceSample::new(self.x.clone(), self.treatment.clone(), outcome)?.with_names(self.names.clone())
    }

    /// Swaps the treated and control labels.
    pub fn flip_treatment(&self) -> Self {
        SourceSample {
            x: self.x.clone(),
            treatment: self.treatment.iter().map(|a| !a).collect(),
            outcome: self.outcome.clone(),
            names: self.names.clone(),
        }
    }
}
