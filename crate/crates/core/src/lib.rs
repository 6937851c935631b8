//! Entropy-balancing calibration weights for generalizing an average treatment
//! effect from an individual-level source study to a target population that
//! is only described by summary means.
//!
//! The main entry points are [`estimators::estimate`] for the four compared
//! estimators, [`solver`] for the balancing weights themselves,
//! [`theory`] for asymptotic quantities under a known data-generating
//! process, and [`simulation`] for the Monte Carlo study.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod basis;
pub mod data;
pub mod estimators;
pub mod io;
pub mod quadrature;
pub mod solver;
pub mod simulation;
pub mod theory;
mod tilting;

pub use basis::{BasisSpec, DesignMatrices, Side, TargetSummary, Term};
pub use data::{Arms, SourceSample};
pub use solver::{DualSolution, Method, SolverOptions, WeightSet};
