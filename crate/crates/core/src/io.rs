//! File formats: source CSVs, target summary JSON, basis definitions, and
//! report rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::basis::{BasisError, BasisSpec, BasisTerm, Side, Term, Transform};
use crate::data::{DataError, SourceSample};
use crate::estimators::EstimateReport;
use crate::simulation::{ReplicateReport, ScenarioConfig};
use crate::solver::WeightSet;
use crate::theory::AsymptoticReport;

pub const SCHEMA_VERSION: &str = "extbal.report/1";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed CSV: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("{path}: malformed JSON: {message}")]
    Json { path: PathBuf, message: String },
    #[error("missing column `{column}` (available: {})", available.join(", "))]
    MissingColumn { column: String, available: Vec<String> },
    #[error("row {row}, column `{column}`: treatment must be 0 or 1, found `{value}`")]
    NonBinaryTreatment { row: usize, column: String, value: String },
    #[error("row {row}, column `{column}`: empty cell")]
    EmptyCell { row: usize, column: String },
    #[error("row {row}, column `{column}`: `{value}` is not a number")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("row {row}, column `{column}`: non-finite value `{value}`")]
    NonFinite { row: usize, column: String, value: String },
    #[error("source file has no data rows")]
    NoRows,
    #[error("MISSING_TERM: target summary has no entry for `{term}`")]
    MissingTerm { term: String },
    #[error("UNKNOWN_TERM: `{term}` is not an H term of the basis (valid: {})", valid.join(", "))]
    UnknownTerm { term: String, valid: Vec<String> },
    #[error("CONSTANT_NOT_ONE: the constant term's target mean must be 1, found {0}")]
    ConstantNotOne(f64),
    #[error("target summary entry `{key}` must be a finite number")]
    BadSummaryValue { key: String },
    #[error("basis definition: {0}")]
    BasisSyntax(String),
    #[error("invalid basis: {0}")]
    Basis(#[from] BasisError),
    #[error("invalid data: {0}")]
    Data(#[from] DataError),
    #[error("no methods selected")]
    EmptyMethods,
}

impl IoError {
    /// True for failures of the file system itself rather than of content.
    pub fn is_io(&self) -> bool {
        matches!(self, IoError::Io { .. })
    }

    pub fn code(&self) -> &'static str {
        match self {
            IoError::Io { .. } => "IO",
            IoError::Csv { .. } | IoError::Json { .. } => "PARSE",
            IoError::MissingColumn { .. } => "MISSING_COLUMN",
            IoError::NonBinaryTreatment { .. } => "NON_BINARY_TREATMENT",
            IoError::EmptyCell { .. } => "EMPTY_CELL",
            IoError::NonNumeric { .. } => "NON_NUMERIC",
            IoError::NonFinite { .. } => "NON_FINITE",
            IoError::NoRows => "NO_ROWS",
            IoError::MissingTerm { .. } => "MISSING_TERM",
            IoError::UnknownTerm { .. } => "UNKNOWN_TERM",
            IoError::ConstantNotOne(_) => "CONSTANT_NOT_ONE",
            IoError::BadSummaryValue { .. } => "BAD_VALUE",
            IoError::BasisSyntax(_) | IoError::Basis(_) => "BASIS",
            IoError::Data(_) => "DATA",
            IoError::EmptyMethods => "EMPTY_METHODS",
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::Io { path: path.to_path_buf(), source }
}

/// Column roles in a source CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvSchema {
    pub treatment: String,
    pub outcome: String,
    /// Covariate columns in order; `None` takes every other column.
    pub covariates: Option<Vec<String>>,
    /// Covariates holding category labels instead of numbers.
    pub categorical: Vec<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema { treatment: "treatment".into(), outcome: "outcome".into(), covariates: None, categorical: Vec::new() }
    }
}

/// A parsed source file. Categorical columns are stored as level codes
/// `0, 1, …` following the sorted order of their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedSource {
    pub sample: SourceSample,
    pub levels: BTreeMap<String, Vec<String>>,
}

impl LoadedSource {
    pub fn names(&self) -> &[String] {
        self.sample.names()
    }
}

fn parse_number(cell: &str, row: usize, column: &str) -> Result<f64, IoError> {
    let t = cell.trim();
    if t.is_empty() {
        return Err(IoError::EmptyCell { row, column: column.into() });
    }
    let v: f64 = t.parse().map_err(|_| IoError::NonNumeric { row, column: column.into(), value: t.into() })?;
    if !v.is_finite() {
        return Err(IoError::NonFinite { row, column: column.into(), value: t.into() });
    }
    Ok(v)
}

/// Parses CSV text. Row numbers in errors count data rows from 1.
pub fn parse_source_csv(text: &str, schema: &CsvSchema, origin: &Path) -> Result<LoadedSource, IoError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let csv_err = |e: csv::Error| IoError::Csv { path: origin.to_path_buf(), message: e.to_string() };
    let header: Vec<String> = rdr.headers().map_err(csv_err)?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| IoError::MissingColumn { column: name.into(), available: header.clone() })
    };
    let t_col = find(&schema.treatment)?;
    let y_col = find(&schema.outcome)?;
    let cov_names: Vec<String> = match &schema.covariates {
        Some(c) => c.clone(),
        None => header.iter().enumerate().filter(|(j, _)| *j != t_col && *j != y_col).map(|(_, h)| h.clone()).collect(),
    };
    let cov_cols = cov_names.iter().map(|c| find(c)).collect::<Result<Vec<_>, _>>()?;
    for c in &schema.categorical {
        if !cov_names.contains(c) {
            return Err(IoError::MissingColumn { column: c.clone(), available: cov_names.clone() });
        }
    }
    let is_cat: Vec<bool> = cov_names.iter().map(|c| schema.categorical.contains(c)).collect();

    let mut treatment = Vec::new();
    let mut outcome = Vec::new();
    let mut numeric: Vec<Vec<f64>> = vec![Vec::new(); cov_cols.len()];
    let mut labels: Vec<Vec<String>> = vec![Vec::new(); cov_cols.len()];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let row = i + 1;
        let cell = |j: usize| rec.get(j).unwrap_or("");
        let a = cell(t_col).trim();
        treatment.push(match a.parse::<f64>() {
            Ok(1.0) => true,
            Ok(0.0) => false,
            _ if a.is_empty() => return Err(IoError::EmptyCell { row, column: schema.treatment.clone() }),
            _ => return Err(IoError::NonBinaryTreatment { row, column: schema.treatment.clone(), value: a.into() }),
        });
        outcome.push(parse_number(cell(y_col), row, &schema.outcome)?);
        for (k, &j) in cov_cols.iter().enumerate() {
            if is_cat[k] {
                let l = cell(j).trim();
                if l.is_empty() {
                    return Err(IoError::EmptyCell { row, column: cov_names[k].clone() });
                }
                labels[k].push(l.to_string());
            } else {
                numeric[k].push(parse_number(cell(j), row, &cov_names[k])?);
            }
        }
    }
    let n = treatment.len();
    if n == 0 {
        return Err(IoError::NoRows);
    }
    let mut levels = BTreeMap::new();
    for k in 0..cov_cols.len() {
        if is_cat[k] {
            let lv: Vec<String> = labels[k].iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
            numeric[k] = labels[k].iter().map(|l| lv.binary_search(l).expect("level present") as f64).collect();
            levels.insert(cov_names[k].clone(), lv);
        }
    }
    let x = DMatrix::from_fn(n, cov_cols.len(), |i, k| numeric[k][i]);
    let sample = SourceSample::new(x, treatment, outcome)?.with_names(cov_names)?;
    Ok(LoadedSource { sample, levels })
}

pub fn load_source_csv(path: &Path, schema: &CsvSchema) -> Result<LoadedSource, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_source_csv(&text, schema, path)
}

/// Renders a sample as CSV. Numbers use the shortest representation that
/// parses back to the same `f64`; categorical codes are written as labels.
pub fn source_csv_string(src: &LoadedSource, schema: &CsvSchema) -> String {
    let s = &src.sample;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<&str> = s.names().iter().map(String::as_str).collect();
    header.push(&schema.treatment);
    header.push(&schema.outcome);
    w.write_record(&header).expect("in-memory write");
    for i in 0..s.n() {
        let mut rec: Vec<String> = s
            .names()
            .iter()
            .enumerate()
            .map(|(j, name)| {
                let v = s.covariates()[(i, j)];
                match src.levels.get(name) {
                    Some(lv) => lv[v as usize].clone(),
                    None => v.to_string(),
                }
            })
            .collect();
        rec.push(if s.treatment()[i] { "1".into() } else { "0".into() });
        rec.push(s.outcome()[i].to_string());
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 output")
}

pub fn write_source_csv(src: &LoadedSource, schema: &CsvSchema, path: &Path) -> Result<(), IoError> {
    write_atomic(path, source_csv_string(src, schema).as_bytes())
}

/// Target means aligned to the H terms of a basis, constant first.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedTarget {
    pub values: Vec<f64>,
    pub n_t: Option<f64>,
    pub labels: Vec<String>,
}

/// Matches a JSON object of `label → mean` (plus optional `n_t`) to the H
/// terms of `spec`. Key order is irrelevant; `const` may be omitted.
pub fn parse_target_summary(text: &str, spec: &BasisSpec, names: &[String], origin: &Path) -> Result<LoadedTarget, IoError> {
    let value: Value = serde_json::from_str(text).map_err(|e| IoError::Json { path: origin.to_path_buf(), message: e.to_string() })?;
    let Value::Object(map) = value else {
        return Err(IoError::Json { path: origin.to_path_buf(), message: "expected an object of term means".into() });
    };
    let labels = spec.h_labels(names);
    let number = |key: &str, v: &Value| v.as_f64().filter(|x| x.is_finite()).ok_or_else(|| IoError::BadSummaryValue { key: key.into() });
    let mut n_t = None;
    for (key, v) in &map {
        if key == "n_t" {
            n_t = Some(number(key, v)?);
        } else if !labels.contains(key) {
            return Err(IoError::UnknownTerm { term: key.clone(), valid: labels.clone() });
        }
    }
    let mut values = Vec::with_capacity(labels.len());
    for (k, label) in labels.iter().enumerate() {
        match map.get(label) {
            Some(v) => {
                let x = number(label, v)?;
                if k == 0 && x != 1.0 {
                    return Err(IoError::ConstantNotOne(x));
                }
                values.push(x);
            }
            None if k == 0 => values.push(1.0),
            None => return Err(IoError::MissingTerm { term: label.clone() }),
        }
    }
    Ok(LoadedTarget { values, n_t, labels })
}

pub fn load_target_summary(path: &Path, spec: &BasisSpec, names: &[String]) -> Result<LoadedTarget, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_target_summary(&text, spec, names, path)
}

pub fn target_summary_json(target: &LoadedTarget) -> String {
    let mut map = Map::new();
    for (l, v) in target.labels.iter().zip(&target.values) {
        map.insert(l.clone(), Value::from(*v));
    }
    if let Some(n) = target.n_t {
        map.insert("n_t".into(), Value::from(n));
    }
    serde_json::to_string_pretty(&Value::Object(map)).expect("finite numbers serialize")
}

/// Reads scenarios from a JSON file holding one scenario, an array, or
/// `{"scenarios": [...]}`.
pub fn load_scenarios(path: &Path) -> Result<Vec<ScenarioConfig>, IoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let json_err = |e: serde_json::Error| IoError::Json { path: path.to_path_buf(), message: e.to_string() };
    let value: Value = serde_json::from_str(&text).map_err(json_err)?;
    let list = match value {
        Value::Array(_) => value,
        Value::Object(ref m) if m.contains_key("scenarios") => m["scenarios"].clone(),
        other => Value::Array(vec![other]),
    };
    let scenarios: Vec<ScenarioConfig> = serde_json::from_value(list).map_err(json_err)?;
    if scenarios.is_empty() {
        return Err(IoError::Json { path: path.to_path_buf(), message: "no scenarios".into() });
    }
    Ok(scenarios)
}

fn resolve(name: &str, names: &[String]) -> Result<usize, IoError> {
    names
        .iter()
        .position(|n| n == name)
        .ok_or_else(|| IoError::BasisSyntax(format!("unknown covariate `{name}` (available: {})", names.join(", "))))
}

fn parse_term(item: &str, names: &[String], levels: &BTreeMap<String, Vec<String>>) -> Result<Vec<Term>, IoError> {
    let item = item.trim();
    if item == "1" || item == "const" {
        return Ok(vec![Term::Constant]);
    }
    if let Some(inner) = item.strip_prefix("cat(").and_then(|s| s.strip_suffix(')')) {
        let col = resolve(inner.trim(), names)?;
        let lv = levels
            .get(&names[col])
            .ok_or_else(|| IoError::BasisSyntax(format!("`{}` is not a categorical column", names[col])))?;
        return Ok(lv
            .iter()
            .enumerate()
            .skip(1)
            .map(|(code, l)| Term::Indicator { col, value: code as f64, level: Some(l.clone()), allow_absent: false })
            .collect());
    }
    if let Some(open) = item.find('(') {
        if let (Some(t), Some(inner)) = (Transform::from_name(&item[..open]), item[open + 1..].strip_suffix(')')) {
            return Ok(vec![Term::Custom { transform: t, col: resolve(inner.trim(), names)? }]);
        }
        return Err(IoError::BasisSyntax(format!("unknown function in `{item}`")));
    }
    if let Some((a, b)) = item.split_once('*') {
        return Ok(vec![Term::Product { a: resolve(a.trim(), names)?, b: resolve(b.trim(), names)? }]);
    }
    if let Some((a, d)) = item.split_once('^') {
        let degree = d.trim().parse().map_err(|_| IoError::BasisSyntax(format!("bad exponent in `{item}`")))?;
        return Ok(vec![Term::Power { col: resolve(a.trim(), names)?, degree }]);
    }
    if let Some((a, v)) = item.split_once('=') {
        let col = resolve(a.trim(), names)?;
        let v = v.trim();
        let term = match levels.get(&names[col]) {
            Some(lv) => {
                let code = lv
                    .iter()
                    .position(|l| l == v)
                    .ok_or_else(|| IoError::BasisSyntax(format!("`{}` has no level `{v}` (levels: {})", names[col], lv.join(", "))))?;
                Term::Indicator { col, value: code as f64, level: Some(v.to_string()), allow_absent: false }
            }
            None => {
                let value = v.parse().map_err(|_| IoError::BasisSyntax(format!("bad indicator value in `{item}`")))?;
                Term::Indicator { col, value, level: None, allow_absent: false }
            }
        };
        return Ok(vec![term]);
    }
    Ok(vec![Term::Identity { col: resolve(item, names)? }])
}

/// Parses `"H: x1, x2^2, x1*x2, sex=F, cat(site), log1p(x3); G: x4, x5"`.
/// The constant is added automatically. Categorical labels resolve through
/// `levels`.
pub fn parse_basis(text: &str, names: &[String], levels: &BTreeMap<String, Vec<String>>) -> Result<BasisSpec, IoError> {
    let mut terms = vec![BasisTerm { term: Term::Constant, side: Side::H }];
    let mut seen = BTreeSet::new();
    for section in text.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (side, body) = section
            .split_once(':')
            .ok_or_else(|| IoError::BasisSyntax(format!("section `{section}` must start with `H:` or `G:`")))?;
        let side = match side.trim() {
            "H" | "h" => Side::H,
            "G" | "g" => Side::G,
            other => return Err(IoError::BasisSyntax(format!("unknown side `{other}`"))),
        };
        if !seen.insert(side == Side::H) {
            return Err(IoError::BasisSyntax("each side may appear only once".into()));
        }
        for item in body.split(',').filter(|s| !s.trim().is_empty()) {
            for term in parse_term(item, names, levels)? {
                if term == Term::Constant {
                    if side == Side::G {
                        return Err(IoError::BasisSyntax("the constant belongs to H".into()));
                    }
                    continue;
                }
                terms.push(BasisTerm { term, side });
            }
        }
    }
    Ok(BasisSpec::new(terms)?)
}

/// Basis from inline text or, when `arg` names an existing file, from JSON.
pub fn load_basis(arg: &str, names: &[String], levels: &BTreeMap<String, Vec<String>>) -> Result<BasisSpec, IoError> {
    let path = Path::new(arg);
    if path.is_file() {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let spec: BasisSpec =
            serde_json::from_str(&text).map_err(|e| IoError::Json { path: path.to_path_buf(), message: e.to_string() })?;
        if let Some(j) = spec.max_column() {
            if j >= names.len() {
                return Err(BasisError::IndexOutOfRange { term: format!("column {j}"), index: j, p: names.len() }.into());
            }
        }
        return Ok(spec);
    }
    parse_basis(arg, names, levels)
}

/// Writes through a temporary sibling file and a rename, so readers never
/// see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let file = path.file_name().ok_or_else(|| IoError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "not a file path"),
    })?;
    let tmp = dir.join(format!(".{}.tmp{}", file.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes).map_err(io_err(path))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        IoError::Io { path: path.to_path_buf(), source: e }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Human,
    Json,
    Csv,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Human => "txt",
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        }
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    schema: &'static str,
    kind: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
    results: T,
}

fn envelope<T: Serialize>(kind: &str, scale: Option<f64>, results: T) -> String {
    let mut s = serde_json::to_string_pretty(&Envelope { schema: SCHEMA_VERSION, kind, scale, results }).expect("report serializes");
    s.push('\n');
    s
}

fn csv_string(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 output")
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> =
        (0..header.len()).map(|j| rows.iter().map(|r| r[j].len()).chain([header[j].len()]).max().unwrap_or(0)).collect();
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1)));
    for r in rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

fn status(r: &EstimateReport) -> String {
    match &r.solver {
        Some(s) if s.converged => format!("converged ({} it)", s.iterations),
        Some(s) => format!("not converged ({} it)", s.iterations),
        None => "closed form".into(),
    }
}

pub fn render_estimates(reports: &[EstimateReport], format: ReportFormat) -> String {
    if format == ReportFormat::Json {
        return envelope("estimate", None, reports);
    }
    let header = ["method", "tau_hat", "ess_treated", "ess_control", "w_min", "w_max", "status"];
    let human = format == ReportFormat::Human;
    let num = |v: f64| if human { format!("{v:.6}") } else { v.to_string() };
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            vec![
                r.method.to_string(),
                num(r.tau_hat),
                num(r.weights.ess_treated),
                num(r.weights.ess_control),
                num(r.weights.min),
                num(r.weights.max),
                status(r),
            ]
        })
        .collect();
    if human {
        table(&header, &rows)
    } else {
        csv_string(&header, &rows)
    }
}

/// One row per unit: index, arm, weight and the producing method.
pub fn render_weights(sample: &SourceSample, sets: &[WeightSet]) -> String {
    let rows: Vec<Vec<String>> = sets
        .iter()
        .flat_map(|ws| {
            (0..sample.n()).map(move |i| {
                vec![
                    (i + 1).to_string(),
                    if sample.treatment()[i] { "1".into() } else { "0".into() },
                    ws.weights[i].to_string(),
                    ws.method.to_string(),
                ]
            })
        })
        .collect();
    csv_string(&["row", "treatment", "weight", "method"], &rows)
}

#[derive(Serialize)]
struct GridRow<'a> {
    scenario: &'a str,
    tau_star: f64,
    replicates: usize,
    n_s_min: usize,
    n_s_max: usize,
    n_s_mean: f64,
    redraws: usize,
    methods: Vec<crate::simulation::MethodSummary>,
}

/// Aggregate table for a simulation grid. `scale` multiplies bias, SD, RMSE
/// and the boxplot values (100 reproduces the percent-style tables).
pub fn render_grid(reports: &[ReplicateReport], format: ReportFormat, scale: f64) -> String {
    let scaled = |s: &crate::simulation::MethodSummary| {
        let mut s = s.clone();
        s.bias *= scale;
        s.sd *= scale;
        s.rmse *= scale;
        let b = &mut s.boxplot;
        for v in [&mut b.min, &mut b.q1, &mut b.median, &mut b.q3, &mut b.max, &mut b.lower_whisker, &mut b.upper_whisker] {
            *v *= scale;
        }
        b.outliers.iter_mut().for_each(|o| *o *= scale);
        s
    };
    if format == ReportFormat::Json {
        let rows: Vec<GridRow> = reports
            .iter()
            .map(|r| GridRow {
                scenario: &r.scenario,
                tau_star: r.tau_star,
                replicates: r.replicates,
                n_s_min: r.n_s_min,
                n_s_max: r.n_s_max,
                n_s_mean: r.n_s_mean,
                redraws: r.redraws,
                methods: r.methods.iter().map(scaled).collect(),
            })
            .collect();
        return envelope("simulate", Some(scale), rows);
    }
    let human = format == ReportFormat::Human;
    let num = |v: f64| if human { format!("{v:.3}") } else { v.to_string() };
    let header = ["scenario", "method", "bias", "sd", "rmse", "median", "failures", "n_s_range"];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .flat_map(|r| {
            r.methods.iter().map(move |m| {
                let m = scaled(m);
                vec![
                    r.scenario.clone(),
                    m.method.to_string(),
                    num(m.bias),
                    num(m.sd),
                    num(m.rmse),
                    num(m.boxplot.median),
                    m.failures.to_string(),
                    format!("{}-{}", r.n_s_min, r.n_s_max),
                ]
            })
        })
        .collect();
    if human {
        table(&header, &rows)
    } else {
        csv_string(&header, &rows)
    }
}

/// Boxplot quantile records, one row per (scenario, method).
pub fn render_boxplots(reports: &[ReplicateReport], scale: f64) -> String {
    let rows: Vec<Vec<String>> = reports
        .iter()
        .flat_map(|r| {
            r.methods.iter().map(move |m| {
                let b = &m.boxplot;
                let outliers: Vec<String> = b.outliers.iter().map(|o| (o * scale).to_string()).collect();
                let mut row = vec![r.scenario.clone(), m.method.to_string()];
                row.extend([b.min, b.lower_whisker, b.q1, b.median, b.q3, b.upper_whisker, b.max].iter().map(|v| (v * scale).to_string()));
                row.push(outliers.join(" "));
                row
            })
        })
        .collect();
    csv_string(&["scenario", "method", "min", "lower_whisker", "q1", "median", "q3", "upper_whisker", "max", "outliers"], &rows)
}

/// Per-replicate error records in long form.
pub fn render_replicates(reports: &[ReplicateReport]) -> String {
    let mut rows = Vec::new();
    for r in reports {
        for rec in &r.records {
            for (m, e) in r.methods.iter().zip(&rec.errors) {
                rows.push(vec![
                    r.scenario.clone(),
                    rec.replicate.to_string(),
                    rec.seed.to_string(),
                    rec.n_s.to_string(),
                    m.method.to_string(),
                    e.map_or_else(|| "NA".into(), |v| v.to_string()),
                ]);
            }
        }
    }
    csv_string(&["scenario", "replicate", "seed", "n_s", "method", "error"], &rows)
}

pub fn render_oracle(reports: &[(String, AsymptoticReport)], format: ReportFormat) -> String {
    if format == ReportFormat::Json {
        #[derive(Serialize)]
        struct Named<'a> {
            scenario: &'a str,
            #[serde(flatten)]
            report: &'a AsymptoticReport,
        }
        let rows: Vec<Named> = reports.iter().map(|(s, r)| Named { scenario: s, report: r }).collect();
        return envelope("oracle", None, rows);
    }
    let human = format == ReportFormat::Human;
    let num = |v: f64| if human { format!("{v:.6}") } else { v.to_string() };
    let header = ["scenario", "tau_star", "rho", "v1", "v2", "v3", "total", "bound", "gap"];
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|(s, r)| {
            vec![s.clone(), num(r.tau_star), num(r.rho), num(r.v1), num(r.v2), num(r.v3), num(r.total), num(r.efficiency_bound), num(r.gap)]
        })
        .collect();
    if human {
        table(&header, &rows)
    } else {
        csv_string(&header, &rows)
    }
}
