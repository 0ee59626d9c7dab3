//! Dataset containers, design-matrix construction and CSV ingestion.
//!
//! CSV schema: header `study_id,w,y,x1,...,xd`, UTF-8, `.` decimal separator,
//! one record per subject. Study ids are remapped to dense 1..K in order of
//! first appearance.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{is_full_rank, Matrix};

/// One study's rows: covariates, binary treatment and outcome.
#[derive(Debug, Clone)]
pub struct StudyDataset {
    pub study_id: usize,
    pub covariates: Matrix,
    pub treatment: Vec<u8>,
    pub outcome: Vec<f64>,
}

impl StudyDataset {
    pub fn new(study_id: usize, covariates: Matrix, treatment: Vec<u8>, outcome: Vec<f64>) -> Result<Self> {
        let n = covariates.rows();
        if n == 0 {
            return Err(Error::DimensionError(format!("study {study_id} is empty")));
        }
        if treatment.len() != n || outcome.len() != n {
            return Err(Error::DimensionError(format!(
                "study {study_id}: row counts disagree ({n} covariate rows, {} treatments, {} outcomes)",
                treatment.len(),
                outcome.len()
            )));
        }
        if treatment.iter().any(|&w| w > 1) {
            return Err(Error::ValueError { line: 0, message: "treatment must be 0 or 1".into() });
        }
        if outcome.iter().any(|y| !y.is_finite()) {
            return Err(Error::ValueError { line: 0, message: "non-finite outcome".into() });
        }
        Ok(StudyDataset { study_id, covariates, treatment, outcome })
    }

    pub fn n(&self) -> usize {
        self.outcome.len()
    }

    pub fn n_arm(&self, arm: u8) -> usize {
        self.treatment.iter().filter(|&&w| w == arm).count()
    }

    /// Intercept-augmented design over all of this study's rows (both arms).
    pub fn full_design(&self) -> Matrix {
        intercept_augment(&self.covariates)
    }
}

/// The ordered collection of studies making up the federation.
#[derive(Debug, Clone)]
pub struct FederatedDataset {
    pub studies: Vec<StudyDataset>,
    pub dim: usize,
}

impl FederatedDataset {
    pub fn new(studies: Vec<StudyDataset>) -> Result<Self> {
        let dim = studies
            .first()
            .map(|s| s.covariates.cols())
            .ok_or_else(|| Error::DimensionError("no studies".into()))?;
        let mut seen = std::collections::HashSet::new();
        for s in &studies {
            if s.covariates.cols() != dim {
                return Err(Error::DimensionError(format!(
                    "study {} has d={}, expected {dim}",
                    s.study_id,
                    s.covariates.cols()
                )));
            }
            if !seen.insert(s.study_id) {
                return Err(Error::ValueError {
                    line: 0,
                    message: format!("duplicate study id {}", s.study_id),
                });
            }
        }
        Ok(FederatedDataset { studies, dim })
    }

    pub fn k(&self) -> usize {
        self.studies.len()
    }

    pub fn n(&self) -> usize {
        self.studies.iter().map(|s| s.n()).sum()
    }

    pub fn n_arm(&self, arm: u8) -> usize {
        self.studies.iter().map(|s| s.n_arm(arm)).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.studies.iter().map(|s| s.n()).collect()
    }
}

/// Rows of one treatment arm with an intercept-augmented (or dummy-augmented)
/// design; column 0 is always the constant 1.
#[derive(Debug, Clone)]
pub struct ArmView {
    pub design: Matrix,
    pub response: Vec<f64>,
}

impl ArmView {
    pub fn n(&self) -> usize {
        self.response.len()
    }
}

fn intercept_augment(x: &Matrix) -> Matrix {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Matrix::zeros(n, d + 1);
    for i in 0..n {
        out.set(i, 0, 1.0);
        for j in 0..d {
            out.set(i, j + 1, x.get(i, j));
        }
    }
    out
}

/// Restricts a study to one treatment arm, prepending the intercept column.
/// Row order is preserved.
pub fn split_by_arm(ds: &StudyDataset, arm: u8) -> Result<ArmView> {
    let d = ds.covariates.cols();
    let mut rows = Vec::new();
    let mut response = Vec::new();
    for i in 0..ds.n() {
        if ds.treatment[i] == arm {
            let mut row = Vec::with_capacity(d + 1);
            row.push(1.0);
            row.extend_from_slice(ds.covariates.row(i));
            rows.push(row);
            response.push(ds.outcome[i]);
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyArm(format!("study {} arm {arm}", ds.study_id)));
    }
    Ok(ArmView { design: Matrix::from_rows(&rows)?, response })
}

/// Appends K-1 study-membership indicator columns H_2..H_K to every study's
/// covariates; study 1 (the first) is the reference.
pub fn augment_dummies(fed: &FederatedDataset) -> Result<FederatedDataset> {
    let k = fed.k();
    if k < 2 {
        return Err(Error::SingleStudy);
    }
    let d = fed.dim;
    let mut studies = Vec::with_capacity(k);
    for (pos, s) in fed.studies.iter().enumerate() {
        let n = s.n();
        let mut x = Matrix::zeros(n, d + k - 1);
        for i in 0..n {
            for j in 0..d {
                x.set(i, j, s.covariates.get(i, j));
            }
            if pos >= 1 {
                x.set(i, d + pos - 1, 1.0);
            }
        }
        studies.push(StudyDataset::new(s.study_id, x, s.treatment.clone(), s.outcome.clone())?);
    }
    FederatedDataset::new(studies)
}

/// Verdicts for the two full-rank sample-size conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RankReport {
    pub local_full_rank: bool,
    pub federated_full_rank: bool,
}

/// Checks per-(study, arm) and pooled per-arm intercept-augmented designs for
/// full column rank at the given tolerance.
pub fn check_conditions(fed: &FederatedDataset, rank_tolerance: f64) -> RankReport {
    let mut local = true;
    for s in &fed.studies {
        for arm in [0u8, 1u8] {
            match split_by_arm(s, arm) {
                Ok(view) => {
                    if !is_full_rank(&view.design, rank_tolerance) {
                        local = false;
                    }
                }
                Err(_) => local = false,
            }
        }
    }
    let mut federated = true;
    for arm in [0u8, 1u8] {
        let mut rows = Vec::new();
        for s in &fed.studies {
            if let Ok(view) = split_by_arm(s, arm) {
                for i in 0..view.n() {
                    rows.push(view.design.row(i).to_vec());
                }
            }
        }
        if rows.is_empty() {
            federated = false;
            continue;
        }
        let design = Matrix::from_rows(&rows).expect("uniform width");
        if !is_full_rank(&design, rank_tolerance) {
            federated = false;
        }
    }
    RankReport { local_full_rank: local, federated_full_rank: federated }
}

/// Column naming for CSV ingestion. The default matches the documented
/// schema; covariates are `<covariate_prefix>1..<covariate_prefix>d`.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub study_column: String,
    pub treatment_column: String,
    pub outcome_column: String,
    pub covariate_prefix: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            study_column: "study_id".into(),
            treatment_column: "w".into(),
            outcome_column: "y".into(),
            covariate_prefix: "x".into(),
        }
    }
}

/// Loads a federated dataset from CSV, grouping rows by study id in file
/// order and remapping ids to dense 1..K.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<FederatedDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::IoError(format!("{}: {e}", path.display())))?;

    let headers = reader
        .headers()
        .map_err(|e| Error::SchemaError(format!("unreadable header: {e}")))?
        .clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::SchemaError(format!("missing column `{name}`")))
    };
    let c_study = col(&schema.study_column)?;
    let c_w = col(&schema.treatment_column)?;
    let c_y = col(&schema.outcome_column)?;
    let mut c_x = Vec::new();
    for j in 1.. {
        match headers.iter().position(|h| h == format!("{}{j}", schema.covariate_prefix)) {
            Some(idx) => c_x.push(idx),
            None => break,
        }
    }
    if c_x.is_empty() {
        return Err(Error::SchemaError(format!(
            "no covariate columns `{}1..`",
            schema.covariate_prefix
        )));
    }

    // (raw id -> (rows, treatment, outcome)) in first-appearance order
    let mut order: Vec<i64> = Vec::new();
    let mut groups: std::collections::HashMap<i64, (Vec<Vec<f64>>, Vec<u8>, Vec<f64>)> =
        std::collections::HashMap::new();

    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            Error::ParseError { line, message: e.to_string() }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |idx: usize| -> Result<&str> {
            record.get(idx).ok_or(Error::ParseError { line, message: "short record".into() })
        };
        let parse_f = |s: &str, what: &str| -> Result<f64> {
            let v: f64 = s
                .parse()
                .map_err(|_| Error::ParseError { line, message: format!("bad {what}: `{s}`") })?;
            if !v.is_finite() {
                return Err(Error::ValueError { line, message: format!("non-finite {what}") });
            }
            Ok(v)
        };
        let sid: i64 = field(c_study)?.parse().map_err(|_| Error::ParseError {
            line,
            message: format!("bad study id `{}`", record.get(c_study).unwrap_or("")),
        })?;
        let w_raw = parse_f(field(c_w)?, "treatment")?;
        let w = if w_raw == 0.0 {
            0u8
        } else if w_raw == 1.0 {
            1u8
        } else {
            return Err(Error::ValueError { line, message: format!("treatment `{w_raw}` not in {{0,1}}") });
        };
        let y = parse_f(field(c_y)?, "outcome")?;
        let mut xs = Vec::with_capacity(c_x.len());
        for (j, &idx) in c_x.iter().enumerate() {
            xs.push(parse_f(field(idx)?, &format!("x{}", j + 1))?);
        }
        let entry = groups.entry(sid).or_insert_with(|| {
            order.push(sid);
            (Vec::new(), Vec::new(), Vec::new())
        });
        entry.0.push(xs);
        entry.1.push(w);
        entry.2.push(y);
    }

    if order.is_empty() {
        return Err(Error::SchemaError("file holds no data rows".into()));
    }
    let mut studies = Vec::with_capacity(order.len());
    for (k, sid) in order.iter().enumerate() {
        let (rows, ws, ys) = groups.remove(sid).expect("grouped");
        studies.push(StudyDataset::new(k + 1, Matrix::from_rows(&rows)?, ws, ys)?);
    }
    FederatedDataset::new(studies)
}

/// Writes a dataset in the documented CSV schema. Floats use Rust's shortest
/// round-trip formatting, so `load_csv . emit_csv` is the identity.
pub fn emit_csv(fed: &FederatedDataset, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "study_id,w,y")?;
    for j in 1..=fed.dim {
        write!(f, ",x{j}")?;
    }
    writeln!(f)?;
    for s in &fed.studies {
        for i in 0..s.n() {
            write!(f, "{},{},{}", s.study_id, s.treatment[i], s.outcome[i])?;
            for j in 0..fed.dim {
                write!(f, ",{}", s.covariates.get(i, j))?;
            }
            writeln!(f)?;
        }
    }
    Ok(())
}
