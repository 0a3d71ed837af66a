//! Observation containers and CSV ingestion.
//!
//! A [`Dataset`] bundles the response `Y`, the baseline design `X̃`, the
//! grouping-difference design `X` and the grouping variables `Z`. The three
//! covariate blocks are reference counted so bootstrap replicates can swap the
//! response without copying the designs.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::FamilyKind;

pub const INTERCEPT: &str = "(intercept)";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    x_base: Arc<DMatrix<f64>>,
    x_diff: Arc<DMatrix<f64>>,
    z_group: Arc<DMatrix<f64>>,
    treatment: Option<Arc<DVector<f64>>>,
    names: ColumnNames,
}

/// Column labels for every block, kept so a dataset can be written back out.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ColumnNames {
    pub response: String,
    pub baseline: Vec<String>,
    pub diff: Vec<String>,
    pub grouping: Vec<String>,
    pub treatment: Option<String>,
}

impl ColumnNames {
    fn generic(r: usize, p: usize, q: usize, treatment: bool) -> Self {
        Self {
            response: "y".into(),
            baseline: (1..=r).map(|j| format!("xb{j}")).collect(),
            diff: (1..=p).map(|j| format!("x{j}")).collect(),
            grouping: (1..=q).map(|j| format!("z{j}")).collect(),
            treatment: treatment.then(|| "a".to_string()),
        }
    }
}

/// Maps CSV columns onto dataset roles.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSpec {
    pub response: String,
    pub baseline: Vec<String>,
    pub diff: Vec<String>,
    pub grouping: Vec<String>,
    /// Binary treatment indicator, required by the semiparametric family.
    pub treatment: Option<String>,
    pub add_intercept_baseline: bool,
    pub add_intercept_diff: bool,
    pub add_intercept_grouping: bool,
}

impl ColumnSpec {
    fn check(&self) -> Result<()> {
        let roles = [&self.baseline, &self.diff, &self.grouping];
        for list in roles {
            if list.iter().any(|c| *c == self.response) {
                return Err(Error::Config(format!(
                    "response column `{}` cannot also be a covariate",
                    self.response
                )));
            }
        }
        if self.treatment.as_deref() == Some(self.response.as_str()) {
            return Err(Error::Config("treatment column cannot be the response".into()));
        }
        Ok(())
    }
}

fn check_finite_matrix(m: &DMatrix<f64>, block: &str) -> Result<()> {
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            if !m[(i, j)].is_finite() {
                return Err(Error::Validation {
                    row: i + 1,
                    constraint: format!("{block} column {} must be finite", j + 1),
                });
            }
        }
    }
    Ok(())
}

impl Dataset {
    /// Builds a dataset from raw blocks. Intercept columns are taken as given.
    pub fn new(
        y: DVector<f64>,
        x_base: DMatrix<f64>,
        x_diff: DMatrix<f64>,
        z_group: DMatrix<f64>,
    ) -> Result<Self> {
        let names = ColumnNames::generic(x_base.ncols(), x_diff.ncols(), z_group.ncols(), false);
        Self::from_parts(y, x_base, x_diff, z_group, None, names)
    }

    pub fn with_treatment(mut self, a: DVector<f64>) -> Result<Self> {
        if a.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "treatment has {} rows, dataset has {}",
                a.len(),
                self.n()
            )));
        }
        if let Some(i) = a.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation {
                row: i + 1,
                constraint: "treatment must be finite".into(),
            });
        }
        self.treatment = Some(Arc::new(a));
        if self.names.treatment.is_none() {
            self.names.treatment = Some("a".into());
        }
        Ok(self)
    }

    pub fn from_parts(
        y: DVector<f64>,
        x_base: DMatrix<f64>,
        x_diff: DMatrix<f64>,
        z_group: DMatrix<f64>,
        treatment: Option<DVector<f64>>,
        names: ColumnNames,
    ) -> Result<Self> {
        let n = y.len();
        if n < 2 {
            return Err(Error::InsufficientData { needed: 2, got: n });
        }
        for (block, m) in [("baseline", &x_base), ("diff", &x_diff), ("grouping", &z_group)] {
            if m.nrows() != n {
                return Err(Error::DimensionMismatch(format!(
                    "{block} block has {} rows, response has {n}",
                    m.nrows()
                )));
            }
            if m.ncols() == 0 {
                return Err(Error::DimensionMismatch(format!("{block} block has no columns")));
            }
            check_finite_matrix(m, block)?;
        }
        if let Some(i) = y.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation {
                row: i + 1,
                constraint: "response must be finite".into(),
            });
        }
        let ds = Dataset {
            y,
            x_base: Arc::new(x_base),
            x_diff: Arc::new(x_diff),
            z_group: Arc::new(z_group),
            treatment: None,
            names,
        };
        match treatment {
            Some(a) => ds.with_treatment(a),
            None => Ok(ds),
        }
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Number of baseline covariates `r`.
    pub fn r(&self) -> usize {
        self.x_base.ncols()
    }

    /// Number of grouping-difference covariates `p`.
    pub fn p(&self) -> usize {
        self.x_diff.ncols()
    }

    /// Number of grouping variables `q`.
    pub fn q(&self) -> usize {
        self.z_group.ncols()
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x_base(&self) -> &DMatrix<f64> {
        &self.x_base
    }

    pub fn x_diff(&self) -> &DMatrix<f64> {
        &self.x_diff
    }

    pub fn z_group(&self) -> &DMatrix<f64> {
        &self.z_group
    }

    pub fn treatment(&self) -> Option<&DVector<f64>> {
        self.treatment.as_deref()
    }

    pub fn names(&self) -> &ColumnNames {
        &self.names
    }

    /// Same covariates, new response. The covariate blocks are shared.
    pub fn with_response(&self, y: DVector<f64>) -> Result<Self> {
        if y.len() != self.n() {
            return Err(Error::DimensionMismatch(format!(
                "replacement response has {} rows, dataset has {}",
                y.len(),
                self.n()
            )));
        }
        Ok(Dataset {
            y,
            x_base: Arc::clone(&self.x_base),
            x_diff: Arc::clone(&self.x_diff),
            z_group: Arc::clone(&self.z_group),
            treatment: self.treatment.clone(),
            names: self.names.clone(),
        })
    }

    /// Reorders the observations; row `k` of the result is row `perm[k]` here.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.n() {
            return Err(Error::DimensionMismatch("permutation length".into()));
        }
        let pick = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(perm[i], j)]);
        Dataset::from_parts(
            DVector::from_fn(self.n(), |i, _| self.y[perm[i]]),
            pick(&self.x_base),
            pick(&self.x_diff),
            pick(&self.z_group),
            self.treatment
                .as_ref()
                .map(|a| DVector::from_fn(self.n(), |i, _| a[perm[i]])),
            self.names.clone(),
        )
    }

    /// Writes the distinct named columns back to CSV and returns the spec that
    /// reloads them into an identical dataset.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<ColumnSpec> {
        let mut columns: Vec<(String, DVector<f64>)> = Vec::new();
        let mut push = |name: &str, col: DVector<f64>| {
            if name != INTERCEPT && !columns.iter().any(|(c, _)| c == name) {
                columns.push((name.to_string(), col));
            }
        };
        push(&self.names.response, self.y.clone());
        for (name, m) in [
            (&self.names.baseline, &*self.x_base),
            (&self.names.diff, &*self.x_diff),
            (&self.names.grouping, &*self.z_group),
        ] {
            for (j, c) in name.iter().enumerate() {
                push(c, m.column(j).into_owned());
            }
        }
        if let (Some(name), Some(a)) = (&self.names.treatment, &self.treatment) {
            push(name, (**a).clone());
        }

        let mut w = csv::Writer::from_writer(writer);
        w.write_record(columns.iter().map(|(c, _)| c.as_str()))?;
        for i in 0..self.n() {
            w.write_record(columns.iter().map(|(_, col)| format!("{:?}", col[i])))?;
        }
        w.flush()?;

        let strip = |names: &[String]| -> (Vec<String>, bool) {
            let has = names.first().map(|c| c == INTERCEPT).unwrap_or(false);
            (names.iter().filter(|c| *c != INTERCEPT).cloned().collect(), has)
        };
        let (baseline, ib) = strip(&self.names.baseline);
        let (grouping, ig) = strip(&self.names.grouping);
        let (diff, id) = strip(&self.names.diff);
        Ok(ColumnSpec {
            response: self.names.response.clone(),
            baseline,
            diff,
            grouping,
            treatment: self.names.treatment.clone(),
            add_intercept_baseline: ib,
            add_intercept_diff: id,
            add_intercept_grouping: ig,
        })
    }
}

pub fn load_csv<P: AsRef<Path>>(path: P, spec: &ColumnSpec) -> Result<Dataset> {
    let file = File::open(path)?;
    read_csv(file, spec)
}

/// Reads an RFC-4180 CSV with a mandatory header row.
pub fn read_csv<R: Read>(reader: R, spec: &ColumnSpec) -> Result<Dataset> {
    spec.check()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: HashMap<String, usize> = rdr
        .headers()?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();

    let mut wanted: Vec<&str> = vec![spec.response.as_str()];
    wanted.extend(spec.baseline.iter().map(String::as_str));
    wanted.extend(spec.diff.iter().map(String::as_str));
    wanted.extend(spec.grouping.iter().map(String::as_str));
    wanted.extend(spec.treatment.iter().map(String::as_str));
    wanted.sort_unstable();
    wanted.dedup();
    for c in &wanted {
        if !header.contains_key(*c) {
            return Err(Error::MissingColumn(c.to_string()));
        }
    }

    let mut values: HashMap<&str, Vec<f64>> = wanted.iter().map(|c| (*c, Vec::new())).collect();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = k + 1;
        for c in &wanted {
            let raw = rec.get(header[*c]).unwrap_or("").trim();
            let v: f64 = raw.parse().map_err(|_| Error::Parse {
                row,
                column: c.to_string(),
                value: raw.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: c.to_string(),
                    value: raw.to_string(),
                });
            }
            values.get_mut(c).expect("column registered").push(v);
        }
    }

    let n = values[spec.response.as_str()].len();
    if n < 2 {
        return Err(Error::InsufficientData { needed: 2, got: n });
    }

    let block = |cols: &[String], intercept: bool| -> (DMatrix<f64>, Vec<String>) {
        let mut names = Vec::with_capacity(cols.len() + 1);
        if intercept {
            names.push(INTERCEPT.to_string());
        }
        names.extend(cols.iter().cloned());
        let offset = usize::from(intercept);
        let m = DMatrix::from_fn(n, names.len(), |i, j| {
            if intercept && j == 0 {
                1.0
            } else {
                values[cols[j - offset].as_str()][i]
            }
        });
        (m, names)
    };
    let (x_base, baseline) = block(&spec.baseline, spec.add_intercept_baseline);
    let (x_diff, diff) = block(&spec.diff, spec.add_intercept_diff);
    let (z_group, grouping) = block(&spec.grouping, spec.add_intercept_grouping);
    let y = DVector::from_vec(values[spec.response.as_str()].clone());
    let treatment = spec
        .treatment
        .as_ref()
        .map(|c| DVector::from_vec(values[c.as_str()].clone()));
    let names = ColumnNames {
        response: spec.response.clone(),
        baseline,
        diff,
        grouping,
        treatment: spec.treatment.clone(),
    };
    Dataset::from_parts(y, x_base, x_diff, z_group, treatment, names)
}

/// Checks the family-specific constraints on the response (and treatment).
pub fn validate(ds: &Dataset, family: &FamilyKind) -> Result<()> {
    let binary = |v: f64| v == 0.0 || v == 1.0;
    let fail = |i: usize, constraint: &str| {
        Err(Error::Validation {
            row: i + 1,
            constraint: constraint.to_string(),
        })
    };
    match family {
        FamilyKind::BinomialGlm | FamilyKind::Probit => {
            if let Some(i) = ds.y().iter().position(|&v| !binary(v)) {
                return fail(i, "response must be 0 or 1");
            }
        }
        FamilyKind::PoissonGlm => {
            if let Some(i) = ds.y().iter().position(|&v| v < 0.0 || v.fract() != 0.0) {
                return fail(i, "response must be a nonnegative integer");
            }
        }
        FamilyKind::Quantile { tau } => {
            if !(*tau > 0.0 && *tau < 1.0) {
                return Err(Error::InvalidParameter(format!("tau = {tau} must lie in (0, 1)")));
            }
        }
        FamilyKind::GaussianGlm => {}
        FamilyKind::Semiparametric => match ds.treatment() {
            None => {
                return Err(Error::Config(
                    "semiparametric family requires a treatment column".into(),
                ))
            }
            Some(a) => {
                if let Some(i) = a.iter().position(|&v| !binary(v)) {
                    return fail(i, "treatment must be 0 or 1");
                }
            }
        },
    }
    Ok(())
}
