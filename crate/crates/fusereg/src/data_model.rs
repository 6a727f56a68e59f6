//! The fused two-source dataset.
//!
//! Each row comes from exactly one source: source A rows (`R = 1`) carry the
//! outcome `Y` and no `L` columns, source B rows (`R = 0`) carry all `L`
//! columns and no outcome. Common covariates `V` are present everywhere.
//! The pattern is an invariant of [`FusedDataset`]: every constructor,
//! including the CSV loader and the simulation harness, enforces it, and a
//! constructed dataset is immutable.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nuisance::PropensityFit;

/// Names and roles of the dataset columns.
///
/// `q` counts the V design dimension including the synthesized intercept;
/// `p` is the number of L columns. The intercept is never stored in files —
/// it is added when design matrices are built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub v_names: Vec<String>,
    pub l_names: Vec<String>,
    pub y_name: String,
    pub r_name: String,
    pub intercept: bool,
}

impl ColumnSchema {
    pub fn new(
        v_names: Vec<String>,
        l_names: Vec<String>,
        y_name: impl Into<String>,
        r_name: impl Into<String>,
        intercept: bool,
    ) -> Result<Self> {
        let schema = ColumnSchema {
            v_names,
            l_names,
            y_name: y_name.into(),
            r_name: r_name.into(),
            intercept,
        };
        schema.check_names()?;
        Ok(schema)
    }

    fn check_names(&self) -> Result<()> {
        if self.v_names.is_empty() && !self.intercept {
            return Err(Error::Validation(
                "schema needs at least one V column or an intercept".into(),
            ));
        }
        if self.l_names.is_empty() {
            return Err(Error::Validation("schema needs at least one L column".into()));
        }
        let mut all: Vec<&String> = self.v_names.iter().chain(&self.l_names).collect();
        all.push(&self.y_name);
        all.push(&self.r_name);
        for (i, a) in all.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::Validation("empty column name".into()));
            }
            for b in &all[i + 1..] {
                if a == b {
                    return Err(Error::Validation(format!(
                        "column name `{a}` used in more than one role"
                    )));
                }
            }
        }
        Ok(())
    }

    /// V design dimension including the intercept when set.
    pub fn q(&self) -> usize {
        self.v_names.len() + usize::from(self.intercept)
    }

    /// Number of L columns.
    pub fn p(&self) -> usize {
        self.l_names.len()
    }
}

/// One observation. `y` is present iff `r`, `l` is present iff `!r`.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub r: bool,
    pub y: Option<f64>,
    pub l: Option<Vec<f64>>,
    pub v: Vec<f64>,
}

impl Record {
    /// Source-A row (observes Y).
    pub fn source_a(y: f64, v: Vec<f64>) -> Record {
        Record {
            r: true,
            y: Some(y),
            l: None,
            v,
        }
    }

    /// Source-B row (observes L).
    pub fn source_b(l: Vec<f64>, v: Vec<f64>) -> Record {
        Record {
            r: false,
            y: None,
            l: Some(l),
            v,
        }
    }
}

/// Validated, immutable fused dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedDataset {
    schema: ColumnSchema,
    rows: Vec<Record>,
    n_a: usize,
}

impl FusedDataset {
    /// Validate rows against the schema and the R-pattern.
    pub fn new(schema: ColumnSchema, rows: Vec<Record>) -> Result<Self> {
        schema.check_names()?;
        if rows.is_empty() {
            return Err(Error::Validation("dataset has no rows".into()));
        }
        let p = schema.p();
        let n_v = schema.v_names.len();
        let mut n_a = 0usize;
        for (i, row) in rows.iter().enumerate() {
            if row.v.len() != n_v {
                return Err(Error::PatternViolation {
                    row: i,
                    detail: format!("expected {} V values, found {}", n_v, row.v.len()),
                });
            }
            if row.v.iter().any(|x| !x.is_finite()) {
                return Err(Error::PatternViolation {
                    row: i,
                    detail: "non-finite V value".into(),
                });
            }
            if row.r {
                n_a += 1;
                match row.y {
                    Some(y) if y.is_finite() => {}
                    Some(_) => {
                        return Err(Error::PatternViolation {
                            row: i,
                            detail: "non-finite Y value".into(),
                        })
                    }
                    None => {
                        return Err(Error::PatternViolation {
                            row: i,
                            detail: "R=1 row without Y".into(),
                        })
                    }
                }
                if row.l.is_some() {
                    return Err(Error::PatternViolation {
                        row: i,
                        detail: "R=1 row carries L values".into(),
                    });
                }
            } else {
                if row.y.is_some() {
                    return Err(Error::PatternViolation {
                        row: i,
                        detail: "R=0 row carries a Y value".into(),
                    });
                }
                match &row.l {
                    Some(l) if l.len() == p => {
                        if l.iter().any(|x| !x.is_finite()) {
                            return Err(Error::PatternViolation {
                                row: i,
                                detail: "non-finite L value".into(),
                            });
                        }
                    }
                    Some(l) => {
                        return Err(Error::PatternViolation {
                            row: i,
                            detail: format!("expected {} L values, found {}", p, l.len()),
                        })
                    }
                    None => {
                        return Err(Error::PatternViolation {
                            row: i,
                            detail: "R=0 row without L".into(),
                        })
                    }
                }
            }
        }
        if n_a == 0 {
            return Err(Error::EmptySource("no rows from source A (R=1)".into()));
        }
        if n_a == rows.len() {
            return Err(Error::EmptySource("no rows from source B (R=0)".into()));
        }
        Ok(FusedDataset { schema, rows, n_a })
    }

    pub fn schema(&self) -> &ColumnSchema {
        &self.schema
    }

    pub fn rows(&self) -> &[Record] {
        &self.rows
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    /// Rows from source A (R = 1).
    pub fn n_a(&self) -> usize {
        self.n_a
    }

    /// Rows from source B (R = 0).
    pub fn n_b(&self) -> usize {
        self.rows.len() - self.n_a
    }

    /// New dataset from the rows at `indices` (with repetition allowed, as
    /// in bootstrap resampling). Re-validates source counts.
    pub fn subset(&self, indices: &[usize]) -> Result<FusedDataset> {
        let rows: Vec<Record> = indices.iter().map(|&i| self.rows[i].clone()).collect();
        FusedDataset::new(self.schema.clone(), rows)
    }
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<Option<f64>> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    match raw.parse::<f64>() {
        Ok(x) if x.is_finite() => Ok(Some(x)),
        Ok(_) => Err(Error::MalformedCell {
            row,
            column: column.to_string(),
            detail: format!("non-finite value `{raw}`"),
        }),
        Err(_) => Err(Error::MalformedCell {
            row,
            column: column.to_string(),
            detail: format!("expected a number, found `{raw}`"),
        }),
    }
}

/// Load a fused dataset from a CSV file.
///
/// The header must contain every schema column (order is free); empty cells
/// encode structurally missing fields. Row numbers in errors are 1-based
/// data rows (the header is row 0).
pub fn load_fused_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<FusedDataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);

    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let r_idx = find(&schema.r_name)?;
    let y_idx = find(&schema.y_name)?;
    let v_idx: Vec<usize> = schema
        .v_names
        .iter()
        .map(|n| find(n))
        .collect::<Result<_>>()?;
    let l_idx: Vec<usize> = schema
        .l_names
        .iter()
        .map(|n| find(n))
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row_no = i + 1;
        let get = |idx: usize| record.get(idx).unwrap_or("");

        let r = match parse_cell(get(r_idx), row_no, &schema.r_name)? {
            Some(x) if x == 0.0 || x == 1.0 => x == 1.0,
            Some(x) => {
                return Err(Error::MalformedCell {
                    row: row_no,
                    column: schema.r_name.clone(),
                    detail: format!("R must be 0 or 1, found {x}"),
                })
            }
            None => {
                return Err(Error::PatternViolation {
                    row: row_no,
                    detail: format!("missing source indicator `{}`", schema.r_name),
                })
            }
        };

        let mut v = Vec::with_capacity(schema.v_names.len());
        for (name, &idx) in schema.v_names.iter().zip(&v_idx) {
            match parse_cell(get(idx), row_no, name)? {
                Some(x) => v.push(x),
                None => {
                    return Err(Error::PatternViolation {
                        row: row_no,
                        detail: format!("missing V value `{name}`"),
                    })
                }
            }
        }

        let y = parse_cell(get(y_idx), row_no, &schema.y_name)?;
        let mut l_vals = Vec::with_capacity(schema.l_names.len());
        let mut l_present = 0usize;
        for (name, &idx) in schema.l_names.iter().zip(&l_idx) {
            if let Some(x) = parse_cell(get(idx), row_no, name)? {
                l_vals.push(x);
                l_present += 1;
            }
        }

        if r {
            if y.is_none() {
                return Err(Error::PatternViolation {
                    row: row_no,
                    detail: "R=1 row with empty Y cell".into(),
                });
            }
            if l_present > 0 {
                return Err(Error::PatternViolation {
                    row: row_no,
                    detail: "R=1 row with a nonempty L cell".into(),
                });
            }
            rows.push(Record::source_a(y.unwrap(), v));
        } else {
            if y.is_some() {
                return Err(Error::PatternViolation {
                    row: row_no,
                    detail: "R=0 row with a nonempty Y cell".into(),
                });
            }
            if l_present < schema.l_names.len() {
                return Err(Error::PatternViolation {
                    row: row_no,
                    detail: "R=0 row with an empty L cell".into(),
                });
            }
            rows.push(Record::source_b(l_vals, v));
        }
    }

    FusedDataset::new(schema.clone(), rows)
}

/// Write a dataset as CSV with columns `r, y, v..., l...`.
///
/// Floats are written in shortest round-trip form, so write-then-load
/// reproduces values bit for bit. Missing fields become empty cells.
pub fn write_fused_csv(ds: &FusedDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::fs::File::create(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let io_err = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    let schema = ds.schema();
    let mut header = vec![schema.r_name.clone(), schema.y_name.clone()];
    header.extend(schema.v_names.iter().cloned());
    header.extend(schema.l_names.iter().cloned());
    writeln!(file, "{}", header.join(",")).map_err(io_err)?;

    let mut line = String::new();
    for row in ds.rows() {
        line.clear();
        line.push(if row.r { '1' } else { '0' });
        line.push(',');
        if let Some(y) = row.y {
            line.push_str(&y.to_string());
        }
        for x in &row.v {
            line.push(',');
            line.push_str(&x.to_string());
        }
        match &row.l {
            Some(l) => {
                for x in l {
                    line.push(',');
                    line.push_str(&x.to_string());
                }
            }
            None => {
                for _ in 0..schema.p() {
                    line.push(',');
                }
            }
        }
        writeln!(file, "{line}").map_err(io_err)?;
    }
    Ok(())
}

/// An ordered collection of multiply imputed replicates sharing one schema
/// and sample size.
#[derive(Debug, Clone)]
pub struct ReplicateSet {
    replicates: Vec<FusedDataset>,
}

impl ReplicateSet {
    pub fn new(replicates: Vec<FusedDataset>) -> Result<Self> {
        if replicates.is_empty() {
            return Err(Error::Validation("replicate set is empty".into()));
        }
        let first = &replicates[0];
        for (m, rep) in replicates.iter().enumerate().skip(1) {
            if rep.schema() != first.schema() {
                return Err(Error::LayoutMismatch(format!(
                    "replicate {m} has a different schema"
                )));
            }
            if rep.n() != first.n() {
                return Err(Error::LayoutMismatch(format!(
                    "replicate {m} has {} rows, expected {}",
                    rep.n(),
                    first.n()
                )));
            }
        }
        Ok(ReplicateSet { replicates })
    }

    pub fn m(&self) -> usize {
        self.replicates.len()
    }

    pub fn replicates(&self) -> &[FusedDataset] {
        &self.replicates
    }
}

/// Per-column summary used in validation reports.
#[derive(Debug, Clone, Serialize)]
pub struct ColumnSummary {
    pub name: String,
    pub count: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

fn summarize<'a, I: Iterator<Item = f64>>(name: &str, values: I) -> ColumnSummary
where
    I: 'a,
{
    let mut count = 0usize;
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for x in values {
        count += 1;
        sum += x;
        min = min.min(x);
        max = max.max(x);
    }
    ColumnSummary {
        name: name.to_string(),
        count,
        mean: if count > 0 { sum / count as f64 } else { f64::NAN },
        min,
        max,
    }
}

/// Structural and positivity diagnostics for a loaded dataset.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub n: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub columns: Vec<ColumnSummary>,
    /// Share of units with fitted propensity outside [delta, 1-delta];
    /// `None` when no propensity fit was supplied.
    pub positivity_violation_share: Option<f64>,
    pub warnings: Vec<String>,
}

/// Summarize the dataset and, when a propensity fit is supplied, report the
/// share of units whose fitted probability leaves `[delta, 1-delta]`. The
/// diagnostic only warns; structural problems are rejected at load time.
pub fn validate(
    ds: &FusedDataset,
    delta: f64,
    propensity: Option<&PropensityFit>,
) -> Result<ValidationReport> {
    if !(delta > 0.0 && delta < 0.5) {
        return Err(Error::Validation(format!(
            "delta must lie in (0, 0.5), got {delta}"
        )));
    }
    let schema = ds.schema();
    let mut columns = Vec::new();
    for (j, name) in schema.v_names.iter().enumerate() {
        columns.push(summarize(name, ds.rows().iter().map(|r| r.v[j])));
    }
    columns.push(summarize(
        &schema.y_name,
        ds.rows().iter().filter_map(|r| r.y),
    ));
    for (j, name) in schema.l_names.iter().enumerate() {
        columns.push(summarize(
            name,
            ds.rows().iter().filter_map(|r| r.l.as_ref().map(|l| l[j])),
        ));
    }

    let mut warnings = Vec::new();
    let positivity_violation_share = match propensity {
        Some(fit) => {
            let design = crate::design::Design::bind(fit.terms(), &schema.v_names)?;
            let outside = ds
                .rows()
                .iter()
                .filter(|row| {
                    let pi = fit.predict_pi(&design.eval(&row.v));
                    pi < delta || pi > 1.0 - delta
                })
                .count();
            Some(outside as f64 / ds.n() as f64)
        }
        None => None,
    };
    if let Some(share) = positivity_violation_share {
        if share > 0.0 {
            warnings.push(format!(
                "{:.2}% of units have fitted propensity outside [{delta}, {}]",
                100.0 * share,
                1.0 - delta
            ));
        }
    }

    Ok(ValidationReport {
        n: ds.n(),
        n_a: ds.n_a(),
        n_b: ds.n_b(),
        columns,
        positivity_violation_share,
        warnings,
    })
}

/// Default positivity bound for [`validate`].
pub const DEFAULT_DELTA: f64 = 0.01;
