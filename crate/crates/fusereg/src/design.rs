//! Formula terms and design-matrix construction.
//!
//! A formula is an ordered list of [`Term`]s over named columns: the
//! constant `1`, a column, its square `x^2`, or a pairwise product `x*y`.
//! Terms are bound against a name list once, then evaluated per row without
//! further lookups.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One term of a design formula.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Term {
    /// Constant 1.
    Intercept,
    Col(String),
    Square(String),
    Product(String, String),
}

impl Term {
    /// Parse `"1"`, `"x"`, `"x^2"` or `"x*y"`.
    pub fn parse(s: &str) -> Result<Term> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::Validation("empty formula term".into()));
        }
        if s == "1" {
            return Ok(Term::Intercept);
        }
        if let Some((a, b)) = s.split_once('*') {
            let (a, b) = (a.trim(), b.trim());
            if a.is_empty() || b.is_empty() {
                return Err(Error::Validation(format!("malformed product term `{s}`")));
            }
            return Ok(Term::Product(a.to_string(), b.to_string()));
        }
        if let Some(base) = s.strip_suffix("^2") {
            let base = base.trim();
            if base.is_empty() {
                return Err(Error::Validation(format!("malformed square term `{s}`")));
            }
            return Ok(Term::Square(base.to_string()));
        }
        if s.contains('^') {
            return Err(Error::Validation(format!(
                "unsupported power in term `{s}` (only ^2 is allowed)"
            )));
        }
        Ok(Term::Col(s.to_string()))
    }

    pub fn name(&self) -> String {
        match self {
            Term::Intercept => "1".to_string(),
            Term::Col(c) => c.clone(),
            Term::Square(c) => format!("{c}^2"),
            Term::Product(a, b) => format!("{a}*{b}"),
        }
    }
}

impl TryFrom<String> for Term {
    type Error = Error;
    fn try_from(s: String) -> Result<Term> {
        Term::parse(&s)
    }
}

impl From<Term> for String {
    fn from(t: Term) -> String {
        t.name()
    }
}

impl std::fmt::Display for Term {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.name())
    }
}

/// Parse a list of term strings.
pub fn parse_terms<S: AsRef<str>>(specs: &[S]) -> Result<Vec<Term>> {
    specs.iter().map(|s| Term::parse(s.as_ref())).collect()
}

#[derive(Debug, Clone, Copy)]
enum BoundTerm {
    Intercept,
    Col(usize),
    Square(usize),
    Product(usize, usize),
}

/// Terms bound to column positions, ready for evaluation.
#[derive(Debug, Clone)]
pub struct Design {
    terms: Vec<Term>,
    bound: Vec<BoundTerm>,
}

impl Design {
    /// Bind `terms` against the ordered column `names`.
    pub fn bind(terms: &[Term], names: &[String]) -> Result<Design> {
        if terms.is_empty() {
            return Err(Error::Validation("design has no terms".into()));
        }
        let lookup = |c: &str| -> Result<usize> {
            names
                .iter()
                .position(|n| n == c)
                .ok_or_else(|| Error::MissingColumn(c.to_string()))
        };
        let bound = terms
            .iter()
            .map(|t| {
                Ok(match t {
                    Term::Intercept => BoundTerm::Intercept,
                    Term::Col(c) => BoundTerm::Col(lookup(c)?),
                    Term::Square(c) => BoundTerm::Square(lookup(c)?),
                    Term::Product(a, b) => BoundTerm::Product(lookup(a)?, lookup(b)?),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Design {
            terms: terms.to_vec(),
            bound,
        })
    }

    pub fn dim(&self) -> usize {
        self.bound.len()
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn names(&self) -> Vec<String> {
        self.terms.iter().map(Term::name).collect()
    }

    /// Evaluate the design row for raw column values `x`.
    pub fn eval(&self, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.bound.len());
        self.eval_into(x, &mut out);
        out
    }

    pub fn eval_into(&self, x: &[f64], out: &mut DVector<f64>) {
        for (k, t) in self.bound.iter().enumerate() {
            out[k] = match *t {
                BoundTerm::Intercept => 1.0,
                BoundTerm::Col(i) => x[i],
                BoundTerm::Square(i) => x[i] * x[i],
                BoundTerm::Product(i, j) => x[i] * x[j],
            };
        }
    }

    /// Stack design rows for a sequence of raw-value slices.
    pub fn matrix<'a, I>(&self, rows: I) -> DMatrix<f64>
    where
        I: ExactSizeIterator<Item = &'a [f64]>,
    {
        let n = rows.len();
        let mut m = DMatrix::zeros(n, self.dim());
        for (i, x) in rows.enumerate() {
            for (k, t) in self.bound.iter().enumerate() {
                m[(i, k)] = match *t {
                    BoundTerm::Intercept => 1.0,
                    BoundTerm::Col(c) => x[c],
                    BoundTerm::Square(c) => x[c] * x[c],
                    BoundTerm::Product(a, b) => x[a] * x[b],
                };
            }
        }
        m
    }
}

/// Default design over a column set: intercept (when requested) followed by
/// every column in order.
pub fn default_terms(names: &[String], intercept: bool) -> Vec<Term> {
    let mut terms = Vec::with_capacity(names.len() + 1);
    if intercept {
        terms.push(Term::Intercept);
    }
    terms.extend(names.iter().cloned().map(Term::Col));
    terms
}
