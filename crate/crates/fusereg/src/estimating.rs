//! Estimating functions and the moment-equation solver.
//!
//! For a user-chosen index function g(Y, V), three estimating functions are
//! available, each mean zero at the true outcome parameters under its own
//! nuisance conditions:
//!
//! * `u_ipw = R/pi(V) g(Y,V) - (1-R)/(1-pi(V)) E_theta[g | V, L]`
//! * `u_dr  = R/pi(V) {g - E[g | V]} + (1-R)/(1-pi(V)) {E[g | V] - E[g | V, L]}`
//! * `u_imp = R {g - E[g | V]} + (1-R) {E[g | V] - E[g | V, L]}`
//!
//! where `E[g | V]` integrates over the fitted covariate model. `u_imp` is
//! `u_dr` with pi fixed at 1/2, up to the constant factor 2.
//!
//! [`solve`] roots the empirical moments by damped Newton with a central
//! finite-difference Jacobian when g is just identified, and by two-step GMM
//! when g is over identified. Moment sums run over a fixed-shape reduction
//! tree, so parallel and sequential execution give bit-identical results.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data_model::{ColumnSchema, FusedDataset, Record};
use crate::design::{Design, Term};
use crate::efficiency::Basis;
use crate::error::{Error, Result};
use crate::exec::tree_sum;
use crate::nuisance::{logistic_pi, ImputationFit, OutcomeModel, PropensityFit};
use crate::quadrature::{GaussHermite, NormalGrid, DEFAULT_NODES};

/// Which estimating function drives the fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Ipw,
    Imp,
    Dr,
}

impl EstimatorKind {
    pub fn needs_propensity(self) -> bool {
        matches!(self, EstimatorKind::Ipw | EstimatorKind::Dr)
    }

    pub fn needs_imputation(self) -> bool {
        matches!(self, EstimatorKind::Imp | EstimatorKind::Dr)
    }

    pub fn label(self) -> &'static str {
        match self {
            EstimatorKind::Ipw => "ipw",
            EstimatorKind::Imp => "imp",
            EstimatorKind::Dr => "dr",
        }
    }
}

impl std::fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// Index function g(Y, V) for the estimating equations.
#[derive(Debug, Clone)]
pub enum GSpec {
    /// g(Y, V) = Y * g(V) with g(V) a formula over V.
    YTimesGv { terms: Vec<Term> },
    /// g(Y, V) = Y * h_i with a per-row weight table aligned to the dataset
    /// (the locally efficient binary-outcome path).
    YTimesTable { values: Vec<DVector<f64>> },
    /// g(Y, V) = tau * Psi(Y, V) for a basis expansion (the approximately
    /// efficient continuous-outcome path). Only the DR estimating function
    /// is defined for this spec.
    CustomBasis { tau: DMatrix<f64>, basis: Basis },
}

impl GSpec {
    pub fn y_times_terms(terms: Vec<Term>) -> GSpec {
        GSpec::YTimesGv { terms }
    }

    /// Output dimension of the estimating function.
    pub fn dim(&self) -> Result<usize> {
        match self {
            GSpec::YTimesGv { terms } => Ok(terms.len()),
            GSpec::YTimesTable { values } => values
                .first()
                .map(|v| v.len())
                .ok_or_else(|| Error::Validation("empty per-row weight table".into())),
            GSpec::CustomBasis { tau, .. } => Ok(tau.nrows()),
        }
    }
}

/// Solver settings. The defaults pin every tolerance used by the crate:
/// residual tolerance 1e-9 (max component), central differences with step
/// 1e-6 (1 + |theta_j|), a hard condition limit of 1e10 beyond which the
/// fit fails rather than regularizes, and a weak-identification warning
/// when the smallest Jacobian singular value drops below 1e-3.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub fd_step: f64,
    pub condition_limit: f64,
    pub weak_singular_value: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-9,
            max_iter: 200,
            fd_step: 1e-6,
            condition_limit: 1e10,
            weak_singular_value: 1e-3,
        }
    }
}

/// Solver state reported with every fit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    /// Max absolute component of the stationarity vector at the solution
    /// (the moment vector itself when just identified).
    pub residual_norm: f64,
    pub jacobian_condition: f64,
    pub min_singular_value: f64,
    /// Set when `min_singular_value` falls below the configured threshold.
    pub weak_identification: bool,
}

/// Two-sided Wald interval.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WaldInterval {
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
}

/// How a covariance estimate was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum CovarianceMethod {
    /// Stacked-equation sandwich; `nuisance_corrected` is false when the
    /// nuisance parameters were treated as known.
    Sandwich { nuisance_corrected: bool },
    Bootstrap { replicates: usize, failures: usize },
}

/// Covariance of the fitted coefficients: the n-scaled asymptotic matrix
/// and the per-sample matrix (asymptotic / n) that feeds Wald intervals.
#[derive(Debug, Clone)]
pub struct CovarianceEstimate {
    pub asymptotic: DMatrix<f64>,
    pub per_sample: DMatrix<f64>,
    pub method: CovarianceMethod,
}

/// A fitted estimator: coefficients, optional covariance and intervals, and
/// solver diagnostics.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub estimator: EstimatorKind,
    pub names: Vec<String>,
    pub theta: DVector<f64>,
    pub covariance: Option<CovarianceEstimate>,
    pub wald: Option<Vec<WaldInterval>>,
    pub solver: SolverDiagnostics,
}

/// Precomputed per-row designs for repeated moment evaluation. The outcome
/// coefficients and the nuisance coefficient values are arguments of every
/// evaluation, so inference code can perturb them without rebuilding.
pub(crate) struct MomentContext<'a> {
    pub kind: EstimatorKind,
    g: &'a GSpec,
    outcome: &'a OutcomeModel,
    rows: &'a [Record],
    v_out: Vec<DVector<f64>>,
    v_prop: Option<Vec<DVector<f64>>>,
    v_imp: Option<Vec<DVector<f64>>>,
    g_table: Option<Vec<DVector<f64>>>,
    l_grid: Option<NormalGrid>,
    y_rule: GaussHermite,
    dim_u: usize,
}

impl<'a> MomentContext<'a> {
    pub fn new(
        ds: &'a FusedDataset,
        kind: EstimatorKind,
        g: &'a GSpec,
        outcome: &'a OutcomeModel,
        prop: Option<&PropensityFit>,
        imp: Option<&ImputationFit>,
    ) -> Result<Self> {
        let schema = ds.schema();
        if kind.needs_propensity() && prop.is_none() {
            return Err(Error::Validation(format!(
                "{kind} estimation requires a propensity fit"
            )));
        }
        let needs_imp = kind.needs_imputation();
        if needs_imp && imp.is_none() {
            return Err(Error::Validation(format!(
                "{kind} estimation requires an imputation fit"
            )));
        }
        if matches!(g, GSpec::CustomBasis { .. }) && kind != EstimatorKind::Dr {
            return Err(Error::Validation(
                "basis-expansion estimating functions are defined for the DR estimator".into(),
            ));
        }
        if outcome.p() != schema.p() {
            return Err(Error::DimensionMismatch(format!(
                "outcome model has {} L coefficients but the schema has {} L columns",
                outcome.p(),
                schema.p()
            )));
        }

        let out_design = Design::bind(outcome.v_terms(), &schema.v_names)?;
        let v_out: Vec<DVector<f64>> = ds
            .rows()
            .iter()
            .map(|row| out_design.eval(&row.v))
            .collect();

        let v_prop = match prop {
            Some(fit) if kind.needs_propensity() => {
                let d = Design::bind(fit.terms(), &schema.v_names)?;
                Some(
                    ds.rows()
                        .iter()
                        .map(|row| d.eval(&row.v))
                        .collect::<Vec<_>>(),
                )
            }
            _ => None,
        };
        let (v_imp, l_grid) = match imp {
            Some(fit) if needs_imp => {
                let d = Design::bind(fit.terms(), &schema.v_names)?;
                let grid = fit.l_grid(&GaussHermite::new(DEFAULT_NODES))?;
                (
                    Some(
                        ds.rows()
                            .iter()
                            .map(|row| d.eval(&row.v))
                            .collect::<Vec<_>>(),
                    ),
                    Some(grid),
                )
            }
            _ => (None, None),
        };

        let g_table = match g {
            GSpec::YTimesGv { terms } => {
                let d = Design::bind(terms, &schema.v_names)?;
                Some(
                    ds.rows()
                        .iter()
                        .map(|row| d.eval(&row.v))
                        .collect::<Vec<_>>(),
                )
            }
            GSpec::YTimesTable { values } => {
                if values.len() != ds.n() {
                    return Err(Error::DimensionMismatch(format!(
                        "weight table has {} rows, dataset has {}",
                        values.len(),
                        ds.n()
                    )));
                }
                Some(values.clone())
            }
            GSpec::CustomBasis { .. } => None,
        };

        let dim_u = g.dim()?;
        Ok(MomentContext {
            kind,
            g,
            outcome,
            rows: ds.rows(),
            v_out,
            v_prop,
            v_imp,
            g_table,
            l_grid,
            y_rule: GaussHermite::new(DEFAULT_NODES),
            dim_u,
        })
    }

    pub fn n(&self) -> usize {
        self.rows.len()
    }

    pub fn dim_u(&self) -> usize {
        self.dim_u
    }

    fn pi(&self, i: usize, eta: &DVector<f64>) -> f64 {
        logistic_pi(eta, &self.v_prop.as_ref().expect("propensity design cached")[i])
    }

    fn mu_l(&self, i: usize, alpha: &DMatrix<f64>) -> DVector<f64> {
        alpha.transpose() * &self.v_imp.as_ref().expect("imputation design cached")[i]
    }

    /// Estimating-function value for row `i` at outcome model `model` and
    /// nuisance coefficients `eta` / `alpha` (possibly perturbed copies of
    /// the fitted values).
    pub fn u_row(
        &self,
        i: usize,
        model: &OutcomeModel,
        eta: Option<&DVector<f64>>,
        alpha: Option<&DMatrix<f64>>,
    ) -> DVector<f64> {
        let row = &self.rows[i];
        let v_out = &self.v_out[i];
        match self.g {
            GSpec::YTimesGv { .. } | GSpec::YTimesTable { .. } => {
                let gv = &self.g_table.as_ref().expect("g table cached")[i];
                gv * self.scalar_residual(i, row, v_out, model, eta, alpha)
            }
            GSpec::CustomBasis { tau, basis } => {
                let eta = eta.expect("DR basis path weights by pi");
                let alpha = alpha.expect("DR basis path integrates over L | V");
                let pi = self.pi(i, eta);
                let mu_l = self.mu_l(i, alpha);
                let grid = self.l_grid.as_ref().expect("L grid cached");
                let e_v = basis.expect_given_v(model, v_out, &mu_l, grid, &row.v, &self.y_rule);
                let base = if row.r {
                    let psi = basis.eval(row.y.expect("R=1 row carries Y"), &row.v);
                    (psi - e_v) / pi
                } else {
                    let l = row.l.as_ref().expect("R=0 row carries L");
                    let e_vl = basis.expect_given_vl(model, v_out, l, &row.v, &self.y_rule);
                    (e_v - e_vl) / (1.0 - pi)
                };
                tau * base
            }
        }
    }

    /// Scalar factor multiplying g(V) for the y-times-g specs.
    fn scalar_residual(
        &self,
        i: usize,
        row: &Record,
        v_out: &DVector<f64>,
        model: &OutcomeModel,
        eta: Option<&DVector<f64>>,
        alpha: Option<&DMatrix<f64>>,
    ) -> f64 {
        match self.kind {
            EstimatorKind::Ipw => {
                let pi = self.pi(i, eta.expect("IPW weights by pi"));
                if row.r {
                    row.y.expect("R=1 row carries Y") / pi
                } else {
                    let l = row.l.as_ref().expect("R=0 row carries L");
                    -model.mean_y_given_vl(v_out, l) / (1.0 - pi)
                }
            }
            EstimatorKind::Dr => {
                let pi = self.pi(i, eta.expect("DR weights by pi"));
                let mu_l = self.mu_l(i, alpha.expect("DR integrates over L | V"));
                let grid = self.l_grid.as_ref().expect("L grid cached");
                let e_v = model.mean_y_given_v_at(v_out, &mu_l, grid);
                if row.r {
                    (row.y.expect("R=1 row carries Y") - e_v) / pi
                } else {
                    let l = row.l.as_ref().expect("R=0 row carries L");
                    (e_v - model.mean_y_given_vl(v_out, l)) / (1.0 - pi)
                }
            }
            EstimatorKind::Imp => {
                let mu_l = self.mu_l(i, alpha.expect("IMP integrates over L | V"));
                let grid = self.l_grid.as_ref().expect("L grid cached");
                let e_v = model.mean_y_given_v_at(v_out, &mu_l, grid);
                if row.r {
                    row.y.expect("R=1 row carries Y") - e_v
                } else {
                    let l = row.l.as_ref().expect("R=0 row carries L");
                    e_v - model.mean_y_given_vl(v_out, l)
                }
            }
        }
    }

    /// Empirical mean of the estimating function.
    pub fn mean_u(
        &self,
        model: &OutcomeModel,
        eta: Option<&DVector<f64>>,
        alpha: Option<&DMatrix<f64>>,
    ) -> DVector<f64> {
        let dim = self.dim_u;
        let total = tree_sum(
            self.n(),
            |i| self.u_row(i, model, eta, alpha),
            || DVector::zeros(dim),
        );
        total / self.n() as f64
    }

    /// Propensity score row (r - pi) v; requires a propensity-weighted kind.
    pub fn s_eta_row(&self, i: usize, eta: &DVector<f64>) -> DVector<f64> {
        crate::nuisance::score_eta_at(
            eta,
            &self.v_prop.as_ref().expect("propensity design cached")[i],
            self.rows[i].r,
        )
    }

    /// Covariate-model score row (zero for source-A rows); requires an
    /// imputation-dependent kind.
    pub fn s_alpha_row(
        &self,
        i: usize,
        alpha: &DMatrix<f64>,
        sigma_inv: &DMatrix<f64>,
    ) -> DVector<f64> {
        let row = &self.rows[i];
        match &row.l {
            Some(l) => crate::nuisance::score_alpha_at(
                alpha,
                sigma_inv,
                &self.v_imp.as_ref().expect("imputation design cached")[i],
                &DVector::from_row_slice(l),
            ),
            None => DVector::zeros(alpha.nrows() * alpha.ncols()),
        }
    }

    /// Central finite-difference Jacobian of `mean_u` in the outcome
    /// coefficients, step `fd_step * (1 + |theta_j|)` per column.
    pub fn fd_jacobian(
        &self,
        theta: &DVector<f64>,
        eta: Option<&DVector<f64>>,
        alpha: Option<&DMatrix<f64>>,
        fd_step: f64,
    ) -> DMatrix<f64> {
        let t = theta.len();
        let mut jac = DMatrix::zeros(self.dim_u, t);
        for j in 0..t {
            let h = fd_step * (1.0 + theta[j].abs());
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[j] += h;
            dn[j] -= h;
            let m_up = self.mean_u(&self.outcome.with_beta(up), eta, alpha);
            let m_dn = self.mean_u(&self.outcome.with_beta(dn), eta, alpha);
            jac.set_column(j, &((m_up - m_dn) / (2.0 * h)));
        }
        jac
    }
}

fn g_row(schema: &ColumnSchema, g: &GSpec, row: &Record) -> Result<DVector<f64>> {
    match g {
        GSpec::YTimesGv { terms } => {
            let d = Design::bind(terms, &schema.v_names)?;
            Ok(d.eval(&row.v))
        }
        _ => Err(Error::Validation(
            "per-row evaluation needs a y-times-g(V) spec".into(),
        )),
    }
}

fn imp_pieces(
    schema: &ColumnSchema,
    imp: &ImputationFit,
    row: &Record,
) -> Result<(DVector<f64>, NormalGrid)> {
    let d = Design::bind(imp.terms(), &schema.v_names)?;
    let mu_l = imp.mean_l(&d.eval(&row.v));
    let grid = imp.l_grid(&GaussHermite::new(DEFAULT_NODES))?;
    Ok((mu_l, grid))
}

fn pi_for(schema: &ColumnSchema, prop: &PropensityFit, row: &Record) -> Result<f64> {
    let d = Design::bind(prop.terms(), &schema.v_names)?;
    Ok(prop.predict_pi(&d.eval(&row.v)))
}

fn v_out_for(schema: &ColumnSchema, outcome: &OutcomeModel, row: &Record) -> Result<DVector<f64>> {
    let d = Design::bind(outcome.v_terms(), &schema.v_names)?;
    Ok(d.eval(&row.v))
}

/// IPW estimating function for a single record.
pub fn u_ipw(
    outcome: &OutcomeModel,
    prop: &PropensityFit,
    schema: &ColumnSchema,
    row: &Record,
    g: &GSpec,
) -> Result<DVector<f64>> {
    let gv = g_row(schema, g, row)?;
    let pi = pi_for(schema, prop, row)?;
    let v_out = v_out_for(schema, outcome, row)?;
    let scale = if row.r {
        row.y.expect("R=1 row carries Y") / pi
    } else {
        let l = row.l.as_ref().expect("R=0 row carries L");
        -outcome.mean_y_given_vl(&v_out, l) / (1.0 - pi)
    };
    Ok(gv * scale)
}

/// Doubly robust estimating function for a single record.
pub fn u_dr(
    outcome: &OutcomeModel,
    prop: &PropensityFit,
    imp: &ImputationFit,
    schema: &ColumnSchema,
    row: &Record,
    g: &GSpec,
) -> Result<DVector<f64>> {
    let gv = g_row(schema, g, row)?;
    let pi = pi_for(schema, prop, row)?;
    let v_out = v_out_for(schema, outcome, row)?;
    let (mu_l, grid) = imp_pieces(schema, imp, row)?;
    let e_v = outcome.mean_y_given_v_at(&v_out, &mu_l, &grid);
    let scale = if row.r {
        (row.y.expect("R=1 row carries Y") - e_v) / pi
    } else {
        let l = row.l.as_ref().expect("R=0 row carries L");
        (e_v - outcome.mean_y_given_vl(&v_out, l)) / (1.0 - pi)
    };
    Ok(gv * scale)
}

/// Imputation-based estimating function for a single record (the DR
/// function with pi fixed at 1/2, up to the factor 2).
pub fn u_imp(
    outcome: &OutcomeModel,
    imp: &ImputationFit,
    schema: &ColumnSchema,
    row: &Record,
    g: &GSpec,
) -> Result<DVector<f64>> {
    let gv = g_row(schema, g, row)?;
    let v_out = v_out_for(schema, outcome, row)?;
    let (mu_l, grid) = imp_pieces(schema, imp, row)?;
    let e_v = outcome.mean_y_given_v_at(&v_out, &mu_l, &grid);
    let scale = if row.r {
        row.y.expect("R=1 row carries Y") - e_v
    } else {
        let l = row.l.as_ref().expect("R=0 row carries L");
        e_v - outcome.mean_y_given_vl(&v_out, l)
    };
    Ok(gv * scale)
}

/// Evaluate the estimating function on every row of a dataset (designs and
/// quadrature grids built once). `outcome.beta` supplies theta.
pub fn u_rows(
    ds: &FusedDataset,
    kind: EstimatorKind,
    g: &GSpec,
    outcome: &OutcomeModel,
    prop: Option<&PropensityFit>,
    imp: Option<&ImputationFit>,
) -> Result<Vec<DVector<f64>>> {
    let ctx = MomentContext::new(ds, kind, g, outcome, prop, imp)?;
    let eta_store = prop.map(|f| f.eta.clone());
    let alpha_store = imp.map(|f| f.alpha.clone());
    Ok((0..ds.n())
        .map(|i| ctx.u_row(i, outcome, eta_store.as_ref(), alpha_store.as_ref()))
        .collect())
}

fn svd_extremes(j: &DMatrix<f64>) -> (f64, f64) {
    let svd = j.clone().svd(false, false);
    (svd.singular_values.max(), svd.singular_values.min())
}

fn diagnostics_at(
    ctx: &MomentContext,
    theta: &DVector<f64>,
    eta: Option<&DVector<f64>>,
    alpha: Option<&DMatrix<f64>>,
    opts: &SolveOptions,
    iterations: usize,
    residual: f64,
) -> SolverDiagnostics {
    let jac = ctx.fd_jacobian(theta, eta, alpha, opts.fd_step);
    let (smax, smin) = svd_extremes(&jac);
    SolverDiagnostics {
        iterations,
        residual_norm: residual,
        jacobian_condition: smax / smin.max(f64::MIN_POSITIVE),
        min_singular_value: smin,
        weak_identification: smin < opts.weak_singular_value,
    }
}

/// Default initializer: least squares of Y on the outcome V design
/// augmented with imputed L (alpha^T V) over the R = 1 rows. Without a
/// covariate model the L block starts at zero.
pub fn default_init(
    ds: &FusedDataset,
    outcome: &OutcomeModel,
    imp: Option<&ImputationFit>,
) -> Result<DVector<f64>> {
    let schema = ds.schema();
    let out_design = Design::bind(outcome.v_terms(), &schema.v_names)?;
    let imp_design = match imp {
        Some(fit) => Some(Design::bind(fit.terms(), &schema.v_names)?),
        None => None,
    };
    let dim = outcome.beta.len();
    let q = outcome.q_out();
    let rows_a: Vec<&Record> = ds.rows().iter().filter(|r| r.r).collect();
    let cols = if imp.is_some() { dim } else { q };
    if rows_a.len() <= cols {
        // too few outcome rows to regress; fall back to zero start
        return Ok(DVector::zeros(dim));
    }
    let mut x = DMatrix::<f64>::zeros(rows_a.len(), cols);
    let mut y = DVector::<f64>::zeros(rows_a.len());
    for (i, row) in rows_a.iter().enumerate() {
        let v = out_design.eval(&row.v);
        for k in 0..q {
            x[(i, k)] = v[k];
        }
        if let (Some(fit), Some(d)) = (imp, &imp_design) {
            let mu = fit.mean_l(&d.eval(&row.v));
            for j in 0..mu.len() {
                x[(i, q + j)] = mu[j];
            }
        }
        y[i] = row.y.expect("R=1 row carries Y");
    }
    let xtx = x.transpose() * &x;
    let mut init = DVector::zeros(dim);
    if let Some(chol) = xtx.cholesky() {
        let beta_ls = chol.solve(&(x.transpose() * y));
        for k in 0..beta_ls.len() {
            init[k] = beta_ls[k];
        }
    }
    Ok(init)
}

/// Root the empirical moment equations for the outcome coefficients.
///
/// `outcome` supplies the family, design and dimensions; its coefficient
/// values are ignored in favor of `init` (or the default initializer).
/// Just-identified g roots the moments by damped Newton; over-identified g
/// minimizes the GMM quadratic form in two steps (identity weight, then the
/// inverse empirical moment covariance).
pub fn solve(
    ds: &FusedDataset,
    kind: EstimatorKind,
    g: &GSpec,
    outcome: &OutcomeModel,
    prop: Option<&PropensityFit>,
    imp: Option<&ImputationFit>,
    init: Option<&DVector<f64>>,
    opts: &SolveOptions,
) -> Result<FitResult> {
    let ctx = MomentContext::new(ds, kind, g, outcome, prop, imp)?;
    let dim_beta = outcome.beta.len();
    if ctx.dim_u() < dim_beta {
        return Err(Error::DimensionMismatch(format!(
            "g has dimension {} but theta has {}",
            ctx.dim_u(),
            dim_beta
        )));
    }
    let eta_store = prop.map(|f| f.eta.clone());
    let alpha_store = imp.map(|f| f.alpha.clone());
    let eta = eta_store.as_ref();
    let alpha = alpha_store.as_ref();

    let start = match init {
        Some(v) => {
            if v.len() != dim_beta {
                return Err(Error::DimensionMismatch(format!(
                    "init has {} entries, theta needs {}",
                    v.len(),
                    dim_beta
                )));
            }
            v.clone()
        }
        None => default_init(ds, outcome, imp)?,
    };

    let (theta, diagnostics) = if ctx.dim_u() == dim_beta {
        newton_root(&ctx, outcome, eta, alpha, start, opts)?
    } else {
        gmm_two_step(&ctx, outcome, eta, alpha, start, opts)?
    };

    Ok(FitResult {
        estimator: kind,
        names: outcome.coefficient_names(ds.schema()),
        theta,
        covariance: None,
        wald: None,
        solver: diagnostics,
    })
}

fn newton_root(
    ctx: &MomentContext,
    outcome: &OutcomeModel,
    eta: Option<&DVector<f64>>,
    alpha: Option<&DMatrix<f64>>,
    start: DVector<f64>,
    opts: &SolveOptions,
) -> Result<(DVector<f64>, SolverDiagnostics)> {
    let mut theta = start;
    let mut m = ctx.mean_u(&outcome.with_beta(theta.clone()), eta, alpha);
    let mut residual = m.amax();
    let mut best = (theta.clone(), residual);

    for iter in 0..=opts.max_iter {
        if residual < opts.tol {
            let diag = diagnostics_at(ctx, &theta, eta, alpha, opts, iter, residual);
            return Ok((theta, diag));
        }
        if iter == opts.max_iter {
            break;
        }
        let jac = ctx.fd_jacobian(&theta, eta, alpha, opts.fd_step);
        let (smax, smin) = svd_extremes(&jac);
        let cond = smax / smin.max(f64::MIN_POSITIVE);
        if cond > opts.condition_limit {
            return Err(Error::SingularJacobian(cond));
        }
        let step = jac
            .clone()
            .lu()
            .solve(&(-&m))
            .ok_or(Error::SingularJacobian(cond))?;

        // backtracking line search on the residual norm
        let mut accepted = false;
        let mut t = 1.0;
        for _ in 0..30 {
            let candidate = &theta + &step * t;
            let m_new = ctx.mean_u(&outcome.with_beta(candidate.clone()), eta, alpha);
            let res_new = m_new.amax();
            if res_new < residual {
                theta = candidate;
                m = m_new;
                residual = res_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if residual < best.1 {
            best = (theta.clone(), residual);
        }
        if !accepted {
            return Err(Error::NoConvergence {
                iterations: iter,
                residual: best.1,
                best: best.0.iter().copied().collect(),
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        residual: best.1,
        best: best.0.iter().copied().collect(),
    })
}

fn gmm_two_step(
    ctx: &MomentContext,
    outcome: &OutcomeModel,
    eta: Option<&DVector<f64>>,
    alpha: Option<&DMatrix<f64>>,
    start: DVector<f64>,
    opts: &SolveOptions,
) -> Result<(DVector<f64>, SolverDiagnostics)> {
    let dim_u = ctx.dim_u();
    let identity = DMatrix::<f64>::identity(dim_u, dim_u);
    let (theta1, _) = gmm_minimize(ctx, outcome, eta, alpha, start, &identity, opts)?;

    // second-step weight: inverse empirical covariance of the moments
    let model1 = outcome.with_beta(theta1.clone());
    let mut moment_cov = tree_sum(
        ctx.n(),
        |i| {
            let u = ctx.u_row(i, &model1, eta, alpha);
            let mut m = DMatrix::zeros(dim_u, dim_u);
            m.syger(1.0, &u, &u, 0.0);
            m
        },
        || DMatrix::zeros(dim_u, dim_u),
    ) / ctx.n() as f64;
    moment_cov.fill_upper_triangle_with_lower_triangle();
    let weight = moment_cov
        .cholesky()
        .ok_or_else(|| Error::SingularBread("moment covariance not positive definite".into()))?
        .inverse();
    gmm_minimize(ctx, outcome, eta, alpha, theta1, &weight, opts)
}

fn gmm_minimize(
    ctx: &MomentContext,
    outcome: &OutcomeModel,
    eta: Option<&DVector<f64>>,
    alpha: Option<&DMatrix<f64>>,
    start: DVector<f64>,
    weight: &DMatrix<f64>,
    opts: &SolveOptions,
) -> Result<(DVector<f64>, SolverDiagnostics)> {
    let mut theta = start;
    let mut m = ctx.mean_u(&outcome.with_beta(theta.clone()), eta, alpha);
    let mut q = (weight * &m).dot(&m);

    for iter in 0..opts.max_iter {
        let jac = ctx.fd_jacobian(&theta, eta, alpha, opts.fd_step);
        let grad = jac.transpose() * weight * &m;
        let residual = grad.amax();
        if residual < opts.tol {
            let (smax, smin) = svd_extremes(&jac);
            return Ok((
                theta,
                SolverDiagnostics {
                    iterations: iter,
                    residual_norm: residual,
                    jacobian_condition: smax / smin.max(f64::MIN_POSITIVE),
                    min_singular_value: smin,
                    weak_identification: smin < opts.weak_singular_value,
                },
            ));
        }
        let (smax, smin) = svd_extremes(&jac);
        let hess = jac.transpose() * weight * &jac;
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::SingularJacobian(smax / smin.max(f64::MIN_POSITIVE)))?
            .solve(&(-&grad));
        let mut accepted = false;
        let mut t = 1.0;
        for _ in 0..30 {
            let candidate = &theta + &step * t;
            let m_new = ctx.mean_u(&outcome.with_beta(candidate.clone()), eta, alpha);
            let q_new = (weight * &m_new).dot(&m_new);
            if q_new < q {
                theta = candidate;
                m = m_new;
                q = q_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence {
                iterations: iter,
                residual,
                best: theta.iter().copied().collect(),
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        residual: m.amax(),
        best: theta.iter().copied().collect(),
    })
}
