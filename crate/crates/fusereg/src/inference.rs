//! Inference: stacked sandwich covariance, Wald intervals, nonparametric
//! bootstrap, Rubin pooling, and the analysis pipeline the CLI runs.
//!
//! The sandwich stacks the estimating function with the nuisance scores.
//! With `U` the estimating function, `S_phi` the scores of the nuisance
//! parameters the estimator actually uses (eta for IPW, alpha for IMP, both
//! for DR), and all derivative blocks estimated by central finite
//! differences at the fitted values,
//!
//! `Sigma_theta = G_theta^{-1} P_n{ [U + G_phi Psi][U + G_phi Psi]^T } G_theta^{-T}`
//!
//! with `Psi = -M^{-1} S_phi` the nuisance influence function. The residual
//! covariance of the covariate model enters as a fixed plug-in, not as a
//! stacked parameter. For over-identified GMM fits the same meat is mapped
//! through the linearized GMM solution instead of `G_theta^{-1}`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::FusedDataset;
use crate::design::Term;
use crate::efficiency::{h_opt_table, tau_opt, BasisSpec};
use crate::error::{Error, Result};
use crate::estimating::{
    solve, CovarianceEstimate, CovarianceMethod, EstimatorKind, FitResult, GSpec, MomentContext,
    SolveOptions, WaldInterval,
};
use crate::exec::{map_indexed, tree_sum};
use crate::nuisance::{
    estimate_sigma_y, fit_imputation, fit_propensity, ImputationFit, OutcomeFamily, OutcomeModel,
    PropensityFit,
};
use crate::rng::stream_rng;
use crate::stats::normal_quantile;

/// Settings for [`sandwich_covariance`].
#[derive(Debug, Clone, Copy)]
pub struct SandwichOptions {
    /// Central-difference step scale for every derivative block.
    pub fd_step: f64,
    /// Treat the nuisance parameters as known: drop the `G_phi Psi`
    /// correction (the oracle variant used in tests and with true values).
    pub treat_nuisance_known: bool,
    /// Condition limit on the bread and score-Hessian blocks.
    pub condition_limit: f64,
}

impl Default for SandwichOptions {
    fn default() -> Self {
        SandwichOptions {
            fd_step: 1e-6,
            treat_nuisance_known: false,
            condition_limit: 1e12,
        }
    }
}

fn condition_of(m: &DMatrix<f64>) -> f64 {
    let svd = m.clone().svd(false, false);
    svd.singular_values.max() / svd.singular_values.min().max(f64::MIN_POSITIVE)
}

/// Derivative blocks of the stacked estimating system at the fitted values:
/// `g_theta` and `g_phi` differentiate the mean moment in theta and in the
/// nuisance parameters, `m` differentiates the mean stacked score in the
/// nuisance parameters. The phi layout is eta first, then alpha flattened
/// column-major.
#[derive(Debug, Clone)]
pub struct StackedSystem {
    pub g_theta: DMatrix<f64>,
    pub g_phi: DMatrix<f64>,
    pub m: DMatrix<f64>,
    pub dim_eta: usize,
    pub dim_alpha: usize,
}

/// Estimate the stacked-system derivative blocks for a converged fit.
pub fn stacked_system(
    ds: &FusedDataset,
    fit: &FitResult,
    g: &GSpec,
    outcome: &OutcomeModel,
    prop: Option<&PropensityFit>,
    imp: Option<&ImputationFit>,
    opts: &SandwichOptions,
) -> Result<StackedSystem> {
    let kind = fit.estimator;
    let ctx = MomentContext::new(ds, kind, g, outcome, prop, imp)?;
    let model = outcome.with_beta(fit.theta.clone());
    let eta_store = prop.map(|f| f.eta.clone());
    let alpha_store = imp.map(|f| f.alpha.clone());
    let eta = eta_store.as_ref();
    let alpha = alpha_store.as_ref();
    let dim_eta = if kind.needs_propensity() {
        eta.map_or(0, |e| e.len())
    } else {
        0
    };
    let dim_alpha = if kind.needs_imputation() {
        alpha.map_or(0, |a| a.nrows() * a.ncols())
    } else {
        0
    };
    let g_theta = ctx.fd_jacobian(&fit.theta, eta, alpha, opts.fd_step);
    let g_phi = phi_jacobian(&ctx, &model, eta, alpha, dim_eta, dim_alpha, opts.fd_step);
    let m = score_hessian(&ctx, eta, alpha, imp, dim_eta, dim_alpha, opts.fd_step);
    Ok(StackedSystem {
        g_theta,
        g_phi,
        m,
        dim_eta,
        dim_alpha,
    })
}

/// Stacked-equation sandwich covariance for a converged fit.
///
/// Returns both the n-scaled asymptotic covariance and the per-sample
/// covariance (asymptotic / n).
pub fn sandwich_covariance(
    ds: &FusedDataset,
    fit: &FitResult,
    g: &GSpec,
    outcome: &OutcomeModel,
    prop: Option<&PropensityFit>,
    imp: Option<&ImputationFit>,
    opts: &SandwichOptions,
) -> Result<CovarianceEstimate> {
    let kind = fit.estimator;
    let ctx = MomentContext::new(ds, kind, g, outcome, prop, imp)?;
    let n = ds.n();
    let t = fit.theta.len();
    let dim_u = ctx.dim_u();
    let model = outcome.with_beta(fit.theta.clone());

    let eta_store = prop.map(|f| f.eta.clone());
    let alpha_store = imp.map(|f| f.alpha.clone());
    let eta = eta_store.as_ref();
    let alpha = alpha_store.as_ref();

    let use_eta = kind.needs_propensity();
    let use_alpha = kind.needs_imputation();
    let dim_eta = if use_eta { eta.map_or(0, |e| e.len()) } else { 0 };
    let dim_alpha = if use_alpha {
        alpha.map_or(0, |a| a.nrows() * a.ncols())
    } else {
        0
    };
    let dim_phi = dim_eta + dim_alpha;

    // G_theta: derivative of the mean moment in theta
    let g_theta = ctx.fd_jacobian(&fit.theta, eta, alpha, opts.fd_step);

    // Per-row adjusted moments U_i + G_phi Psi_i
    let corrected = dim_phi > 0 && !opts.treat_nuisance_known;
    let adj_rows: Box<dyn Fn(usize) -> DVector<f64> + Sync> = if corrected {
        let g_phi = phi_jacobian(&ctx, &model, eta, alpha, dim_eta, dim_alpha, opts.fd_step);
        let m_hat = score_hessian(&ctx, eta, alpha, imp, dim_eta, dim_alpha, opts.fd_step);
        if condition_of(&m_hat) > opts.condition_limit {
            return Err(Error::SingularBread(
                "score Hessian M is numerically singular".into(),
            ));
        }
        let m_inv = m_hat
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::SingularBread("score Hessian M not invertible".into()))?;
        let g_phi_minv = &g_phi * &m_inv;
        let eta_own = eta.cloned();
        let alpha_own = alpha.cloned();
        let sigma_inv = imp.map(|f| f.sigma_l_inv().clone());
        let model_c = model.clone();
        let ctx_ref = &ctx;
        Box::new(move |i: usize| {
            let u = ctx_ref.u_row(i, &model_c, eta_own.as_ref(), alpha_own.as_ref());
            let s = stacked_score_row(
                ctx_ref,
                i,
                eta_own.as_ref(),
                alpha_own.as_ref(),
                sigma_inv.as_ref(),
                dim_eta,
                dim_alpha,
            );
            // Psi = -M^{-1} s, so the correction is -(G_phi M^{-1}) s
            u - &g_phi_minv * s
        })
    } else {
        let eta_own = eta.cloned();
        let alpha_own = alpha.cloned();
        let model_c = model.clone();
        let ctx_ref = &ctx;
        Box::new(move |i: usize| ctx_ref.u_row(i, &model_c, eta_own.as_ref(), alpha_own.as_ref()))
    };

    let mut meat = tree_sum(
        n,
        |i| {
            let a = adj_rows(i);
            let mut m = DMatrix::zeros(dim_u, dim_u);
            m.syger(1.0, &a, &a, 0.0);
            m
        },
        || DMatrix::zeros(dim_u, dim_u),
    ) / n as f64;
    meat.fill_upper_triangle_with_lower_triangle();

    let asymptotic = if dim_u == t {
        let cond = condition_of(&g_theta);
        if cond > opts.condition_limit {
            return Err(Error::SingularBread(format!(
                "G_theta condition {cond:.3e} exceeds the limit"
            )));
        }
        let bread = g_theta
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::SingularBread("G_theta not invertible".into()))?;
        &bread * meat * bread.transpose()
    } else {
        // Over-identified GMM: map the meat through the linearized solution
        // A = (G^T W G)^{-1} G^T W with W the second-step weight.
        let mut moment_cov = tree_sum(
            n,
            |i| {
                let u = ctx.u_row(i, &model, eta, alpha);
                let mut m = DMatrix::zeros(dim_u, dim_u);
                m.syger(1.0, &u, &u, 0.0);
                m
            },
            || DMatrix::zeros(dim_u, dim_u),
        ) / n as f64;
        moment_cov.fill_upper_triangle_with_lower_triangle();
        let w = moment_cov
            .cholesky()
            .ok_or_else(|| Error::SingularBread("moment covariance not PD".into()))?
            .inverse();
        let gtw = g_theta.transpose() * &w;
        let bread = &gtw * &g_theta;
        if condition_of(&bread) > opts.condition_limit {
            return Err(Error::SingularBread("GMM bread is numerically singular".into()));
        }
        let bread_inv = bread
            .lu()
            .try_inverse()
            .ok_or_else(|| Error::SingularBread("GMM bread not invertible".into()))?;
        let a_map = bread_inv * gtw;
        &a_map * meat * a_map.transpose()
    };

    let per_sample = &asymptotic / n as f64;
    Ok(CovarianceEstimate {
        asymptotic,
        per_sample,
        method: CovarianceMethod::Sandwich {
            nuisance_corrected: corrected,
        },
    })
}

fn stacked_score_row(
    ctx: &MomentContext,
    i: usize,
    eta: Option<&DVector<f64>>,
    alpha: Option<&DMatrix<f64>>,
    sigma_inv: Option<&DMatrix<f64>>,
    dim_eta: usize,
    dim_alpha: usize,
) -> DVector<f64> {
    let mut s = DVector::zeros(dim_eta + dim_alpha);
    if dim_eta > 0 {
        let se = ctx.s_eta_row(i, eta.expect("eta in scope"));
        s.rows_mut(0, dim_eta).copy_from(&se);
    }
    if dim_alpha > 0 {
        let sa = ctx.s_alpha_row(
            i,
            alpha.expect("alpha in scope"),
            sigma_inv.expect("sigma_inv in scope"),
        );
        s.rows_mut(dim_eta, dim_alpha).copy_from(&sa);
    }
    s
}

/// G_phi: central differences of the mean moment in the nuisance
/// coefficients (eta block first, then alpha column-major).
fn phi_jacobian(
    ctx: &MomentContext,
    model: &OutcomeModel,
    eta: Option<&DVector<f64>>,
    alpha: Option<&DMatrix<f64>>,
    dim_eta: usize,
    dim_alpha: usize,
    fd_step: f64,
) -> DMatrix<f64> {
    let dim_u = ctx.dim_u();
    let mut g_phi = DMatrix::zeros(dim_u, dim_eta + dim_alpha);
    for j in 0..dim_eta {
        let e = eta.expect("eta in scope");
        let h = fd_step * (1.0 + e[j].abs());
        let mut up = e.clone();
        let mut dn = e.clone();
        up[j] += h;
        dn[j] -= h;
        let m_up = ctx.mean_u(model, Some(&up), alpha);
        let m_dn = ctx.mean_u(model, Some(&dn), alpha);
        g_phi.set_column(j, &((m_up - m_dn) / (2.0 * h)));
    }
    for j in 0..dim_alpha {
        let a = alpha.expect("alpha in scope");
        let (qi, pj) = (j % a.nrows(), j / a.nrows());
        let h = fd_step * (1.0 + a[(qi, pj)].abs());
        let mut up = a.clone();
        let mut dn = a.clone();
        up[(qi, pj)] += h;
        dn[(qi, pj)] -= h;
        let m_up = ctx.mean_u(model, eta, Some(&up));
        let m_dn = ctx.mean_u(model, eta, Some(&dn));
        g_phi.set_column(dim_eta + j, &((m_up - m_dn) / (2.0 * h)));
    }
    g_phi
}

/// M: central differences of the mean stacked score in phi.
fn score_hessian(
    ctx: &MomentContext,
    eta: Option<&DVector<f64>>,
    alpha: Option<&DMatrix<f64>>,
    imp: Option<&ImputationFit>,
    dim_eta: usize,
    dim_alpha: usize,
    fd_step: f64,
) -> DMatrix<f64> {
    let n = ctx.n();
    let dim_phi = dim_eta + dim_alpha;
    let sigma_inv = imp.map(|f| f.sigma_l_inv().clone());
    let mean_score = |e: Option<&DVector<f64>>, a: Option<&DMatrix<f64>>| -> DVector<f64> {
        tree_sum(
            n,
            |i| stacked_score_row(ctx, i, e, a, sigma_inv.as_ref(), dim_eta, dim_alpha),
            || DVector::zeros(dim_phi),
        ) / n as f64
    };
    let mut m = DMatrix::zeros(dim_phi, dim_phi);
    for j in 0..dim_eta {
        let e = eta.expect("eta in scope");
        let h = fd_step * (1.0 + e[j].abs());
        let mut up = e.clone();
        let mut dn = e.clone();
        up[j] += h;
        dn[j] -= h;
        let s_up = mean_score(Some(&up), alpha);
        let s_dn = mean_score(Some(&dn), alpha);
        m.set_column(j, &((s_up - s_dn) / (2.0 * h)));
    }
    for j in 0..dim_alpha {
        let a = alpha.expect("alpha in scope");
        let (qi, pj) = (j % a.nrows(), j / a.nrows());
        let h = fd_step * (1.0 + a[(qi, pj)].abs());
        let mut up = a.clone();
        let mut dn = a.clone();
        up[(qi, pj)] += h;
        dn[(qi, pj)] -= h;
        let s_up = mean_score(eta, Some(&up));
        let s_dn = mean_score(eta, Some(&dn));
        m.set_column(dim_eta + j, &((s_up - s_dn) / (2.0 * h)));
    }
    m
}

/// Two-sided Wald intervals `theta_j +/- z sqrt(diag_j)` from a per-sample
/// covariance (level 0.95 uses z = 1.959964).
pub fn wald_ci(
    theta: &DVector<f64>,
    per_sample: &DMatrix<f64>,
    level: f64,
) -> Result<Vec<WaldInterval>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Validation(format!(
            "confidence level must lie in (0,1), got {level}"
        )));
    }
    let z = normal_quantile(0.5 + level / 2.0);
    Ok((0..theta.len())
        .map(|j| {
            let se = per_sample[(j, j)].max(0.0).sqrt();
            WaldInterval {
                lo: theta[j] - z * se,
                hi: theta[j] + z * se,
                level,
            }
        })
        .collect())
}

/// Attach a sandwich covariance and Wald intervals to a fit.
pub fn finalize_fit(
    ds: &FusedDataset,
    mut fit: FitResult,
    g: &GSpec,
    outcome: &OutcomeModel,
    prop: Option<&PropensityFit>,
    imp: Option<&ImputationFit>,
    level: f64,
    opts: &SandwichOptions,
) -> Result<FitResult> {
    let cov = sandwich_covariance(ds, &fit, g, outcome, prop, imp, opts)?;
    fit.wald = Some(wald_ci(&fit.theta, &cov.per_sample, level)?);
    fit.covariance = Some(cov);
    Ok(fit)
}

/// Everything needed to run one estimator on one dataset, end to end.
#[derive(Debug, Clone)]
pub struct AnalysisSpec {
    pub kind: EstimatorKind,
    pub family: OutcomeFamily,
    pub outcome_v_terms: Vec<Term>,
    pub propensity_terms: Option<Vec<Term>>,
    pub imputation_terms: Option<Vec<Term>>,
    pub g: GDirective,
    pub solve: SolveOptions,
    pub ci_level: f64,
    /// Estimate the linear-normal residual SD even when no basis moment
    /// needs it.
    pub estimate_sigma_y: bool,
}

/// How the index function is chosen.
#[derive(Debug, Clone)]
pub enum GDirective {
    /// g(Y, V) = Y * terms(V).
    Terms(Vec<Term>),
    /// Locally efficient binary-outcome weights: a preliminary fit with
    /// `base_terms`, then h_opt weighting with `mc_draws` draws per row.
    EfficientBinary {
        base_terms: Vec<Term>,
        mc_draws: usize,
        seed: u64,
    },
    /// Approximately efficient continuous-outcome weighting through a basis
    /// expansion: a preliminary fit with `base_terms`, then tau_opt.
    EfficientBasis {
        base_terms: Vec<Term>,
        basis: BasisSpec,
    },
}

/// Output of [`run_analysis`]: the finalized fit plus the nuisance fits it
/// used.
#[derive(Debug, Clone)]
pub struct AnalysisResult {
    pub fit: FitResult,
    pub prop: Option<PropensityFit>,
    pub imp: Option<ImputationFit>,
}

fn fit_nuisances(
    ds: &FusedDataset,
    spec: &AnalysisSpec,
) -> Result<(Option<PropensityFit>, Option<ImputationFit>)> {
    let needs_imp =
        spec.kind.needs_imputation() || !matches!(spec.g, GDirective::Terms(_)) || spec.estimate_sigma_y;
    let prop = if spec.kind.needs_propensity() {
        let terms = spec.propensity_terms.as_ref().ok_or_else(|| {
            Error::Validation(format!("{} estimation needs propensity terms", spec.kind))
        })?;
        Some(fit_propensity(ds, terms)?)
    } else {
        None
    };
    let imp = if needs_imp {
        let terms = spec.imputation_terms.as_ref().ok_or_else(|| {
            Error::Validation(format!("{} estimation needs imputation terms", spec.kind))
        })?;
        Some(fit_imputation(ds, terms)?)
    } else {
        None
    };
    Ok((prop, imp))
}

/// Point estimate only (used by the bootstrap): nuisance fits plus solve.
pub fn point_estimate(ds: &FusedDataset, spec: &AnalysisSpec) -> Result<DVector<f64>> {
    let (prop, imp) = fit_nuisances(ds, spec)?;
    let (fit, _g, _outcome) = solve_with_directive(ds, spec, prop.as_ref(), imp.as_ref())?;
    Ok(fit.theta)
}

fn solve_with_directive(
    ds: &FusedDataset,
    spec: &AnalysisSpec,
    prop: Option<&PropensityFit>,
    imp: Option<&ImputationFit>,
) -> Result<(FitResult, GSpec, OutcomeModel)> {
    let schema = ds.schema();
    let dim = spec.outcome_v_terms.len() + schema.p();
    let template = OutcomeModel::new(
        spec.family,
        spec.outcome_v_terms.clone(),
        DVector::zeros(dim),
        None,
    )?;

    match &spec.g {
        GDirective::Terms(terms) => {
            let g = GSpec::y_times_terms(terms.clone());
            let fit = solve(ds, spec.kind, &g, &template, prop, imp, None, &spec.solve)?;
            Ok((fit, g, template))
        }
        GDirective::EfficientBinary {
            base_terms,
            mc_draws,
            seed,
        } => {
            if spec.kind != EstimatorKind::Dr {
                return Err(Error::Validation(
                    "efficient weighting is defined for the DR estimator".into(),
                ));
            }
            let base = GSpec::y_times_terms(base_terms.clone());
            let prelim = solve(ds, spec.kind, &base, &template, prop, imp, None, &spec.solve)?;
            let model = template.with_beta(prelim.theta.clone());
            let table = h_opt_table(
                ds,
                &model,
                prop.expect("DR has a propensity fit"),
                imp.expect("DR has an imputation fit"),
                *mc_draws,
                *seed,
            )?;
            let g = GSpec::YTimesTable { values: table };
            let fit = solve(
                ds,
                spec.kind,
                &g,
                &template,
                prop,
                imp,
                Some(&prelim.theta),
                &spec.solve,
            )?;
            Ok((fit, g, template))
        }
        GDirective::EfficientBasis { base_terms, basis } => {
            if spec.kind != EstimatorKind::Dr {
                return Err(Error::Validation(
                    "efficient weighting is defined for the DR estimator".into(),
                ));
            }
            let base = GSpec::y_times_terms(base_terms.clone());
            let prelim = solve(ds, spec.kind, &base, &template, prop, imp, None, &spec.solve)?;
            let mut model = template.with_beta(prelim.theta.clone());
            let built = basis.build(ds, dim)?;
            if built.requires_sigma_y(spec.family) {
                model.sigma_y = Some(estimate_sigma_y(
                    ds,
                    &model,
                    imp.expect("DR has an imputation fit"),
                )?);
            }
            let opt = tau_opt(
                ds,
                &built,
                &model,
                prop.expect("DR has a propensity fit"),
                imp.expect("DR has an imputation fit"),
            )?;
            let g = GSpec::CustomBasis {
                tau: opt.tau,
                basis: opt.basis,
            };
            // carry sigma_y into the solved model template
            let template = OutcomeModel::new(
                spec.family,
                spec.outcome_v_terms.clone(),
                DVector::zeros(dim),
                model.sigma_y,
            )?;
            let fit = solve(
                ds,
                spec.kind,
                &g,
                &template,
                prop,
                imp,
                Some(&prelim.theta),
                &spec.solve,
            )?;
            Ok((fit, g, template))
        }
    }
}

/// Full pipeline: nuisance fits, solve (with efficient weighting when
/// requested), sandwich covariance, Wald intervals.
pub fn run_analysis(ds: &FusedDataset, spec: &AnalysisSpec) -> Result<AnalysisResult> {
    let (prop, imp) = fit_nuisances(ds, spec)?;
    let (fit, g, mut template) = solve_with_directive(ds, spec, prop.as_ref(), imp.as_ref())?;
    if spec.estimate_sigma_y && spec.family == OutcomeFamily::LinearNormal && template.sigma_y.is_none()
    {
        let at_fit = template.with_beta(fit.theta.clone());
        template.sigma_y = Some(estimate_sigma_y(
            ds,
            &at_fit,
            imp.as_ref().expect("sigma_y estimation needs the covariate model"),
        )?);
    }
    let fit = finalize_fit(
        ds,
        fit,
        &g,
        &template,
        prop.as_ref(),
        imp.as_ref(),
        spec.ci_level,
        &SandwichOptions::default(),
    )?;
    Ok(AnalysisResult { fit, prop, imp })
}

/// Minimum bootstrap replicate count.
pub const MIN_BOOTSTRAP: usize = 50;

/// Nonparametric bootstrap covariance: resample rows with replacement,
/// rerun the full point-estimate pipeline (nuisances refitted per
/// resample), and take the covariance of the estimates. Replicates draw
/// from independent substreams of `seed`, so the result is reproducible
/// and independent of execution order.
pub fn bootstrap_covariance(
    ds: &FusedDataset,
    spec: &AnalysisSpec,
    b: usize,
    seed: u64,
) -> Result<CovarianceEstimate> {
    if b < MIN_BOOTSTRAP {
        return Err(Error::Validation(format!(
            "bootstrap needs at least {MIN_BOOTSTRAP} replicates, got {b}"
        )));
    }
    let n = ds.n();
    let estimates: Vec<Option<DVector<f64>>> = map_indexed(b, |rep| {
        let mut rng = stream_rng(seed, rep as u64);
        let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        ds.subset(&indices)
            .ok()
            .and_then(|resampled| point_estimate(&resampled, spec).ok())
    });
    let ok: Vec<&DVector<f64>> = estimates.iter().flatten().collect();
    let failed = b - ok.len();
    if failed * 10 > b {
        return Err(Error::TooManyFailures { failed, total: b });
    }
    let t = ok[0].len();
    let m = ok.len() as f64;
    let mut mean = DVector::<f64>::zeros(t);
    for e in &ok {
        mean += *e;
    }
    mean /= m;
    let mut cov = DMatrix::<f64>::zeros(t, t);
    for e in &ok {
        let d = *e - &mean;
        cov.syger(1.0, &d, &d, 1.0);
    }
    cov /= m - 1.0;
    cov.fill_upper_triangle_with_lower_triangle();

    Ok(CovarianceEstimate {
        asymptotic: &cov * n as f64,
        per_sample: cov,
        method: CovarianceMethod::Bootstrap {
            replicates: b,
            failures: failed,
        },
    })
}

/// Rubin's-rule pooling across multiply imputed replicates.
#[derive(Debug, Clone, Serialize)]
pub struct PooledResult {
    pub names: Vec<String>,
    pub estimate: Vec<f64>,
    /// Mean of the per-replicate variances.
    pub within: Vec<f64>,
    /// Sample variance of the estimates across replicates.
    pub between: Vec<f64>,
    /// within + (1 + 1/m) between.
    pub total: Vec<f64>,
    pub m: usize,
    pub intervals: Vec<WaldInterval>,
    pub level: f64,
}

/// Pool point estimates and per-coefficient variances: pooled estimate is
/// the mean, total variance `T = W + (1 + 1/m) B` componentwise.
pub fn rubin_pool_values(
    names: &[String],
    estimates: &[Vec<f64>],
    variances: &[Vec<f64>],
    level: f64,
) -> Result<PooledResult> {
    if estimates.is_empty() || estimates.len() != variances.len() {
        return Err(Error::LayoutMismatch(
            "need matching, nonempty estimate and variance lists".into(),
        ));
    }
    let t = names.len();
    for (i, (e, v)) in estimates.iter().zip(variances).enumerate() {
        if e.len() != t || v.len() != t {
            return Err(Error::LayoutMismatch(format!(
                "replicate {i} has {} coefficients, expected {t}",
                e.len()
            )));
        }
    }
    let m = estimates.len();
    let mf = m as f64;
    let mut pooled = vec![0.0; t];
    let mut within = vec![0.0; t];
    let mut between = vec![0.0; t];
    for j in 0..t {
        pooled[j] = estimates.iter().map(|e| e[j]).sum::<f64>() / mf;
        within[j] = variances.iter().map(|v| v[j]).sum::<f64>() / mf;
        between[j] = if m > 1 {
            estimates
                .iter()
                .map(|e| (e[j] - pooled[j]).powi(2))
                .sum::<f64>()
                / (mf - 1.0)
        } else {
            0.0
        };
    }
    let total: Vec<f64> = within
        .iter()
        .zip(&between)
        .map(|(w, b)| w + (1.0 + 1.0 / mf) * b)
        .collect();
    let z = normal_quantile(0.5 + level / 2.0);
    let intervals = (0..t)
        .map(|j| {
            let se = total[j].max(0.0).sqrt();
            WaldInterval {
                lo: pooled[j] - z * se,
                hi: pooled[j] + z * se,
                level,
            }
        })
        .collect();
    Ok(PooledResult {
        names: names.to_vec(),
        estimate: pooled,
        within,
        between,
        total,
        m,
        intervals,
        level,
    })
}

/// Pool fitted results (each must carry a covariance).
pub fn rubin_pool(results: &[FitResult], level: f64) -> Result<PooledResult> {
    if results.is_empty() {
        return Err(Error::LayoutMismatch("no results to pool".into()));
    }
    let names = results[0].names.clone();
    for (i, r) in results.iter().enumerate() {
        if r.names != names {
            return Err(Error::LayoutMismatch(format!(
                "replicate {i} has different coefficient names"
            )));
        }
    }
    let estimates: Vec<Vec<f64>> = results
        .iter()
        .map(|r| r.theta.iter().copied().collect())
        .collect();
    let variances: Vec<Vec<f64>> = results
        .iter()
        .map(|r| {
            let cov = r.covariance.as_ref().ok_or_else(|| {
                Error::Validation("pooling needs a covariance on every result".into())
            })?;
            Ok((0..r.theta.len())
                .map(|j| cov.per_sample[(j, j)])
                .collect())
        })
        .collect::<Result<_>>()?;
    rubin_pool_values(&names, &estimates, &variances, level)
}

/// Stable schema identifiers for the JSON result documents.
pub const RESULT_FORMAT: &str = "fusereg.result.v1";
pub const POOLED_FORMAT: &str = "fusereg.pooled.v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientEntry {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultDiagnostics {
    pub n: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub iterations: usize,
    pub residual_norm: f64,
    pub jacobian_condition: f64,
    pub weak_identification: bool,
    pub ci_level: f64,
    pub covariance: String,
}

/// The structured result document written by the CLI `fit` command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResultDocument {
    pub format: String,
    pub estimator: String,
    pub coefficients: Vec<CoefficientEntry>,
    pub diagnostics: ResultDiagnostics,
}

impl ResultDocument {
    pub fn from_fit(ds: &FusedDataset, fit: &FitResult, level: f64) -> Result<Self> {
        let cov = fit
            .covariance
            .as_ref()
            .ok_or_else(|| Error::Validation("result document needs a covariance".into()))?;
        let wald = fit
            .wald
            .as_ref()
            .ok_or_else(|| Error::Validation("result document needs intervals".into()))?;
        let coefficients = fit
            .names
            .iter()
            .enumerate()
            .map(|(j, name)| CoefficientEntry {
                name: name.clone(),
                estimate: fit.theta[j],
                std_error: cov.per_sample[(j, j)].max(0.0).sqrt(),
                ci_lo: wald[j].lo,
                ci_hi: wald[j].hi,
            })
            .collect();
        Ok(ResultDocument {
            format: RESULT_FORMAT.to_string(),
            estimator: fit.estimator.label().to_string(),
            coefficients,
            diagnostics: ResultDiagnostics {
                n: ds.n(),
                n_a: ds.n_a(),
                n_b: ds.n_b(),
                iterations: fit.solver.iterations,
                residual_norm: fit.solver.residual_norm,
                jacobian_condition: fit.solver.jacobian_condition,
                weak_identification: fit.solver.weak_identification,
                ci_level: level,
                covariance: match cov.method {
                    CovarianceMethod::Sandwich { .. } => "sandwich".to_string(),
                    CovarianceMethod::Bootstrap { .. } => "bootstrap".to_string(),
                },
            },
        })
    }
}

/// Pooled counterpart of [`ResultDocument`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PooledDocument {
    pub format: String,
    pub estimator: String,
    pub m: usize,
    pub ci_level: f64,
    pub coefficients: Vec<PooledCoefficient>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PooledCoefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub within: f64,
    pub between: f64,
    pub total: f64,
}

impl PooledDocument {
    pub fn from_pooled(estimator: &str, pooled: &PooledResult) -> Self {
        PooledDocument {
            format: POOLED_FORMAT.to_string(),
            estimator: estimator.to_string(),
            m: pooled.m,
            ci_level: pooled.level,
            coefficients: pooled
                .names
                .iter()
                .enumerate()
                .map(|(j, name)| PooledCoefficient {
                    name: name.clone(),
                    estimate: pooled.estimate[j],
                    std_error: pooled.total[j].max(0.0).sqrt(),
                    ci_lo: pooled.intervals[j].lo,
                    ci_hi: pooled.intervals[j].hi,
                    within: pooled.within[j],
                    between: pooled.between[j],
                    total: pooled.total[j],
                })
                .collect(),
        }
    }
}
