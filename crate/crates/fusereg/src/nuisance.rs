//! Nuisance models: the data-source (propensity) model, the covariate model
//! for `L | V`, and the parametric outcome family, with the score vectors
//! needed for stacked inference.
//!
//! The propensity model is logistic in a formula over V. The covariate
//! model is multivariate normal with mean linear in a formula over V and a
//! constant residual covariance, fitted by least squares on the source-B
//! sample. The outcome family is either linear-normal or logistic-binary in
//! the stacked design `(V terms, L)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data_model::{ColumnSchema, FusedDataset, Record};
use crate::design::{Design, Term};
use crate::error::{Error, Result};
use crate::quadrature::{GaussHermite, NormalGrid, DEFAULT_NODES};
use crate::stats::expit;

/// Fitted probabilities are clamped to this band before they divide
/// anything; positivity keeps the truth interior, the clamp only guards
/// finite-sample edge cases.
pub const PI_CLAMP: f64 = 1e-12;

/// Convergence tolerance on the max absolute component of the summed score.
pub const PROPENSITY_TOL: f64 = 1e-10;
const PROPENSITY_MAX_ITER: usize = 100;
/// Coefficient norm beyond which the likelihood is treated as unbounded.
const SEPARATION_NORM: f64 = 1e3;
/// Relative singular-value cutoff for design rank checks.
const RANK_TOL: f64 = 1e-10;

#[inline]
fn clamp_pi(p: f64) -> f64 {
    p.clamp(PI_CLAMP, 1.0 - PI_CLAMP)
}

/// Logistic data-source probability for a bound design row.
#[inline]
pub fn logistic_pi(eta: &DVector<f64>, v: &DVector<f64>) -> f64 {
    clamp_pi(expit(eta.dot(v)))
}

/// Propensity score contribution (R - pi(V; eta)) V.
#[inline]
pub fn score_eta_at(eta: &DVector<f64>, v: &DVector<f64>, r: bool) -> DVector<f64> {
    let resid = f64::from(r) - expit(eta.dot(v));
    v * resid
}

/// Covariate-model score contribution, flattened column-major over the
/// q x p coefficient matrix: vec( V (L - alpha^T V)^T Sigma^{-1} ).
pub fn score_alpha_at(
    alpha: &DMatrix<f64>,
    sigma_inv: &DMatrix<f64>,
    v: &DVector<f64>,
    l: &DVector<f64>,
) -> DVector<f64> {
    let resid = l - alpha.transpose() * v;
    let scaled = sigma_inv * resid; // p-vector
    let q = alpha.nrows();
    let p = alpha.ncols();
    let mut out = DVector::zeros(q * p);
    for j in 0..p {
        for i in 0..q {
            out[j * q + i] = v[i] * scaled[j];
        }
    }
    out
}

fn check_full_rank(x: &DMatrix<f64>, what: &str) -> Result<()> {
    let svd = x.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin <= RANK_TOL * smax {
        return Err(Error::RankDeficient(format!(
            "{what} (smallest/largest singular value {:.3e}/{:.3e})",
            smin, smax
        )));
    }
    Ok(())
}

/// Fitted logistic model for Pr(R = 1 | V).
#[derive(Debug, Clone)]
pub struct PropensityFit {
    terms: Vec<Term>,
    pub eta: DVector<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl PropensityFit {
    /// Construct from known coefficients, e.g. the true generating values.
    pub fn from_eta(terms: Vec<Term>, eta: DVector<f64>) -> Result<Self> {
        if terms.len() != eta.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} terms but {} coefficients",
                terms.len(),
                eta.len()
            )));
        }
        Ok(PropensityFit {
            terms,
            eta,
            loglik: f64::NAN,
            converged: true,
            iterations: 0,
        })
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn dim(&self) -> usize {
        self.eta.len()
    }

    /// Probability for a bound design row, clamped into (0, 1).
    pub fn predict_pi(&self, v: &DVector<f64>) -> f64 {
        logistic_pi(&self.eta, v)
    }

    /// Probability for a raw record (binds the formula on the fly).
    pub fn predict_pi_record(&self, schema: &ColumnSchema, row: &Record) -> f64 {
        let design = Design::bind(&self.terms, &schema.v_names)
            .expect("propensity terms were bound at fit time");
        self.predict_pi(&design.eval(&row.v))
    }

    /// Score vector S_eta for a bound design row.
    pub fn score_eta(&self, v: &DVector<f64>, r: bool) -> DVector<f64> {
        score_eta_at(&self.eta, v, r)
    }
}

fn logistic_loglik(x: &DMatrix<f64>, r: &[bool], eta: &DVector<f64>) -> f64 {
    let lp = x * eta;
    lp.iter()
        .zip(r)
        .map(|(&z, &ri)| {
            // log pi = -log(1+e^{-z}), log(1-pi) = -z - log(1+e^{-z})
            let log1pe = if z > 0.0 {
                (-z).exp().ln_1p()
            } else {
                -z + z.exp().ln_1p()
            };
            if ri {
                -log1pe
            } else {
                -z - log1pe
            }
        })
        .sum()
}

/// Maximize the binomial log-likelihood of R on a formula over V by damped
/// Newton-Raphson with step halving.
pub fn fit_propensity(ds: &FusedDataset, terms: &[Term]) -> Result<PropensityFit> {
    let design = Design::bind(terms, &ds.schema().v_names)?;
    let x = design.matrix(ds.rows().iter().map(|row| row.v.as_slice()));
    check_full_rank(&x, "propensity design")?;
    let r: Vec<bool> = ds.rows().iter().map(|row| row.r).collect();
    let q = design.dim();

    let mut eta = DVector::<f64>::zeros(q);
    let mut loglik = logistic_loglik(&x, &r, &eta);
    for iter in 0..PROPENSITY_MAX_ITER {
        // summed score and Fisher information at the current iterate
        let mut score = DVector::<f64>::zeros(q);
        let mut info = DMatrix::<f64>::zeros(q, q);
        for i in 0..x.nrows() {
            let xi = x.row(i).transpose();
            let p = expit(eta.dot(&xi));
            score.axpy(f64::from(r[i]) - p, &xi, 1.0);
            info.syger(p * (1.0 - p), &xi, &xi, 1.0);
        }
        let residual = score.amax();
        if residual < PROPENSITY_TOL {
            return Ok(PropensityFit {
                terms: terms.to_vec(),
                eta,
                loglik,
                converged: true,
                iterations: iter,
            });
        }
        info.fill_upper_triangle_with_lower_triangle();
        let step = match info.clone().cholesky() {
            Some(chol) => chol.solve(&score),
            None => {
                return Err(Error::Separation(
                    "information matrix became singular".into(),
                ))
            }
        };
        // step halving on the log-likelihood
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let candidate = &eta + &step * t;
            let cand_ll = logistic_loglik(&x, &r, &candidate);
            if cand_ll >= loglik || (cand_ll - loglik).abs() < 1e-14 * loglik.abs().max(1.0) {
                eta = candidate;
                loglik = cand_ll;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::NoConvergence {
                iterations: iter,
                residual,
                best: eta.iter().copied().collect(),
            });
        }
        if eta.norm() > SEPARATION_NORM {
            return Err(Error::Separation(format!(
                "coefficient norm {:.3e} exceeds {SEPARATION_NORM:.0e}",
                eta.norm()
            )));
        }
    }
    let score: DVector<f64> = {
        let mut s = DVector::zeros(q);
        for i in 0..x.nrows() {
            let xi = x.row(i).transpose();
            s.axpy(f64::from(r[i]) - expit(eta.dot(&xi)), &xi, 1.0);
        }
        s
    };
    Err(Error::NoConvergence {
        iterations: PROPENSITY_MAX_ITER,
        residual: score.amax(),
        best: eta.iter().copied().collect(),
    })
}

/// Fitted multivariate-normal model for L | V.
#[derive(Debug, Clone)]
pub struct ImputationFit {
    terms: Vec<Term>,
    /// q x p coefficient matrix.
    pub alpha: DMatrix<f64>,
    /// p x p residual covariance (denominator n_B).
    pub sigma_l: DMatrix<f64>,
    sigma_l_inv: DMatrix<f64>,
    pub converged: bool,
}

impl ImputationFit {
    /// Construct from known parameters, e.g. the true generating values.
    pub fn from_parts(terms: Vec<Term>, alpha: DMatrix<f64>, sigma_l: DMatrix<f64>) -> Result<Self> {
        if terms.len() != alpha.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} terms but alpha has {} rows",
                terms.len(),
                alpha.nrows()
            )));
        }
        if sigma_l.nrows() != alpha.ncols() || !sigma_l.is_square() {
            return Err(Error::DimensionMismatch(
                "sigma_l must be p x p matching alpha's columns".into(),
            ));
        }
        let sigma_l_inv = psd_inverse(&sigma_l);
        Ok(ImputationFit {
            terms,
            alpha,
            sigma_l,
            sigma_l_inv,
            converged: true,
        })
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Flattened coefficient dimension q * p.
    pub fn dim(&self) -> usize {
        self.alpha.nrows() * self.alpha.ncols()
    }

    pub fn sigma_l_inv(&self) -> &DMatrix<f64> {
        &self.sigma_l_inv
    }

    /// Conditional mean of L for a bound design row.
    pub fn mean_l(&self, v: &DVector<f64>) -> DVector<f64> {
        self.alpha.transpose() * v
    }

    /// Score vector S_alpha for a bound design row (zero for R = 1 rows).
    pub fn score_alpha(&self, v: &DVector<f64>, l: &DVector<f64>) -> DVector<f64> {
        score_alpha_at(&self.alpha, &self.sigma_l_inv, v, l)
    }

    /// Gaussian log-density of `l` given the design row `v`.
    pub fn log_density(&self, v: &DVector<f64>, l: &DVector<f64>) -> f64 {
        let p = self.sigma_l.nrows() as f64;
        let Some(chol) = self.sigma_l.clone().cholesky() else {
            return f64::NEG_INFINITY;
        };
        let log_det: f64 = chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>() * 2.0;
        let resid = l - self.mean_l(v);
        let qform = resid.dot(&(&self.sigma_l_inv * &resid));
        -0.5 * (p * (2.0 * std::f64::consts::PI).ln() + log_det + qform)
    }

    /// Quadrature grid for integrating over L | V (offsets reusable across
    /// rows; only the mean shifts).
    pub fn l_grid(&self, rule: &GaussHermite) -> Result<NormalGrid> {
        NormalGrid::new(rule, &self.sigma_l)
    }
}

fn psd_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(chol) = m.clone().cholesky() {
        return chol.inverse();
    }
    // Pseudo-inverse for the degenerate case (zero residual variance).
    let eigen = m.clone().symmetric_eigen();
    let mut inv = DMatrix::zeros(m.nrows(), m.ncols());
    for (j, &lambda) in eigen.eigenvalues.iter().enumerate() {
        if lambda > 1e-300 {
            let v = eigen.eigenvectors.column(j);
            inv.syger(1.0 / lambda, &v, &v, 1.0);
        }
    }
    inv.fill_upper_triangle_with_lower_triangle();
    inv
}

/// Least-squares fit of the covariate model on the source-B sample:
/// alpha = (V_B^T V_B)^{-1} V_B^T L_B, residual covariance with
/// denominator n_B.
pub fn fit_imputation(ds: &FusedDataset, terms: &[Term]) -> Result<ImputationFit> {
    let schema = ds.schema();
    let design = Design::bind(terms, &schema.v_names)?;
    let rows_b: Vec<&Record> = ds.rows().iter().filter(|row| !row.r).collect();
    let n_b = rows_b.len();
    if n_b == 0 {
        return Err(Error::EmptySource("no source-B rows to fit L | V".into()));
    }
    let q = design.dim();
    if n_b <= q {
        return Err(Error::RankDeficient(format!(
            "source-B sample ({n_b} rows) must exceed the {q} imputation terms"
        )));
    }
    let x = design.matrix(rows_b.iter().map(|row| row.v.as_slice()));
    check_full_rank(&x, "imputation design")?;
    let p = schema.p();
    let mut l_mat = DMatrix::<f64>::zeros(n_b, p);
    for (i, row) in rows_b.iter().enumerate() {
        let l = row.l.as_ref().expect("R=0 rows carry L");
        for j in 0..p {
            l_mat[(i, j)] = l[j];
        }
    }

    let xtx = x.transpose() * &x;
    let xtl = x.transpose() * &l_mat;
    let alpha = xtx
        .cholesky()
        .ok_or_else(|| Error::RankDeficient("normal equations not solvable".into()))?
        .solve(&xtl);
    let resid = &l_mat - &x * &alpha;
    let sigma_l = resid.transpose() * &resid / n_b as f64;
    let sigma_l_inv = psd_inverse(&sigma_l);
    Ok(ImputationFit {
        terms: terms.to_vec(),
        alpha,
        sigma_l,
        sigma_l_inv,
        converged: true,
    })
}

/// Parametric outcome family for f(Y | V, L; theta).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutcomeFamily {
    LinearNormal,
    LogisticBinary,
}

/// Outcome model: coefficients over the stacked design `(V terms, L)`.
#[derive(Debug, Clone)]
pub struct OutcomeModel {
    pub family: OutcomeFamily,
    v_terms: Vec<Term>,
    /// Coefficients, V part first (length q_out + p).
    pub beta: DVector<f64>,
    /// Residual SD of the linear-normal family; only needed when moments
    /// nonlinear in Y are integrated.
    pub sigma_y: Option<f64>,
}

impl OutcomeModel {
    pub fn new(
        family: OutcomeFamily,
        v_terms: Vec<Term>,
        beta: DVector<f64>,
        sigma_y: Option<f64>,
    ) -> Result<Self> {
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Validation("outcome coefficients must be finite".into()));
        }
        if let Some(s) = sigma_y {
            if !(s > 0.0) {
                return Err(Error::Validation(format!("sigma_y must be positive, got {s}")));
            }
        }
        if beta.len() <= v_terms.len() {
            return Err(Error::DimensionMismatch(format!(
                "beta has {} entries but needs {} V terms plus at least one L coefficient",
                beta.len(),
                v_terms.len()
            )));
        }
        Ok(OutcomeModel {
            family,
            v_terms,
            beta,
            sigma_y,
        })
    }

    pub fn v_terms(&self) -> &[Term] {
        &self.v_terms
    }

    /// Dimension of the V part of the design.
    pub fn q_out(&self) -> usize {
        self.v_terms.len()
    }

    /// Number of L coefficients.
    pub fn p(&self) -> usize {
        self.beta.len() - self.v_terms.len()
    }

    pub fn with_beta(&self, beta: DVector<f64>) -> OutcomeModel {
        OutcomeModel {
            beta,
            ..self.clone()
        }
    }

    /// Coefficient names: V term names followed by L column names.
    pub fn coefficient_names(&self, schema: &ColumnSchema) -> Vec<String> {
        let mut names: Vec<String> = self.v_terms.iter().map(Term::name).collect();
        names.extend(schema.l_names.iter().cloned());
        names
    }

    #[inline]
    pub(crate) fn linear_predictor(&self, v_design: &DVector<f64>, l: &[f64]) -> f64 {
        let q = self.q_out();
        let mut lp = 0.0;
        for i in 0..q {
            lp += self.beta[i] * v_design[i];
        }
        for (j, &lj) in l.iter().enumerate() {
            lp += self.beta[q + j] * lj;
        }
        lp
    }

    /// E[Y | V, L] for a bound V design row.
    pub fn mean_y_given_vl(&self, v_design: &DVector<f64>, l: &[f64]) -> f64 {
        let lp = self.linear_predictor(v_design, l);
        match self.family {
            OutcomeFamily::LinearNormal => lp,
            OutcomeFamily::LogisticBinary => expit(lp),
        }
    }

    /// E[Y | V, L] together with its gradient in beta.
    pub fn mean_y_and_grad(&self, v_design: &DVector<f64>, l: &[f64]) -> (f64, DVector<f64>) {
        let q = self.q_out();
        let mut x = DVector::zeros(self.beta.len());
        for i in 0..q {
            x[i] = v_design[i];
        }
        for (j, &lj) in l.iter().enumerate() {
            x[q + j] = lj;
        }
        let lp = self.beta.dot(&x);
        match self.family {
            OutcomeFamily::LinearNormal => (lp, x),
            OutcomeFamily::LogisticBinary => {
                let p = expit(lp);
                x.scale_mut(p * (1.0 - p));
                (p, x)
            }
        }
    }

    /// E[Y | V] under the covariate model, with the conditional mean of L
    /// supplied by the caller. Linear-normal uses the exact tower-property
    /// value; logistic-binary integrates over the supplied grid.
    pub fn mean_y_given_v_at(
        &self,
        v_design: &DVector<f64>,
        mu_l: &DVector<f64>,
        grid: &NormalGrid,
    ) -> f64 {
        match self.family {
            OutcomeFamily::LinearNormal => self.linear_predictor(v_design, mu_l.as_slice()),
            OutcomeFamily::LogisticBinary => grid
                .points_at(mu_l)
                .map(|(l, w)| w * self.mean_y_given_vl(v_design, l.as_slice()))
                .sum(),
        }
    }

    /// E[Y | V] and its beta-gradient at the supplied conditional L mean.
    pub fn mean_y_given_v_and_grad(
        &self,
        v_design: &DVector<f64>,
        mu_l: &DVector<f64>,
        grid: &NormalGrid,
    ) -> (f64, DVector<f64>) {
        match self.family {
            OutcomeFamily::LinearNormal => {
                let (_, mut x) = self.mean_y_and_grad(v_design, &[]);
                let q = self.q_out();
                for j in 0..mu_l.len() {
                    x[q + j] = mu_l[j];
                }
                (self.linear_predictor(v_design, mu_l.as_slice()), x)
            }
            OutcomeFamily::LogisticBinary => {
                let mut mean = 0.0;
                let mut grad = DVector::zeros(self.beta.len());
                for (l, w) in grid.points_at(mu_l) {
                    let (m, g) = self.mean_y_and_grad(v_design, l.as_slice());
                    mean += w * m;
                    grad.axpy(w, &g, 1.0);
                }
                (mean, grad)
            }
        }
    }

    /// Convenience wrapper computing E[Y | V] from a fitted covariate model
    /// for a single record. Hot paths precompute the grid instead.
    pub fn mean_y_given_v(
        &self,
        imp: &ImputationFit,
        schema: &ColumnSchema,
        row: &Record,
    ) -> Result<f64> {
        let out_design = Design::bind(&self.v_terms, &schema.v_names)?;
        let imp_design = Design::bind(imp.terms(), &schema.v_names)?;
        let rule = GaussHermite::new(DEFAULT_NODES);
        let grid = imp.l_grid(&rule)?;
        let v_out = out_design.eval(&row.v);
        let mu_l = imp.mean_l(&imp_design.eval(&row.v));
        Ok(self.mean_y_given_v_at(&v_out, &mu_l, &grid))
    }
}

/// Estimate the residual SD of the linear-normal outcome from the source-A
/// sample: the marginal variance of `Y - E[Y|V]` minus the component
/// `beta_L^T Sigma_L beta_L` induced by the unobserved covariates, floored
/// at zero. Requires a fitted covariate model.
pub fn estimate_sigma_y(
    ds: &FusedDataset,
    outcome: &OutcomeModel,
    imp: &ImputationFit,
) -> Result<f64> {
    if outcome.family != OutcomeFamily::LinearNormal {
        return Err(Error::Validation(
            "sigma_y estimation applies to the linear-normal family".into(),
        ));
    }
    let schema = ds.schema();
    let out_design = Design::bind(outcome.v_terms(), &schema.v_names)?;
    let imp_design = Design::bind(imp.terms(), &schema.v_names)?;
    let rule = GaussHermite::new(DEFAULT_NODES);
    let grid = imp.l_grid(&rule)?;
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    for row in ds.rows().iter().filter(|r| r.r) {
        let v_out = out_design.eval(&row.v);
        let mu_l = imp.mean_l(&imp_design.eval(&row.v));
        let pred = outcome.mean_y_given_v_at(&v_out, &mu_l, &grid);
        let resid = row.y.expect("R=1 rows carry Y") - pred;
        sum_sq += resid * resid;
        count += 1;
    }
    let marginal = sum_sq / count as f64;
    let q = outcome.q_out();
    let beta_l = DVector::from_iterator(outcome.p(), (q..outcome.beta.len()).map(|i| outcome.beta[i]));
    let induced = beta_l.dot(&(&imp.sigma_l * &beta_l));
    Ok((marginal - induced).max(1e-12).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::{ColumnSchema, Record};
    use crate::design::parse_terms;
    use crate::rng::stream_rng;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn schema() -> ColumnSchema {
        ColumnSchema::new(
            vec!["A".into(), "C".into()],
            vec!["L".into()],
            "Y",
            "R",
            true,
        )
        .unwrap()
    }

    fn random_dataset(n: usize, seed: u64) -> FusedDataset {
        let mut rng = stream_rng(seed, 0);
        let rows: Vec<Record> = (0..n)
            .map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let c: f64 = StandardNormal.sample(&mut rng);
                let r = rng.random::<f64>() < expit(0.3 + 0.5 * a - 0.4 * c);
                if r {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    Record::source_a(1.0 + a - c + 0.5 * e, vec![a, c])
                } else {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    Record::source_b(vec![-0.5 + 1.5 * a + c + 0.3 * e], vec![a, c])
                }
            })
            .collect();
        FusedDataset::new(schema(), rows).unwrap()
    }

    /// Plain IRLS oracle: repeat weighted least squares on the working
    /// response until the coefficients stop moving. Kept independent of the
    /// Newton implementation it checks.
    fn irls_oracle(x: &DMatrix<f64>, r: &[bool]) -> DVector<f64> {
        let q = x.ncols();
        let mut eta = DVector::<f64>::zeros(q);
        for _ in 0..200 {
            let lp = x * &eta;
            let w: Vec<f64> = lp.iter().map(|&z| expit(z) * (1.0 - expit(z))).collect();
            let mut xtwx = DMatrix::<f64>::zeros(q, q);
            let mut xtwz = DVector::<f64>::zeros(q);
            for i in 0..x.nrows() {
                let xi = x.row(i).transpose();
                let z = lp[i] + (f64::from(r[i]) - expit(lp[i])) / w[i].max(1e-300);
                xtwx.syger(w[i], &xi, &xi, 1.0);
                xtwz.axpy(w[i] * z, &xi, 1.0);
            }
            xtwx.fill_upper_triangle_with_lower_triangle();
            let next = xtwx.cholesky().unwrap().solve(&xtwz);
            let delta = (&next - &eta).amax();
            eta = next;
            if delta < 1e-13 {
                break;
            }
        }
        eta
    }

    #[test]
    fn intercept_only_balanced_gives_half() {
        let rows: Vec<Record> = (0..10)
            .map(|i| {
                if i % 2 == 0 {
                    Record::source_a(1.0, vec![i as f64, 0.0])
                } else {
                    Record::source_b(vec![0.0], vec![i as f64, 0.0])
                }
            })
            .collect();
        let ds = FusedDataset::new(schema(), rows).unwrap();
        let fit = fit_propensity(&ds, &parse_terms(&["1"]).unwrap()).unwrap();
        assert_eq!(fit.eta.len(), 1);
        assert_abs_diff_eq!(fit.eta[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            fit.predict_pi(&DVector::from_element(1, 1.0)),
            0.5,
            epsilon = 1e-12
        );
        assert!(fit.converged);
    }

    #[test]
    fn propensity_matches_irls_oracle() {
        let ds = random_dataset(20, 11);
        let terms = parse_terms(&["1", "A", "C"]).unwrap();
        let fit = fit_propensity(&ds, &terms).unwrap();
        let design = Design::bind(&terms, &ds.schema().v_names).unwrap();
        let x = design.matrix(ds.rows().iter().map(|r| r.v.as_slice()));
        let r: Vec<bool> = ds.rows().iter().map(|r| r.r).collect();
        let oracle = irls_oracle(&x, &r);
        assert!((fit.eta - oracle).amax() < 1e-8);
    }

    #[test]
    fn propensity_score_sums_to_zero_at_fit() {
        let ds = random_dataset(200, 3);
        let terms = parse_terms(&["1", "A", "C"]).unwrap();
        let fit = fit_propensity(&ds, &terms).unwrap();
        let design = Design::bind(&terms, &ds.schema().v_names).unwrap();
        let mut total = DVector::zeros(3);
        for row in ds.rows() {
            total += fit.score_eta(&design.eval(&row.v), row.r);
        }
        assert!(total.amax() < 1e-8);
    }

    #[test]
    fn propensity_rejects_rank_deficient_design() {
        let ds = random_dataset(50, 5);
        // A appears twice: exactly collinear
        let terms = parse_terms(&["1", "A", "A"]).unwrap();
        assert!(matches!(
            fit_propensity(&ds, &terms),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn propensity_detects_separation() {
        // R perfectly determined by the sign of A, with A so close to zero
        // that driving the score to zero needs coefficients beyond the
        // separation threshold.
        let rows: Vec<Record> = (0..40)
            .map(|i| {
                let a = if i < 20 {
                    0.002 + i as f64 * 1e-4
                } else {
                    -0.002 - (i - 20) as f64 * 1e-4
                };
                if i < 20 {
                    Record::source_a(0.0, vec![a, 0.0])
                } else {
                    Record::source_b(vec![0.0], vec![a, 0.0])
                }
            })
            .collect();
        let ds = FusedDataset::new(schema(), rows).unwrap();
        let err = fit_propensity(&ds, &parse_terms(&["1", "A"]).unwrap()).unwrap_err();
        assert!(matches!(err, Error::Separation(_) | Error::NoConvergence { .. }));
    }

    #[test]
    fn predict_pi_closed_forms() {
        let fit = PropensityFit::from_eta(
            parse_terms(&["1", "A"]).unwrap(),
            DVector::from_row_slice(&[1.0, 0.0]),
        )
        .unwrap();
        let v = DVector::from_row_slice(&[1.0, 0.7]);
        assert_abs_diff_eq!(fit.predict_pi(&v), 1.0 / (1.0 + (-1.0f64).exp()), epsilon = 1e-12);
        assert_abs_diff_eq!(fit.predict_pi(&v), 0.7311, epsilon = 1e-4);

        let zero = PropensityFit::from_eta(
            parse_terms(&["1", "A"]).unwrap(),
            DVector::zeros(2),
        )
        .unwrap();
        let mut rng = stream_rng(4, 0);
        for _ in 0..100 {
            let a: f64 = StandardNormal.sample(&mut rng);
            let v = DVector::from_row_slice(&[1.0, a]);
            assert_abs_diff_eq!(zero.predict_pi(&v), 0.5, epsilon = 1e-12);
            // sigmoid table oracle
            let fit2 = PropensityFit::from_eta(
                parse_terms(&["1", "A"]).unwrap(),
                DVector::from_row_slice(&[0.25, -1.5]),
            )
            .unwrap();
            let lp = 0.25 - 1.5 * a;
            assert_abs_diff_eq!(fit2.predict_pi(&v), 1.0 / (1.0 + (-lp).exp()), epsilon = 1e-12);
        }
    }

    #[test]
    fn imputation_recovers_noiseless_coefficients_exactly() {
        let rows: Vec<Record> = (0..30)
            .map(|i| {
                let a = (i as f64) * 0.1 - 1.5;
                let c = ((i * 7) % 13) as f64 * 0.2 - 1.0;
                if i % 3 == 0 {
                    Record::source_a(0.0, vec![a, c])
                } else {
                    Record::source_b(vec![2.0 - 0.5 * a + 0.25 * c], vec![a, c])
                }
            })
            .collect();
        let ds = FusedDataset::new(schema(), rows).unwrap();
        let fit = fit_imputation(&ds, &parse_terms(&["1", "A", "C"]).unwrap()).unwrap();
        assert_abs_diff_eq!(fit.alpha[(0, 0)], 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.alpha[(1, 0)], -0.5, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.alpha[(2, 0)], 0.25, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.sigma_l[(0, 0)], 0.0, epsilon = 1e-18);
    }

    #[test]
    fn imputation_matches_normal_equations_oracle() {
        let ds = random_dataset(30, 17);
        let terms = parse_terms(&["1", "A", "C"]).unwrap();
        let fit = fit_imputation(&ds, &terms).unwrap();

        // literal (V^T V)^{-1} V^T L on the source-B subsample
        let design = Design::bind(&terms, &ds.schema().v_names).unwrap();
        let rows_b: Vec<&Record> = ds.rows().iter().filter(|r| !r.r).collect();
        let x = design.matrix(rows_b.iter().map(|r| r.v.as_slice()));
        let l = DVector::from_iterator(rows_b.len(), rows_b.iter().map(|r| r.l.as_ref().unwrap()[0]));
        let xtx = x.transpose() * &x;
        let oracle = xtx.try_inverse().unwrap() * x.transpose() * l;
        for i in 0..3 {
            assert_abs_diff_eq!(fit.alpha[(i, 0)], oracle[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn imputation_score_sums_to_zero_at_fit() {
        let ds = random_dataset(150, 23);
        let terms = parse_terms(&["1", "A", "C"]).unwrap();
        let fit = fit_imputation(&ds, &terms).unwrap();
        let design = Design::bind(&terms, &ds.schema().v_names).unwrap();
        let mut total = DVector::zeros(fit.dim());
        for row in ds.rows() {
            if let Some(l) = &row.l {
                total += fit.score_alpha(&design.eval(&row.v), &DVector::from_row_slice(l));
            }
        }
        assert!(total.amax() < 1e-8);
    }

    #[test]
    fn imputation_requires_enough_rows() {
        let rows: Vec<Record> = vec![
            Record::source_a(0.0, vec![0.0, 0.0]),
            Record::source_b(vec![1.0], vec![1.0, 2.0]),
            Record::source_b(vec![2.0], vec![2.0, 1.0]),
        ];
        let ds = FusedDataset::new(schema(), rows).unwrap();
        assert!(matches!(
            fit_imputation(&ds, &parse_terms(&["1", "A", "C"]).unwrap()),
            Err(Error::RankDeficient(_))
        ));
    }

    #[test]
    fn scores_match_finite_differences() {
        let ds = random_dataset(40, 31);
        let p_terms = parse_terms(&["1", "A", "C"]).unwrap();
        let design = Design::bind(&p_terms, &ds.schema().v_names).unwrap();
        let mut rng = stream_rng(9, 0);
        for _ in 0..20 {
            let eta = DVector::from_fn(3, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let alpha = DMatrix::from_fn(3, 1, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let sigma = DMatrix::from_element(1, 1, 0.5 + rng.random::<f64>());
            let imp = ImputationFit::from_parts(p_terms.clone(), alpha.clone(), sigma).unwrap();
            let h = 1e-6;
            for row in ds.rows().iter().take(8) {
                let v = design.eval(&row.v);
                // propensity score vs log-likelihood contribution
                let s = score_eta_at(&eta, &v, row.r);
                for k in 0..3 {
                    let mut up = eta.clone();
                    let mut dn = eta.clone();
                    up[k] += h;
                    dn[k] -= h;
                    let ll = |e: &DVector<f64>| {
                        let p = expit(e.dot(&v));
                        if row.r {
                            p.ln()
                        } else {
                            (1.0 - p).ln()
                        }
                    };
                    let fd = (ll(&up) - ll(&dn)) / (2.0 * h);
                    assert_abs_diff_eq!(s[k], fd, epsilon = 1e-5 * (1.0 + fd.abs()));
                }
                // covariate-model score vs log-density
                if let Some(l) = &row.l {
                    let lvec = DVector::from_row_slice(l);
                    let s = imp.score_alpha(&v, &lvec);
                    for k in 0..3 {
                        let mut up = alpha.clone();
                        let mut dn = alpha.clone();
                        up[(k, 0)] += h;
                        dn[(k, 0)] -= h;
                        let fu = ImputationFit::from_parts(p_terms.clone(), up, imp.sigma_l.clone())
                            .unwrap()
                            .log_density(&v, &lvec);
                        let fdq = ImputationFit::from_parts(p_terms.clone(), dn, imp.sigma_l.clone())
                            .unwrap()
                            .log_density(&v, &lvec);
                        let fd = (fu - fdq) / (2.0 * h);
                        assert_abs_diff_eq!(s[k], fd, epsilon = 1e-5 * (1.0 + fd.abs()));
                    }
                }
            }
        }
    }

    #[test]
    fn saturated_propensity_score_vanishes() {
        let eta = DVector::from_row_slice(&[30.0, 0.0]);
        let v = DVector::from_row_slice(&[1.0, 0.5]);
        let s = score_eta_at(&eta, &v, true);
        assert!(s.amax() < 1e-9);
    }

    #[test]
    fn outcome_means_closed_forms() {
        let terms = parse_terms(&["1", "A", "C"]).unwrap();
        // zero coefficients
        let zero_lin = OutcomeModel::new(
            OutcomeFamily::LinearNormal,
            terms.clone(),
            DVector::zeros(4),
            None,
        )
        .unwrap();
        let zero_log = OutcomeModel::new(
            OutcomeFamily::LogisticBinary,
            terms.clone(),
            DVector::zeros(4),
            None,
        )
        .unwrap();
        let v = DVector::from_row_slice(&[1.0, 0.7, -0.3]);
        assert_abs_diff_eq!(zero_lin.mean_y_given_vl(&v, &[2.0]), 0.0);
        assert_abs_diff_eq!(zero_log.mean_y_given_vl(&v, &[2.0]), 0.5);

        // reference generating values: beta = (0.5, -0.5, 1.0, 1.5)
        let lin = OutcomeModel::new(
            OutcomeFamily::LinearNormal,
            terms.clone(),
            DVector::from_row_slice(&[0.5, -0.5, 1.0, 1.5]),
            None,
        )
        .unwrap();
        let v1 = DVector::from_row_slice(&[1.0, 1.0, 1.0]);
        assert_abs_diff_eq!(lin.mean_y_given_vl(&v1, &[1.0]), 2.5, epsilon = 1e-15);

        // random symbolic agreement
        let mut rng = stream_rng(2, 0);
        for _ in 0..50 {
            let a: f64 = StandardNormal.sample(&mut rng);
            let c: f64 = StandardNormal.sample(&mut rng);
            let l: f64 = StandardNormal.sample(&mut rng);
            let vv = DVector::from_row_slice(&[1.0, a, c]);
            let want = 0.5 - 0.5 * a + 1.0 * c + 1.5 * l;
            assert_abs_diff_eq!(lin.mean_y_given_vl(&vv, &[l]), want, epsilon = 1e-12);
        }
    }

    #[test]
    fn mean_y_given_v_linear_is_exact_tower_value() {
        let o_terms = parse_terms(&["1", "A", "C"]).unwrap();
        let i_terms = parse_terms(&["1", "A", "C", "A*C"]).unwrap();
        let alpha = DMatrix::from_column_slice(4, 1, &[-0.5, 1.5, 1.0, 2.0]);
        let imp = ImputationFit::from_parts(
            i_terms,
            alpha,
            DMatrix::from_element(1, 1, 0.09),
        )
        .unwrap();
        // beta_L = 0 leaves only the V part regardless of alpha
        let no_l = OutcomeModel::new(
            OutcomeFamily::LinearNormal,
            o_terms.clone(),
            DVector::from_row_slice(&[0.3, 0.2, -0.1, 0.0]),
            None,
        )
        .unwrap();
        let s = schema();
        let row = Record::source_a(0.0, vec![0.4, -1.2]);
        let v_out = DVector::from_row_slice(&[1.0, 0.4, -1.2]);
        assert_abs_diff_eq!(
            no_l.mean_y_given_v(&imp, &s, &row).unwrap(),
            no_l.beta.rows(0, 3).dot(&v_out),
            epsilon = 1e-14
        );

        // reference values with A=1, C=0: mu_L = -0.5 + 1.5 = 1.0,
        // E[Y|V] = 0.5 - 0.5 + 0 + 1.5 * 1.0 = 1.5
        let lin = OutcomeModel::new(
            OutcomeFamily::LinearNormal,
            o_terms,
            DVector::from_row_slice(&[0.5, -0.5, 1.0, 1.5]),
            None,
        )
        .unwrap();
        let row10 = Record::source_a(0.0, vec![1.0, 0.0]);
        assert_abs_diff_eq!(lin.mean_y_given_v(&imp, &s, &row10).unwrap(), 1.5, epsilon = 1e-12);
    }

    #[test]
    fn mean_y_given_v_logistic_matches_monte_carlo_oracle() {
        let o_terms = parse_terms(&["1", "A", "C"]).unwrap();
        let i_terms = parse_terms(&["1", "A", "C"]).unwrap();
        let alpha = DMatrix::from_column_slice(3, 1, &[0.2, 0.8, -0.4]);
        let sigma = DMatrix::from_element(1, 1, 0.35);
        let imp = ImputationFit::from_parts(i_terms, alpha, sigma.clone()).unwrap();
        let model = OutcomeModel::new(
            OutcomeFamily::LogisticBinary,
            o_terms,
            DVector::from_row_slice(&[0.4, -0.7, 0.3, 1.1]),
            None,
        )
        .unwrap();
        let s = schema();
        let row = Record::source_a(1.0, vec![0.6, -0.2]);
        let got = model.mean_y_given_v(&imp, &s, &row).unwrap();

        let v_imp = DVector::from_row_slice(&[1.0, 0.6, -0.2]);
        let mu = imp.mean_l(&v_imp)[0];
        let sd = sigma[(0, 0)].sqrt();
        let mut rng = stream_rng(100, 0);
        let mut acc = 0.0;
        let draws = 1_000_000;
        for _ in 0..draws {
            let z: f64 = StandardNormal.sample(&mut rng);
            let l = mu + sd * z;
            acc += expit(0.4 - 0.7 * 0.6 + 0.3 * (-0.2) + 1.1 * l);
        }
        let oracle = acc / draws as f64;
        assert_abs_diff_eq!(got, oracle, epsilon = 5e-4);
    }

    #[test]
    fn sigma_y_estimate_removes_induced_component() {
        // Construct data where Y = 1 + A + 2 L + eps, sd(eps) = 0.3
        let mut rng = stream_rng(55, 0);
        let i_terms = parse_terms(&["1", "A", "C"]).unwrap();
        let rows: Vec<Record> = (0..40_000)
            .map(|i| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let c: f64 = StandardNormal.sample(&mut rng);
                let l = 0.5 * a - 0.2 * c + 0.4 * rng.sample::<f64, _>(StandardNormal);
                if i % 2 == 0 {
                    let y = 1.0 + a + 2.0 * l + 0.3 * rng.sample::<f64, _>(StandardNormal);
                    Record::source_a(y, vec![a, c])
                } else {
                    Record::source_b(vec![l], vec![a, c])
                }
            })
            .collect();
        let ds = FusedDataset::new(schema(), rows).unwrap();
        let imp = fit_imputation(&ds, &i_terms).unwrap();
        let model = OutcomeModel::new(
            OutcomeFamily::LinearNormal,
            parse_terms(&["1", "A", "C"]).unwrap(),
            DVector::from_row_slice(&[1.0, 1.0, 0.0, 2.0]),
            None,
        )
        .unwrap();
        let sig = estimate_sigma_y(&ds, &model, &imp).unwrap();
        assert_abs_diff_eq!(sig, 0.3, epsilon = 0.03);
    }
}
