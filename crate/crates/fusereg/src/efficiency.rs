//! Locally efficient weight selection.
//!
//! For binary outcomes, every index function reduces to h(V) M(theta) with
//! `M` the scalar doubly robust residual, and the optimal weight is
//!
//! `h_opt(V) = -E[grad_theta M | V] E[M^2 | V]^{-1}`.
//!
//! [`h_opt_binary`] estimates both conditional expectations by Monte Carlo
//! over the fitted nuisance models; [`h_opt_binary_exact`] enumerates a
//! finite L support instead, which is exact.
//!
//! For continuous outcomes the efficient influence function has no closed
//! form. The linear operator `K` maps any psi(Y, V) to its doubly robust
//! residual; applying it to a K-dimensional basis and regressing the score
//! on the span yields the best weighting matrix
//!
//! `tau_opt = -E[grad_theta K(Psi)] E[K(Psi) K(Psi)^T]^{-1}`
//!
//! and the information matrix `Omega_K`, whose inverse estimates the
//! asymptotic variance of the tau-weighted estimator. Functions of V alone
//! are annihilated by `K` and are dropped from the regression.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_model::{ColumnSchema, FusedDataset, Record};
use crate::design::{Design, Term};
use crate::error::{Error, Result};
use crate::estimating::{EstimatorKind, GSpec, MomentContext};
use crate::exec::{map_indexed, tree_sum};
use crate::nuisance::{ImputationFit, OutcomeFamily, OutcomeModel, PropensityFit};
use crate::quadrature::{GaussHermite, NormalGrid, DEFAULT_NODES};
use crate::rng::stream_rng;

/// Basis family for the continuous-outcome efficient path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisFamily {
    Polynomial,
    Trigonometric,
}

/// Requested basis: family and size K (must exceed the coefficient count).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BasisSpec {
    pub family: BasisFamily,
    pub k: usize,
}

impl BasisSpec {
    /// Materialize the basis for a dataset. Trigonometric bases standardize
    /// each coordinate so the sample range maps onto [-pi, pi] exactly.
    pub fn build(&self, ds: &FusedDataset, dim_beta: usize) -> Result<Basis> {
        if self.k <= dim_beta {
            return Err(Error::Validation(format!(
                "basis size {} must exceed the coefficient count {}",
                self.k, dim_beta
            )));
        }
        let n_v = ds.schema().v_names.len();
        match self.family {
            BasisFamily::Polynomial => Ok(Basis::polynomial(self.k, n_v)),
            BasisFamily::Trigonometric => Basis::trigonometric(self.k, ds),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum YFactor {
    /// y^a; a = 0 means no Y dependence.
    Power(u32),
    /// sin(k * standardized y)
    Sin(u32),
    /// cos(k * standardized y)
    Cos(u32),
}

#[derive(Debug, Clone, PartialEq)]
enum VFactor {
    /// prod_d v_d^{b_d}; all zeros means the constant 1.
    Monomial(Vec<u32>),
    /// sin(k * standardized v_d)
    Sin(usize, u32),
    /// cos(k * standardized v_d)
    Cos(usize, u32),
}

/// One product-form basis function psi(y, v) = f_y(y) f_v(v).
#[derive(Debug, Clone, PartialEq)]
pub struct BasisFunction {
    y: YFactor,
    v: VFactor,
}

impl BasisFunction {
    fn depends_on_y(&self) -> bool {
        !matches!(self.y, YFactor::Power(0))
    }

    #[cfg(test)]
    fn y_degree(&self) -> Option<u32> {
        match self.y {
            YFactor::Power(a) => Some(a),
            _ => None,
        }
    }
}

/// Affine maps taking each raw coordinate into [-pi, pi] over the sample
/// range (trigonometric bases only).
#[derive(Debug, Clone, PartialEq)]
struct Standardization {
    y: (f64, f64),
    v: Vec<(f64, f64)>,
}

fn affine_from_range(min: f64, max: f64) -> (f64, f64) {
    if max > min {
        let scale = 2.0 * std::f64::consts::PI / (max - min);
        (-std::f64::consts::PI - scale * min, scale)
    } else {
        // degenerate column; maps everything to 0
        (0.0, 0.0)
    }
}

/// A fixed collection of basis functions over (Y, V).
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    functions: Vec<BasisFunction>,
    standardization: Option<Standardization>,
    n_v: usize,
}

/// Exponent vectors over `d` variables summing to `total`, first coordinate
/// highest first.
fn compositions(total: u32, d: usize, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if d == 1 {
        prefix.push(total);
        out.push(prefix.clone());
        prefix.pop();
        return;
    }
    for first in (0..=total).rev() {
        prefix.push(first);
        compositions(total - first, d - 1, prefix, out);
        prefix.pop();
    }
}

impl Basis {
    /// Graded monomials in (Y, V): degree 0, then degree 1 with Y first,
    /// and so on, truncated to `k` functions.
    pub fn polynomial(k: usize, n_v: usize) -> Basis {
        let mut functions = Vec::with_capacity(k);
        let mut degree = 0u32;
        while functions.len() < k {
            let mut exps = Vec::new();
            compositions(degree, n_v + 1, &mut Vec::new(), &mut exps);
            for e in exps {
                if functions.len() == k {
                    break;
                }
                functions.push(BasisFunction {
                    y: YFactor::Power(e[0]),
                    v: VFactor::Monomial(e[1..].to_vec()),
                });
            }
            degree += 1;
        }
        Basis {
            functions,
            standardization: None,
            n_v,
        }
    }

    /// Constant, then a sin/cos ladder over the standardized coordinates
    /// (Y first), at frequencies 1, 2, ... until `k` functions exist.
    pub fn trigonometric(k: usize, ds: &FusedDataset) -> Result<Basis> {
        let n_v = ds.schema().v_names.len();
        let mut y_min = f64::INFINITY;
        let mut y_max = f64::NEG_INFINITY;
        let mut v_min = vec![f64::INFINITY; n_v];
        let mut v_max = vec![f64::NEG_INFINITY; n_v];
        for row in ds.rows() {
            if let Some(y) = row.y {
                y_min = y_min.min(y);
                y_max = y_max.max(y);
            }
            for (d, &x) in row.v.iter().enumerate() {
                v_min[d] = v_min[d].min(x);
                v_max[d] = v_max[d].max(x);
            }
        }
        let standardization = Standardization {
            y: affine_from_range(y_min, y_max),
            v: v_min
                .iter()
                .zip(&v_max)
                .map(|(&lo, &hi)| affine_from_range(lo, hi))
                .collect(),
        };
        let mut functions = vec![BasisFunction {
            y: YFactor::Power(0),
            v: VFactor::Monomial(vec![0; n_v]),
        }];
        if functions.len() == k {
            return Ok(Basis {
                functions,
                standardization: Some(standardization),
                n_v,
            });
        }
        let mut freq = 1u32;
        'outer: loop {
            let mut ladder: Vec<BasisFunction> = Vec::new();
            ladder.push(BasisFunction {
                y: YFactor::Sin(freq),
                v: VFactor::Monomial(vec![0; n_v]),
            });
            ladder.push(BasisFunction {
                y: YFactor::Cos(freq),
                v: VFactor::Monomial(vec![0; n_v]),
            });
            for d in 0..n_v {
                ladder.push(BasisFunction {
                    y: YFactor::Power(0),
                    v: VFactor::Sin(d, freq),
                });
                ladder.push(BasisFunction {
                    y: YFactor::Power(0),
                    v: VFactor::Cos(d, freq),
                });
            }
            for f in ladder {
                functions.push(f);
                if functions.len() == k {
                    break 'outer;
                }
            }
            freq += 1;
        }
        Ok(Basis {
            functions,
            standardization: Some(standardization),
            n_v,
        })
    }

    /// psi_j(Y, V) = Y * term_j(V): the span of the default y-times-g(V)
    /// estimating functions, as a basis.
    pub fn y_times_terms(terms: &[Term], v_names: &[String]) -> Result<Basis> {
        let n_v = v_names.len();
        let index = |c: &str| -> Result<usize> {
            v_names
                .iter()
                .position(|n| n == c)
                .ok_or_else(|| Error::MissingColumn(c.to_string()))
        };
        let functions = terms
            .iter()
            .map(|t| {
                let mut exps = vec![0u32; n_v];
                match t {
                    Term::Intercept => {}
                    Term::Col(c) => exps[index(c)?] += 1,
                    Term::Square(c) => exps[index(c)?] += 2,
                    Term::Product(a, b) => {
                        exps[index(a)?] += 1;
                        exps[index(b)?] += 1;
                    }
                }
                Ok(BasisFunction {
                    y: YFactor::Power(1),
                    v: VFactor::Monomial(exps),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Basis {
            functions,
            standardization: None,
            n_v,
        })
    }

    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// Keep only functions with genuine Y dependence; K annihilates the
    /// rest, which would otherwise make the operator Gram matrix singular.
    pub fn retain_y_dependent(&self) -> Basis {
        Basis {
            functions: self
                .functions
                .iter()
                .filter(|f| f.depends_on_y())
                .cloned()
                .collect(),
            standardization: self.standardization.clone(),
            n_v: self.n_v,
        }
    }

    /// Whether integrating these functions over a linear-normal Y needs the
    /// residual SD (anything beyond degree 1 in Y does).
    pub fn requires_sigma_y(&self, family: OutcomeFamily) -> bool {
        family == OutcomeFamily::LinearNormal
            && self
                .functions
                .iter()
                .any(|f| !matches!(f.y, YFactor::Power(0) | YFactor::Power(1)))
    }

    fn std_y(&self, y: f64) -> f64 {
        match &self.standardization {
            Some(s) => s.y.0 + s.y.1 * y,
            None => y,
        }
    }

    fn std_v(&self, d: usize, x: f64) -> f64 {
        match &self.standardization {
            Some(s) => s.v[d].0 + s.v[d].1 * x,
            None => x,
        }
    }

    fn eval_y_factor(&self, f: &YFactor, y: f64) -> f64 {
        match *f {
            YFactor::Power(a) => y.powi(a as i32),
            YFactor::Sin(k) => (k as f64 * self.std_y(y)).sin(),
            YFactor::Cos(k) => (k as f64 * self.std_y(y)).cos(),
        }
    }

    fn eval_v_factor(&self, f: &VFactor, v: &[f64]) -> f64 {
        match f {
            VFactor::Monomial(exps) => exps
                .iter()
                .enumerate()
                .map(|(d, &e)| v[d].powi(e as i32))
                .product(),
            VFactor::Sin(d, k) => (*k as f64 * self.std_v(*d, v[*d])).sin(),
            VFactor::Cos(d, k) => (*k as f64 * self.std_v(*d, v[*d])).cos(),
        }
    }

    /// Evaluate Psi_K at a raw (y, v) point.
    pub fn eval(&self, y: f64, v: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.functions.len(),
            self.functions
                .iter()
                .map(|f| self.eval_y_factor(&f.y, y) * self.eval_v_factor(&f.v, v)),
        )
    }

    /// E[f_y(Y)] under the outcome family at linear predictor `lp`.
    /// Linear-normal: exact for powers up to 2, Gauss-Hermite beyond and
    /// for trigonometric factors. Logistic-binary: exact two-point sum.
    fn expect_y_factor(
        &self,
        f: &YFactor,
        family: OutcomeFamily,
        lp: f64,
        sigma_y: Option<f64>,
        rule: &GaussHermite,
    ) -> f64 {
        match family {
            OutcomeFamily::LogisticBinary => {
                let p = crate::stats::expit(lp);
                (1.0 - p) * self.eval_y_factor(f, 0.0) + p * self.eval_y_factor(f, 1.0)
            }
            OutcomeFamily::LinearNormal => match *f {
                YFactor::Power(0) => 1.0,
                YFactor::Power(1) => lp,
                YFactor::Power(2) => {
                    let s = sigma_y.expect("sigma_y checked before basis integration");
                    lp * lp + s * s
                }
                _ => {
                    let s = sigma_y.expect("sigma_y checked before basis integration");
                    rule.expect_normal(lp, s, |y| self.eval_y_factor(f, y))
                }
            },
        }
    }

    /// E_theta[Psi | V, L] for a row with observed covariates `l`.
    pub(crate) fn expect_given_vl(
        &self,
        model: &OutcomeModel,
        v_out: &DVector<f64>,
        l: &[f64],
        v_raw: &[f64],
        rule: &GaussHermite,
    ) -> DVector<f64> {
        let lp = model.linear_predictor(v_out, l);
        DVector::from_iterator(
            self.functions.len(),
            self.functions.iter().map(|f| {
                self.expect_y_factor(&f.y, model.family, lp, model.sigma_y, rule)
                    * self.eval_v_factor(&f.v, v_raw)
            }),
        )
    }

    /// E_{theta,alpha}[Psi | V]: the V,L expectation integrated over the
    /// covariate-model grid centered at `mu_l`.
    pub(crate) fn expect_given_v(
        &self,
        model: &OutcomeModel,
        v_out: &DVector<f64>,
        mu_l: &DVector<f64>,
        grid: &NormalGrid,
        v_raw: &[f64],
        rule: &GaussHermite,
    ) -> DVector<f64> {
        let k = self.functions.len();
        let mut acc = DVector::<f64>::zeros(k);
        for (l, w) in grid.points_at(mu_l) {
            let lp = model.linear_predictor(v_out, l.as_slice());
            for (j, f) in self.functions.iter().enumerate() {
                acc[j] += w * self.expect_y_factor(&f.y, model.family, lp, model.sigma_y, rule);
            }
        }
        for (j, f) in self.functions.iter().enumerate() {
            acc[j] *= self.eval_v_factor(&f.v, v_raw);
        }
        acc
    }

    /// Condition number of the raw Gram matrix P_n[Psi Psi^T] over the
    /// source-A rows (the rows where Y is observed).
    pub fn raw_gram_condition(&self, ds: &FusedDataset) -> Result<f64> {
        let k = self.len();
        let mut gram = DMatrix::<f64>::zeros(k, k);
        let mut count = 0usize;
        for row in ds.rows().iter().filter(|r| r.r) {
            let psi = self.eval(row.y.expect("R=1 row carries Y"), &row.v);
            gram.syger(1.0, &psi, &psi, 1.0);
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptySource("no source-A rows for the Gram matrix".into()));
        }
        gram.fill_upper_triangle_with_lower_triangle();
        gram /= count as f64;
        let svd = gram.svd(false, false);
        Ok(svd.singular_values.max() / svd.singular_values.min().max(f64::MIN_POSITIVE))
    }
}

/// Apply the doubly robust linear operator K to every basis function for a
/// single record:
/// `K(psi) = R/pi {psi - E[psi|V]} + (1-R)/(1-pi) {E[psi|V] - E[psi|V,L]}`.
pub fn k_operator(
    basis: &Basis,
    outcome: &OutcomeModel,
    prop: &PropensityFit,
    imp: &ImputationFit,
    schema: &ColumnSchema,
    row: &Record,
) -> Result<DVector<f64>> {
    if basis.requires_sigma_y(outcome.family) && outcome.sigma_y.is_none() {
        return Err(Error::Validation(
            "basis moments over Y need sigma_y on the outcome model".into(),
        ));
    }
    let out_design = Design::bind(outcome.v_terms(), &schema.v_names)?;
    let prop_design = Design::bind(prop.terms(), &schema.v_names)?;
    let imp_design = Design::bind(imp.terms(), &schema.v_names)?;
    let rule = GaussHermite::new(DEFAULT_NODES);
    let grid = imp.l_grid(&rule)?;

    let v_out = out_design.eval(&row.v);
    let pi = prop.predict_pi(&prop_design.eval(&row.v));
    let mu_l = imp.mean_l(&imp_design.eval(&row.v));
    let e_v = basis.expect_given_v(outcome, &v_out, &mu_l, &grid, &row.v, &rule);
    if row.r {
        let psi = basis.eval(row.y.expect("R=1 row carries Y"), &row.v);
        Ok((psi - e_v) / pi)
    } else {
        let l = row.l.as_ref().expect("R=0 row carries L");
        let e_vl = basis.expect_given_vl(outcome, &v_out, l, &row.v, &rule);
        Ok((e_v - e_vl) / (1.0 - pi))
    }
}

/// Optimal basis weighting for the continuous-outcome DR class.
#[derive(Debug, Clone)]
pub struct TauOpt {
    /// dim(beta) x K' weighting matrix (K' counts the Y-dependent basis
    /// functions actually used).
    pub tau: DMatrix<f64>,
    /// Estimated information matrix of the tau-weighted estimator; its
    /// inverse approximates the asymptotic variance.
    pub omega: DMatrix<f64>,
    /// The filtered basis the weights refer to.
    pub basis: Basis,
}

/// Gram-matrix condition limit for [`tau_opt`].
pub const GRAM_CONDITION_LIMIT: f64 = 1e10;

/// Estimate tau_opt and Omega_K by empirical plug-in at `outcome` (usually
/// a preliminary DR fit) and the fitted nuisances. All expectations are
/// full-sample plug-ins; no sample splitting is applied.
pub fn tau_opt(
    ds: &FusedDataset,
    basis: &Basis,
    outcome: &OutcomeModel,
    prop: &PropensityFit,
    imp: &ImputationFit,
) -> Result<TauOpt> {
    let filtered = basis.retain_y_dependent();
    let dim_beta = outcome.beta.len();
    let k = filtered.len();
    if k < dim_beta {
        return Err(Error::Validation(format!(
            "only {k} Y-dependent basis functions for {dim_beta} coefficients"
        )));
    }
    if filtered.requires_sigma_y(outcome.family) && outcome.sigma_y.is_none() {
        return Err(Error::Validation(
            "basis moments over Y need sigma_y on the outcome model".into(),
        ));
    }

    let identity = GSpec::CustomBasis {
        tau: DMatrix::identity(k, k),
        basis: filtered.clone(),
    };
    let ctx = MomentContext::new(ds, EstimatorKind::Dr, &identity, outcome, Some(prop), Some(imp))?;
    let eta = prop.eta.clone();
    let alpha = imp.alpha.clone();

    // E[grad_theta K(Psi)] via central differences of the mean K vector
    let a = ctx.fd_jacobian(&outcome.beta, Some(&eta), Some(&alpha), 1e-6);

    // Gram matrix P_n[K(Psi) K(Psi)^T]
    let model = outcome.clone();
    let mut gram = tree_sum(
        ds.n(),
        |i| {
            let kv = ctx.u_row(i, &model, Some(&eta), Some(&alpha));
            let mut m = DMatrix::zeros(k, k);
            m.syger(1.0, &kv, &kv, 0.0);
            m
        },
        || DMatrix::zeros(k, k),
    ) / ds.n() as f64;
    gram.fill_upper_triangle_with_lower_triangle();

    let svd = gram.clone().svd(false, false);
    let cond = svd.singular_values.max() / svd.singular_values.min().max(f64::MIN_POSITIVE);
    if cond > GRAM_CONDITION_LIMIT {
        return Err(Error::IllConditionedGram(cond));
    }
    let gram_inv = gram
        .cholesky()
        .ok_or(Error::IllConditionedGram(cond))?
        .inverse();

    let tau = -(a.transpose() * &gram_inv); // dim_beta x k
    let omega = a.transpose() * &gram_inv * &a;
    Ok(TauOpt {
        tau,
        omega,
        basis: filtered,
    })
}

/// Pieces of h_opt estimation shared by the Monte Carlo and exact paths.
struct HOptPieces {
    v_out: DVector<f64>,
    pi: f64,
    e_v: f64,
    grad_e_v: DVector<f64>,
}

fn h_opt_pieces(
    v_raw: &[f64],
    outcome: &OutcomeModel,
    prop: &PropensityFit,
    schema: &ColumnSchema,
    e_v_and_grad: impl FnOnce(&DVector<f64>) -> (f64, DVector<f64>),
) -> Result<HOptPieces> {
    if outcome.family != OutcomeFamily::LogisticBinary {
        return Err(Error::Validation(
            "h_opt weighting applies to the logistic-binary family".into(),
        ));
    }
    let out_design = Design::bind(outcome.v_terms(), &schema.v_names)?;
    let prop_design = Design::bind(prop.terms(), &schema.v_names)?;
    let v_out = out_design.eval(v_raw);
    let pi = prop.predict_pi(&prop_design.eval(v_raw));
    let (e_v, grad_e_v) = e_v_and_grad(&v_out);
    Ok(HOptPieces {
        v_out,
        pi,
        e_v,
        grad_e_v,
    })
}

/// Minimum admissible estimate of E[M^2 | V].
pub const M2_FLOOR: f64 = 1e-12;

/// Monte Carlo estimate of the optimal binary-outcome weight h_opt(V) at a
/// covariate point. L is drawn `mc_draws` times from the fitted covariate
/// model; the binary variables R and Y are integrated exactly within each
/// draw (given L, `E[grad M] = -grad p(V,L)` and
/// `E[M^2] = {p(1-p) + (p - e_V)^2}/pi + (e_V - p)^2/(1-pi)`), which keeps
/// the estimate stable where Y is nearly deterministic. Deterministic for a
/// fixed seed.
pub fn h_opt_binary(
    v_raw: &[f64],
    outcome: &OutcomeModel,
    prop: &PropensityFit,
    imp: &ImputationFit,
    schema: &ColumnSchema,
    mc_draws: usize,
    seed: u64,
) -> Result<DVector<f64>> {
    h_opt_binary_stream(v_raw, outcome, prop, imp, schema, mc_draws, seed, 0)
}

#[allow(clippy::too_many_arguments)]
fn h_opt_binary_stream(
    v_raw: &[f64],
    outcome: &OutcomeModel,
    prop: &PropensityFit,
    imp: &ImputationFit,
    schema: &ColumnSchema,
    mc_draws: usize,
    seed: u64,
    stream: u64,
) -> Result<DVector<f64>> {
    if mc_draws == 0 {
        return Err(Error::Validation("mc_draws must be positive".into()));
    }
    let imp_design = Design::bind(imp.terms(), &schema.v_names)?;
    let rule = GaussHermite::new(DEFAULT_NODES);
    let grid = imp.l_grid(&rule)?;
    let mu_l = imp.mean_l(&imp_design.eval(v_raw));
    let pieces = h_opt_pieces(v_raw, outcome, prop, schema, |v_out| {
        outcome.mean_y_given_v_and_grad(v_out, &mu_l, &grid)
    })?;

    let factor = crate::quadrature::psd_factor(&imp.sigma_l);
    let p_dim = imp.sigma_l.nrows();
    let mut rng = stream_rng(seed, stream);
    let dim = outcome.beta.len();
    let mut grad_acc = DVector::<f64>::zeros(dim);
    let mut m2_acc = 0.0;
    let mut z = DVector::<f64>::zeros(p_dim);
    for _ in 0..mc_draws {
        for zi in z.iter_mut() {
            *zi = StandardNormal.sample(&mut rng);
        }
        let l = &mu_l + &factor * &z;
        let (p_vl, grad_vl) = outcome.mean_y_and_grad(&pieces.v_out, l.as_slice());
        // exact (R, Y) expectations given this L draw
        grad_acc -= &grad_vl;
        let dev = p_vl - pieces.e_v;
        m2_acc += (p_vl * (1.0 - p_vl) + dev * dev) / pieces.pi + dev * dev / (1.0 - pieces.pi);
    }
    let mean_grad = grad_acc / mc_draws as f64;
    let mean_m2 = m2_acc / mc_draws as f64;
    if mean_m2 < M2_FLOOR {
        return Err(Error::DegenerateVariance(mean_m2));
    }
    Ok(-mean_grad / mean_m2)
}

/// Exact h_opt(V) for a finite L support: `l_support` lists the atoms of
/// L | V = v with their probabilities (summing to 1); R and Y are
/// enumerated from the fitted propensity and outcome models.
pub fn h_opt_binary_exact(
    v_raw: &[f64],
    outcome: &OutcomeModel,
    prop: &PropensityFit,
    schema: &ColumnSchema,
    l_support: &[(Vec<f64>, f64)],
) -> Result<DVector<f64>> {
    if l_support.is_empty() {
        return Err(Error::Validation("empty L support".into()));
    }
    let pieces = h_opt_pieces(v_raw, outcome, prop, schema, |v_out| {
        let mut e = 0.0;
        let mut g = DVector::zeros(outcome.beta.len());
        for (l, w) in l_support {
            let (m, grad) = outcome.mean_y_and_grad(v_out, l);
            e += w * m;
            g.axpy(*w, &grad, 1.0);
        }
        (e, g)
    })?;

    let dim = outcome.beta.len();
    let mut grad_acc = DVector::<f64>::zeros(dim);
    let mut m2_acc = 0.0;
    for (l, w_l) in l_support {
        let (p_vl, grad_vl) = outcome.mean_y_and_grad(&pieces.v_out, l);
        for (r, w_r) in [(true, pieces.pi), (false, 1.0 - pieces.pi)] {
            for (y, w_y) in [(1.0, p_vl), (0.0, 1.0 - p_vl)] {
                let w = w_l * w_r * w_y;
                let (m, dm) = if r {
                    (
                        (y - pieces.e_v) / pieces.pi,
                        -&pieces.grad_e_v / pieces.pi,
                    )
                } else {
                    (
                        (pieces.e_v - p_vl) / (1.0 - pieces.pi),
                        (&pieces.grad_e_v - &grad_vl) / (1.0 - pieces.pi),
                    )
                };
                grad_acc.axpy(w, &dm, 1.0);
                m2_acc += w * m * m;
            }
        }
    }
    if m2_acc < M2_FLOOR {
        return Err(Error::DegenerateVariance(m2_acc));
    }
    Ok(-grad_acc / m2_acc)
}

/// h_opt evaluated at every dataset row (independent substreams per row),
/// ready to use as a [`GSpec::YTimesTable`].
pub fn h_opt_table(
    ds: &FusedDataset,
    outcome: &OutcomeModel,
    prop: &PropensityFit,
    imp: &ImputationFit,
    mc_draws: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    let schema = ds.schema();
    let results = map_indexed(ds.n(), |i| {
        h_opt_binary_stream(
            &ds.rows()[i].v,
            outcome,
            prop,
            imp,
            schema,
            mc_draws,
            seed,
            i as u64,
        )
    });
    results.into_iter().collect()
}
