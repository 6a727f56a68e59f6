//! Monte Carlo harness: the reference data-generating process, the four
//! correct/misspecified working-model scenarios, and the metric grid
//! (bias, Monte Carlo SD, mean estimated SD, SD ratio, coverage).
//!
//! The generating process draws, per unit,
//!
//! ```text
//! C ~ N(0, 0.5^2)            A | C ~ N(lambda0 + lambda1 C, sigma_A^2)
//! L | V ~ N(alpha0 + alpha1 A + alpha2 C + alpha3 A C, sigma_L^2)
//! R | V ~ Bernoulli(pi(V))   Y | V, L ~ N(beta0 + beta1 A + beta2 C + beta3 L, sigma_Y^2)
//! ```
//!
//! then blanks Y where R = 0 and L where R = 1. The sign convention of the
//! C term in the generating propensity is configurable:
//! [`PropensityForm::Coefficient`] (default) reads the eta values as plain
//! logistic coefficients on (1, A, C); [`PropensityForm::NegatedC`] negates
//! the C coefficient, `expit(eta0 + eta1 A - eta2 C)`. Both give Pr(R=1)
//! near one half at the reference constants; the default is the form whose
//! scenario coverage matches the reference metric grid.
//!
//! Replicates run in parallel on independent RNG substreams and aggregate
//! by replicate index, so reports are identical for any worker count.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data_model::{ColumnSchema, FusedDataset, Record};
use crate::design::{parse_terms, Term};
use crate::error::{Error, Result};
use crate::estimating::{solve, EstimatorKind, GSpec, SolveOptions};
use crate::exec::map_indexed;
use crate::inference::{finalize_fit, SandwichOptions};
use crate::nuisance::{fit_imputation, fit_propensity, OutcomeFamily, OutcomeModel};
use crate::rng::stream_rng;
use crate::stats::{expit, mean, normal_quantile, sample_sd};

/// SD of the exogenous covariate C (fixed by the reference design).
pub const SIGMA_C: f64 = 0.5;

/// Sign convention for the generating propensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PropensityForm {
    /// linear predictor = eta0 + eta1 A + eta2 C (default).
    Coefficient,
    /// linear predictor = eta0 + eta1 A - eta2 C.
    NegatedC,
}

/// Generating constants of the reference design.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DgpParams {
    /// (lambda0, lambda1, sigma_A) for A | C.
    pub lambda: (f64, f64, f64),
    /// (alpha0, alpha1, alpha2, alpha3, sigma_L) for L | V.
    pub alpha_gen: (f64, f64, f64, f64, f64),
    /// (beta0, beta1, beta2, beta3, sigma_Y) for Y | V, L.
    pub beta_gen: (f64, f64, f64, f64, f64),
    /// (eta0, eta1, eta2) for R | V.
    pub eta_gen: (f64, f64, f64),
    pub propensity_form: PropensityForm,
}

impl DgpParams {
    /// The reference first-study constants; `alpha3 = 2` puts a strong
    /// interaction into L | V.
    pub fn reference() -> Self {
        DgpParams {
            lambda: (0.5, 0.5, 0.3),
            alpha_gen: (-0.5, 1.5, 1.0, 2.0, 0.3),
            beta_gen: (0.5, -0.5, 1.0, 1.5, 0.4),
            eta_gen: (0.5, -0.75, -0.75),
            propensity_form: PropensityForm::Coefficient,
        }
    }

    /// Reference constants with the interaction strength replaced (the
    /// second study uses 0.5).
    pub fn with_alpha3(mut self, alpha3: f64) -> Self {
        self.alpha_gen.3 = alpha3;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [
            ("sigma_A", self.lambda.2),
            ("sigma_L", self.alpha_gen.4),
            ("sigma_Y", self.beta_gen.4),
        ] {
            if !(s > 0.0) {
                return Err(Error::Validation(format!("{name} must be positive, got {s}")));
            }
        }
        Ok(())
    }

    /// Linear predictor of the generating propensity at (a, c).
    pub fn propensity_lp(&self, a: f64, c: f64) -> f64 {
        let (e0, e1, e2) = self.eta_gen;
        match self.propensity_form {
            PropensityForm::Coefficient => e0 + e1 * a + e2 * c,
            PropensityForm::NegatedC => e0 + e1 * a - e2 * c,
        }
    }

    /// Generating outcome coefficients (beta0..beta3).
    pub fn truth(&self) -> DVector<f64> {
        DVector::from_row_slice(&[
            self.beta_gen.0,
            self.beta_gen.1,
            self.beta_gen.2,
            self.beta_gen.3,
        ])
    }
}

/// A complete generated unit, before fusing blanks one side.
#[derive(Debug, Clone, Copy)]
pub struct FullRecord {
    pub a: f64,
    pub c: f64,
    pub l: f64,
    pub y: f64,
    pub r: bool,
}

/// Schema of generated datasets: V = (A, C), L, Y, R, with an intercept.
pub fn dgp_schema() -> ColumnSchema {
    ColumnSchema::new(
        vec!["A".into(), "C".into()],
        vec!["L".into()],
        "Y",
        "R",
        true,
    )
    .expect("static schema is valid")
}

/// Draw `n` complete units on substream `stream` of `seed`.
pub fn generate_full(params: &DgpParams, n: usize, seed: u64, stream: u64) -> Vec<FullRecord> {
    let mut rng = stream_rng(seed, stream);
    let (l0, l1, sa) = params.lambda;
    let (a0, a1, a2, a3, sl) = params.alpha_gen;
    let (b0, b1, b2, b3, sy) = params.beta_gen;
    (0..n)
        .map(|_| {
            let zc: f64 = StandardNormal.sample(&mut rng);
            let c = SIGMA_C * zc;
            let za: f64 = StandardNormal.sample(&mut rng);
            let a = l0 + l1 * c + sa * za;
            let zl: f64 = StandardNormal.sample(&mut rng);
            let l = a0 + a1 * a + a2 * c + a3 * a * c + sl * zl;
            let r = rng.random::<f64>() < expit(params.propensity_lp(a, c));
            let zy: f64 = StandardNormal.sample(&mut rng);
            let y = b0 + b1 * a + b2 * c + b3 * l + sy * zy;
            FullRecord { a, c, l, y, r }
        })
        .collect()
}

/// Blank the unobserved side of each unit and validate the fused dataset.
pub fn fuse(rows: &[FullRecord]) -> Result<FusedDataset> {
    let records: Vec<Record> = rows
        .iter()
        .map(|u| {
            if u.r {
                Record::source_a(u.y, vec![u.a, u.c])
            } else {
                Record::source_b(vec![u.l], vec![u.a, u.c])
            }
        })
        .collect();
    FusedDataset::new(dgp_schema(), records)
}

/// Generate a fused dataset (substream 0 of `seed`).
pub fn generate_dataset(params: &DgpParams, n: usize, seed: u64) -> Result<FusedDataset> {
    generate_dataset_stream(params, n, seed, 0)
}

/// Generate a fused dataset on an explicit substream (one per replicate).
pub fn generate_dataset_stream(
    params: &DgpParams,
    n: usize,
    seed: u64,
    stream: u64,
) -> Result<FusedDataset> {
    params.validate()?;
    fuse(&generate_full(params, n, seed, stream))
}

/// Binary-outcome variant of the reference design: Y | V, L is Bernoulli
/// with success probability expit(beta0 + beta1 A + beta2 C + beta3 L).
/// Used by the locally efficient weighting study.
pub fn generate_binary_dataset(
    params: &DgpParams,
    n: usize,
    seed: u64,
    stream: u64,
) -> Result<FusedDataset> {
    params.validate()?;
    let mut rng = stream_rng(seed, stream);
    let (l0, l1, sa) = params.lambda;
    let (a0, a1, a2, a3, sl) = params.alpha_gen;
    let (b0, b1, b2, b3, _) = params.beta_gen;
    let records: Vec<Record> = (0..n)
        .map(|_| {
            let zc: f64 = StandardNormal.sample(&mut rng);
            let c = SIGMA_C * zc;
            let za: f64 = StandardNormal.sample(&mut rng);
            let a = l0 + l1 * c + sa * za;
            let zl: f64 = StandardNormal.sample(&mut rng);
            let l = a0 + a1 * a + a2 * c + a3 * a * c + sl * zl;
            let r = rng.random::<f64>() < expit(params.propensity_lp(a, c));
            let y = rng.random::<f64>() < expit(b0 + b1 * a + b2 * c + b3 * l);
            if r {
                Record::source_a(f64::from(y), vec![a, c])
            } else {
                Record::source_b(vec![l], vec![a, c])
            }
        })
        .collect();
    FusedDataset::new(dgp_schema(), records)
}

/// Which working models are deliberately misspecified.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    I,
    II,
    III,
    IV,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::I, Scenario::II, Scenario::III, Scenario::IV];

    pub fn label(self) -> &'static str {
        match self {
            Scenario::I => "i",
            Scenario::II => "ii",
            Scenario::III => "iii",
            Scenario::IV => "iv",
        }
    }

    pub fn parse(s: &str) -> Result<Scenario> {
        match s.trim().to_ascii_lowercase().as_str() {
            "i" | "1" => Ok(Scenario::I),
            "ii" | "2" => Ok(Scenario::II),
            "iii" | "3" => Ok(Scenario::III),
            "iv" | "4" => Ok(Scenario::IV),
            other => Err(Error::Validation(format!("unknown scenario `{other}`"))),
        }
    }

    /// Working propensity model: scenarios ii and iv drop C.
    pub fn propensity_terms(self) -> Vec<Term> {
        match self {
            Scenario::I | Scenario::III => parse_terms(&["1", "A", "C"]).unwrap(),
            Scenario::II | Scenario::IV => parse_terms(&["1", "A"]).unwrap(),
        }
    }

    /// Working covariate model: scenarios iii and iv regress L on (C, C^2)
    /// only.
    pub fn imputation_terms(self) -> Vec<Term> {
        match self {
            Scenario::I | Scenario::II => parse_terms(&["1", "A", "C", "A*C"]).unwrap(),
            Scenario::III | Scenario::IV => parse_terms(&["1", "C", "C^2"]).unwrap(),
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// One simulation run: scenario, sample size, replicate count, and design.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub params: DgpParams,
    pub estimators: Vec<EstimatorKind>,
    pub ci_level: f64,
    /// Treat the fitted propensity as known in the IPW sandwich (fixed
    /// eta); the reference metric grid follows this convention for IPW.
    /// IMP and DR always stack the nuisance scores. Default true.
    pub ipw_fixed_eta_se: bool,
}

impl ScenarioConfig {
    pub fn new(scenario: Scenario, n: usize, reps: usize, seed: u64) -> Self {
        ScenarioConfig {
            scenario,
            n,
            reps,
            seed,
            params: DgpParams::reference(),
            estimators: vec![EstimatorKind::Ipw, EstimatorKind::Imp, EstimatorKind::Dr],
            ci_level: 0.95,
            ipw_fixed_eta_se: true,
        }
    }
}

/// Table-1 style metrics for one (estimator, coefficient) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricCell {
    pub estimator: EstimatorKind,
    pub coefficient: String,
    pub coef_index: usize,
    pub bias: f64,
    pub mc_sd: f64,
    pub mean_est_sd: f64,
    /// mean estimated SD / Monte Carlo SD.
    pub sd_ratio: f64,
    pub coverage: f64,
}

/// Full output of a scenario run, with replicate-level estimates retained
/// for boxplot export.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationReport {
    pub scenario: Scenario,
    pub n: usize,
    pub reps: usize,
    pub seed: u64,
    pub alpha3: f64,
    pub ci_level: f64,
    pub truth: Vec<f64>,
    pub coefficient_names: Vec<String>,
    pub cells: Vec<MetricCell>,
    /// Per estimator: replicate-level estimates (None where the replicate
    /// failed), aligned with `estimators`.
    pub estimators: Vec<EstimatorKind>,
    pub estimates: Vec<Vec<Option<Vec<f64>>>>,
    pub failures: Vec<usize>,
}

impl SimulationReport {
    pub fn cell(&self, estimator: EstimatorKind, coef_index: usize) -> Option<&MetricCell> {
        self.cells
            .iter()
            .find(|c| c.estimator == estimator && c.coef_index == coef_index)
    }

    /// Successful replicate estimates of one coefficient.
    pub fn estimates_for(&self, estimator: EstimatorKind, coef_index: usize) -> Vec<f64> {
        match self.estimators.iter().position(|&e| e == estimator) {
            Some(k) => self.estimates[k]
                .iter()
                .flatten()
                .map(|theta| theta[coef_index])
                .collect(),
            None => Vec::new(),
        }
    }
}

/// Per-replicate, per-estimator outcome: estimates and standard errors.
type RepOutcome = Vec<Option<(Vec<f64>, Vec<f64>)>>;

/// Run one scenario. Per replicate: generate, fit the scenario's working
/// models, solve every requested estimator with g(V) = (1, A, C, AC),
/// compute sandwich standard errors, and aggregate the metric grid.
/// Replicates that fail to fit are dropped and counted.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<SimulationReport> {
    if cfg.reps == 0 {
        return Err(Error::Validation("reps must be at least 1".into()));
    }
    cfg.params.validate()?;
    let outcome_terms = parse_terms(&["1", "A", "C"]).unwrap();
    let g = GSpec::y_times_terms(parse_terms(&["1", "A", "C", "A*C"]).unwrap());
    let solve_opts = SolveOptions::default();
    let sandwich_opts = SandwichOptions::default();
    let ipw_opts = SandwichOptions {
        treat_nuisance_known: cfg.ipw_fixed_eta_se,
        ..SandwichOptions::default()
    };
    let template = OutcomeModel::new(
        OutcomeFamily::LinearNormal,
        outcome_terms,
        DVector::zeros(4),
        None,
    )?;
    let prop_terms = cfg.scenario.propensity_terms();
    let imp_terms = cfg.scenario.imputation_terms();

    let outcomes: Vec<RepOutcome> = map_indexed(cfg.reps, |rep| {
        let one = |_: ()| -> Result<RepOutcome> {
            let ds = generate_dataset_stream(&cfg.params, cfg.n, cfg.seed, rep as u64)?;
            let prop = fit_propensity(&ds, &prop_terms);
            let imp = fit_imputation(&ds, &imp_terms);
            Ok(cfg
                .estimators
                .iter()
                .map(|&kind| {
                    let prop_ref = match (&prop, kind.needs_propensity()) {
                        (Ok(p), true) => Some(p),
                        (Err(_), true) => return None,
                        _ => None,
                    };
                    let imp_ref = match (&imp, kind.needs_imputation()) {
                        (Ok(m), true) => Some(m),
                        (Err(_), true) => return None,
                        _ => None,
                    };
                    let fit = solve(
                        &ds, kind, &g, &template, prop_ref, imp_ref, None, &solve_opts,
                    )
                    .ok()?;
                    let opts = if kind == EstimatorKind::Ipw {
                        &ipw_opts
                    } else {
                        &sandwich_opts
                    };
                    let fit = finalize_fit(
                        &ds,
                        fit,
                        &g,
                        &template,
                        prop_ref,
                        imp_ref,
                        cfg.ci_level,
                        opts,
                    )
                    .ok()?;
                    let cov = fit.covariance.as_ref().unwrap();
                    let se: Vec<f64> = (0..fit.theta.len())
                        .map(|j| cov.per_sample[(j, j)].max(0.0).sqrt())
                        .collect();
                    Some((fit.theta.iter().copied().collect(), se))
                })
                .collect())
        };
        one(()).unwrap_or_else(|_| vec![None; cfg.estimators.len()])
    });

    aggregate(cfg, outcomes)
}

/// Flat-argument convenience wrapper over [`run_scenario`].
pub fn run_scenario_simple(
    scenario: Scenario,
    n: usize,
    reps: usize,
    seed: u64,
    alpha3: f64,
    estimators: &[EstimatorKind],
) -> Result<SimulationReport> {
    let mut cfg = ScenarioConfig::new(scenario, n, reps, seed);
    cfg.params = DgpParams::reference().with_alpha3(alpha3);
    cfg.estimators = estimators.to_vec();
    run_scenario(&cfg)
}

fn aggregate(cfg: &ScenarioConfig, outcomes: Vec<RepOutcome>) -> Result<SimulationReport> {
    let truth = cfg.params.truth();
    let names = vec![
        "1".to_string(),
        "A".to_string(),
        "C".to_string(),
        "L".to_string(),
    ];
    let dim = truth.len();
    let z = normal_quantile(0.5 + cfg.ci_level / 2.0);

    let mut cells = Vec::new();
    let mut estimates: Vec<Vec<Option<Vec<f64>>>> = Vec::new();
    let mut failures = Vec::new();
    for (k, &kind) in cfg.estimators.iter().enumerate() {
        let per_rep: Vec<Option<&(Vec<f64>, Vec<f64>)>> =
            outcomes.iter().map(|o| o[k].as_ref()).collect();
        let ok: Vec<&(Vec<f64>, Vec<f64>)> = per_rep.iter().flatten().copied().collect();
        failures.push(cfg.reps - ok.len());
        estimates.push(
            per_rep
                .iter()
                .map(|o| o.map(|(theta, _)| theta.clone()))
                .collect(),
        );
        if ok.is_empty() {
            continue;
        }
        for j in 0..dim {
            let ests: Vec<f64> = ok.iter().map(|(t, _)| t[j]).collect();
            let ses: Vec<f64> = ok.iter().map(|(_, s)| s[j]).collect();
            let mc_sd = sample_sd(&ests);
            let mean_est_sd = mean(&ses);
            let covered = ok
                .iter()
                .filter(|(t, s)| (t[j] - truth[j]).abs() <= z * s[j])
                .count();
            cells.push(MetricCell {
                estimator: kind,
                coefficient: names[j].clone(),
                coef_index: j,
                bias: mean(&ests) - truth[j],
                mc_sd,
                mean_est_sd,
                sd_ratio: mean_est_sd / mc_sd,
                coverage: covered as f64 / ok.len() as f64,
            });
        }
    }

    Ok(SimulationReport {
        scenario: cfg.scenario,
        n: cfg.n,
        reps: cfg.reps,
        seed: cfg.seed,
        alpha3: cfg.params.alpha_gen.3,
        ci_level: cfg.ci_level,
        truth: truth.iter().copied().collect(),
        coefficient_names: names,
        cells,
        estimators: cfg.estimators.clone(),
        estimates,
        failures,
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write the metric grid of one or more reports as a flat CSV.
pub fn export_metrics_csv(reports: &[SimulationReport], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    writeln!(
        f,
        "scenario,n,alpha3,estimator,coefficient,bias,mc_sd,mean_est_sd,sd_ratio,coverage,failures"
    )
    .map_err(io_err(path))?;
    for report in reports {
        for cell in &report.cells {
            let k = report
                .estimators
                .iter()
                .position(|&e| e == cell.estimator)
                .expect("cell estimator listed");
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{},{},{}",
                report.scenario,
                report.n,
                report.alpha3,
                cell.estimator,
                cell.coefficient,
                cell.bias,
                cell.mc_sd,
                cell.mean_est_sd,
                cell.sd_ratio,
                cell.coverage,
                report.failures[k],
            )
            .map_err(io_err(path))?;
        }
    }
    Ok(())
}

/// Write replicate-level estimates in tidy long form
/// (scenario, n, estimator, coefficient, replicate, estimate).
pub fn export_boxplot_data(report: &SimulationReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    writeln!(f, "scenario,n,estimator,coefficient,replicate,estimate").map_err(io_err(path))?;
    for (k, &kind) in report.estimators.iter().enumerate() {
        for (rep, maybe_theta) in report.estimates[k].iter().enumerate() {
            if let Some(theta) = maybe_theta {
                for (j, name) in report.coefficient_names.iter().enumerate() {
                    writeln!(
                        f,
                        "{},{},{},{},{},{}",
                        report.scenario, report.n, kind, name, rep, theta[j]
                    )
                    .map_err(io_err(path))?;
                }
            }
        }
    }
    Ok(())
}
