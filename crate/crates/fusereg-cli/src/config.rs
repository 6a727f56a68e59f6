//! TOML run configuration.
//!
//! One archivable config file describes a run; command-line flags override
//! individual fields (flags win). All randomness funnels through the single
//! `seed` field.

use serde::Deserialize;

use fusereg::design::{parse_terms, Term};
use fusereg::efficiency::{BasisFamily, BasisSpec};
use fusereg::error::{Error, Result};
use fusereg::estimating::EstimatorKind;
use fusereg::inference::{AnalysisSpec, GDirective};
use fusereg::nuisance::OutcomeFamily;
use fusereg::simharness::{PropensityForm, Scenario};

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub schema: Option<SchemaConfig>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub propensity: Option<FormulaConfig>,
    #[serde(default)]
    pub imputation: Option<FormulaConfig>,
    #[serde(default)]
    pub estimating: Option<EstimatingConfig>,
    #[serde(default)]
    pub inference: Option<InferenceConfig>,
    #[serde(default)]
    pub simulate: Option<SimulateConfig>,
    #[serde(default)]
    pub output: Option<OutputConfig>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemaConfig {
    pub v: Vec<String>,
    pub l: Vec<String>,
    pub y: String,
    pub r: String,
    #[serde(default = "default_true")]
    pub intercept: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: OutcomeFamily,
    /// Outcome design over V; defaults to intercept plus every V column.
    #[serde(default)]
    pub outcome_v_terms: Option<Vec<String>>,
    #[serde(default)]
    pub estimate_sigma_y: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FormulaConfig {
    pub terms: Vec<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatingConfig {
    pub estimators: Vec<EstimatorKind>,
    /// Terms of g(V); must reach the coefficient count (V terms plus one
    /// per L column).
    pub g_terms: Vec<String>,
    #[serde(default)]
    pub efficient: bool,
    /// Monte Carlo draws per row for the binary efficient path.
    #[serde(default = "default_mc_draws")]
    pub mc_draws: usize,
    /// Basis family for the continuous efficient path.
    #[serde(default)]
    pub basis_family: Option<BasisFamily>,
    /// Basis size; defaults to twice the coefficient count.
    #[serde(default)]
    pub basis_k: Option<usize>,
}

fn default_mc_draws() -> usize {
    4096
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceConfig {
    #[serde(default = "default_level")]
    pub ci_level: f64,
    /// Bootstrap replicate count; 0 keeps the sandwich covariance.
    #[serde(default)]
    pub bootstrap: usize,
    #[serde(default)]
    pub pool: bool,
}

fn default_level() -> f64 {
    0.95
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub scenarios: Vec<String>,
    #[serde(default = "default_sim_n")]
    pub n: Vec<usize>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    #[serde(default = "default_alpha3")]
    pub alpha3: Vec<f64>,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub propensity_form: Option<PropensityForm>,
    #[serde(default = "default_level")]
    pub ci_level: f64,
}

fn default_sim_n() -> Vec<usize> {
    vec![2000]
}

fn default_reps() -> usize {
    500
}

fn default_alpha3() -> Vec<f64> {
    vec![2.0]
}

fn default_estimators() -> Vec<EstimatorKind> {
    vec![EstimatorKind::Ipw, EstimatorKind::Imp, EstimatorKind::Dr]
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<String>,
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|e| Error::Validation(format!("config: {e}")))
    }

    pub fn schema(&self) -> Result<fusereg::data_model::ColumnSchema> {
        let s = self
            .schema
            .as_ref()
            .ok_or_else(|| Error::Validation("config needs a [schema] section".into()))?;
        fusereg::data_model::ColumnSchema::new(
            s.v.clone(),
            s.l.clone(),
            s.y.clone(),
            s.r.clone(),
            s.intercept,
        )
    }

    pub fn scenarios(&self) -> Result<Vec<Scenario>> {
        let sim = self
            .simulate
            .as_ref()
            .ok_or_else(|| Error::Validation("config needs a [simulate] section".into()))?;
        sim.scenarios.iter().map(|s| Scenario::parse(s)).collect()
    }

    /// Assemble the per-estimator analysis specs for `fit`.
    pub fn analysis_specs(&self) -> Result<Vec<AnalysisSpec>> {
        let schema = self.schema()?;
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| Error::Validation("config needs a [model] section".into()))?;
        let est = self
            .estimating
            .as_ref()
            .ok_or_else(|| Error::Validation("config needs an [estimating] section".into()))?;
        if est.estimators.is_empty() {
            return Err(Error::Validation("no estimators requested".into()));
        }

        let outcome_v_terms: Vec<Term> = match &model.outcome_v_terms {
            Some(ts) => parse_terms(ts)?,
            None => fusereg::design::default_terms(&schema.v_names, schema.intercept),
        };
        let g_terms = parse_terms(&est.g_terms)?;
        let dim_beta = outcome_v_terms.len() + schema.p();
        if g_terms.len() < dim_beta {
            return Err(Error::Validation(format!(
                "g has {} terms but the outcome model has {} coefficients",
                g_terms.len(),
                dim_beta
            )));
        }
        let propensity_terms = match &self.propensity {
            Some(f) => Some(parse_terms(&f.terms)?),
            None => None,
        };
        let imputation_terms = match &self.imputation {
            Some(f) => Some(parse_terms(&f.terms)?),
            None => None,
        };
        let ci_level = self
            .inference
            .as_ref()
            .map(|i| i.ci_level)
            .unwrap_or_else(default_level);
        let seed = self.seed.unwrap_or(0);

        est.estimators
            .iter()
            .map(|&kind| {
                let g = if est.efficient && kind == EstimatorKind::Dr {
                    match model.family {
                        OutcomeFamily::LogisticBinary => GDirective::EfficientBinary {
                            base_terms: g_terms.clone(),
                            mc_draws: est.mc_draws,
                            seed,
                        },
                        OutcomeFamily::LinearNormal => GDirective::EfficientBasis {
                            base_terms: g_terms.clone(),
                            basis: BasisSpec {
                                family: est.basis_family.unwrap_or(BasisFamily::Polynomial),
                                k: est.basis_k.unwrap_or(2 * dim_beta),
                            },
                        },
                    }
                } else {
                    GDirective::Terms(g_terms.clone())
                };
                Ok(AnalysisSpec {
                    kind,
                    family: model.family,
                    outcome_v_terms: outcome_v_terms.clone(),
                    propensity_terms: propensity_terms.clone(),
                    imputation_terms: imputation_terms.clone(),
                    g,
                    solve: Default::default(),
                    ci_level,
                    estimate_sigma_y: model.estimate_sigma_y,
                })
            })
            .collect()
    }
}
