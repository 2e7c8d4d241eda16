use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use anyhow::{bail, Context, Result};
use latent_rt::likelihood::{Integration, DEFAULT_GH_ORDER};
use latent_rt::streams::{stream, Namespace};
use latent_rt::{CovariateDesign, FitConfig, ModelSpec, NelderMeadConfig, Parameters, SubjectCovariates};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SCHEMA: &str = include_str!("../../../docs/run_config.schema.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub params: Option<Parameters>,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default)]
    pub quadrature: QuadratureConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub io: IoConfig,
}

/// Covariate generators, one list of columns per outcome. Missing outcomes or
/// columns default to an intercept in column 0 and standard normals after it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    #[serde(default)]
    pub v1: Vec<Vec<Column>>,
    #[serde(default)]
    pub v2: Vec<Vec<Column>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Column {
    Intercept,
    Constant {
        value: f64,
    },
    Normal {
        #[serde(default)]
        mean: f64,
        #[serde(default = "one")]
        sd: f64,
    },
    Bernoulli {
        p: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl Column {
    fn draw<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Column::Intercept => 1.0,
            Column::Constant { value } => value,
            Column::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            Column::Bernoulli { p } => {
                if rng.random::<f64>() < p {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuadratureMode {
    GaussHermite,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuadratureConfig {
    pub order: usize,
    pub mode: QuadratureMode,
    pub mc_samples: usize,
    pub seed: u64,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        QuadratureConfig {
            order: DEFAULT_GH_ORDER,
            mode: QuadratureMode::GaussHermite,
            mc_samples: 10_000,
            seed: 0,
        }
    }
}

impl QuadratureConfig {
    pub fn integration(&self) -> Integration {
        match self.mode {
            QuadratureMode::GaussHermite => Integration::GaussHermite { order: self.order },
            QuadratureMode::MonteCarlo => Integration::MonteCarlo {
                samples: self.mc_samples,
                seed: self.seed,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub x_tol: f64,
    pub f_tol: f64,
    pub max_evals: Option<usize>,
    pub restarts: usize,
    /// Accepted for forward compatibility; restarts are deterministic and draw nothing.
    pub seed: u64,
    pub estimate_rho: bool,
    pub estimate_sigma12: bool,
    pub compute_se: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        let nm = NelderMeadConfig::default();
        let fit = FitConfig::default();
        OptimizerConfig {
            x_tol: nm.x_tol,
            f_tol: nm.f_tol,
            max_evals: nm.max_evals,
            restarts: fit.restarts,
            seed: 0,
            estimate_rho: fit.estimate_rho,
            estimate_sigma12: fit.estimate_sigma12,
            compute_se: fit.compute_se,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

fn schema_validator() -> &'static jsonschema::Validator {
    static VALIDATOR: OnceLock<jsonschema::Validator> = OnceLock::new();
    VALIDATOR.get_or_init(|| {
        let schema: Value = serde_json::from_str(SCHEMA).expect("bundled schema is valid JSON");
        jsonschema::validator_for(&schema).expect("bundled schema compiles")
    })
}

/// Checks `value` against the bundled schema, listing every violation with its JSON pointer.
pub fn validate_schema(value: &Value) -> Result<()> {
    let errors: Vec<String> = schema_validator()
        .iter_errors(value)
        .map(|e| {
            let path = e.instance_path().to_string();
            format!("{}: {e}", if path.is_empty() { "/" } else { &path })
        })
        .collect();
    if !errors.is_empty() {
        bail!("configuration does not match the schema:\n  {}", errors.join("\n  "));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).context("configuration is not valid JSON")?;
        validate_schema(&value)?;
        let config: RunConfig = serde_json::from_value(value).context("configuration could not be decoded")?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().context("model")?;
        if let Some(p) = &self.params {
            p.validate(&self.model).context("params")?;
        }
        for (name, gens, d) in [("design.v1", &self.design.v1, &self.model.d1), ("design.v2", &self.design.v2, &self.model.d2)] {
            if gens.len() > d.len() {
                bail!("{name} lists {} outcomes, model has p = {}", gens.len(), d.len());
            }
            for (j, cols) in gens.iter().enumerate() {
                if cols.len() > d[j] {
                    bail!("{name}[{j}] lists {} columns, model declares {}", cols.len(), d[j]);
                }
                for (c, col) in cols.iter().enumerate() {
                    let ok = match *col {
                        Column::Intercept => true,
                        Column::Constant { value } => value.is_finite(),
                        Column::Normal { mean, sd } => mean.is_finite() && sd.is_finite() && sd >= 0.0,
                        Column::Bernoulli { p } => (0.0..=1.0).contains(&p),
                    };
                    if !ok {
                        bail!("{name}[{j}][{c}] has an invalid generator");
                    }
                }
            }
        }
        if self.quadrature.order == 0 || self.quadrature.mc_samples == 0 {
            bail!("quadrature.order and quadrature.mc_samples must be positive");
        }
        Ok(())
    }

    pub fn params(&self) -> Result<&Parameters> {
        self.params
            .as_ref()
            .context("this command needs a `params` block in the configuration")
    }

    pub fn fit_config(&self) -> FitConfig {
        let o = &self.optimizer;
        FitConfig {
            integration: self.quadrature.integration(),
            optimizer: NelderMeadConfig {
                x_tol: o.x_tol,
                f_tol: o.f_tol,
                max_evals: o.max_evals,
                ..NelderMeadConfig::default()
            },
            restarts: o.restarts,
            estimate_rho: o.estimate_rho,
            estimate_sigma12: o.estimate_sigma12,
            compute_se: o.compute_se,
            ..FitConfig::default()
        }
    }

    fn column(&self, block: &[Vec<Column>], j: usize, c: usize) -> Column {
        match block.get(j).and_then(|cols| cols.get(c)) {
            Some(col) => col.clone(),
            None if c == 0 => Column::Intercept,
            None => Column::Normal { mean: 0.0, sd: 1.0 },
        }
    }

    /// Covariates for every subject; subject `k` draws from its own stream.
    pub fn generate_design(&self, seed: u64) -> CovariateDesign {
        let spec = &self.model;
        let subjects = (0..spec.m)
            .map(|k| {
                let mut rng = stream(seed, Namespace::Covariates, k as u64);
                let mut v1 = Vec::with_capacity(spec.p);
                let mut v2 = Vec::with_capacity(spec.p);
                for j in 0..spec.p {
                    v1.push((0..spec.d1[j]).map(|c| self.column(&self.design.v1, j, c).draw(&mut rng)).collect());
                    v2.push((0..spec.d2[j]).map(|c| self.column(&self.design.v2, j, c).draw(&mut rng)).collect());
                }
                SubjectCovariates { v1, v2 }
            })
            .collect();
        CovariateDesign { subjects }
    }
}
