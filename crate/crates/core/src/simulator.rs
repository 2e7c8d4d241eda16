//! Synthetic data from the joint model.
//!
//! Per subject: draw `(b1, b2) ~ N(0, sigma_b)`, then for every time point
//! and outcome a correlated residual pair `(e1, e2)`:
//!
//! ```text
//! y_ij      = dt * mu_j + e1
//! r*_ij     = eta2_j + e2,        corr(e1, e2) = rho
//! crossed_ij = y_ij < a1 || y_ij > a2
//! ```
//!
//! Reaction times are produced for every cell; censoring is left to the
//! writer.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predictor, CovariateDesign, ModelSpec, Parameters, RandomEffectsCov, SubjectCovariates};
use crate::streams::{stream, Namespace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomEffects {
    pub b1: Vec<f64>,
    pub b2: Vec<f64>,
}

impl RandomEffects {
    pub fn joined(&self) -> Vec<f64> {
        self.b1.iter().chain(&self.b2).copied().collect()
    }
}

/// Observables of one subject, `n x p` each.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectData {
    pub y: DMatrix<f64>,
    pub r_star: DMatrix<f64>,
    pub crossed: DMatrix<bool>,
    pub covariates: SubjectCovariates,
}

impl SubjectData {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let shape = (spec.n, spec.p);
        if self.y.shape() != shape || self.r_star.shape() != shape || self.crossed.shape() != shape {
            return Err(Error::Config(format!(
                "subject observables must be {}x{}",
                spec.n, spec.p
            )));
        }
        if self.r_star.iter().chain(self.y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("subject observables must be finite".into()));
        }
        self.covariates.validate(spec)
    }
}

/// Levels `X(t_0), ..., X(t_n)` with `X(t_0) = 0`, one column per outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPath {
    pub x: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: ModelSpec,
    pub subjects: Vec<SubjectData>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.subjects.len() != self.spec.m {
            return Err(Error::Config(format!(
                "dataset has {} subjects but the model declares m = {}",
                self.subjects.len(),
                self.spec.m
            )));
        }
        self.subjects.iter().try_for_each(|s| s.validate(&self.spec))
    }

    pub fn cells(&self) -> usize {
        self.subjects.len() * self.spec.n * self.spec.p
    }
}

pub fn draw_random_effects<R: Rng + ?Sized>(sigma_b: &RandomEffectsCov, rng: &mut R) -> Result<RandomEffects> {
    let l = sigma_b.cholesky()?;
    Ok(draw_with_factor(&l, sigma_b.q1(), rng))
}

fn draw_with_factor<R: Rng + ?Sized>(l: &DMatrix<f64>, q1: usize, rng: &mut R) -> RandomEffects {
    let q = l.nrows();
    let z: Vec<f64> = (0..q).map(|_| rng.sample(StandardNormal)).collect();
    let b: Vec<f64> = (0..q).map(|i| (0..=i).map(|j| l[(i, j)] * z[j]).sum()).collect();
    RandomEffects {
        b1: b[..q1].to_vec(),
        b2: b[q1..].to_vec(),
    }
}

pub fn simulate_subject<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &Parameters,
    covariates: &SubjectCovariates,
    rng: &mut R,
) -> Result<SubjectData> {
    spec.validate()?;
    params.validate(spec)?;
    covariates.validate(spec)?;
    let l = params.sigma_b.cholesky()?;
    Ok(simulate_validated(spec, params, &l, covariates, rng).0)
}

fn simulate_validated<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &Parameters,
    factor: &DMatrix<f64>,
    covariates: &SubjectCovariates,
    rng: &mut R,
) -> (SubjectData, RandomEffects) {
    let effects = draw_with_factor(factor, spec.q1, rng);
    let drift: Vec<f64> = (0..spec.p)
        .map(|j| spec.dt * predictor(&covariates.v1[j], &params.beta1[j], &spec.u1_index[j], &effects.b1))
        .collect();
    let eta2: Vec<f64> = (0..spec.p)
        .map(|j| predictor(&covariates.v2[j], &params.beta2[j], &spec.u2_index[j], &effects.b2))
        .collect();
    let tail = (1.0 - params.rho * params.rho).sqrt();

    let mut y = DMatrix::zeros(spec.n, spec.p);
    let mut r_star = DMatrix::zeros(spec.n, spec.p);
    let mut crossed = DMatrix::from_element(spec.n, spec.p, false);
    for i in 0..spec.n {
        for j in 0..spec.p {
            let e1: f64 = rng.sample(StandardNormal);
            let e2: f64 = rng.sample(StandardNormal);
            let yij = drift[j] + e1;
            y[(i, j)] = yij;
            r_star[(i, j)] = eta2[j] + params.rho * e1 + tail * e2;
            crossed[(i, j)] = yij < params.a1 || yij > params.a2;
        }
    }
    let data = SubjectData {
        y,
        r_star,
        crossed,
        covariates: covariates.clone(),
    };
    (data, effects)
}

/// Prefix sums of the increments with a zero first row.
pub fn cumulative_path(subject: &SubjectData) -> LatentPath {
    let (n, p) = subject.y.shape();
    let mut x = DMatrix::zeros(n + 1, p);
    for j in 0..p {
        for i in 0..n {
            x[(i + 1, j)] = x[(i, j)] + subject.y[(i, j)];
        }
    }
    LatentPath { x }
}

impl LatentPath {
    /// Row-to-row differences; the inverse of [`cumulative_path`] up to rounding.
    pub fn increments(&self) -> DMatrix<f64> {
        let (rows, p) = self.x.shape();
        DMatrix::from_fn(rows.saturating_sub(1), p, |i, j| self.x[(i + 1, j)] - self.x[(i, j)])
    }
}

/// Simulates all subjects; subject `k` always draws from stream `k` of `seed`.
pub fn simulate_dataset(spec: &ModelSpec, params: &Parameters, design: &CovariateDesign, seed: u64) -> Result<Dataset> {
    simulate_dataset_with_effects(spec, params, design, seed).map(|(d, _)| d)
}

/// As [`simulate_dataset`], also returning the drawn random effects.
pub fn simulate_dataset_with_effects(
    spec: &ModelSpec,
    params: &Parameters,
    design: &CovariateDesign,
    seed: u64,
) -> Result<(Dataset, Vec<RandomEffects>)> {
    spec.validate()?;
    params.validate(spec)?;
    design.validate(spec)?;
    let factor = params.sigma_b.cholesky()?;
    let (subjects, effects): (Vec<_>, Vec<_>) = design
        .subjects
        .par_iter()
        .enumerate()
        .map(|(k, cov)| {
            let mut rng = stream(seed, Namespace::Simulation, k as u64);
            simulate_validated(spec, params, &factor, cov, &mut rng)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .unzip();
    Ok((
        Dataset {
            spec: spec.clone(),
            subjects,
        },
        effects,
    ))
}
