//! Marginal log-likelihood with the random effects integrated out.
//!
//! Each subject contributes
//!
//! ```text
//! log ∫ Π_ij f(r*_ij | event, b2) P(event | b1) φ(b; sigma_b) db
//! ```
//!
//! where `f` is the Joe-approximated conditional density of the log reaction
//! time. The integral runs over standard-normal integration points `z`
//! mapped through the Cholesky factor of `sigma_b`; with Gauss-Hermite
//! points this is the usual `b = sqrt(2) L x` substitution.

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{predictor, ModelSpec, Parameters};
use crate::probability::{crossing_probs_unchecked, joe_log_density_unchecked};
use crate::simulator::{Dataset, SubjectData};
use crate::streams::{stream, Namespace};

pub const DEFAULT_GH_ORDER: usize = 15;
pub const MAX_GH_ORDER: usize = 100;
/// Largest random-effect dimension handled by tensor-product quadrature.
pub const MAX_GH_DIMENSION: usize = 4;

/// Gauss-Hermite rule for weight `exp(-x^2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    pub order: usize,
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Nodes by Newton iteration on the orthonormal Hermite recurrence, with the
/// classical asymptotic starting guesses.
pub fn gh_rule(order: usize) -> Result<QuadratureRule> {
    if !(1..=MAX_GH_ORDER).contains(&order) {
        return Err(Error::Config(format!(
            "Gauss-Hermite order must be between 1 and {MAX_GH_ORDER}, got {order}"
        )));
    }
    let n = order;
    let pim4 = std::f64::consts::PI.powf(-0.25);
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    let mut z: f64 = 0.0;
    for i in 0..n.div_ceil(2) {
        z = match i {
            0 => (2.0 * n as f64 + 1.0).sqrt() - 1.85575 * (2.0 * n as f64 + 1.0).powf(-1.0 / 6.0),
            1 => z - 1.14 * (n as f64).powf(0.426) / z,
            2 => 1.86 * z - 0.86 * x[0],
            3 => 1.91 * z - 0.91 * x[1],
            _ => 2.0 * z - x[i - 2],
        };
        let mut pp = 0.0;
        for _ in 0..100 {
            let (mut p1, mut p2) = (pim4, 0.0);
            for j in 1..=n {
                let p3 = p2;
                p2 = p1;
                p1 = z * (2.0 / j as f64).sqrt() * p2 - ((j - 1) as f64 / j as f64).sqrt() * p3;
            }
            pp = (2.0 * n as f64).sqrt() * p2;
            let step = p1 / pp;
            z -= step;
            if step.abs() <= 1e-15 * z.abs().max(1.0) {
                break;
            }
        }
        x[i] = z;
        x[n - 1 - i] = -z;
        w[i] = 2.0 / (pp * pp);
        w[n - 1 - i] = w[i];
    }
    if n % 2 == 1 {
        x[n / 2] = 0.0;
    }
    // ascending order
    x.reverse();
    w.reverse();
    Ok(QuadratureRule {
        order,
        nodes: x,
        weights: w,
    })
}

/// How the random effects are integrated out.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum Integration {
    GaussHermite { order: usize },
    /// Plain Monte Carlo with fixed draws shared by all subjects.
    MonteCarlo { samples: usize, seed: u64 },
}

impl Default for Integration {
    fn default() -> Self {
        Integration::GaussHermite { order: DEFAULT_GH_ORDER }
    }
}

/// Standard-normal integration points `z` with log weights; `b = L z`.
#[derive(Debug, Clone)]
pub struct IntegrationPoints {
    dim: usize,
    log_weights: Vec<f64>,
    /// Row-major, `dim` entries per point.
    points: Vec<f64>,
}

impl IntegrationPoints {
    pub fn new(integration: &Integration, dim: usize) -> Result<Self> {
        match *integration {
            Integration::GaussHermite { order } => Self::gauss_hermite(&gh_rule(order)?, dim),
            Integration::MonteCarlo { samples, seed } => Self::monte_carlo(samples, seed, dim),
        }
    }

    /// Tensor product of `rule` over `dim` axes.
    pub fn gauss_hermite(rule: &QuadratureRule, dim: usize) -> Result<Self> {
        if dim > MAX_GH_DIMENSION {
            return Err(Error::Config(format!(
                "tensor Gauss-Hermite supports at most {MAX_GH_DIMENSION} random-effect dimensions, got {dim}; use Monte-Carlo integration"
            )));
        }
        let order = rule.order;
        let total = order.pow(dim as u32);
        let scale = std::f64::consts::SQRT_2;
        let log_norm = -(dim as f64) * 0.5 * std::f64::consts::PI.ln();
        let log_w: Vec<f64> = rule.weights.iter().map(|w| w.ln()).collect();
        let mut log_weights = Vec::with_capacity(total);
        let mut points = Vec::with_capacity(total * dim);
        let mut idx = vec![0usize; dim];
        for _ in 0..total {
            log_weights.push(log_norm + idx.iter().map(|&i| log_w[i]).sum::<f64>());
            points.extend(idx.iter().map(|&i| scale * rule.nodes[i]));
            // odometer, last axis fastest
            for axis in (0..dim).rev() {
                idx[axis] += 1;
                if idx[axis] < order {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Ok(IntegrationPoints {
            dim,
            log_weights,
            points,
        })
    }

    pub fn monte_carlo(samples: usize, seed: u64, dim: usize) -> Result<Self> {
        if samples == 0 {
            return Err(Error::Config("Monte-Carlo integration needs at least one sample".into()));
        }
        let mut rng = stream(seed, Namespace::Integration, 0);
        let points = if dim == 0 {
            Vec::new()
        } else {
            (0..samples * dim).map(|_| StandardNormal.sample(&mut rng)).collect()
        };
        let samples = if dim == 0 { 1 } else { samples };
        Ok(IntegrationPoints {
            dim,
            log_weights: vec![-(samples as f64).ln(); samples],
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.log_weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Random-effect points `L z` for the given factor.
    fn mapped(&self, factor: &DMatrix<f64>) -> Vec<f64> {
        let q = self.dim;
        if q == 0 {
            return Vec::new();
        }
        self.points
            .chunks(q)
            .flat_map(|z| (0..q).map(move |i| (0..=i).map(|j| factor[(i, j)] * z[j]).sum::<f64>()))
            .collect()
    }
}

/// Log-likelihood together with evaluation diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodEval {
    pub loglik: f64,
    pub per_subject: Vec<f64>,
    /// Cell evaluations where a tail probability hit the clamp.
    pub clamp_events: u64,
}

/// Log of the integrand for one subject at random-effect point `b = (b1, b2)`.
pub fn subject_log_integrand(spec: &ModelSpec, subject: &SubjectData, params: &Parameters, b: &[f64]) -> Result<f64> {
    if b.len() != spec.q() {
        return Err(Error::Config(format!(
            "random-effect point has length {}, expected {}",
            b.len(),
            spec.q()
        )));
    }
    subject.validate(spec)?;
    params.validate(spec)?;
    let mut scratch = Vec::new();
    integrand(spec, subject, params, b, &mut scratch).map(|(v, _)| v)
}

/// Sums the sorted cell terms so the result does not depend on cell order.
pub(crate) fn integrand(
    spec: &ModelSpec,
    subject: &SubjectData,
    params: &Parameters,
    b: &[f64],
    scratch: &mut Vec<f64>,
) -> Result<(f64, u64)> {
    let (b1, b2) = b.split_at(spec.q1);
    let cov = &subject.covariates;
    let (a1, a2, rho) = (params.a1, params.a2, params.rho);
    let mut clamps = 0;
    scratch.clear();
    for j in 0..spec.p {
        let eta1 = spec.dt * predictor(&cov.v1[j], &params.beta1[j], &spec.u1_index[j], b1);
        let eta2 = predictor(&cov.v2[j], &params.beta2[j], &spec.u2_index[j], b2);
        let cp = crossing_probs_unchecked(a1, a2, eta1, 1.0);
        if cp.clamped {
            clamps += spec.n as u64;
        }
        let log_event = cp.p_event.ln();
        for i in 0..spec.n {
            let x = subject.r_star[(i, j)] - eta2;
            let log_density = joe_log_density_unchecked(x, eta1, a1, a2, rho, &cp).map_err(|e| match e {
                Error::DegenerateConditioning { omega11, .. } => Error::DegenerateConditioning {
                    omega11,
                    cell: Some((i, j)),
                },
                other => other,
            })?;
            scratch.push(log_density + log_event);
        }
    }
    scratch.sort_unstable_by(f64::total_cmp);
    Ok((scratch.iter().sum(), clamps))
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Marginal log-likelihood by tensor Gauss-Hermite quadrature.
pub fn log_likelihood(dataset: &Dataset, params: &Parameters, rule: &QuadratureRule) -> Result<f64> {
    let points = IntegrationPoints::gauss_hermite(rule, dataset.spec.q())?;
    log_likelihood_with(dataset, params, &points).map(|e| e.loglik)
}

pub fn log_likelihood_with(dataset: &Dataset, params: &Parameters, points: &IntegrationPoints) -> Result<LikelihoodEval> {
    let spec = &dataset.spec;
    dataset.validate()?;
    params.validate(spec)?;
    evaluate(dataset, params, points)
}

/// As [`log_likelihood_with`] without revalidating the dataset; the
/// optimizer calls this thousands of times on the same data.
pub(crate) fn evaluate(dataset: &Dataset, params: &Parameters, points: &IntegrationPoints) -> Result<LikelihoodEval> {
    let spec = &dataset.spec;
    if points.dim() != spec.q() {
        return Err(Error::Config(format!(
            "integration points have dimension {}, model has {} random effects",
            points.dim(),
            spec.q()
        )));
    }
    let factor = params.sigma_b.cholesky()?;
    let mapped = points.mapped(&factor);
    let q = spec.q();

    let per_subject: Vec<(f64, u64)> = dataset
        .subjects
        .par_iter()
        .enumerate()
        .map(|(k, subject)| {
            let mut scratch = Vec::with_capacity(spec.n * spec.p);
            let mut terms = Vec::with_capacity(points.len());
            let mut clamps = 0;
            for (idx, log_w) in points.log_weights.iter().enumerate() {
                let b = &mapped[idx * q..(idx + 1) * q];
                let (value, c) = integrand(spec, subject, params, b, &mut scratch)?;
                clamps += c;
                terms.push(log_w + value);
            }
            let value = log_sum_exp(&terms);
            if !value.is_finite() {
                return Err(Error::NumericalFailure {
                    subject: k,
                    reason: format!("marginal log-likelihood is {value}"),
                });
            }
            Ok((value, clamps))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sorted: Vec<f64> = per_subject.iter().map(|(v, _)| *v).collect();
    sorted.sort_unstable_by(f64::total_cmp);
    Ok(LikelihoodEval {
        loglik: sorted.iter().sum(),
        per_subject: per_subject.iter().map(|(v, _)| *v).collect(),
        clamp_events: per_subject.iter().map(|(_, c)| c).sum(),
    })
}
