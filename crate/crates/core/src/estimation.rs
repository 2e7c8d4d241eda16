//! Maximum-likelihood fitting on the unconstrained scale.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{evaluate, Integration, IntegrationPoints};
use crate::model::{pack, unpack, ModelSpec, Parameters, RandomEffectsCov, UnconstrainedParams};
use crate::nelder_mead::{nelder_mead, NelderMeadConfig, TraceEntry};
use crate::simulator::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub integration: Integration,
    pub optimizer: NelderMeadConfig,
    /// Extra Nelder-Mead runs started from the incumbent with a fresh simplex.
    pub restarts: usize,
    pub estimate_rho: bool,
    /// When false (or when either random-effect block is empty) `sigma12` stays 0.
    pub estimate_sigma12: bool,
    pub compute_se: bool,
    /// Relative central-difference step for the Hessian.
    pub hessian_step: f64,
    pub keep_trace: bool,
    /// Starting point; `None` uses [`initial_guess`].
    pub init: Option<Parameters>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            integration: Integration::default(),
            optimizer: NelderMeadConfig::default(),
            restarts: 2,
            estimate_rho: true,
            estimate_sigma12: true,
            compute_se: false,
            hessian_step: 1e-4,
            keep_trace: true,
            init: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub non_finite_evals: usize,
    pub initial_rank_deficient: bool,
    pub clamp_events: u64,
    /// Which theta coordinates were optimized.
    pub free: Vec<bool>,
    pub se_note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub params_hat: Parameters,
    pub theta_hat: UnconstrainedParams,
    pub loglik: f64,
    pub n_evals: usize,
    pub converged: bool,
    pub restarts_used: usize,
    /// Standard errors on the unconstrained scale; `null` for fixed coordinates.
    pub se: Option<Vec<Option<f64>>>,
    pub trace: Option<Vec<TraceEntry>>,
    pub diagnostics: FitDiagnostics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialGuess {
    pub params: Parameters,
    pub rank_deficient: bool,
}

/// Least-squares coefficients of `y` on the rows of `x`; `None` if `x` lacks full column rank.
fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Option<Vec<f64>> {
    let d = x.ncols();
    if d == 0 {
        return Some(Vec::new());
    }
    if x.nrows() < d {
        return None;
    }
    let svd = x.clone().svd(true, true);
    let tol = svd.singular_values.max() * 1e-10 * x.nrows().max(d) as f64;
    if svd.rank(tol) < d {
        return None;
    }
    svd.solve(y, tol).ok().map(|b| b.iter().copied().collect())
}

/// Linear-interpolated empirical quantile of sorted data.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn initial_guess(dataset: &Dataset) -> Result<Parameters> {
    initial_guess_with_diagnostics(dataset).map(|g| g.params)
}

/// Pooled least squares for the fixed effects, 10th/90th percentiles of the
/// increments for the boundaries, `0.1 I` for `sigma_b` and `rho = 0`.
pub fn initial_guess_with_diagnostics(dataset: &Dataset) -> Result<InitialGuess> {
    dataset.validate()?;
    let spec = &dataset.spec;
    if dataset.subjects.is_empty() {
        return Err(Error::Config("cannot build an initial guess from an empty dataset".into()));
    }
    let rows = dataset.subjects.len() * spec.n;
    let mut rank_deficient = false;
    let mut beta1 = Vec::with_capacity(spec.p);
    let mut beta2 = Vec::with_capacity(spec.p);
    for j in 0..spec.p {
        let mut x1 = DMatrix::zeros(rows, spec.d1[j]);
        let mut x2 = DMatrix::zeros(rows, spec.d2[j]);
        let mut y = DVector::zeros(rows);
        let mut r = DVector::zeros(rows);
        let mut row = 0;
        for s in &dataset.subjects {
            for i in 0..spec.n {
                for (c, v) in s.covariates.v1[j].iter().enumerate() {
                    x1[(row, c)] = spec.dt * v;
                }
                for (c, v) in s.covariates.v2[j].iter().enumerate() {
                    x2[(row, c)] = *v;
                }
                y[row] = s.y[(i, j)];
                r[row] = s.r_star[(i, j)];
                row += 1;
            }
        }
        let mut solve = |x: &DMatrix<f64>, t: &DVector<f64>| {
            least_squares(x, t).unwrap_or_else(|| {
                rank_deficient = true;
                vec![0.0; x.ncols()]
            })
        };
        beta1.push(solve(&x1, &y));
        beta2.push(solve(&x2, &r));
    }

    let mut ys: Vec<f64> = dataset.subjects.iter().flat_map(|s| s.y.iter().copied()).collect();
    ys.sort_unstable_by(f64::total_cmp);
    let a1 = quantile(&ys, 0.1);
    let mut a2 = quantile(&ys, 0.9);
    if a2 <= a1 {
        a2 = a1 + 1.0;
    }
    Ok(InitialGuess {
        params: Parameters {
            beta1,
            beta2,
            a1,
            a2,
            sigma_b: RandomEffectsCov::scaled_identity(spec.q1, spec.q2, 0.1),
            rho: 0.0,
        },
        rank_deficient,
    })
}

/// Coordinates the optimizer may move.
fn free_mask(spec: &ModelSpec, config: &FitConfig) -> Vec<bool> {
    let layout = spec.layout();
    let mut free = vec![true; layout.len()];
    if !config.estimate_rho {
        free[layout.rho] = false;
    }
    if !config.estimate_sigma12 {
        for i in layout.cross_block() {
            free[i] = false;
        }
    }
    free
}

fn embed(base: &[f64], free: &[bool], sub: &[f64]) -> Vec<f64> {
    let mut it = sub.iter();
    base.iter()
        .zip(free)
        .map(|(b, &f)| if f { *it.next().expect("free count") } else { *b })
        .collect()
}

fn negative_loglik(dataset: &Dataset, points: &IntegrationPoints, theta: &[f64]) -> Result<f64> {
    let params = unpack(&dataset.spec, &UnconstrainedParams(theta.to_vec()))?;
    evaluate(dataset, &params, points).map(|e| -e.loglik)
}

/// Maximum-likelihood fit by Nelder-Mead on `-log L`, with restarts.
pub fn fit(dataset: &Dataset, config: &FitConfig) -> Result<FitResult> {
    let spec = &dataset.spec;
    let guess = match &config.init {
        Some(p) => {
            dataset.validate()?;
            p.validate(spec)?;
            InitialGuess {
                params: p.clone(),
                rank_deficient: false,
            }
        }
        None => initial_guess_with_diagnostics(dataset)?,
    };
    let mut start = guess.params.clone();
    if !config.estimate_sigma12 {
        let s = &start.sigma_b;
        start.sigma_b = RandomEffectsCov::from_blocks(s.sigma1(), s.sigma2(), DMatrix::zeros(spec.q1, spec.q2))?;
    }
    let theta0 = pack(spec, &start)?.0;
    let free = free_mask(spec, config);
    let points = IntegrationPoints::new(&config.integration, spec.q())?;

    if let Err(e) = negative_loglik(dataset, &points, &theta0) {
        return Err(Error::Objective {
            theta: theta0,
            source: Box::new(e),
        });
    }

    let objective = |sub: &[f64]| {
        let theta = embed(&theta0, &free, sub);
        negative_loglik(dataset, &points, &theta).unwrap_or(f64::INFINITY)
    };
    let x0: Vec<f64> = theta0.iter().zip(&free).filter(|(_, &f)| f).map(|(t, _)| *t).collect();

    let budget = config.optimizer.eval_budget(x0.len());
    let mut run_cfg = config.optimizer.clone();
    run_cfg.max_evals = Some(budget);
    let mut best = nelder_mead(objective, &x0, &run_cfg)?;
    let mut n_evals = best.n_evals;
    let mut non_finite = best.non_finite_evals;
    let mut trace = best.trace.clone();
    let mut converged = best.converged;
    let mut restarts_used = 0;

    while restarts_used < config.restarts && n_evals < budget {
        run_cfg.max_evals = Some(budget - n_evals);
        run_cfg.initial_step = None;
        let run = nelder_mead(objective, &best.x_min, &run_cfg)?;
        restarts_used += 1;
        n_evals += run.n_evals;
        non_finite += run.non_finite_evals;
        trace.extend(run.trace.iter().copied());
        converged = run.converged;
        let gain = best.f_min - run.f_min;
        if run.f_min <= best.f_min {
            best = run;
        }
        if gain <= config.optimizer.f_tol {
            break;
        }
    }

    let theta_hat = embed(&theta0, &free, &best.x_min);
    let params_hat = unpack(spec, &UnconstrainedParams(theta_hat.clone()))?;
    let at_hat = evaluate(dataset, &params_hat, &points)?;

    let (se, se_note) = if config.compute_se {
        let report = numerical_hessian_se(objective, &best.x_min, config.hessian_step);
        let se = report.se.map(|v| {
            let mut it = v.into_iter();
            free.iter().map(|&f| if f { it.next() } else { None }).collect()
        });
        (se, report.diagnostic)
    } else {
        (None, None)
    };

    Ok(FitResult {
        params_hat,
        theta_hat: UnconstrainedParams(theta_hat),
        loglik: -best.f_min,
        n_evals,
        converged,
        restarts_used,
        se,
        trace: config.keep_trace.then_some(trace),
        diagnostics: FitDiagnostics {
            non_finite_evals: non_finite,
            initial_rank_deficient: guess.rank_deficient,
            clamp_events: at_hat.clamp_events,
            free,
            se_note,
        },
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianReport {
    pub hessian: DMatrix<f64>,
    pub se: Option<Vec<f64>>,
    pub diagnostic: Option<String>,
}

/// Standard errors from the inverse of a central-difference Hessian of
/// `objective` (a negative log-likelihood) at `theta_hat`. Steps are
/// `step * max(1, |theta_i|)`.
pub fn numerical_hessian_se<F>(mut objective: F, theta_hat: &[f64], step: f64) -> HessianReport
where
    F: FnMut(&[f64]) -> f64,
{
    let d = theta_hat.len();
    let h: Vec<f64> = theta_hat.iter().map(|t| step * t.abs().max(1.0)).collect();
    let mut at = |shifts: &[(usize, f64)]| {
        let mut x = theta_hat.to_vec();
        for &(i, s) in shifts {
            x[i] += s;
        }
        objective(&x)
    };
    let f0 = at(&[]);
    let mut hess = DMatrix::zeros(d, d);
    for i in 0..d {
        let fp = at(&[(i, h[i])]);
        let fm = at(&[(i, -h[i])]);
        hess[(i, i)] = (fp - 2.0 * f0 + fm) / (h[i] * h[i]);
        for j in 0..i {
            let fpp = at(&[(i, h[i]), (j, h[j])]);
            let fpm = at(&[(i, h[i]), (j, -h[j])]);
            let fmp = at(&[(i, -h[i]), (j, h[j])]);
            let fmm = at(&[(i, -h[i]), (j, -h[j])]);
            let v = (fpp - fpm - fmp + fmm) / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    if hess.iter().any(|v| !v.is_finite()) {
        return HessianReport {
            hessian: hess,
            se: None,
            diagnostic: Some("Hessian has non-finite entries".into()),
        };
    }
    let eig = SymmetricEigen::new(hess.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.eigenvalues.min();
    if !(min > 1e-10 * max) {
        return HessianReport {
            hessian: hess,
            se: None,
            diagnostic: Some(format!(
                "Hessian is singular or indefinite (eigenvalues in [{min:e}, {max:e}])"
            )),
        };
    }
    let inv = &eig.eigenvectors
        * DMatrix::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v))
        * eig.eigenvectors.transpose();
    HessianReport {
        se: Some((0..d).map(|i| inv[(i, i)].sqrt()).collect()),
        hessian: hess,
        diagnostic: None,
    }
}
