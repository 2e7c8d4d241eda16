//! Slow, independent validators.
//!
//! Nothing here is used on the fitting path. Each routine recomputes a
//! quantity by brute force (sampling or dense 2-D Simpson integration) so it
//! can be compared with the fast kernels in [`crate::probability`] and
//! [`crate::likelihood`]. The check suites back the CLI `check` command.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{gh_rule, integrand, log_likelihood, log_sum_exp};
use crate::model::{CovariateDesign, ModelSpec, Parameters, RandomEffectsCov};
use crate::probability::{self, crossing_probs, joe_conditional_cdf, joe_conditional_density, omega11, omega21};
use crate::simulator::{simulate_dataset, Dataset};
use crate::streams::{stream, Namespace};

pub const MIN_MC_LIKELIHOOD_SAMPLES: usize = 1_000;
pub const MIN_CDF_SAMPLES: usize = 100_000;
pub const MIN_EVENT_SAMPLES: usize = 100;
pub const MIN_BVN_RESOLUTION: usize = 200;

const CDF_BLOCK: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub passed: bool,
    pub n_samples: u64,
}

impl OracleReport {
    pub fn new(name: &str, statistic: f64, threshold: f64, n_samples: u64) -> Self {
        OracleReport {
            name: name.to_string(),
            statistic,
            threshold,
            passed: statistic <= threshold,
            n_samples,
        }
    }
}

/// Monte-Carlo marginal log-likelihood and its delta-method standard error.
pub fn mc_log_likelihood(dataset: &Dataset, params: &Parameters, n_samples: usize, seed: u64) -> Result<(f64, f64)> {
    if n_samples < MIN_MC_LIKELIHOOD_SAMPLES {
        return Err(Error::Config(format!(
            "Monte-Carlo likelihood needs at least {MIN_MC_LIKELIHOOD_SAMPLES} samples, got {n_samples}"
        )));
    }
    dataset.validate()?;
    let spec = &dataset.spec;
    params.validate(spec)?;
    let q = spec.q();
    let factor = params.sigma_b.cholesky()?;

    let per_subject: Vec<(f64, f64)> = dataset
        .subjects
        .par_iter()
        .enumerate()
        .map(|(k, subject)| {
            let mut scratch = Vec::with_capacity(spec.n * spec.p);
            if q == 0 {
                let (v, _) = integrand(spec, subject, params, &[], &mut scratch)?;
                return Ok((v, 0.0));
            }
            let mut rng = stream(seed, Namespace::Oracle, k as u64);
            let mut z = vec![0.0; q];
            let mut b = vec![0.0; q];
            let mut logs = Vec::with_capacity(n_samples);
            for _ in 0..n_samples {
                z.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
                for i in 0..q {
                    b[i] = (0..=i).map(|j| factor[(i, j)] * z[j]).sum();
                }
                logs.push(integrand(spec, subject, params, &b, &mut scratch)?.0);
            }
            let n = n_samples as f64;
            let est = log_sum_exp(&logs) - n.ln();
            // variance of log(mean w) from the ratios w / mean(w)
            let sum_sq: f64 = logs.iter().map(|l| ((l - est).exp() - 1.0).powi(2)).sum();
            let var = sum_sq / (n - 1.0) / n;
            if !est.is_finite() {
                return Err(Error::NumericalFailure {
                    subject: k,
                    reason: format!("Monte-Carlo log-likelihood is {est}"),
                });
            }
            Ok((est, var))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut values: Vec<f64> = per_subject.iter().map(|v| v.0).collect();
    values.sort_unstable_by(f64::total_cmp);
    let var: f64 = per_subject.iter().map(|v| v.1).sum();
    Ok((values.iter().sum(), var.sqrt()))
}

/// Draws `(Y, log R)` pairs, keeps those in the crossing event and returns
/// the sorted surviving `log R` values.
fn conditional_sample(
    eta1: f64,
    eta2: f64,
    a1: f64,
    a2: f64,
    rho: f64,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if n_samples < MIN_CDF_SAMPLES {
        return Err(Error::Config(format!(
            "empirical conditional CDF needs at least {MIN_CDF_SAMPLES} samples, got {n_samples}"
        )));
    }
    if !(rho.abs() < 1.0) || !(a1 < a2) {
        return Err(Error::InvalidParameter(format!(
            "need |rho| < 1 and a1 < a2 (rho = {rho}, a1 = {a1}, a2 = {a2})"
        )));
    }
    let s = (1.0 - rho * rho).sqrt();
    let blocks = n_samples.div_ceil(CDF_BLOCK);
    let mut kept: Vec<f64> = (0..blocks)
        .into_par_iter()
        .flat_map_iter(|blk| {
            let mut rng = stream(seed, Namespace::Oracle, blk as u64);
            let count = CDF_BLOCK.min(n_samples - blk * CDF_BLOCK);
            let mut out = Vec::new();
            for _ in 0..count {
                let e1: f64 = rng.sample(StandardNormal);
                let e2: f64 = rng.sample(StandardNormal);
                let y = eta1 + e1;
                if y < a1 || y > a2 {
                    out.push(eta2 + rho * e1 + s * e2);
                }
            }
            out
        })
        .collect();
    if kept.len() < MIN_EVENT_SAMPLES {
        return Err(Error::InsufficientSamples {
            survived: kept.len(),
            requested: n_samples,
            required: MIN_EVENT_SAMPLES,
        });
    }
    kept.sort_unstable_by(f64::total_cmp);
    Ok(kept)
}

/// Empirical `P(log R ≤ r | crossing event)` at every point of `r_grid`.
#[allow(clippy::too_many_arguments)]
pub fn empirical_conditional_cdf(
    eta1: f64,
    eta2: f64,
    a1: f64,
    a2: f64,
    rho: f64,
    r_grid: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    empirical_conditional_cdf_counted(eta1, eta2, a1, a2, rho, r_grid, n_samples, seed).map(|(p, _)| p)
}

/// As [`empirical_conditional_cdf`], also returning the number of draws that
/// fell in the event.
#[allow(clippy::too_many_arguments)]
pub fn empirical_conditional_cdf_counted(
    eta1: f64,
    eta2: f64,
    a1: f64,
    a2: f64,
    rho: f64,
    r_grid: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<(Vec<f64>, usize)> {
    let kept = conditional_sample(eta1, eta2, a1, a2, rho, n_samples, seed)?;
    let n = kept.len() as f64;
    let probs = r_grid
        .iter()
        .map(|&r| kept.partition_point(|&v| v <= r) as f64 / n)
        .collect();
    Ok((probs, kept.len()))
}

fn bvn_pdf(x: f64, y: f64, rho: f64) -> f64 {
    let det = 1.0 - rho * rho;
    (-(x * x - 2.0 * rho * x * y + y * y) / (2.0 * det)).exp() / (2.0 * PI * det.sqrt())
}

fn simpson_weights(n: usize) -> Vec<f64> {
    (0..=n)
        .map(|i| {
            if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            }
        })
        .collect()
}

/// `P(X ≤ z1, Y ≤ z2)` for a standard bivariate normal with correlation
/// `rho`, by composite Simpson integration of the density over
/// `(-8, z1] × (-8, z2]`. `resolution` is rounded up to an even number and
/// raised to at least 200.
pub fn integrate_bvn_rectangle(z1: f64, z2: f64, rho: f64, resolution: usize) -> f64 {
    let lo = -8.0;
    let (u1, u2) = (z1.min(8.0), z2.min(8.0));
    if u1 <= lo || u2 <= lo {
        return 0.0;
    }
    let n = resolution.max(MIN_BVN_RESOLUTION).next_multiple_of(2);
    let (hx, hy) = ((u1 - lo) / n as f64, (u2 - lo) / n as f64);
    let w = simpson_weights(n);
    // symmetric summation order so swapping (z1, z2) only transposes the grid
    let mut total = 0.0;
    for i in 0..=n {
        let x = lo + i as f64 * hx;
        let mut row = 0.0;
        for j in 0..=n {
            let y = lo + j as f64 * hy;
            row += w[j] * bvn_pdf(x, y, rho);
        }
        total += w[i] * row;
    }
    let sym = {
        let mut t = 0.0;
        for j in 0..=n {
            let y = lo + j as f64 * hy;
            let mut col = 0.0;
            for i in 0..=n {
                let x = lo + i as f64 * hx;
                col += w[i] * bvn_pdf(x, y, rho);
            }
            t += w[j] * col;
        }
        t
    };
    0.5 * (total + sym) * hx * hy / 9.0
}

/// Kernels a check suite runs against; swapped out by fault-injection tests.
#[derive(Debug, Clone, Copy)]
pub struct Kernels {
    pub normal_cdf: fn(f64) -> f64,
}

impl Default for Kernels {
    fn default() -> Self {
        Kernels {
            normal_cdf: probability::normal_cdf,
        }
    }
}

fn failed(name: &str, threshold: f64, err: &Error) -> OracleReport {
    let mut r = OracleReport::new(name, f64::INFINITY, threshold, 0);
    r.name = format!("{name} (error: {err})");
    r
}

fn report_from<F: FnOnce() -> Result<(f64, u64)>>(name: &str, threshold: f64, f: F) -> OracleReport {
    match f() {
        Ok((stat, n)) => OracleReport::new(name, stat, threshold, n),
        Err(e) => failed(name, threshold, &e),
    }
}

fn random_cells(seed: u64, count: usize) -> Vec<(f64, f64, f64, f64)> {
    let mut rng = stream(seed, Namespace::Oracle, 1 << 40);
    (0..count)
        .map(|_| {
            let a1 = rng.random_range(-3.0..1.0);
            let a2 = a1 + rng.random_range(0.1..3.0);
            let eta1 = rng.random_range(-2.0..2.0);
            let rho = rng.random_range(-0.95..0.95);
            (a1, a2, eta1, rho)
        })
        .collect()
}

fn simpson_integral<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    simpson_weights(n)
        .iter()
        .enumerate()
        .map(|(i, w)| w * f(lo + i as f64 * h))
        .sum::<f64>()
        * h
        / 3.0
}

/// Grid of `(z1, z2, rho)` used for the bivariate CDF comparison.
pub fn bvn_grid() -> Vec<(f64, f64, f64)> {
    let z = [-2.0, -1.0, 0.0, 1.0, 2.0];
    let mut out = Vec::new();
    for &rho in &[-0.8, 0.0, 0.8] {
        for &z1 in &z {
            for &z2 in &z {
                out.push((z1, z2, rho));
            }
        }
    }
    out
}

/// Twenty `(eta1, eta2, a1, a2, rho)` cases for the density normalisation.
pub fn density_grid() -> Vec<(f64, f64, f64, f64, f64)> {
    let mut out = Vec::new();
    for &(eta1, a1, a2) in &[(0.0, -1.0, 1.0), (0.5, -1.0, 1.5), (-1.2, -0.5, 2.0), (2.0, -1.5, 0.5)] {
        for &rho in &[-0.9, -0.4, 0.0, 0.4, 0.9] {
            out.push((eta1, 0.3, a1, a2, rho));
        }
    }
    out
}

/// Largest `|∫ joe_conditional_density - 1|` over [`density_grid`].
pub fn density_normalisation_error() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (eta1, eta2, a1, a2, rho) in density_grid() {
        let mut err = None;
        let total = simpson_integral(
            |r| {
                joe_conditional_density(r, eta1, eta2, a1, a2, rho).unwrap_or_else(|e| {
                    err = Some(e);
                    f64::NAN
                })
            },
            eta2 - 12.0,
            eta2 + 12.0,
            4000,
        );
        if let Some(e) = err {
            return Err(e);
        }
        worst = worst.max((total - 1.0).abs());
    }
    Ok(worst)
}

/// Kernel identities; runs in well under a second.
pub fn quick_checks(kernels: &Kernels) -> Vec<OracleReport> {
    let phi = kernels.normal_cdf;
    let mut out = Vec::new();

    let grid: Vec<f64> = (-800..=800).map(|i| i as f64 * 0.01).collect();
    let sym = grid.iter().map(|&z| (phi(z) + phi(-z) - 1.0).abs()).fold(0.0, f64::max);
    out.push(OracleReport::new("normal_cdf_symmetry", sym, 1e-14, grid.len() as u64));
    out.push(OracleReport::new(
        "normal_cdf_reference",
        (phi(1.959964) - 0.975).abs(),
        1e-6,
        1,
    ));

    let cells = random_cells(20_240_101, 1000);
    out.push(report_from("omega11_identity", 1e-14, || {
        let mut worst: f64 = 0.0;
        for &(a1, a2, eta1, _) in &cells {
            let cp = crossing_probs(a1, a2, eta1, 1.0)?;
            worst = worst.max((omega11(&cp) - cp.p_event * (1.0 - cp.p_event)).abs());
        }
        Ok((worst, cells.len() as u64))
    }));
    out.push(report_from("omega21_zero_at_rho_0", 0.0, || {
        let mut worst: f64 = 0.0;
        for (k, &(a1, a2, eta1, _)) in cells.iter().enumerate() {
            let r = -3.0 + 6.0 * (k as f64 / cells.len() as f64);
            worst = worst.max(omega21(r, eta1, 0.1, a1, a2, 0.0)?.abs());
        }
        Ok((worst, cells.len() as u64))
    }));
    out.push(report_from("joe_density_normalisation", 1e-6, || {
        Ok((density_normalisation_error()?, density_grid().len() as u64))
    }));
    out.push(report_from("bvn_arcsine", 1e-6, || {
        Ok(((probability::bivariate_normal_cdf(0.0, 0.0, 0.5)? - 1.0 / 3.0).abs(), 1))
    }));
    out.push(report_from("bvn_vs_rectangle", 1e-6, || {
        let grid = bvn_grid();
        let diffs = grid
            .par_iter()
            .map(|&(z1, z2, rho)| {
                Ok((probability::bivariate_normal_cdf(z1, z2, rho)? - integrate_bvn_rectangle(z1, z2, rho, 400)).abs())
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok((diffs.into_iter().fold(0.0, f64::max), grid.len() as u64))
    }));
    out.push(report_from("gauss_hermite_order_2", 1e-14, || {
        let rule = gh_rule(2)?;
        let half_sqrt_pi = PI.sqrt() / 2.0;
        let stat = rule
            .nodes
            .iter()
            .map(|x| (x.abs() - std::f64::consts::FRAC_1_SQRT_2).abs())
            .chain(rule.weights.iter().map(|w| (w - half_sqrt_pi).abs()))
            .fold(0.0, f64::max);
        Ok((stat, 2))
    }));
    out
}

/// Dataset and parameters used by the likelihood comparisons.
pub fn reference_case(m: usize, n: usize, seed: u64) -> Result<(Dataset, Parameters)> {
    let spec = ModelSpec::intercept_only(m, n, 1, 1, 1, 1.0);
    let params = Parameters {
        beta1: vec![vec![0.5]],
        beta2: vec![vec![1.0]],
        a1: -1.0,
        a2: 1.5,
        sigma_b: RandomEffectsCov::from_full(1, 1, DMatrix::from_row_slice(2, 2, &[0.25, 0.1, 0.1, 0.25]))?,
        rho: 0.4,
    };
    let data = simulate_dataset(&spec, &params, &CovariateDesign::intercept_only(&spec), seed)?;
    Ok((data, params))
}

/// Largest `|joe - empirical|` over `r* ∈ [-3, 3]` for one correlation.
pub fn joe_vs_empirical(rho: f64, n_samples: usize, seed: u64) -> Result<f64> {
    let (eta1, eta2, a1, a2) = (0.0, 0.0, -1.0, 1.0);
    let grid: Vec<f64> = (0..=120).map(|i| -3.0 + i as f64 * 0.05).collect();
    let emp = empirical_conditional_cdf(eta1, eta2, a1, a2, rho, &grid, n_samples, seed)?;
    let mut worst: f64 = 0.0;
    for (r, e) in grid.iter().zip(&emp) {
        worst = worst.max((joe_conditional_cdf(*r, eta1, eta2, a1, a2, rho)? - e).abs());
    }
    Ok(worst)
}

/// Quick checks plus every Monte-Carlo comparison.
pub fn full_checks(kernels: &Kernels) -> Vec<OracleReport> {
    let mut out = quick_checks(kernels);
    let n_cdf = 1_000_000;
    for (k, rho) in [-0.5, 0.0, 0.5].into_iter().enumerate() {
        out.push(report_from(&format!("joe_cdf_vs_simulation_rho_{rho}"), 3e-3, || {
            Ok((joe_vs_empirical(rho, n_cdf, 500 + k as u64)?, n_cdf as u64))
        }));
    }
    let reference = reference_case(20, 3, 2024);
    let n_mc = 1_000_000;
    out.push(report_from("gauss_hermite_vs_monte_carlo_loglik", 3.0, || {
        let (data, params) = reference.clone()?;
        let gh = log_likelihood(&data, &params, &gh_rule(20)?)?;
        let (mc, se) = mc_log_likelihood(&data, &params, n_mc, 99)?;
        Ok(((gh - mc).abs() / se, n_mc as u64))
    }));
    out.push(report_from("gauss_hermite_order_convergence", 1e-6, || {
        let (data, params) = reference.clone()?;
        let a = log_likelihood(&data, &params, &gh_rule(20)?)?;
        let b = log_likelihood(&data, &params, &gh_rule(30)?)?;
        Ok(((a - b).abs() / a.abs(), 30 * 30))
    }));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::likelihood::{log_likelihood_with, IntegrationPoints};
    use crate::probability::normal_cdf;
    use approx::assert_abs_diff_eq;

    #[test]
    fn rectangle_examples() {
        for &(z1, z2) in &[(0.0, 0.0), (-1.3, 0.7), (2.1, 1.4)] {
            assert_abs_diff_eq!(
                integrate_bvn_rectangle(z1, z2, 0.0, 400),
                normal_cdf(z1) * normal_cdf(z2),
                epsilon = 1e-7
            );
        }
        assert_abs_diff_eq!(integrate_bvn_rectangle(0.0, 0.0, 0.5, 400), 1.0 / 3.0, epsilon = 1e-6);
        for &rho in &[-0.7, 0.2, 0.9] {
            let a = integrate_bvn_rectangle(-0.4, 1.3, rho, 400);
            let b = integrate_bvn_rectangle(1.3, -0.4, rho, 400);
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn mc_without_random_effects_is_exact() {
        let spec = ModelSpec::intercept_only(8, 3, 1, 0, 0, 1.0);
        let (_, mut params) = reference_case(1, 1, 0).unwrap();
        params.sigma_b = RandomEffectsCov::identity(0, 0);
        let data = simulate_dataset(&spec, &params, &CovariateDesign::intercept_only(&spec), 5).unwrap();
        let gh = log_likelihood(&data, &params, &gh_rule(10).unwrap()).unwrap();
        let (mc, se) = mc_log_likelihood(&data, &params, 1000, 1).unwrap();
        assert_eq!(gh, mc);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn mc_degenerate_covariance_is_plug_in() {
        let (data, mut params) = reference_case(10, 3, 8).unwrap();
        params.sigma_b = RandomEffectsCov::scaled_identity(1, 1, 1e-10);
        let zero = IntegrationPoints::gauss_hermite(&gh_rule(1).unwrap(), 2).unwrap();
        let plug_in = log_likelihood_with(&data, &params, &zero).unwrap().loglik;
        let (mc, _) = mc_log_likelihood(&data, &params, 2000, 3).unwrap();
        assert!((mc - plug_in).abs() < 1e-3, "{mc} vs {plug_in}");
    }

    #[test]
    fn mc_rejects_small_samples() {
        let (data, params) = reference_case(2, 2, 0).unwrap();
        assert!(matches!(mc_log_likelihood(&data, &params, 999, 0), Err(Error::Config(_))));
    }

    #[test]
    fn mc_matches_quadrature_on_small_case() {
        let (data, params) = reference_case(6, 3, 21).unwrap();
        let gh = log_likelihood(&data, &params, &gh_rule(20).unwrap()).unwrap();
        let (mc, se) = mc_log_likelihood(&data, &params, 100_000, 4).unwrap();
        assert!((gh - mc).abs() <= 3.0 * se, "gh {gh} mc {mc} se {se}");
    }

    #[test]
    fn empirical_cdf_independent_case() {
        let grid = [-1.5, -0.2, 0.0, 0.8, 2.0];
        let (probs, kept) = empirical_conditional_cdf_counted(0.2, 0.4, -1.0, 1.0, 0.0, &grid, 200_000, 6).unwrap();
        for (r, p) in grid.iter().zip(&probs) {
            let truth = normal_cdf(r - 0.4);
            let se = (truth * (1.0 - truth) / kept as f64).sqrt();
            assert!((p - truth).abs() <= 3.0 * se.max(1e-4), "{r}: {p} vs {truth}");
        }
    }

    #[test]
    fn empirical_cdf_starved_event() {
        let r = empirical_conditional_cdf(0.0, 0.0, -50.0, 50.0, 0.3, &[0.0], 100_000, 1);
        assert!(matches!(r, Err(Error::InsufficientSamples { survived: 0, .. })));
        // both boundaries far above: the lower tail covers nearly every draw
        let (_, kept) = empirical_conditional_cdf_counted(0.0, 0.0, 50.0, 60.0, 0.3, &[0.0], 100_000, 1).unwrap();
        assert_eq!(kept, 100_000);
        assert!(empirical_conditional_cdf(0.0, 0.0, -1.0, 1.0, 0.3, &[0.0], 99_999, 1).is_err());
    }

    #[test]
    fn empirical_cdf_is_deterministic() {
        let grid = [-1.0, 0.0, 1.0];
        let a = empirical_conditional_cdf(0.0, 0.0, -1.0, 1.0, 0.5, &grid, 150_000, 9).unwrap();
        let b = empirical_conditional_cdf(0.0, 0.0, -1.0, 1.0, 0.5, &grid, 150_000, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn report_pass_flag_follows_threshold() {
        assert!(OracleReport::new("x", 1.0, 1.0, 0).passed);
        assert!(!OracleReport::new("x", 1.0 + 1e-12, 1.0, 0).passed);
        assert!(!OracleReport::new("x", f64::NAN, 1.0, 0).passed);
    }

    #[test]
    fn quick_suite_passes_and_detects_corruption() {
        let reports = quick_checks(&Kernels::default());
        for r in &reports {
            assert!(r.passed, "{r:?}");
        }
        fn skewed(z: f64) -> f64 {
            normal_cdf(z) + 1e-3 * normal_cdf(z).powi(2)
        }
        let bad = quick_checks(&Kernels { normal_cdf: skewed });
        let sym = bad.iter().find(|r| r.name == "normal_cdf_symmetry").unwrap();
        assert!(!sym.passed);
    }
}
