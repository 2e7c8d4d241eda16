//! End-to-end acceptance criteria. Each test prints one PASS/FAIL line to
//! stderr (unbuffered, so it shows even when the harness captures output).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use latent_rt::likelihood::log_likelihood;
use latent_rt::nelder_mead::TraceEntry;
use latent_rt::oracle::{empirical_conditional_cdf, integrate_bvn_rectangle, mc_log_likelihood};
use latent_rt::probability::{
    bivariate_normal_cdf, crossing_probs, joe_conditional_cdf, joe_conditional_density, omega11, omega21,
};
use latent_rt::{
    gh_rule, nelder_mead, simulate_dataset, CovariateDesign, FitResult, ModelSpec, NelderMeadConfig, Parameters,
    RandomEffectsCov,
};
use latent_rt_cli::config::RunConfig;
use latent_rt_cli::data::read_csv;
use nalgebra::DMatrix;
use tempfile::TempDir;

fn verdict(criterion: u32, title: &str, passed: bool, detail: &str) {
    let line = format!(
        "criterion {criterion} [{}] {title}: {detail}\n",
        if passed { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
    assert!(passed, "criterion {criterion} failed: {detail}");
}

fn truth() -> Parameters {
    Parameters {
        beta1: vec![vec![0.5]],
        beta2: vec![vec![1.0]],
        a1: -1.0,
        a2: 1.5,
        sigma_b: RandomEffectsCov::from_full(1, 1, DMatrix::from_row_slice(2, 2, &[0.25, 0.1, 0.1, 0.25])).unwrap(),
        rho: 0.4,
    }
}

/// Deterministic uniform draws for the random-case checks (splitmix64).
struct Draws(u64);

impl Draws {
    fn next(&mut self) -> f64 {
        self.0 = self.0.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.0;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next()
    }
}

fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
    }
    s * h / 3.0
}

#[test]
fn criterion_1_kernel_identities() {
    let start = Instant::now();
    let mut draws = Draws(1);
    let mut worst_o11: f64 = 0.0;
    let mut worst_o21: f64 = 0.0;
    for _ in 0..1000 {
        let a1 = draws.range(-3.0, 2.0);
        let a2 = a1 + draws.range(0.05, 4.0);
        let eta1 = draws.range(-3.0, 3.0);
        let cp = crossing_probs(a1, a2, eta1, 1.0).unwrap();
        worst_o11 = worst_o11.max((omega11(&cp) - cp.p_event * (1.0 - cp.p_event)).abs());
        let r = draws.range(-4.0, 4.0);
        let eta2 = draws.range(-2.0, 2.0);
        worst_o21 = worst_o21.max(omega21(r, eta1, eta2, a1, a2, 0.0).unwrap().abs());
    }

    let mut worst_mass: f64 = 0.0;
    for &(eta1, a1, a2) in &[(0.0, -1.0, 1.0), (0.7, -0.5, 1.5), (-1.5, -1.0, 0.5), (2.0, -2.0, 1.0)] {
        for &rho in &[-0.85, -0.4, 0.0, 0.3, 0.9] {
            let eta2 = -0.3;
            let mass = simpson(
                |r| joe_conditional_density(r, eta1, eta2, a1, a2, rho).unwrap(),
                eta2 - 12.0,
                eta2 + 12.0,
                4000,
            );
            worst_mass = worst_mass.max((mass - 1.0).abs());
        }
    }
    let elapsed = start.elapsed();
    let passed =
        worst_o11 <= 1e-14 && worst_o21 == 0.0 && worst_mass <= 1e-6 && elapsed < Duration::from_secs(10);
    verdict(
        1,
        "kernel identities",
        passed,
        &format!(
            "max|omega11 - p(1-p)| = {worst_o11:.2e} (<= 1e-14), max|omega21(rho=0)| = {worst_o21:e} (== 0), \
             max|mass - 1| over 20 cases = {worst_mass:.2e} (<= 1e-6), {:.2}s (< 10s)",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_2_bivariate_cdf() {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for &rho in &[-0.8, 0.0, 0.8] {
        for &z1 in &[-2.0, -1.0, 0.0, 1.0, 2.0] {
            for &z2 in &[-2.0, -1.0, 0.0, 1.0, 2.0] {
                let fast = bivariate_normal_cdf(z1, z2, rho).unwrap();
                let slow = integrate_bvn_rectangle(z1, z2, rho, 400);
                worst = worst.max((fast - slow).abs());
            }
        }
    }
    let arcsine = bivariate_normal_cdf(0.0, 0.0, 0.5).unwrap();
    let arcsine_err = (arcsine - 0.333333).abs();
    let elapsed = start.elapsed();
    let passed = worst <= 1e-6 && arcsine_err <= 1e-6 && elapsed < Duration::from_secs(60);
    verdict(
        2,
        "bivariate normal CDF",
        passed,
        &format!(
            "max|bvn - rectangle| over 5x5x3 grid = {worst:.2e} (<= 1e-6), \
             |bvn(0,0,0.5) - 0.333333| = {arcsine_err:.2e} (<= 1e-6), {:.2}s (< 60s)",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_3_joe_vs_simulation() {
    let start = Instant::now();
    let grid: Vec<f64> = (0..=120).map(|i| -3.0 + 0.05 * i as f64).collect();
    let mut details = Vec::new();
    let mut worst: f64 = 0.0;
    for (k, &rho) in [-0.5, 0.0, 0.5].iter().enumerate() {
        let emp = empirical_conditional_cdf(0.0, 0.0, -1.0, 1.0, rho, &grid, 1_000_000, 31 + k as u64).unwrap();
        let dev = grid
            .iter()
            .zip(&emp)
            .map(|(r, e)| (joe_conditional_cdf(*r, 0.0, 0.0, -1.0, 1.0, rho).unwrap() - e).abs())
            .fold(0.0, f64::max);
        details.push(format!("rho={rho}: {dev:.2e}"));
        worst = worst.max(dev);
    }
    let elapsed = start.elapsed();
    let passed = worst <= 3e-3 && elapsed < Duration::from_secs(120);
    verdict(
        3,
        "Joe approximation vs simulation",
        passed,
        &format!(
            "sup|joe - empirical| on [-3, 3] with 1e6 draws: {} (<= 3e-3), {:.2}s (< 120s)",
            details.join(", "),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_4_integrator_cross_validation() {
    let start = Instant::now();
    let spec = ModelSpec::intercept_only(20, 3, 1, 1, 1, 1.0);
    let params = truth();
    let data = simulate_dataset(&spec, &params, &CovariateDesign::intercept_only(&spec), 404).unwrap();
    let ll20 = log_likelihood(&data, &params, &gh_rule(20).unwrap()).unwrap();
    let ll30 = log_likelihood(&data, &params, &gh_rule(30).unwrap()).unwrap();
    let (mc, se) = mc_log_likelihood(&data, &params, 1_000_000, 405).unwrap();
    let z = (ll20 - mc).abs() / se;
    let rel = (ll20 - ll30).abs() / ll20.abs();
    let elapsed = start.elapsed();
    let passed = z <= 3.0 && rel <= 1e-6 && elapsed < Duration::from_secs(300);
    verdict(
        4,
        "integrator cross-validation",
        passed,
        &format!(
            "GH20 = {ll20:.6}, MC = {mc:.6} +- {se:.2e}, |diff|/SE = {z:.2} (<= 3), \
             |LL20 - LL30|/|LL| = {rel:.2e} (<= 1e-6), {:.1}s (< 300s)",
            elapsed.as_secs_f64()
        ),
    );
}

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_latent-rt")
}

fn run_cli(args: &[&str]) -> std::process::Output {
    Command::new(binary()).args(args).output().expect("binary runs")
}

fn recovery_config(dir: &Path, m: usize) -> PathBuf {
    let text = format!(
        r#"{{
  "model": {{"m": {m}, "n": 10, "p": 1, "q1": 1, "q2": 1, "dt": 1.0, "d1": [1], "d2": [1],
            "u1_index": [[0]], "u2_index": [[0]]}},
  "params": {{"beta1": [[0.5]], "beta2": [[1.0]], "a1": -1.0, "a2": 1.5,
             "sigma_b": {{"sigma1": [[0.25]], "sigma2": [[0.25]], "sigma12": [[0.1]]}}, "rho": 0.4}}
}}"#
    );
    let path = dir.join(format!("recovery_{m}.json"));
    std::fs::write(&path, text).unwrap();
    path
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn criterion_5_parameter_recovery() {
    let start = Instant::now();
    let dir = TempDir::new().unwrap();
    let config = recovery_config(dir.path(), 300);
    let data = dir.path().join("recovery.csv");
    let fit_out = dir.path().join("fit.json");
    let sim = run_cli(&["simulate", "--config", path_str(&config), "--out", path_str(&data), "--seed", "2024"]);
    assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
    let fit = run_cli(&["fit", "--config", path_str(&config), "--data", path_str(&data), "--out", path_str(&fit_out)]);
    let code = fit.status.code();
    assert!(matches!(code, Some(0) | Some(2)), "{}", String::from_utf8_lossy(&fit.stderr));
    let result: FitResult = serde_json::from_str(&std::fs::read_to_string(&fit_out).unwrap()).unwrap();

    let cfg = RunConfig::load(&config).unwrap();
    let dataset = read_csv(std::fs::File::open(&data).unwrap(), &cfg.model).unwrap();
    let t = truth();
    let ll_truth = log_likelihood(&dataset, &t, &gh_rule(15).unwrap()).unwrap();
    let p = &result.params_hat;
    let errs = [
        ("beta1", (p.beta1[0][0] - t.beta1[0][0]).abs(), 0.1),
        ("beta2", (p.beta2[0][0] - t.beta2[0][0]).abs(), 0.1),
        ("a1", (p.a1 - t.a1).abs(), 0.15),
        ("a2", (p.a2 - t.a2).abs(), 0.15),
        ("rho", (p.rho - t.rho).abs(), 0.15),
    ];
    let elapsed = start.elapsed();
    let within = errs.iter().all(|(_, e, tol)| e <= tol);
    let passed = result.converged && within && result.loglik >= ll_truth && elapsed < Duration::from_secs(600);
    let listed: Vec<String> = errs
        .iter()
        .map(|(n, e, tol)| format!("|{n}_hat - {n}| = {e:.3} (<= {tol})"))
        .collect();
    verdict(
        5,
        "parameter recovery",
        passed,
        &format!(
            "converged = {}, {}, loglik(hat) = {:.3} vs loglik(truth) = {ll_truth:.3}, \
             estimates beta1 = {:.4}, beta2 = {:.4}, a1 = {:.4}, a2 = {:.4}, rho = {:.4}, {:.0}s (< 600s)",
            result.converged,
            listed.join(", "),
            result.loglik,
            p.beta1[0][0],
            p.beta2[0][0],
            p.a1,
            p.a2,
            p.rho,
            elapsed.as_secs_f64()
        ),
    );
}

fn monotone(trace: &[TraceEntry]) -> bool {
    trace.windows(2).all(|w| w[1].best_f <= w[0].best_f)
}

#[test]
fn criterion_6_optimizer() {
    let tight = NelderMeadConfig {
        x_tol: 1e-10,
        f_tol: 1e-18,
        ..Default::default()
    };
    let bowl = nelder_mead(|x| (x[0] - 1.0).powi(2) + (x[1] + 2.0).powi(2), &[0.0, 0.0], &tight).unwrap();
    let bowl_err = (bowl.x_min[0] - 1.0).abs().max((bowl.x_min[1] + 2.0).abs());
    let rosen = nelder_mead(
        |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
        &[-1.2, 1.0],
        &NelderMeadConfig::default(),
    )
    .unwrap();
    let rosen_err = (rosen.x_min[0] - 1.0).abs().max((rosen.x_min[1] - 1.0).abs());
    let traces_ok = monotone(&bowl.trace) && monotone(&rosen.trace);
    let passed = bowl_err <= 1e-8 && rosen_err <= 1e-6 && traces_ok;
    verdict(
        6,
        "Nelder-Mead",
        passed,
        &format!(
            "bowl error {bowl_err:.2e} (<= 1e-8), Rosenbrock error {rosen_err:.2e} (<= 1e-6), \
             best-so-far monotone on both traces: {traces_ok}"
        ),
    );
}

#[test]
fn criterion_7_reproducibility() {
    let dir = TempDir::new().unwrap();
    let config = recovery_config(dir.path(), 60);
    let mut files = Vec::new();
    for threads in ["1", "8"] {
        let data = dir.path().join(format!("data_{threads}.csv"));
        let fit_out = dir.path().join(format!("fit_{threads}.json"));
        let sim = run_cli(&[
            "--threads",
            threads,
            "simulate",
            "--config",
            path_str(&config),
            "--out",
            path_str(&data),
            "--seed",
            "77",
        ]);
        assert!(sim.status.success(), "{}", String::from_utf8_lossy(&sim.stderr));
        let fit = run_cli(&[
            "fit",
            "--threads",
            threads,
            "--config",
            path_str(&config),
            "--data",
            path_str(&data),
            "--out",
            path_str(&fit_out),
        ]);
        assert!(matches!(fit.status.code(), Some(0) | Some(2)));
        let truth = std::fs::read(latent_rt_cli::commands::truth_path(&data)).unwrap();
        files.push((std::fs::read(&data).unwrap(), truth, std::fs::read(&fit_out).unwrap()));
    }
    let (a, b) = (&files[0], &files[1]);
    let same_csv = a.0 == b.0;
    let same_truth = a.1 == b.1;
    let same_fit = a.2 == b.2;
    verdict(
        7,
        "reproducibility",
        same_csv && same_truth && same_fit,
        &format!(
            "threads 1 vs 8: simulate CSV identical = {same_csv}, truth sidecar identical = {same_truth}, \
             fit JSON identical = {same_fit} ({} bytes)",
            a.2.len()
        ),
    );
}
