use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use latent_rt::likelihood::{log_likelihood_with, Integration, IntegrationPoints};
use latent_rt::oracle::{full_checks, quick_checks, Kernels, OracleReport};
use latent_rt::{fit, simulate_dataset, Dataset, Parameters};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{QuadratureMode, RunConfig};
use crate::data::{read_csv, write_csv};

/// Exit code when the optimizer stops without meeting its tolerances.
pub const EXIT_NOT_CONVERGED: i32 = 2;
/// Exit code when an oracle check fails.
pub const EXIT_CHECK_FAILED: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "latent-rt", version, about = "Simulate, evaluate and fit the joint latent-increment / reaction-time model")]
pub struct Cli {
    /// Worker threads for likelihood and oracle reductions (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a dataset and write it with a `<out>.truth.json` sidecar.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Leave r_star empty for cells without a crossing.
        #[arg(long)]
        censor_noncrossed: bool,
    },
    /// Print the marginal log-likelihood of a dataset at the configured parameters.
    Loglik {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        quad_order: Option<usize>,
        /// Switch to Monte-Carlo integration with this many draws.
        #[arg(long)]
        mc_samples: Option<usize>,
    },
    /// Maximum-likelihood fit; exits with 2 if the optimizer did not converge.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Start from these parameters (a truth sidecar or a bare parameter object).
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        quad_order: Option<usize>,
        #[arg(long)]
        mc_samples: Option<usize>,
        #[arg(long)]
        max_evals: Option<usize>,
        #[arg(long)]
        restarts: Option<usize>,
    },
    /// Run the oracle checks and print their reports.
    Check {
        #[arg(long, value_enum, default_value_t = Level::Quick)]
        level: Level,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Level {
    Quick,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSidecar {
    pub seed: u64,
    pub model: latent_rt::ModelSpec,
    pub params: Parameters,
}

pub fn truth_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".truth.json");
    PathBuf::from(s)
}

fn required(path: Option<PathBuf>, fallback: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.or_else(|| fallback.clone())
        .with_context(|| format!("--{flag} is required (or set io.{flag} in the configuration)"))
}

fn apply_quadrature(config: &mut RunConfig, quad_order: Option<usize>, mc_samples: Option<usize>) -> Result<()> {
    if let Some(o) = quad_order {
        config.quadrature.order = o;
        config.quadrature.mode = QuadratureMode::GaussHermite;
    }
    if let Some(s) = mc_samples {
        if quad_order.is_some() {
            bail!("--quad-order and --mc-samples are mutually exclusive");
        }
        config.quadrature.mc_samples = s;
        config.quadrature.mode = QuadratureMode::MonteCarlo;
    }
    config.validate()
}

fn write_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn load_data(path: &Path, config: &RunConfig) -> Result<Dataset> {
    let file = File::open(path).with_context(|| format!("cannot open data {}", path.display()))?;
    read_csv(BufReader::new(file), &config.model).with_context(|| format!("invalid data {}", path.display()))
}

fn load_init(path: &Path) -> Result<Parameters> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("{} is not JSON", path.display()))?;
    let params = match value.get("params") {
        Some(p) => p.clone(),
        None => value,
    };
    serde_json::from_value(params).with_context(|| format!("{} does not hold parameters", path.display()))
}

pub fn simulate(config: &Path, out: Option<PathBuf>, seed: u64, censor: bool) -> Result<i32> {
    let config = RunConfig::load(config)?;
    let out = required(out, &config.io.out, "out")?;
    let params = config.params()?;
    let design = config.generate_design(seed);
    let dataset = simulate_dataset(&config.model, params, &design, seed)?;
    let file = File::create(&out).with_context(|| format!("cannot create {}", out.display()))?;
    write_csv(&dataset, BufWriter::new(file), censor)?;
    let truth = TruthSidecar {
        seed,
        model: config.model.clone(),
        params: params.clone(),
    };
    write_json(&truth, Some(&truth_path(&out)))?;
    Ok(0)
}

/// The `loglik` report: `{"loglik", "quadrature_order", "clamp_events"}`, plus
/// `mc_samples` in Monte-Carlo mode.
pub fn loglik_report(
    config: &Path,
    data: Option<PathBuf>,
    quad_order: Option<usize>,
    mc_samples: Option<usize>,
) -> Result<Value> {
    let mut config = RunConfig::load(config)?;
    apply_quadrature(&mut config, quad_order, mc_samples)?;
    let data = required(data, &config.io.data, "data")?;
    let dataset = load_data(&data, &config)?;
    let integration = config.quadrature.integration();
    let points = IntegrationPoints::new(&integration, config.model.q())?;
    let eval = log_likelihood_with(&dataset, config.params()?, &points)?;
    let order = match integration {
        Integration::GaussHermite { order } => json!(order),
        Integration::MonteCarlo { .. } => Value::Null,
    };
    let mut report = json!({
        "loglik": eval.loglik,
        "quadrature_order": order,
        "clamp_events": eval.clamp_events,
    });
    if let Integration::MonteCarlo { samples, .. } = integration {
        report["mc_samples"] = json!(samples);
    }
    Ok(report)
}

pub fn loglik(config: &Path, data: Option<PathBuf>, quad_order: Option<usize>, mc_samples: Option<usize>) -> Result<i32> {
    let report = loglik_report(config, data, quad_order, mc_samples)?;
    println!("{}", serde_json::to_string(&report)?);
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
pub fn fit_command(
    config: &Path,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    init: Option<PathBuf>,
    quad_order: Option<usize>,
    mc_samples: Option<usize>,
    max_evals: Option<usize>,
    restarts: Option<usize>,
) -> Result<i32> {
    let mut config = RunConfig::load(config)?;
    apply_quadrature(&mut config, quad_order, mc_samples)?;
    if let Some(m) = max_evals {
        if m == 0 {
            bail!("--max-evals must be at least 1");
        }
        config.optimizer.max_evals = Some(m);
    }
    if let Some(r) = restarts {
        config.optimizer.restarts = r;
    }
    let data = required(data, &config.io.data, "data")?;
    let out = out.or_else(|| config.io.out.clone());
    let dataset = load_data(&data, &config)?;
    let mut fit_config = config.fit_config();
    if let Some(path) = init {
        fit_config.init = Some(load_init(&path)?);
    }
    let result = fit(&dataset, &fit_config)?;
    write_json(&result, out.as_deref())?;
    if result.converged {
        Ok(0)
    } else {
        eprintln!("warning: optimizer stopped after {} evaluations without converging", result.n_evals);
        Ok(EXIT_NOT_CONVERGED)
    }
}

pub fn check(level: Level, out: Option<PathBuf>) -> Result<i32> {
    let kernels = Kernels::default();
    let reports: Vec<OracleReport> = match level {
        Level::Quick => quick_checks(&kernels),
        Level::Full => full_checks(&kernels),
    };
    write_json(&reports, out.as_deref())?;
    Ok(if reports.iter().all(|r| r.passed) { 0 } else { EXIT_CHECK_FAILED })
}

fn dispatch(command: Command) -> Result<i32> {
    match command {
        Command::Simulate {
            config,
            out,
            seed,
            censor_noncrossed,
        } => simulate(&config, out, seed, censor_noncrossed),
        Command::Loglik {
            config,
            data,
            quad_order,
            mc_samples,
        } => loglik(&config, data, quad_order, mc_samples),
        Command::Fit {
            config,
            data,
            out,
            init,
            quad_order,
            mc_samples,
            max_evals,
            restarts,
        } => fit_command(&config, data, out, init, quad_order, mc_samples, max_evals, restarts),
        Command::Check { level, out } => check(level, out),
    }
}

/// Runs a parsed command line inside a thread pool of the requested size.
pub fn run(cli: Cli) -> Result<i32> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().context("cannot start the worker pool")?;
    pool.install(|| dispatch(cli.command))
}
