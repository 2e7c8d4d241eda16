//! Nelder-Mead simplex minimizer.
//!
//! Standard reflection / expansion / outside and inside contraction / shrink
//! moves. Vertices are kept sorted by objective value with a stable sort, so
//! ties are broken by vertex index and a run is fully determined by the
//! starting point and configuration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NelderMeadConfig {
    pub reflection: f64,
    pub expansion: f64,
    pub contraction: f64,
    pub shrink: f64,
    /// Converged once every vertex is within this sup-norm distance of the best...
    pub x_tol: f64,
    /// ...and the spread of objective values is at most this.
    pub f_tol: f64,
    /// Objective evaluations allowed; `None` means `20000 * dim`.
    pub max_evals: Option<usize>,
    /// Per-coordinate initial steps; `None` means `max(0.05, 0.1 |x0_i|)`.
    pub initial_step: Option<Vec<f64>>,
}

impl Default for NelderMeadConfig {
    fn default() -> Self {
        NelderMeadConfig {
            reflection: 1.0,
            expansion: 2.0,
            contraction: 0.5,
            shrink: 0.5,
            x_tol: 1e-6,
            f_tol: 1e-8,
            max_evals: None,
            initial_step: None,
        }
    }
}

impl NelderMeadConfig {
    pub fn eval_budget(&self, dim: usize) -> usize {
        self.max_evals.unwrap_or(20_000 * dim.max(1))
    }

    pub fn steps_for(&self, x0: &[f64]) -> Vec<f64> {
        match &self.initial_step {
            Some(s) => s.clone(),
            None => x0.iter().map(|x| (0.1 * x.abs()).max(0.05)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub best_f: f64,
    pub diameter: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NelderMeadResult {
    pub x_min: Vec<f64>,
    pub f_min: f64,
    pub n_evals: usize,
    pub iterations: usize,
    pub converged: bool,
    /// Evaluations that returned NaN or infinity and were treated as `+inf`.
    pub non_finite_evals: usize,
    pub final_diameter: f64,
    pub final_spread: f64,
    pub trace: Vec<TraceEntry>,
}

struct Counted<F> {
    f: F,
    evals: usize,
    budget: usize,
    non_finite: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counted<F> {
    /// `None` once the budget is spent.
    fn eval(&mut self, x: &[f64]) -> Option<f64> {
        if self.evals >= self.budget {
            return None;
        }
        self.evals += 1;
        let v = (self.f)(x);
        if v.is_finite() {
            Some(v)
        } else {
            self.non_finite += 1;
            Some(f64::INFINITY)
        }
    }
}

fn diameter(simplex: &[(Vec<f64>, f64)]) -> f64 {
    let best = &simplex[0].0;
    simplex[1..]
        .iter()
        .flat_map(|(x, _)| x.iter().zip(best).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
}

fn sort(simplex: &mut [(Vec<f64>, f64)]) {
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
}

fn affine(from: &[f64], towards: &[f64], t: f64) -> Vec<f64> {
    from.iter().zip(towards).map(|(c, x)| c + t * (x - c)).collect()
}

/// Minimizes `objective` from `x0`.
pub fn nelder_mead<F>(objective: F, x0: &[f64], config: &NelderMeadConfig) -> Result<NelderMeadResult>
where
    F: FnMut(&[f64]) -> f64,
{
    let dim = x0.len();
    let mut f = Counted {
        f: objective,
        evals: 0,
        budget: config.eval_budget(dim),
        non_finite: 0,
    };
    if f.budget == 0 {
        return Err(Error::Config("max_evals must be at least 1".into()));
    }
    let f0 = (f.f)(x0);
    f.evals += 1;
    if !f0.is_finite() {
        return Err(Error::NonFiniteStart);
    }
    let steps = config.steps_for(x0);
    if steps.len() != dim {
        return Err(Error::Config(format!(
            "initial_step has {} entries, expected {dim}",
            steps.len()
        )));
    }

    let mut simplex = vec![(x0.to_vec(), f0)];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let finish = |simplex: &mut Vec<(Vec<f64>, f64)>, f: &Counted<F>, trace: Vec<TraceEntry>, iterations, converged| {
        sort(simplex);
        let diam = if simplex.len() > 1 { diameter(simplex) } else { f64::INFINITY };
        let spread = simplex.last().map(|v| v.1).unwrap_or(f0) - simplex[0].1;
        NelderMeadResult {
            x_min: simplex[0].0.clone(),
            f_min: simplex[0].1,
            n_evals: f.evals,
            iterations,
            converged,
            non_finite_evals: f.non_finite,
            final_diameter: diam,
            final_spread: spread,
            trace,
        }
    };

    for i in 0..dim {
        let mut x = x0.to_vec();
        x[i] += steps[i];
        match f.eval(&x) {
            Some(v) => simplex.push((x, v)),
            None => return Ok(finish(&mut simplex, &f, trace, iterations, false)),
        }
    }
    sort(&mut simplex);

    loop {
        let diam = diameter(&simplex);
        let spread = simplex[dim].1 - simplex[0].1;
        trace.push(TraceEntry {
            best_f: simplex[0].1,
            diameter: diam,
        });
        if diam <= config.x_tol && spread <= config.f_tol {
            return Ok(finish(&mut simplex, &f, trace, iterations, true));
        }
        iterations += 1;

        let mut centroid = vec![0.0; dim];
        for (x, _) in &simplex[..dim] {
            for (c, v) in centroid.iter_mut().zip(x) {
                *c += v;
            }
        }
        centroid.iter_mut().for_each(|c| *c /= dim as f64);

        let worst = simplex[dim].0.clone();
        let f_worst = simplex[dim].1;
        let f_best = simplex[0].1;
        let f_second = simplex[dim - 1].1;

        let xr = affine(&centroid, &worst, -config.reflection);
        let Some(fr) = f.eval(&xr) else { break };

        let mut do_shrink = false;
        if fr < f_best {
            let xe = affine(&centroid, &xr, config.expansion);
            let Some(fe) = f.eval(&xe) else {
                simplex[dim] = (xr, fr);
                break;
            };
            simplex[dim] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < f_second {
            simplex[dim] = (xr, fr);
        } else if fr < f_worst {
            let xc = affine(&centroid, &xr, config.contraction);
            let Some(fc) = f.eval(&xc) else {
                simplex[dim] = (xr, fr);
                break;
            };
            if fc <= fr {
                simplex[dim] = (xc, fc);
            } else {
                simplex[dim] = (xr, fr);
                do_shrink = true;
            }
        } else {
            let xc = affine(&centroid, &worst, config.contraction);
            let Some(fc) = f.eval(&xc) else { break };
            if fc < f_worst {
                simplex[dim] = (xc, fc);
            } else {
                do_shrink = true;
            }
        }

        if do_shrink {
            let best = simplex[0].0.clone();
            for v in simplex.iter_mut().skip(1) {
                let x = affine(&best, &v.0, config.shrink);
                match f.eval(&x) {
                    Some(fx) => *v = (x, fx),
                    None => return Ok(finish(&mut simplex, &f, trace, iterations, false)),
                }
            }
        }
        sort(&mut simplex);
    }
    Ok(finish(&mut simplex, &f, trace, iterations, false))
}
