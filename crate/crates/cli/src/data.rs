//! CSV dataset format: one row per (subject, time_index, outcome) cell.
//!
//! Columns are `subject, time_index, outcome, y, r_star, crossed`, then
//! `v1_0 ..` and `v2_0 ..` sized by the widest outcome; narrower outcomes
//! leave the trailing covariate fields empty. Floats are written with 17
//! significant digits so a file parses back to the same bits.

use std::io::{Read, Write};

use anyhow::{bail, Context, Result};
use latent_rt::{Dataset, ModelSpec, SubjectCovariates, SubjectData};
use nalgebra::DMatrix;

/// `n x p` cells filled in any order, remembering which were seen.
struct Grid<T> {
    values: Vec<Option<T>>,
    p: usize,
}

impl<T: Copy> Grid<T> {
    fn new(n: usize, p: usize) -> Self {
        Grid {
            values: vec![None; n * p],
            p,
        }
    }

    fn matrix(&self, n: usize) -> DMatrix<T>
    where
        T: nalgebra::Scalar,
    {
        DMatrix::from_fn(n, self.p, |i, j| self.values[i * self.p + j].expect("cell present"))
    }
}

fn header(spec: &ModelSpec) -> Vec<String> {
    let w1 = spec.d1.iter().copied().max().unwrap_or(0);
    let w2 = spec.d2.iter().copied().max().unwrap_or(0);
    ["subject", "time_index", "outcome", "y", "r_star", "crossed"]
        .iter()
        .map(|s| s.to_string())
        .chain((0..w1).map(|c| format!("v1_{c}")))
        .chain((0..w2).map(|c| format!("v2_{c}")))
        .collect()
}

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes `dataset`; with `censor_noncrossed` the `r_star` of non-crossed cells is left empty.
pub fn write_csv<W: Write>(dataset: &Dataset, out: W, censor_noncrossed: bool) -> Result<()> {
    let spec = &dataset.spec;
    let cols = header(spec);
    let w1 = spec.d1.iter().copied().max().unwrap_or(0);
    let w2 = spec.d2.iter().copied().max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    w.write_record(&cols)?;
    let mut row = Vec::with_capacity(cols.len());
    for (k, s) in dataset.subjects.iter().enumerate() {
        for i in 0..spec.n {
            for j in 0..spec.p {
                row.clear();
                row.push(k.to_string());
                row.push(i.to_string());
                row.push(j.to_string());
                row.push(float(s.y[(i, j)]));
                let crossed = s.crossed[(i, j)];
                row.push(if censor_noncrossed && !crossed {
                    String::new()
                } else {
                    float(s.r_star[(i, j)])
                });
                row.push(if crossed { "1" } else { "0" }.to_string());
                let v1 = &s.covariates.v1[j];
                let v2 = &s.covariates.v2[j];
                row.extend((0..w1).map(|c| v1.get(c).map_or(String::new(), |v| float(*v))));
                row.extend((0..w2).map(|c| v2.get(c).map_or(String::new(), |v| float(*v))));
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_index(field: &str, name: &str, limit: usize, line: u64) -> Result<usize> {
    let v: usize = field
        .trim()
        .parse()
        .with_context(|| format!("line {line}: {name} `{field}` is not a non-negative integer"))?;
    if v >= limit {
        bail!("line {line}: {name} {v} is out of range (must be below {limit})");
    }
    Ok(v)
}

fn parse_float(field: &str, name: &str, line: u64) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .with_context(|| format!("line {line}: {name} `{field}` is not a number"))?;
    if !v.is_finite() {
        bail!("line {line}: {name} is not finite");
    }
    Ok(v)
}

struct Partial {
    y: Grid<f64>,
    r: Grid<f64>,
    crossed: Grid<bool>,
    v1: Vec<Option<Vec<f64>>>,
    v2: Vec<Option<Vec<f64>>>,
}

/// Reads a dataset laid out for `spec`. Every cell must appear exactly once,
/// in any order, and a subject's covariates must agree across time points.
pub fn read_csv<R: Read>(input: R, spec: &ModelSpec) -> Result<Dataset> {
    spec.validate().context("model")?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let expected = header(spec);
    let found: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if found != expected {
        bail!("line 1: header {found:?} does not match the model, expected {expected:?}");
    }
    let w1 = spec.d1.iter().copied().max().unwrap_or(0);
    let w2 = spec.d2.iter().copied().max().unwrap_or(0);
    let mut subjects: Vec<Partial> = (0..spec.m)
        .map(|_| Partial {
            y: Grid::new(spec.n, spec.p),
            r: Grid::new(spec.n, spec.p),
            crossed: Grid::new(spec.n, spec.p),
            v1: vec![None; spec.p],
            v2: vec![None; spec.p],
        })
        .collect();

    for record in rdr.records() {
        let record = record.context("malformed CSV")?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != expected.len() {
            bail!("line {line}: expected {} fields, found {}", expected.len(), record.len());
        }
        let k = parse_index(&record[0], "subject", spec.m, line)?;
        let i = parse_index(&record[1], "time_index", spec.n, line)?;
        let j = parse_index(&record[2], "outcome", spec.p, line)?;
        let y = parse_float(&record[3], "y", line)?;
        if record[4].trim().is_empty() {
            bail!("line {line}: r_star is empty; censored cells cannot enter the likelihood");
        }
        let r = parse_float(&record[4], "r_star", line)?;
        let crossed = match record[5].trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => bail!("line {line}: crossed `{other}` must be 0 or 1"),
        };
        let covs = |offset: usize, d: usize, width: usize, name: &str| -> Result<Vec<f64>> {
            let mut out = Vec::with_capacity(d);
            for c in 0..width {
                let field = record[offset + c].trim();
                if c < d {
                    out.push(parse_float(field, &format!("{name}_{c}"), line)?);
                } else if !field.is_empty() {
                    bail!("line {line}: {name}_{c} must be empty for outcome {j}");
                }
            }
            Ok(out)
        };
        let v1 = covs(6, spec.d1[j], w1, "v1")?;
        let v2 = covs(6 + w1, spec.d2[j], w2, "v2")?;

        let s = &mut subjects[k];
        let cell = i * spec.p + j;
        if s.y.values[cell].is_some() {
            bail!("line {line}: duplicate cell (subject {k}, time_index {i}, outcome {j})");
        }
        s.y.values[cell] = Some(y);
        s.r.values[cell] = Some(r);
        s.crossed.values[cell] = Some(crossed);
        for (slot, v, name) in [(&mut s.v1[j], v1, "v1"), (&mut s.v2[j], v2, "v2")] {
            match slot {
                Some(prev) if *prev != v => {
                    bail!("line {line}: {name} covariates of subject {k}, outcome {j} change over time")
                }
                Some(_) => {}
                None => *slot = Some(v),
            }
        }
    }

    let subjects = subjects
        .into_iter()
        .enumerate()
        .map(|(k, s)| {
            let missing = s.y.values.iter().position(Option::is_none);
            if let Some(cell) = missing {
                bail!(
                    "missing cell (subject {k}, time_index {}, outcome {})",
                    cell / s.y.p,
                    cell % s.y.p
                );
            }
            Ok(SubjectData {
                y: s.y.matrix(spec.n),
                r_star: s.r.matrix(spec.n),
                crossed: s.crossed.matrix(spec.n),
                covariates: SubjectCovariates {
                    v1: s.v1.into_iter().map(Option::unwrap).collect(),
                    v2: s.v2.into_iter().map(Option::unwrap).collect(),
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dataset = Dataset {
        spec: spec.clone(),
        subjects,
    };
    dataset.validate()?;
    Ok(dataset)
}
