//! Model types, linear predictors and the unconstrained parameterization.
//!
//! The latent increment of outcome `j` for subject `k` has mean `dt * mu_jk`
//! with `mu_jk = v1_jk' beta1_j + u1_jk' b1_k`, and the log reaction time has
//! mean `eta2_jk = v2_jk' beta2_j + u2_jk' b2_k`. Residuals of both
//! observables have unit variance; they may be correlated within a cell
//! through `rho`.
//!
//! `U` designs are selected columns of the matching `V` design, so a random
//! effect layout is just a list of column indices per outcome.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest magnitude accepted for a log-scale entry before exponentiation.
const LOG_SCALE_LIMIT: f64 = 50.0;
/// `|rho|` never reaches this after unpacking.
const RHO_LIMIT: f64 = 1.0 - 1.0 / (1u64 << 40) as f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Number of subjects.
    pub m: usize,
    /// Time points per subject.
    pub n: usize,
    /// Outcome processes.
    pub p: usize,
    pub q1: usize,
    pub q2: usize,
    #[serde(default = "default_dt")]
    pub dt: f64,
    /// Length of `v1_jk` for each outcome.
    pub d1: Vec<usize>,
    /// Length of `v2_jk` for each outcome.
    pub d2: Vec<usize>,
    /// Columns of `v1_j` forming `u1_j`; one list of length `q1` per outcome.
    pub u1_index: Vec<Vec<usize>>,
    /// Columns of `v2_j` forming `u2_j`; one list of length `q2` per outcome.
    pub u2_index: Vec<Vec<usize>>,
}

fn default_dt() -> f64 {
    1.0
}

impl ModelSpec {
    /// Intercept-only design for every outcome, with a scalar random
    /// intercept on each side when `q1`/`q2` are 1.
    pub fn intercept_only(m: usize, n: usize, p: usize, q1: usize, q2: usize, dt: f64) -> Self {
        assert!(q1 <= 1 && q2 <= 1, "intercept-only designs support at most one random effect per block");
        ModelSpec {
            m,
            n,
            p,
            q1,
            q2,
            dt,
            d1: vec![1; p],
            d2: vec![1; p],
            u1_index: vec![vec![0; q1]; p],
            u2_index: vec![vec![0; q2]; p],
        }
    }

    pub fn q(&self) -> usize {
        self.q1 + self.q2
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        if self.p < 1 {
            return Err(Error::Config("p must be at least 1".into()));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be positive and finite, got {}", self.dt)));
        }
        for (name, d) in [("d1", &self.d1), ("d2", &self.d2)] {
            if d.len() != self.p {
                return Err(Error::Config(format!("{name} has {} entries, expected p = {}", d.len(), self.p)));
            }
        }
        check_selection("u1_index", &self.u1_index, &self.d1, self.q1)?;
        check_selection("u2_index", &self.u2_index, &self.d2, self.q2)?;
        Ok(())
    }

    pub fn layout(&self) -> ThetaLayout {
        ThetaLayout::new(self)
    }
}

fn check_selection(name: &str, index: &[Vec<usize>], dims: &[usize], q: usize) -> Result<()> {
    if index.len() != dims.len() {
        return Err(Error::Config(format!("{name} has {} outcome lists, expected {}", index.len(), dims.len())));
    }
    for (j, (cols, &d)) in index.iter().zip(dims).enumerate() {
        if cols.len() != q {
            return Err(Error::Config(format!(
                "{name}[{j}] selects {} columns, expected {q}",
                cols.len()
            )));
        }
        for (pos, &c) in cols.iter().enumerate() {
            if c >= d {
                return Err(Error::Config(format!("{name}[{j}] column {c} out of range for design of width {d}")));
            }
            if cols[..pos].contains(&c) {
                return Err(Error::Config(format!("{name}[{j}] repeats column {c}")));
            }
        }
    }
    Ok(())
}

/// Covariate values of one subject: `v1[j]` and `v2[j]` per outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectCovariates {
    pub v1: Vec<Vec<f64>>,
    pub v2: Vec<Vec<f64>>,
}

impl SubjectCovariates {
    pub fn intercept(p: usize) -> Self {
        SubjectCovariates {
            v1: vec![vec![1.0]; p],
            v2: vec![vec![1.0]; p],
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        for (name, v, d) in [("v1", &self.v1, &spec.d1), ("v2", &self.v2, &spec.d2)] {
            if v.len() != spec.p {
                return Err(Error::Config(format!("{name} has {} outcomes, expected {}", v.len(), spec.p)));
            }
            for (j, row) in v.iter().enumerate() {
                if row.len() != d[j] {
                    return Err(Error::Config(format!(
                        "{name}[{j}] has {} covariates, expected {}",
                        row.len(),
                        d[j]
                    )));
                }
                if row.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Config(format!("{name}[{j}] contains a non-finite covariate")));
                }
            }
        }
        Ok(())
    }
}

/// Covariates for all subjects; `subjects[k]` holds `V1_jk` and `V2_jk`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateDesign {
    pub subjects: Vec<SubjectCovariates>,
}

impl CovariateDesign {
    pub fn intercept_only(spec: &ModelSpec) -> Self {
        CovariateDesign {
            subjects: vec![SubjectCovariates::intercept(spec.p); spec.m],
        }
    }

    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.subjects.len() != spec.m {
            return Err(Error::Config(format!(
                "design has {} subjects, expected m = {}",
                self.subjects.len(),
                spec.m
            )));
        }
        self.subjects.iter().try_for_each(|s| s.validate(spec))
    }
}

/// `v' beta + v[u_index]' b`, unchecked.
#[inline]
pub(crate) fn predictor(v: &[f64], beta: &[f64], u_index: &[usize], b: &[f64]) -> f64 {
    let fixed: f64 = v.iter().zip(beta).map(|(x, c)| x * c).sum();
    let random: f64 = u_index.iter().zip(b).map(|(&c, e)| v[c] * e).sum();
    fixed + random
}

fn checked_predictor(v: &[f64], beta: &[f64], u_index: &[usize], b: &[f64]) -> Result<f64> {
    if v.len() != beta.len() {
        return Err(Error::Config(format!(
            "covariate vector has length {} but coefficient vector has length {}",
            v.len(),
            beta.len()
        )));
    }
    if u_index.len() != b.len() {
        return Err(Error::Config(format!(
            "random-effect vector has length {} but {} design columns are selected",
            b.len(),
            u_index.len()
        )));
    }
    if let Some(&c) = u_index.iter().find(|&&c| c >= v.len()) {
        return Err(Error::Config(format!("random-effect column {c} out of range")));
    }
    Ok(predictor(v, beta, u_index, b))
}

fn subject_row<'a>(rows: &'a [SubjectCovariates], k: usize, j: usize, first: bool) -> Result<&'a [f64]> {
    let s = rows
        .get(k)
        .ok_or_else(|| Error::Config(format!("subject index {k} out of range")))?;
    let v = if first { &s.v1 } else { &s.v2 };
    v.get(j)
        .map(Vec::as_slice)
        .ok_or_else(|| Error::Config(format!("outcome index {j} out of range")))
}

/// Drift of outcome `j` for subject `k`: `V1_jk' beta1_j + U1_jk' b1`.
pub fn linear_predictor_1(
    spec: &ModelSpec,
    design: &CovariateDesign,
    j: usize,
    k: usize,
    beta1_j: &[f64],
    b1: &[f64],
) -> Result<f64> {
    let v = subject_row(&design.subjects, k, j, true)?;
    let u = spec
        .u1_index
        .get(j)
        .ok_or_else(|| Error::Config(format!("outcome index {j} out of range")))?;
    checked_predictor(v, beta1_j, u, b1)
}

/// Mean log reaction time of outcome `j` for subject `k`: `V2_jk' beta2_j + U2_jk' b2`.
pub fn linear_predictor_2(
    spec: &ModelSpec,
    design: &CovariateDesign,
    j: usize,
    k: usize,
    beta2_j: &[f64],
    b2: &[f64],
) -> Result<f64> {
    let v = subject_row(&design.subjects, k, j, false)?;
    let u = spec
        .u2_index
        .get(j)
        .ok_or_else(|| Error::Config(format!("outcome index {j} out of range")))?;
    checked_predictor(v, beta2_j, u, b2)
}

/// Joint covariance of `(b1, b2)`, held as the full block matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomEffectsCov {
    q1: usize,
    q2: usize,
    full: DMatrix<f64>,
}

impl RandomEffectsCov {
    pub fn from_full(q1: usize, q2: usize, full: DMatrix<f64>) -> Result<Self> {
        let q = q1 + q2;
        if full.nrows() != q || full.ncols() != q {
            return Err(Error::InvalidParameter(format!(
                "sigma_b is {}x{}, expected {q}x{q}",
                full.nrows(),
                full.ncols()
            )));
        }
        let cov = RandomEffectsCov { q1, q2, full };
        cov.validate()?;
        Ok(cov)
    }

    pub fn from_blocks(sigma1: DMatrix<f64>, sigma2: DMatrix<f64>, sigma12: DMatrix<f64>) -> Result<Self> {
        let (q1, q2) = (sigma1.nrows(), sigma2.nrows());
        if sigma1.ncols() != q1 || sigma2.ncols() != q2 {
            return Err(Error::InvalidParameter("sigma1 and sigma2 must be square".into()));
        }
        if sigma12.nrows() != q1 || sigma12.ncols() != q2 {
            return Err(Error::InvalidParameter(format!(
                "sigma12 is {}x{}, expected {q1}x{q2}",
                sigma12.nrows(),
                sigma12.ncols()
            )));
        }
        let mut full = DMatrix::zeros(q1 + q2, q1 + q2);
        full.view_mut((0, 0), (q1, q1)).copy_from(&sigma1);
        full.view_mut((q1, q1), (q2, q2)).copy_from(&sigma2);
        full.view_mut((0, q1), (q1, q2)).copy_from(&sigma12);
        full.view_mut((q1, 0), (q2, q1)).copy_from(&sigma12.transpose());
        Self::from_full(q1, q2, full)
    }

    pub fn identity(q1: usize, q2: usize) -> Self {
        RandomEffectsCov {
            q1,
            q2,
            full: DMatrix::identity(q1 + q2, q1 + q2),
        }
    }

    pub fn scaled_identity(q1: usize, q2: usize, scale: f64) -> Self {
        RandomEffectsCov {
            q1,
            q2,
            full: DMatrix::identity(q1 + q2, q1 + q2) * scale,
        }
    }

    pub fn q1(&self) -> usize {
        self.q1
    }

    pub fn q2(&self) -> usize {
        self.q2
    }

    pub fn dim(&self) -> usize {
        self.q1 + self.q2
    }

    pub fn full(&self) -> &DMatrix<f64> {
        &self.full
    }

    pub fn sigma1(&self) -> DMatrix<f64> {
        self.full.view((0, 0), (self.q1, self.q1)).into_owned()
    }

    pub fn sigma2(&self) -> DMatrix<f64> {
        self.full.view((self.q1, self.q1), (self.q2, self.q2)).into_owned()
    }

    pub fn sigma12(&self) -> DMatrix<f64> {
        self.full.view((0, self.q1), (self.q1, self.q2)).into_owned()
    }

    /// Lower Cholesky factor; fails when the matrix is not positive definite.
    pub fn cholesky(&self) -> Result<DMatrix<f64>> {
        if self.dim() == 0 {
            return Ok(DMatrix::zeros(0, 0));
        }
        nalgebra::Cholesky::new(self.full.clone())
            .map(|c| c.l())
            .ok_or_else(|| Error::InvalidParameter("sigma_b is not positive definite".into()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.full.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidParameter("sigma_b has non-finite entries".into()));
        }
        let q = self.dim();
        for i in 0..q {
            for j in 0..i {
                let (a, b) = (self.full[(i, j)], self.full[(j, i)]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(Error::InvalidParameter(format!("sigma_b is not symmetric at ({i}, {j})")));
                }
            }
        }
        self.cholesky().map(|_| ())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CovBlocks {
    sigma1: Vec<Vec<f64>>,
    sigma2: Vec<Vec<f64>>,
    #[serde(default)]
    sigma12: Option<Vec<Vec<f64>>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize, name: &str) -> Result<DMatrix<f64>> {
    if let Some(bad) = rows.iter().position(|r| r.len() != ncols) {
        return Err(Error::InvalidParameter(format!(
            "{name} row {bad} has {} entries, expected {ncols}",
            rows[bad].len()
        )));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl Serialize for RandomEffectsCov {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CovBlocks {
            sigma1: rows_of(&self.sigma1()),
            sigma2: rows_of(&self.sigma2()),
            sigma12: Some(rows_of(&self.sigma12())),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RandomEffectsCov {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let blocks = CovBlocks::deserialize(d)?;
        let (q1, q2) = (blocks.sigma1.len(), blocks.sigma2.len());
        let build = || -> Result<RandomEffectsCov> {
            let s1 = matrix_from_rows(&blocks.sigma1, q1, "sigma1")?;
            let s2 = matrix_from_rows(&blocks.sigma2, q2, "sigma2")?;
            let s12 = match &blocks.sigma12 {
                Some(rows) if !(rows.is_empty() && q1 > 0) => {
                    if rows.len() != q1 {
                        return Err(Error::InvalidParameter(format!(
                            "sigma12 has {} rows, expected {q1}",
                            rows.len()
                        )));
                    }
                    matrix_from_rows(rows, q2, "sigma12")?
                }
                _ => DMatrix::zeros(q1, q2),
            };
            RandomEffectsCov::from_blocks(s1, s2, s12)
        };
        build().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Parameters {
    pub beta1: Vec<Vec<f64>>,
    pub beta2: Vec<Vec<f64>>,
    pub a1: f64,
    pub a2: f64,
    pub sigma_b: RandomEffectsCov,
    #[serde(default)]
    pub rho: f64,
}

impl Parameters {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        for (name, beta, d) in [("beta1", &self.beta1, &spec.d1), ("beta2", &self.beta2, &spec.d2)] {
            if beta.len() != spec.p {
                return Err(Error::InvalidParameter(format!(
                    "{name} has {} outcome vectors, expected {}",
                    beta.len(),
                    spec.p
                )));
            }
            for (j, b) in beta.iter().enumerate() {
                if b.len() != d[j] {
                    return Err(Error::InvalidParameter(format!(
                        "{name}[{j}] has length {}, expected {}",
                        b.len(),
                        d[j]
                    )));
                }
                if b.iter().any(|x| !x.is_finite()) {
                    return Err(Error::InvalidParameter(format!("{name}[{j}] is not finite")));
                }
            }
        }
        if !(self.a1.is_finite() && self.a2.is_finite()) {
            return Err(Error::InvalidParameter("a1 and a2 must be finite".into()));
        }
        if self.a1 >= self.a2 {
            return Err(Error::InvalidParameter(format!(
                "a1 must be strictly below a2 (a1 = {}, a2 = {})",
                self.a1, self.a2
            )));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(Error::InvalidParameter(format!("rho must lie in (-1, 1), got {}", self.rho)));
        }
        if self.sigma_b.q1() != spec.q1 || self.sigma_b.q2() != spec.q2 {
            return Err(Error::InvalidParameter(format!(
                "sigma_b blocks are {}+{}, expected {}+{}",
                self.sigma_b.q1(),
                self.sigma_b.q2(),
                spec.q1,
                spec.q2
            )));
        }
        self.sigma_b.validate()
    }
}

/// Flat optimizer coordinates; see [`ThetaLayout`] for the ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UnconstrainedParams(pub Vec<f64>);

/// Positions of each parameter group inside an [`UnconstrainedParams`] vector.
///
/// Order: all `beta1_j`, all `beta2_j`, `a1`, `ln(a2 - a1)`, the lower
/// Cholesky factor of `sigma_b` row by row (log on the diagonal), `atanh(rho)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaLayout {
    pub beta1: Vec<std::ops::Range<usize>>,
    pub beta2: Vec<std::ops::Range<usize>>,
    pub a1: usize,
    pub log_gap: usize,
    pub chol: std::ops::Range<usize>,
    pub rho: usize,
    q1: usize,
    q: usize,
}

impl ThetaLayout {
    pub fn new(spec: &ModelSpec) -> Self {
        let mut at = 0;
        let mut take = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let beta1 = spec.d1.iter().map(|&d| take(d)).collect();
        let beta2 = spec.d2.iter().map(|&d| take(d)).collect();
        let a1 = take(1).start;
        let log_gap = take(1).start;
        let q = spec.q();
        let chol = take(q * (q + 1) / 2);
        let rho = take(1).start;
        ThetaLayout {
            beta1,
            beta2,
            a1,
            log_gap,
            chol,
            rho,
            q1: spec.q1,
            q,
        }
    }

    pub fn len(&self) -> usize {
        self.rho + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Theta positions of the Cholesky entries coupling `b2` rows to `b1`
    /// columns. Holding them at zero holds `sigma12` at zero.
    pub fn cross_block(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut pos = self.chol.start;
        for i in 0..self.q {
            for j in 0..=i {
                if i >= self.q1 && j < self.q1 {
                    out.push(pos);
                }
                pos += 1;
            }
        }
        out
    }
}

/// Builds `L L'` from row-major lower-triangular entries, exponentiating the diagonal.
pub fn build_sigma_b(chol_params: &[f64], q1: usize, q2: usize) -> Result<RandomEffectsCov> {
    let q = q1 + q2;
    if chol_params.len() != q * (q + 1) / 2 {
        return Err(Error::InvalidParameter(format!(
            "expected {} Cholesky entries for dimension {q}, got {}",
            q * (q + 1) / 2,
            chol_params.len()
        )));
    }
    let l = lower_factor(chol_params, q);
    Ok(RandomEffectsCov {
        q1,
        q2,
        full: &l * l.transpose(),
    })
}

fn lower_factor(chol_params: &[f64], q: usize) -> DMatrix<f64> {
    let mut l = DMatrix::zeros(q, q);
    let mut it = chol_params.iter();
    for i in 0..q {
        for j in 0..=i {
            let x = *it.next().expect("length checked");
            l[(i, j)] = if i == j {
                x.clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT).exp()
            } else {
                x
            };
        }
    }
    l
}

pub fn pack(spec: &ModelSpec, params: &Parameters) -> Result<UnconstrainedParams> {
    params.validate(spec)?;
    let layout = spec.layout();
    let mut theta = vec![0.0; layout.len()];
    for (r, b) in layout.beta1.iter().zip(&params.beta1) {
        theta[r.clone()].copy_from_slice(b);
    }
    for (r, b) in layout.beta2.iter().zip(&params.beta2) {
        theta[r.clone()].copy_from_slice(b);
    }
    theta[layout.a1] = params.a1;
    theta[layout.log_gap] = (params.a2 - params.a1).ln();
    let l = params.sigma_b.cholesky()?;
    let mut pos = layout.chol.start;
    for i in 0..spec.q() {
        for j in 0..=i {
            theta[pos] = if i == j { l[(i, i)].ln() } else { l[(i, j)] };
            pos += 1;
        }
    }
    theta[layout.rho] = params.rho.atanh();
    Ok(UnconstrainedParams(theta))
}

pub fn unpack(spec: &ModelSpec, theta: &UnconstrainedParams) -> Result<Parameters> {
    let layout = spec.layout();
    let t = &theta.0;
    if t.len() != layout.len() {
        return Err(Error::InvalidParameter(format!(
            "theta has length {}, expected {}",
            t.len(),
            layout.len()
        )));
    }
    if let Some(i) = t.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidParameter(format!("theta[{i}] is not finite")));
    }
    let beta1 = layout.beta1.iter().map(|r| t[r.clone()].to_vec()).collect();
    let beta2 = layout.beta2.iter().map(|r| t[r.clone()].to_vec()).collect();
    let a1 = t[layout.a1];
    let gap = t[layout.log_gap].clamp(-LOG_SCALE_LIMIT, LOG_SCALE_LIMIT).exp();
    let mut a2 = a1 + gap;
    if a2 <= a1 {
        a2 = a1.next_up();
    }
    let sigma_b = build_sigma_b(&t[layout.chol.clone()], spec.q1, spec.q2)?;
    let rho = t[layout.rho].tanh().clamp(-RHO_LIMIT, RHO_LIMIT);
    Ok(Parameters {
        beta1,
        beta2,
        a1,
        a2,
        sigma_b,
        rho,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn spec_two_cov() -> ModelSpec {
        ModelSpec {
            m: 1,
            n: 1,
            p: 1,
            q1: 1,
            q2: 1,
            dt: 1.0,
            d1: vec![2],
            d2: vec![2],
            u1_index: vec![vec![0]],
            u2_index: vec![vec![0]],
        }
    }

    fn design(v1: Vec<f64>, v2: Vec<f64>) -> CovariateDesign {
        CovariateDesign {
            subjects: vec![SubjectCovariates {
                v1: vec![v1],
                v2: vec![v2],
            }],
        }
    }

    #[test]
    fn predictor_one_examples() {
        let spec = spec_two_cov();
        let d = design(vec![1.0, 0.0], vec![1.0, 0.0]);
        assert_eq!(linear_predictor_1(&spec, &d, 0, 0, &[0.5, -0.3], &[0.0]).unwrap(), 0.5);

        let d = design(vec![0.0, 0.0], vec![0.0, 0.0]);
        assert_eq!(linear_predictor_1(&spec, &d, 0, 0, &[3.0, -7.0], &[2.5]).unwrap(), 0.0);

        let mut spec = spec_two_cov();
        spec.u1_index = vec![vec![1]];
        let d = design(vec![1.0, 2.0], vec![1.0, 0.0]);
        let v = linear_predictor_1(&spec, &d, 0, 0, &[0.5, -0.3], &[0.1]).unwrap();
        assert_abs_diff_eq!(v, 0.1, epsilon = 1e-15);
    }

    #[test]
    fn predictor_two_examples() {
        let spec = ModelSpec::intercept_only(1, 1, 1, 0, 0, 1.0);
        let d = CovariateDesign::intercept_only(&spec);
        assert_eq!(linear_predictor_2(&spec, &d, 0, 0, &[1.0], &[]).unwrap(), 1.0);

        // U selects columns of V, so a zero covariate also silences its random effect
        let spec = ModelSpec::intercept_only(1, 1, 1, 0, 1, 1.0);
        let d = design(vec![1.0], vec![0.0]);
        assert_eq!(linear_predictor_2(&spec, &d, 0, 0, &[1.0], &[0.4]).unwrap(), 0.0);
        let d = design(vec![1.0], vec![1.0]);
        assert_abs_diff_eq!(linear_predictor_2(&spec, &d, 0, 0, &[0.0], &[0.4]).unwrap(), 0.4, epsilon = 1e-15);

        let spec = spec_two_cov();
        let d = design(vec![1.0, 0.0], vec![1.0, 1.0]);
        let v = linear_predictor_2(&spec, &d, 0, 0, &[1.0, 0.2], &[-0.2]).unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-15);
    }

    #[test]
    fn predictor_dimension_mismatch() {
        let spec = spec_two_cov();
        let d = design(vec![1.0, 0.0], vec![1.0, 0.0]);
        assert!(matches!(
            linear_predictor_1(&spec, &d, 0, 0, &[0.5], &[0.0]),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            linear_predictor_2(&spec, &d, 0, 0, &[0.5, 1.0], &[0.0, 1.0]),
            Err(Error::Config(_))
        ));
        assert!(linear_predictor_1(&spec, &d, 1, 0, &[0.5, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn spec_validation_rejects_bad_selection() {
        let mut spec = spec_two_cov();
        spec.u1_index = vec![vec![2]];
        assert!(spec.validate().is_err());
        spec.q1 = 2;
        spec.u1_index = vec![vec![1, 1]];
        assert!(spec.validate().is_err());
        spec.u1_index = vec![vec![1, 0]];
        assert!(spec.validate().is_ok());
        spec.dt = 0.0;
        assert!(spec.validate().is_err());
    }

    fn unit_params(q1: usize, q2: usize) -> Parameters {
        Parameters {
            beta1: vec![vec![0.0]],
            beta2: vec![vec![0.0]],
            a1: -1.0,
            a2: 1.5,
            sigma_b: RandomEffectsCov::identity(q1, q2),
            rho: 0.0,
        }
    }

    #[test]
    fn pack_identity_covariance() {
        let spec = ModelSpec::intercept_only(1, 1, 1, 1, 1, 1.0);
        let theta = pack(&spec, &unit_params(1, 1)).unwrap();
        let layout = spec.layout();
        assert!(theta.0[layout.chol.clone()].iter().all(|&x| x == 0.0));
        assert_eq!(theta.0[layout.rho], 0.0);
    }

    #[test]
    fn pack_boundaries() {
        let spec = ModelSpec::intercept_only(1, 1, 1, 1, 1, 1.0);
        let theta = pack(&spec, &unit_params(1, 1)).unwrap();
        let layout = spec.layout();
        assert_eq!(theta.0[layout.a1], -1.0);
        assert_eq!(theta.0[layout.log_gap], 2.5f64.ln());
    }

    #[test]
    fn pack_diagonal_covariance() {
        let spec = ModelSpec::intercept_only(1, 1, 1, 1, 1, 1.0);
        let mut params = unit_params(1, 1);
        params.sigma_b = RandomEffectsCov::from_full(1, 1, DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0])).unwrap();
        let theta = pack(&spec, &params).unwrap();
        let c = &theta.0[spec.layout().chol];
        assert_abs_diff_eq!(c[0], 2f64.ln(), epsilon = 1e-15);
        assert_eq!(c[1], 0.0);
        assert_abs_diff_eq!(c[2], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn build_sigma_b_examples() {
        let s = build_sigma_b(&[0.0, 0.0, 0.0], 1, 1).unwrap();
        assert_eq!(s.full(), &DMatrix::identity(2, 2));

        let s = build_sigma_b(&[2f64.ln()], 1, 0).unwrap();
        assert_abs_diff_eq!(s.full()[(0, 0)], 4.0, epsilon = 1e-14);

        let s = build_sigma_b(&[0.0, 0.5, 0.0], 1, 1).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.25]);
        assert_abs_diff_eq!(s.full(), &expected, epsilon = 1e-15);

        assert!(build_sigma_b(&[0.0, 0.0], 1, 1).is_err());
    }

    #[test]
    fn cross_block_positions() {
        let mut spec = ModelSpec::intercept_only(1, 1, 1, 1, 1, 1.0);
        spec.q1 = 2;
        spec.d1 = vec![2];
        spec.u1_index = vec![vec![0, 1]];
        let layout = spec.layout();
        // rows: (0,0) | (1,0) (1,1) | (2,0) (2,1) (2,2)
        let start = layout.chol.start;
        assert_eq!(layout.cross_block(), vec![start + 3, start + 4]);
    }

    #[test]
    fn unpack_rejects_non_finite() {
        let spec = ModelSpec::intercept_only(1, 1, 1, 1, 1, 1.0);
        let mut theta = pack(&spec, &unit_params(1, 1)).unwrap();
        theta.0[0] = f64::NAN;
        assert!(matches!(unpack(&spec, &theta), Err(Error::InvalidParameter(_))));
    }

    #[test]
    fn unpack_extreme_gap_keeps_order() {
        let spec = ModelSpec::intercept_only(1, 1, 1, 0, 0, 1.0);
        let theta = UnconstrainedParams(vec![0.0, 0.0, 1e6, -1e6, 40.0]);
        let p = unpack(&spec, &theta).unwrap();
        assert!(p.a1 < p.a2);
        assert!(p.rho.abs() < 1.0);
    }

    #[test]
    fn json_round_trip_of_covariance_blocks() {
        let s = build_sigma_b(&[0.1, 0.3, -0.2], 1, 1).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: RandomEffectsCov = serde_json::from_str(&text).unwrap();
        assert_abs_diff_eq!(back.full(), s.full(), epsilon = 1e-15);
        let empty: RandomEffectsCov = serde_json::from_str(r#"{"sigma1":[],"sigma2":[]}"#).unwrap();
        assert_eq!(empty.dim(), 0);
        let bad = serde_json::from_str::<RandomEffectsCov>(r#"{"sigma1":[[1.0]],"sigma2":[[1.0]],"sigma12":[[2.0]]}"#);
        assert!(bad.is_err());
    }

    fn arb_params() -> impl Strategy<Value = (ModelSpec, Parameters)> {
        (
            0usize..3,
            0usize..3,
            prop::collection::vec(-3.0f64..3.0, 4),
            -2.0f64..2.0,
            -3.0f64..3.0,
            prop::collection::vec(-1.5f64..1.5, 21),
            -0.99f64..0.99,
        )
            .prop_map(|(q1, q2, betas, a1, log_gap, chol, rho)| {
                let spec = ModelSpec {
                    m: 1,
                    n: 1,
                    p: 2,
                    q1,
                    q2,
                    dt: 1.0,
                    d1: vec![1, 3],
                    d2: vec![0, 3],
                    u1_index: vec![(0..q1).collect(), (0..q1).collect()],
                    u2_index: vec![vec![], (0..q2).collect()],
                };
                let q = q1 + q2;
                let sigma_b = build_sigma_b(&chol[..q * (q + 1) / 2], q1, q2).unwrap();
                let params = Parameters {
                    beta1: vec![vec![betas[0]], vec![betas[1], betas[2], betas[3]]],
                    beta2: vec![vec![], vec![betas[3], betas[0], betas[1]]],
                    a1,
                    a2: a1 + log_gap.exp(),
                    sigma_b,
                    rho,
                };
                (spec, params)
            })
    }

    fn close(a: f64, b: f64, scale: f64) -> bool {
        (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(scale)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn pack_unpack_round_trip((spec, params) in arb_params()) {
            let theta = pack(&spec, &params).unwrap();
            let back = unpack(&spec, &theta).unwrap();
            for (x, y) in params.beta1.iter().flatten().zip(back.beta1.iter().flatten()) {
                prop_assert_eq!(x, y);
            }
            for (x, y) in params.beta2.iter().flatten().zip(back.beta2.iter().flatten()) {
                prop_assert_eq!(x, y);
            }
            prop_assert_eq!(params.a1, back.a1);
            prop_assert!(close(params.a2, back.a2, 1.0));
            prop_assert!(close(params.rho, back.rho, 1.0));
            let scale = params.sigma_b.full().amax();
            for (x, y) in params.sigma_b.full().iter().zip(back.sigma_b.full().iter()) {
                prop_assert!(close(*x, *y, scale), "{} vs {}", x, y);
            }
        }

        #[test]
        fn sigma_b_is_positive_definite(chol in prop::collection::vec(-5.0f64..5.0, 10)) {
            let s = build_sigma_b(&chol, 2, 2).unwrap();
            prop_assert!(s.cholesky().is_ok());
        }

        #[test]
        fn unpack_orders_boundaries(theta in prop::collection::vec(-1e3f64..1e3, 8)) {
            let spec = ModelSpec::intercept_only(1, 1, 1, 1, 1, 1.0);
            let p = unpack(&spec, &UnconstrainedParams(theta)).unwrap();
            prop_assert!(p.a1 < p.a2);
            prop_assert!(p.rho.abs() < 1.0);
        }
    }
}
