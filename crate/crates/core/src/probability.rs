//! Normal kernels and the single-event Joe approximation.
//!
//! Conditionally on the random effects, a cell's increment `Y` and log
//! reaction time `log R` are standard bivariate normal around `(eta1, eta2)`
//! with correlation `rho`. The crossing event is `{Y < a1} ∪ {Y > a2}`.
//! The conditional CDF of `log R` given the event is approximated by a
//! linear regression on the event indicator:
//!
//! ```text
//! F(r*) ≈ Φ(r* - eta2) + Ω21 Ω11⁻¹ (1 - p_event)
//! ```
//!
//! with `Ω21 = Cov(1{log R ≤ r*}, 1{event})` and `Ω11 = Var(1{event})`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::model::RandomEffectsCov;

/// Lower and upper clamp for `p_low` / `p_high` before they reach a division.
pub const PROB_FLOOR: f64 = 1e-12;
/// `omega11` below this is treated as a degenerate conditioning event.
pub const OMEGA11_FLOOR: f64 = 1e-24;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z - LN_SQRT_2PI).exp()
}

#[inline]
pub fn normal_log_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

// Gauss-Legendre half-rules on [-1, 1] (negative abscissas) with 6, 12 and 20 points.
const GL_X: [&[f64]; 3] = [
    &[-0.932_469_514_203_152_2, -0.661_209_386_466_264_7, -0.238_619_186_083_197],
    &[
        -0.981_560_634_246_719_1,
        -0.904_117_256_370_475,
        -0.769_902_674_194_305,
        -0.587_317_954_286_617_1,
        -0.367_831_498_998_180_2,
        -0.125_233_408_511_469_2,
    ],
    &[
        -0.993_128_599_185_094_9,
        -0.963_971_927_277_913_8,
        -0.912_234_428_251_325_9,
        -0.839_116_971_822_218_8,
        -0.746_331_906_460_150_8,
        -0.636_053_680_726_515,
        -0.510_867_001_950_827_1,
        -0.373_706_088_715_419_6,
        -0.227_785_851_141_645_1,
        -0.076_526_521_133_497_33,
    ],
];
const GL_W: [&[f64]; 3] = [
    &[0.171_324_492_379_170_5, 0.360_761_573_048_138_4, 0.467_913_934_572_690_4],
    &[
        0.047_175_336_386_511_77,
        0.106_939_325_995_318_3,
        0.160_078_328_543_346_4,
        0.203_167_426_723_065_9,
        0.233_492_536_538_354_7,
        0.249_147_045_813_402_9,
    ],
    &[
        0.017_614_007_139_152_12,
        0.040_601_429_800_386_94,
        0.062_672_048_334_109_06,
        0.083_276_741_576_704_75,
        0.101_930_119_817_240_4,
        0.118_194_531_961_518_4,
        0.131_688_638_449_176_6,
        0.142_096_109_318_382_1,
        0.149_172_986_472_603_7,
        0.152_753_387_130_725_9,
    ],
];

/// `P(Z1 ≤ z1, Z2 ≤ z2)` for a standard bivariate normal with correlation `rho`.
///
/// Genz's refinement of the Drezner-Wesolowsky method: Gauss-Legendre
/// integration of Plackett's identity over `asin(rho)` for moderate
/// correlations and an expansion around `|rho| = 1` otherwise. Absolute
/// error is at the level of 1e-15.
pub fn bivariate_normal_cdf(z1: f64, z2: f64, rho: f64) -> Result<f64> {
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidParameter(format!("correlation must lie in (-1, 1), got {rho}")));
    }
    if z1.is_nan() || z2.is_nan() {
        return Err(Error::InvalidParameter("bivariate normal limits must not be NaN".into()));
    }
    if z1 == f64::NEG_INFINITY || z2 == f64::NEG_INFINITY {
        return Ok(0.0);
    }
    if z1 == f64::INFINITY {
        return Ok(normal_cdf(z2));
    }
    if z2 == f64::INFINITY {
        return Ok(normal_cdf(z1));
    }
    Ok(upper_orthant(-z1, -z2, rho))
}

/// `P(Z1 > h, Z2 > k)`.
fn upper_orthant(h: f64, k: f64, r: f64) -> f64 {
    let rule = if r.abs() < 0.3 {
        0
    } else if r.abs() < 0.75 {
        1
    } else {
        2
    };
    let (xs, ws) = (GL_X[rule], GL_W[rule]);
    let mut k = k;
    let mut hk = h * k;
    let mut bvn = 0.0;

    if r.abs() < 0.925 {
        let hs = (h * h + k * k) / 2.0;
        let asr = r.asin();
        for (&x, &w) in xs.iter().zip(ws) {
            for sign in [-1.0, 1.0] {
                let sn = (asr * (1.0 + sign * x) / 2.0).sin();
                bvn += w * ((sn * hk - hs) / (1.0 - sn * sn)).exp();
            }
        }
        bvn = bvn * asr / (4.0 * PI) + normal_cdf(-h) * normal_cdf(-k);
    } else {
        if r < 0.0 {
            k = -k;
            hk = -hk;
        }
        if r.abs() < 1.0 {
            let as_ = (1.0 - r) * (1.0 + r);
            let mut a = as_.sqrt();
            let bs = (h - k) * (h - k);
            let c = (4.0 - hk) / 8.0;
            let d = (12.0 - hk) / 16.0;
            bvn = a * (-(bs / as_ + hk) / 2.0).exp()
                * (1.0 - c * (bs - as_) * (1.0 - d * bs / 5.0) / 3.0 + c * d * as_ * as_ / 5.0);
            if hk > -160.0 {
                let b = bs.sqrt();
                bvn -= (-hk / 2.0).exp()
                    * (2.0 * PI).sqrt()
                    * normal_cdf(-b / a)
                    * b
                    * (1.0 - c * bs * (1.0 - d * bs / 5.0) / 3.0);
            }
            a /= 2.0;
            for (&x, &w) in xs.iter().zip(ws) {
                for sign in [-1.0, 1.0] {
                    let t = a * (sign * x + 1.0);
                    let xs2 = t * t;
                    let rs = (1.0 - xs2).sqrt();
                    bvn += a
                        * w
                        * ((-bs / (2.0 * xs2) - hk / (1.0 + rs)).exp() / rs
                            - (-(bs / xs2 + hk) / 2.0).exp() * (1.0 + c * xs2 * (1.0 + d * xs2)));
                }
            }
            bvn = -bvn / (2.0 * PI);
        }
        if r > 0.0 {
            bvn += normal_cdf(-h.max(k));
        } else {
            bvn = -bvn;
            if k > h {
                if h < 0.0 {
                    bvn += normal_cdf(k) - normal_cdf(h);
                } else {
                    bvn += normal_cdf(-h) - normal_cdf(-k);
                }
            }
        }
    }
    bvn.clamp(0.0, 1.0)
}

/// Probabilities of the two tails of the crossing event for one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossingProbs {
    pub m1: f64,
    pub m2: f64,
    pub p_low: f64,
    pub p_high: f64,
    pub p_event: f64,
    /// `1 - p_event`, computed from whichever side avoids cancellation.
    pub p_band: f64,
    /// True if any of the probabilities hit the clamp.
    pub clamped: bool,
}

/// `Φ(m1)` and `1 - Φ(m2)` with `m = (a - eta1) / sd`, each clamped to
/// `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub fn crossing_probs(a1: f64, a2: f64, eta1: f64, sd: f64) -> Result<CrossingProbs> {
    if !(sd > 0.0) {
        return Err(Error::InvalidParameter(format!("standard deviation must be positive, got {sd}")));
    }
    if !(a1 < a2) {
        return Err(Error::InvalidParameter(format!("a1 must be below a2 (a1 = {a1}, a2 = {a2})")));
    }
    Ok(crossing_probs_unchecked(a1, a2, eta1, sd))
}

#[inline]
pub(crate) fn crossing_probs_unchecked(a1: f64, a2: f64, eta1: f64, sd: f64) -> CrossingProbs {
    let m1 = (a1 - eta1) / sd;
    let m2 = (a2 - eta1) / sd;
    let raw_low = normal_cdf(m1);
    let raw_high = normal_cdf(-m2);
    let p_low = raw_low.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    let p_high = raw_high.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    let raw_band = if m1 >= 0.0 {
        normal_cdf(-m1) - normal_cdf(-m2)
    } else if m2 <= 0.0 {
        normal_cdf(m2) - normal_cdf(m1)
    } else {
        1.0 - raw_low - raw_high
    };
    let inflated = raw_band - (p_low - raw_low) - (p_high - raw_high);
    let (p_event, p_band) = if inflated < PROB_FLOOR {
        (1.0 - PROB_FLOOR, PROB_FLOOR)
    } else {
        (p_low + p_high, inflated)
    };
    CrossingProbs {
        m1,
        m2,
        p_low,
        p_high,
        p_event,
        p_band,
        clamped: p_low != raw_low || p_high != raw_high || inflated < PROB_FLOOR,
    }
}

/// Variance of the crossing indicator, `p_event * (1 - p_event)`.
#[inline]
pub fn omega11(cp: &CrossingProbs) -> f64 {
    cp.p_event * cp.p_band
}

/// Covariance between `1{log R ≤ r*}` and the crossing indicator.
///
/// The joint term is split into its two tails,
/// `P(log R ≤ r*, Y < a1) + P(log R ≤ r*, Y > a2)`, each evaluated as a
/// single bivariate CDF. Zero whenever `rho == 0`.
pub fn omega21(r_star: f64, eta1: f64, eta2: f64, a1: f64, a2: f64, rho: f64) -> Result<f64> {
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidParameter(format!("correlation must lie in (-1, 1), got {rho}")));
    }
    if rho == 0.0 {
        return Ok(0.0);
    }
    let x = r_star - eta2;
    let joint_low = bivariate_normal_cdf(x, a1 - eta1, rho)?;
    let joint_high = bivariate_normal_cdf(x, eta1 - a2, -rho)?;
    let marginal = normal_cdf(x);
    let low = normal_cdf(a1 - eta1);
    let high = normal_cdf(eta1 - a2);
    Ok((joint_low - marginal * low) + (joint_high - marginal * high))
}

fn regression_slope(cp: &CrossingProbs) -> Result<f64> {
    let o11 = omega11(cp);
    if !(o11 >= OMEGA11_FLOOR) {
        return Err(Error::DegenerateConditioning { omega11: o11, cell: None });
    }
    Ok(cp.p_band / o11)
}

/// Approximate `P(log R ≤ r* | crossing event)`.
pub fn joe_conditional_cdf(r_star: f64, eta1: f64, eta2: f64, a1: f64, a2: f64, rho: f64) -> Result<f64> {
    let cp = crossing_probs(a1, a2, eta1, 1.0)?;
    let slope = regression_slope(&cp)?;
    let o21 = omega21(r_star, eta1, eta2, a1, a2, rho)?;
    Ok((normal_cdf(r_star - eta2) + o21 * slope).clamp(0.0, 1.0))
}

/// `P(event | log R = r*)`: the increment given the reaction time is normal
/// with mean `eta1 + rho (r* - eta2)` and variance `1 - rho²`.
#[inline]
fn event_given_response(x: f64, eta1: f64, a1: f64, a2: f64, rho: f64) -> f64 {
    let s = (1.0 - rho * rho).sqrt();
    let mean = eta1 + rho * x;
    normal_cdf((a1 - mean) / s) + normal_cdf((mean - a2) / s)
}

/// Derivative in `r*` of [`joe_conditional_cdf`].
pub fn joe_conditional_density(r_star: f64, eta1: f64, eta2: f64, a1: f64, a2: f64, rho: f64) -> Result<f64> {
    if !(rho.abs() < 1.0) {
        return Err(Error::InvalidParameter(format!("correlation must lie in (-1, 1), got {rho}")));
    }
    let cp = crossing_probs(a1, a2, eta1, 1.0)?;
    Ok(joe_log_density_unchecked(r_star - eta2, eta1, a1, a2, rho, &cp)?.exp())
}

/// Log of the approximate conditional density at `x = r* - eta2`, given the
/// cell's precomputed crossing probabilities.
#[inline]
pub(crate) fn joe_log_density_unchecked(
    x: f64,
    eta1: f64,
    a1: f64,
    a2: f64,
    rho: f64,
    cp: &CrossingProbs,
) -> Result<f64> {
    let slope = regression_slope(cp)?;
    if rho == 0.0 {
        return Ok(normal_log_pdf(x));
    }
    let tilt = 1.0 + (event_given_response(x, eta1, a1, a2, rho) - cp.p_event) * slope;
    Ok(normal_log_pdf(x) + tilt.max(f64::MIN_POSITIVE).ln())
}

/// Density of `N(0, sigma_b)` at `b`.
pub fn mvn_density(b: &[f64], sigma_b: &RandomEffectsCov) -> Result<f64> {
    mvn_log_density(b, sigma_b).map(f64::exp)
}

pub fn mvn_log_density(b: &[f64], sigma_b: &RandomEffectsCov) -> Result<f64> {
    let q = sigma_b.dim();
    if b.len() != q {
        return Err(Error::InvalidParameter(format!("point has length {}, expected {q}", b.len())));
    }
    let l: DMatrix<f64> = sigma_b.cholesky()?;
    // forward substitution for L z = b
    let mut z = vec![0.0; q];
    for i in 0..q {
        let s: f64 = (0..i).map(|j| l[(i, j)] * z[j]).sum();
        z[i] = (b[i] - s) / l[(i, i)];
    }
    let log_det_half: f64 = (0..q).map(|i| l[(i, i)].ln()).sum();
    let quad: f64 = z.iter().map(|v| v * v).sum();
    Ok(-0.5 * quad - log_det_half - q as f64 * LN_SQRT_2PI)
}
