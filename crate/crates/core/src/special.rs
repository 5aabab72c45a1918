//! Scalar special functions backing the balance tests: log-gamma, the
//! regularized incomplete beta, tail probabilities for Student t and F
//! statistics, and the Kolmogorov sup-norm limit distribution.
//!
//! Everything is implemented from scratch (Lanczos approximation plus a
//! modified-Lentz continued fraction); absolute accuracy is ~1e-12 or better
//! over the ranges exercised here, verified against high-precision oracles
//! in the test suites.

use crate::error::{Error, Result};

/// Lanczos coefficients (g = 7, 9 terms), giving ~15 significant digits for
/// real arguments.
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// Natural log of the gamma function for positive real `z`.
pub fn ln_gamma(z: f64) -> f64 {
    if z < 0.5 {
        // reflection: Gamma(z) Gamma(1-z) = pi / sin(pi z)
        let pi = std::f64::consts::PI;
        return (pi / (pi * z).sin()).ln() - ln_gamma(1.0 - z);
    }
    let z = z - 1.0;
    let mut x = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        x += c / (z + i as f64);
    }
    let t = z + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (z + 0.5) * t.ln() - t + x.ln()
}

/// Continued fraction for the incomplete beta (modified Lentz), valid for
/// x < (a + 1) / (a + b + 2).
fn beta_cont_frac(a: f64, b: f64, x: f64) -> Result<f64> {
    const MAX_ITER: usize = 300;
    const EPS: f64 = 1e-15;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            return Ok(h);
        }
    }
    Err(Error::InvalidArgument(format!(
        "incomplete beta continued fraction failed to converge (a={a}, b={b}, x={x})"
    )))
}

/// Regularized incomplete beta function I_x(a, b) for a, b > 0 and
/// x in [0, 1].
pub fn reg_inc_beta(a: f64, b: f64, x: f64) -> Result<f64> {
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "incomplete beta needs positive shape parameters, got a={a}, b={b}"
        )));
    }
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::InvalidArgument(format!(
            "incomplete beta argument outside [0,1]: {x}"
        )));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    if x == 1.0 {
        return Ok(1.0);
    }
    let ln_front =
        ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    let v = if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cont_frac(a, b, x)? / a
    } else {
        1.0 - front * beta_cont_frac(b, a, 1.0 - x)? / b
    };
    Ok(v.clamp(0.0, 1.0))
}

/// Two-sided p-value of a Student-t statistic with `df` degrees of freedom
/// (fractional df allowed, as Satterthwaite produces).
pub fn student_t_two_sided(t: f64, df: f64) -> Result<f64> {
    if !(df > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "t distribution needs positive degrees of freedom, got {df}"
        )));
    }
    if !t.is_finite() {
        return Ok(0.0);
    }
    reg_inc_beta(0.5 * df, 0.5, df / (df + t * t))
}

/// CDF of the F distribution with (d1, d2) degrees of freedom at `r >= 0`.
pub fn f_cdf(r: f64, d1: f64, d2: f64) -> Result<f64> {
    if !(d1 > 0.0 && d2 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "F distribution needs positive degrees of freedom, got ({d1}, {d2})"
        )));
    }
    if !(r >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "F statistic must be nonnegative, got {r}"
        )));
    }
    reg_inc_beta(0.5 * d1, 0.5 * d2, d1 * r / (d1 * r + d2))
}

/// Kolmogorov limit tail Q(lambda) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2
/// lambda^2): the limiting probability that the scaled empirical sup-norm
/// discrepancy exceeds `lambda`.
pub fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda <= 0.2 {
        // Q(0.2) differs from 1 by ~4e-14; the alternating series loses
        // precision here, the limit does not
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for k in 1..=200 {
        let term = (-2.0 * (k as f64) * (k as f64) * lambda * lambda).exp();
        sum += sign * term;
        if term < 1e-18 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}
