//! Entropy functions, their convex conjugates, and the proximity operator
//! driving the generalized Sinkhorn update.
//!
//! Two marginal penalties are supported:
//!
//! * `Balanced` — a hard marginal constraint (the divergence is 0 when the
//!   marginal matches exactly and +inf otherwise); its conjugate is the
//!   identity `q`, and the proximity operator is the identity map.
//! * `Kl(rho)` — the scaled Kullback–Leibler penalty with entropy
//!   `phi(p) = rho * (p ln p - p + 1)`, conjugate
//!   `phi*(q) = rho * (exp(q/rho) - 1)`, and proximity operator
//!   `p -> rho * p / (rho + epsilon)`.
//!
//! Total-variation penalties are deliberately not offered: the dual
//! potentials are not unique there, which breaks the fixed-point iteration's
//! determinism contract.

use crate::error::{Error, Result};

/// Marginal penalty attached to one arm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Divergence {
    /// Exact marginal constraint.
    Balanced,
    /// Scaled KL penalty with scale `rho > 0`.
    Kl { rho: f64 },
}

impl Divergence {
    pub fn kl(rho: f64) -> Result<Self> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "kl scale must be a positive finite number, got {rho}"
            )));
        }
        Ok(Divergence::Kl { rho })
    }

    /// The entropy function `phi(p)` for `p >= 0`.
    pub fn phi(&self, p: f64) -> f64 {
        match self {
            Divergence::Balanced => {
                if p == 1.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            Divergence::Kl { rho } => {
                if p == 0.0 {
                    *rho
                } else {
                    rho * (p * p.ln() - p + 1.0)
                }
            }
        }
    }

    /// The Legendre–Fenchel conjugate `phi*(q)`.
    pub fn phi_star(&self, q: f64) -> f64 {
        match self {
            Divergence::Balanced => q,
            Divergence::Kl { rho } => rho * ((q / rho).exp() - 1.0),
        }
    }

    /// Derivative of the conjugate, `d/dq phi*(q)`.
    pub fn phi_star_deriv(&self, q: f64) -> f64 {
        match self {
            Divergence::Balanced => 1.0,
            Divergence::Kl { rho } => (q / rho).exp(),
        }
    }

    /// The proximity operator `argmin_q eps * exp((p - q)/eps) + phi*(q)`.
    pub fn aprox(&self, p: f64, epsilon: f64) -> Result<f64> {
        if !p.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "aprox input must be finite, got {p}"
            )));
        }
        if !(epsilon > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        Ok(match self {
            Divergence::Balanced => p,
            Divergence::Kl { rho } => rho * p / (rho + epsilon),
        })
    }

    /// Damping factor `f` such that `aprox(p) = f * p`; used by the solver's
    /// vectorized update.
    pub(crate) fn aprox_factor(&self, epsilon: f64) -> f64 {
        match self {
            Divergence::Balanced => 1.0,
            Divergence::Kl { rho } => rho / (rho + epsilon),
        }
    }

    pub fn is_balanced(&self) -> bool {
        matches!(self, Divergence::Balanced)
    }
}

/// The divergence `D_phi(mu || nu)` between two discrete weight vectors on
/// the same support: `sum_k nu_k phi(mu_k / nu_k)` plus the recession term
/// for mass of `mu` sitting on `nu`-null atoms (for both shipped kinds the
/// recession constant is +inf, so any such mass yields +inf).
pub fn phi_divergence(spec: &Divergence, mu: &[f64], nu: &[f64]) -> Result<f64> {
    if mu.len() != nu.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} vs {} atoms",
            mu.len(),
            nu.len()
        )));
    }
    if mu.iter().chain(nu.iter()).any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidArgument(
            "phi_divergence weights must be finite and nonnegative".into(),
        ));
    }
    match spec {
        Divergence::Balanced => {
            let equal = mu.iter().zip(nu.iter()).all(|(a, b)| a == b);
            Ok(if equal { 0.0 } else { f64::INFINITY })
        }
        Divergence::Kl { .. } => {
            let mut acc = 0.0;
            for (&m, &n) in mu.iter().zip(nu.iter()) {
                if n == 0.0 {
                    if m > 0.0 {
                        return Ok(f64::INFINITY);
                    }
                } else {
                    acc += n * spec.phi(m / n);
                }
            }
            Ok(acc)
        }
    }
}
