//! Covariate-balance diagnostics for two-arm datasets: Welch's t-test for
//! means, the F-test for variance ratios, the two-sample Kolmogorov–Smirnov
//! test, and a per-covariate balance table computed either on the raw arms
//! or with one arm replaced by its matched representation.

use crate::error::{Error, Result};
use crate::matching::ConditionalWeights;
use crate::measures::Dataset;
use crate::special::{f_cdf, kolmogorov_q, student_t_two_sided};

fn mean_and_variance(sample: &[f64]) -> (f64, f64) {
    let n = sample.len() as f64;
    let mean = sample.iter().sum::<f64>() / n;
    let var = sample.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

fn require_size(sample: &[f64], min: usize, what: &str) -> Result<()> {
    if sample.len() < min {
        return Err(Error::InvalidArgument(format!(
            "{what} needs samples of at least {min}, got {}",
            sample.len()
        )));
    }
    if sample.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "{what} requires finite sample values"
        )));
    }
    Ok(())
}

/// Welch's unequal-variance t-test: returns the statistic and the two-sided
/// p-value with Satterthwaite degrees of freedom. When both sample variances
/// are zero the p-value is 1 if the means agree and 0 otherwise.
pub fn welch_t(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    require_size(a, 2, "the t-test")?;
    require_size(b, 2, "the t-test")?;
    let (ma, va) = mean_and_variance(a);
    let (mb, vb) = mean_and_variance(b);
    let sa = va / a.len() as f64;
    let sb = vb / b.len() as f64;
    let se2 = sa + sb;
    if se2 == 0.0 {
        return if ma == mb {
            Ok((0.0, 1.0))
        } else {
            Ok((f64::INFINITY * (ma - mb).signum(), 0.0))
        };
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2
        / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let p = student_t_two_sided(t, df)?;
    Ok((t, p))
}

/// F-test for equality of variances: returns var(a)/var(b) (sample
/// variances, divisor n-1) and the two-sided p-value
/// 2 min(P(F <= r), P(F >= r)) under F(n_a - 1, n_b - 1).
pub fn f_variance(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    require_size(a, 2, "the variance-ratio test")?;
    require_size(b, 2, "the variance-ratio test")?;
    let (_, va) = mean_and_variance(a);
    let (_, vb) = mean_and_variance(b);
    if va <= 0.0 || vb <= 0.0 {
        return Err(Error::InvalidArgument(
            "the variance-ratio test needs strictly positive variances in both samples"
                .into(),
        ));
    }
    let ratio = va / vb;
    let cdf = f_cdf(ratio, a.len() as f64 - 1.0, b.len() as f64 - 1.0)?;
    Ok((ratio, 2.0 * cdf.min(1.0 - cdf)))
}

/// Two-sample Kolmogorov–Smirnov test: the exact sup-norm distance between
/// the empirical CDFs and its p-value from the Kolmogorov limit
/// distribution, using the effective size n_e = n_a n_b / (n_a + n_b) with
/// the small-sample adjustment
/// lambda = (sqrt(n_e) + 0.12 + 0.11 / sqrt(n_e)) * D.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    require_size(a, 1, "the Kolmogorov–Smirnov test")?;
    require_size(b, 1, "the Kolmogorov–Smirnov test")?;
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (na, nb) = (sa.len(), sb.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < na && j < nb {
        let x = sa[i].min(sb[j]);
        while i < na && sa[i] == x {
            i += 1;
        }
        while j < nb && sb[j] == x {
            j += 1;
        }
        let diff = (i as f64 / na as f64 - j as f64 / nb as f64).abs();
        if diff > d {
            d = diff;
        }
    }
    // once one sample is exhausted the gap only shrinks back to zero
    let ne = (na as f64 * nb as f64) / (na + nb) as f64;
    let lambda = (ne.sqrt() + 0.12 + 0.11 / ne.sqrt()) * d;
    Ok((d, kolmogorov_q(lambda)))
}

/// Which covariate columns a balance table reports, and whether matched
/// mixtures of each column snap to integers (indicator or count variables)
/// before testing.
#[derive(Debug, Clone, Copy)]
pub struct BalanceColumn {
    pub index: usize,
    pub discrete: bool,
}

impl BalanceColumn {
    pub fn continuous(index: usize) -> Self {
        BalanceColumn {
            index,
            discrete: false,
        }
    }

    pub fn discrete(index: usize) -> Self {
        BalanceColumn {
            index,
            discrete: true,
        }
    }
}

/// One covariate's row of the balance table.
#[derive(Debug, Clone)]
pub struct BalanceRow {
    pub covariate: String,
    /// Mean in arm 0 (raw, or matched mixture when arm 0 is the replaced
    /// side).
    pub mean_arm0: f64,
    /// Mean in arm 1 under the same convention.
    pub mean_arm1: f64,
    pub t_p_value: f64,
    pub variance_ratio: f64,
    pub f_p_value: f64,
    pub ks_p_value: f64,
}

fn raw_column(dataset: &Dataset, arm: usize, col: usize) -> Vec<f64> {
    dataset
        .arm_indices(arm)
        .iter()
        .map(|&i| dataset.covariates()[[i, col]])
        .collect()
}

/// Matched representation of the weights' source arm for one covariate
/// column: each retained source unit becomes the weighted mixture of its
/// matched target-arm covariate values; discrete columns snap to the
/// nearest integer. Dropped units are omitted.
fn matched_column(
    dataset: &Dataset,
    weights: &ConditionalWeights,
    col: &BalanceColumn,
) -> Vec<f64> {
    let target_idx = dataset.arm_indices(weights.target_arm());
    let mut out = Vec::with_capacity(weights.n_source());
    for (i, dropped) in weights.dropped().iter().enumerate() {
        if *dropped {
            continue;
        }
        let mixed: f64 = weights
            .row(i)
            .iter()
            .zip(&target_idx)
            .map(|(w, &t)| w * dataset.covariates()[[t, col.index]])
            .sum();
        out.push(if col.discrete { mixed.round() } else { mixed });
    }
    out
}

/// Per-covariate balance rows comparing the two arms of `dataset`. With
/// `matched` absent the raw arms are compared; with conditional match
/// weights, the weights' source arm is replaced by its matched
/// representation (see [`matched_column`]) while the other arm stays raw.
pub fn balance_report(
    dataset: &Dataset,
    matched: Option<&ConditionalWeights>,
    columns: &[BalanceColumn],
) -> Result<Vec<BalanceRow>> {
    if dataset.arms() != 2 {
        return Err(Error::InvalidArgument(format!(
            "balance tables compare exactly two arms, got {}",
            dataset.arms()
        )));
    }
    if let Some(w) = matched {
        if w.source_arm() >= 2 || w.target_arm() >= 2 || w.source_arm() == w.target_arm() {
            return Err(Error::InvalidArgument(
                "matched weights must map one of the two arms onto the other".into(),
            ));
        }
        if w.n_source() != dataset.arm_indices(w.source_arm()).len()
            || w.n_target() != dataset.arm_indices(w.target_arm()).len()
        {
            return Err(Error::DimensionMismatch(format!(
                "matched weights are {}x{} but the arms have {} and {} members",
                w.n_source(),
                w.n_target(),
                dataset.arm_indices(w.source_arm()).len(),
                dataset.arm_indices(w.target_arm()).len()
            )));
        }
    }
    let names = dataset.names();
    let mut rows = Vec::with_capacity(columns.len());
    for col in columns {
        if col.index >= names.len() {
            return Err(Error::InvalidArgument(format!(
                "covariate column {} out of range ({} columns)",
                col.index,
                names.len()
            )));
        }
        let (sample0, sample1) = match matched {
            None => (
                raw_column(dataset, 0, col.index),
                raw_column(dataset, 1, col.index),
            ),
            Some(w) if w.source_arm() == 1 => (
                raw_column(dataset, 0, col.index),
                matched_column(dataset, w, col),
            ),
            Some(w) => (
                matched_column(dataset, w, col),
                raw_column(dataset, 1, col.index),
            ),
        };
        let (m0, _) = mean_and_variance(&sample0);
        let (m1, _) = mean_and_variance(&sample1);
        let (_, t_p) = welch_t(&sample0, &sample1)?;
        let (ratio, f_p) = f_variance(&sample0, &sample1)?;
        let (_, ks_p) = ks_two_sample(&sample0, &sample1)?;
        rows.push(BalanceRow {
            covariate: names[col.index].clone(),
            mean_arm0: m0,
            mean_arm1: m1,
            t_p_value: t_p,
            variance_ratio: ratio,
            f_p_value: f_p,
            ks_p_value: ks_p,
        });
    }
    Ok(rows)
}
