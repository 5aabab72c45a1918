//! Bootstrap resampling for standard deviations and percentile intervals
//! of any estimator that maps a dataset to a real number.

use crate::error::{Error, Result};
use crate::measures::Dataset;
use crate::rng::Rng;
use ndarray::{Array1, Array2};

/// How bootstrap resamples are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BootstrapMode {
    /// Resample within each arm independently, preserving arm sizes, so
    /// every replicate keeps all arms populated at fixed proportions.
    Stratified,
    /// Resample rows from the pooled dataset; arm sizes vary and a
    /// replicate that empties an arm counts as a failure.
    Pooled,
}

/// Share of failed replicates (estimator error or empty arm) above which
/// the whole bootstrap errors out.
pub const MAX_FAILURE_SHARE: f64 = 0.2;

/// One bootstrap resample: the rebuilt dataset plus, for each arm, the
/// positions drawn into it (indices into that arm's original member list,
/// usable to warm-start solvers on the resampled measures).
pub struct Resample {
    pub dataset: Dataset,
    pub arm_positions: Vec<Vec<usize>>,
}

/// Bootstrap distribution summary for a scalar estimator.
#[derive(Debug, Clone)]
pub struct BootstrapSummary {
    /// Estimate on the original data.
    pub point: f64,
    /// Successful replicate estimates, in replicate-index order.
    pub replicates: Vec<f64>,
    /// Sample standard deviation of the replicates (divisor B-1).
    pub sd: f64,
    /// Percentile interval at (alpha/2, 1 - alpha/2).
    pub interval: (f64, f64),
    pub seed: u64,
    pub b: usize,
    /// Replicates that returned an error and were excluded.
    pub failures: usize,
    /// Per successful replicate, each arm's share of the sample.
    pub arm_fractions: Vec<Vec<f64>>,
}

/// Draw one resample of `dataset` with the given mode.
pub fn resample(dataset: &Dataset, mode: BootstrapMode, rng: &mut Rng) -> Result<Resample> {
    let arms = dataset.arms();
    let d = dataset.covariates().ncols();
    let mut arm_positions: Vec<Vec<usize>> = vec![Vec::new(); arms];
    let mut rows: Vec<usize> = Vec::with_capacity(dataset.len());
    let mut treatment: Vec<usize> = Vec::with_capacity(dataset.len());
    match mode {
        BootstrapMode::Stratified => {
            for arm in 0..arms {
                let members = dataset.arm_indices(arm);
                let picks = rng.resample_indices(members.len(), members.len());
                for &p in &picks {
                    rows.push(members[p]);
                    treatment.push(arm);
                }
                arm_positions[arm] = picks;
            }
        }
        BootstrapMode::Pooled => {
            // per-arm counters so positions stay meaningful per arm
            let member_pos: Vec<std::collections::HashMap<usize, usize>> = (0..arms)
                .map(|arm| {
                    dataset
                        .arm_indices(arm)
                        .iter()
                        .enumerate()
                        .map(|(pos, &row)| (row, pos))
                        .collect()
                })
                .collect();
            let picks = rng.resample_indices(dataset.len(), dataset.len());
            for &row in &picks {
                let arm = dataset.treatment()[row];
                rows.push(row);
                treatment.push(arm);
                arm_positions[arm].push(member_pos[arm][&row]);
            }
        }
    }
    let mut covariates = Array2::zeros((rows.len(), d));
    let mut outcomes = Array1::zeros(rows.len());
    for (new_row, &old_row) in rows.iter().enumerate() {
        for c in 0..d {
            covariates[[new_row, c]] = dataset.covariates()[[old_row, c]];
        }
        outcomes[new_row] = dataset.outcomes()[old_row];
    }
    let dataset = Dataset::new(
        covariates,
        treatment,
        outcomes,
        dataset.names().to_vec(),
    )?;
    Ok(Resample {
        dataset,
        arm_positions,
    })
}

/// Type-7 (linear-interpolation) quantile of an ascending slice.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let m = sorted.len();
    if m == 1 {
        return sorted[0];
    }
    let h = (m - 1) as f64 * p;
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo + 1 >= m {
        sorted[m - 1]
    } else {
        sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
    }
}

/// Run `estimator` on the original data and on `b` resamples. The
/// estimator receives the resampled dataset plus per-arm drawn positions
/// (identity positions for the original run) so solver-backed estimators
/// can warm-start. Replicate `i` draws its resample from a deterministic
/// child seed of (`seed`, `i`); failed replicates are excluded and
/// counted, erroring out above [`MAX_FAILURE_SHARE`].
pub fn bootstrap<F>(
    dataset: &Dataset,
    mut estimator: F,
    b: usize,
    seed: u64,
    alpha: f64,
    mode: BootstrapMode,
) -> Result<BootstrapSummary>
where
    F: FnMut(&Dataset, &[Vec<usize>]) -> Result<f64>,
{
    if b < 2 {
        return Err(Error::InvalidArgument(
            "bootstrap needs at least two replicates".into(),
        ));
    }
    if !(0.0..1.0).contains(&alpha) || alpha <= 0.0 {
        return Err(Error::InvalidArgument(
            "alpha must lie strictly between 0 and 1".into(),
        ));
    }
    let identity: Vec<Vec<usize>> = (0..dataset.arms())
        .map(|arm| (0..dataset.arm_indices(arm).len()).collect())
        .collect();
    let point = estimator(dataset, &identity)?;
    let mut replicates = Vec::with_capacity(b);
    let mut arm_fractions = Vec::with_capacity(b);
    let mut failures = 0usize;
    for i in 0..b {
        let mut rng = Rng::child(seed, i as u64);
        let outcome = resample(dataset, mode, &mut rng)
            .and_then(|rs| estimator(&rs.dataset, &rs.arm_positions).map(|v| (rs, v)));
        match outcome {
            Ok((rs, value)) if value.is_finite() => {
                let n = rs.dataset.len() as f64;
                arm_fractions.push(
                    (0..rs.dataset.arms())
                        .map(|arm| rs.arm_positions[arm].len() as f64 / n)
                        .collect(),
                );
                replicates.push(value);
            }
            _ => failures += 1,
        }
    }
    if (failures as f64) > MAX_FAILURE_SHARE * b as f64 {
        return Err(Error::BootstrapFailures {
            failed: failures,
            total: b,
        });
    }
    let m = replicates.len();
    let mean = replicates.iter().sum::<f64>() / m as f64;
    let sd = if m > 1 {
        (replicates.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64)
            .sqrt()
    } else {
        0.0
    };
    let mut sorted = replicates.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let interval = (
        percentile(&sorted, alpha / 2.0),
        percentile(&sorted, 1.0 - alpha / 2.0),
    );
    Ok(BootstrapSummary {
        point,
        replicates,
        sd,
        interval,
        seed,
        b,
        failures,
        arm_fractions,
    })
}
