//! Comparator estimators: k-nearest-neighbor matching, logistic-propensity
//! inverse-probability weighting, and the unadjusted arm-mean difference.

use crate::error::{Error, Result};
use crate::linalg::solve_spd_in_place;
use crate::measures::Dataset;

/// Fitted logistic treatment model. Coefficients are (intercept, then one
/// slope per covariate column).
#[derive(Debug, Clone)]
pub struct PropensityModel {
    pub coefficients: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

/// How inverse-probability sums are normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IpwStyle {
    /// Unnormalized weighted sums divided by fixed counts.
    HorvitzThompson,
    /// Each weighted sum normalized by its realized weight total.
    Hajek,
}

/// Point estimates from inverse-probability weighting.
#[derive(Debug, Clone, Copy)]
pub struct IpwEstimates {
    pub ate: f64,
    pub att: f64,
}

const NEWTON_TOL: f64 = 1e-8;
const NEWTON_MAX_ITER: usize = 100;
const RIDGE: f64 = 1e-8;
const PIN_TOL: f64 = 1e-10;

fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Maximum-likelihood logistic regression of treatment on the covariates
/// (plus intercept) via Newton iterations. `ridge` adds a tiny quadratic
/// penalty on the slope terms so separated designs return a finite fit
/// instead of an error.
pub fn fit_propensity(dataset: &Dataset, ridge: bool) -> Result<PropensityModel> {
    if dataset.arms() != 2 {
        return Err(Error::InvalidArgument(
            "propensity model requires exactly two arms".into(),
        ));
    }
    let x = dataset.covariates();
    let n = x.nrows();
    let d = x.ncols() + 1; // intercept first
    let t: Vec<f64> = (0..n)
        .map(|i| dataset.treatment()[i] as f64)
        .collect();
    let mut beta = vec![0.0; d];
    let mut probs = vec![0.5; n];
    let mut iterations = 0;
    let mut converged = false;
    let row = |i: usize, j: usize| if j == 0 { 1.0 } else { x[[i, j - 1]] };
    for iter in 1..=NEWTON_MAX_ITER {
        iterations = iter;
        for (i, p) in probs.iter_mut().enumerate() {
            let mut eta = beta[0];
            for j in 1..d {
                eta += beta[j] * x[[i, j - 1]];
            }
            *p = sigmoid(eta);
        }
        // gradient of the (penalized) log-likelihood
        let mut grad = vec![0.0; d];
        for i in 0..n {
            let r = t[i] - probs[i];
            for (j, g) in grad.iter_mut().enumerate() {
                *g += r * row(i, j);
            }
        }
        if ridge {
            for j in 1..d {
                grad[j] -= RIDGE * beta[j];
            }
        }
        let sup = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if sup < NEWTON_TOL {
            converged = true;
            break;
        }
        // negative Hessian: X' W X (+ ridge on slopes)
        let mut hess = vec![0.0; d * d];
        for i in 0..n {
            let w = probs[i] * (1.0 - probs[i]);
            if w <= 0.0 {
                continue;
            }
            for j in 0..d {
                let xj = row(i, j);
                for k in j..d {
                    hess[j * d + k] += w * xj * row(i, k);
                }
            }
        }
        for j in 0..d {
            for k in 0..j {
                hess[j * d + k] = hess[k * d + j];
            }
        }
        if ridge {
            for j in 1..d {
                hess[j * d + j] += RIDGE;
            }
        }
        let mut step = grad;
        solve_spd_in_place(d, &mut hess, &mut step).map_err(|_| Error::Separation)?;
        for (b, s) in beta.iter_mut().zip(step.iter()) {
            *b += s;
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Separation);
        }
    }
    let pinned = probs
        .iter()
        .any(|p| *p <= PIN_TOL || *p >= 1.0 - PIN_TOL);
    if pinned && !ridge {
        return Err(Error::Separation);
    }
    if !converged && !pinned {
        return Err(Error::PropensityNonConvergence(NEWTON_MAX_ITER));
    }
    Ok(PropensityModel {
        coefficients: beta,
        converged,
        iterations,
    })
}

impl PropensityModel {
    /// Fitted treatment probability for one covariate row.
    pub fn probability(&self, covariates: &[f64]) -> f64 {
        let mut eta = self.coefficients[0];
        for (b, v) in self.coefficients[1..].iter().zip(covariates.iter()) {
            eta += b * v;
        }
        sigmoid(eta)
    }
}

/// Inverse-probability-weighted ATE and ATT from a fitted model.
pub fn ipw_estimates(
    dataset: &Dataset,
    model: &PropensityModel,
    style: IpwStyle,
) -> Result<IpwEstimates> {
    if dataset.arms() != 2 {
        return Err(Error::InvalidArgument(
            "inverse-probability weighting requires exactly two arms".into(),
        ));
    }
    let x = dataset.covariates();
    let y = dataset.outcomes();
    let n = x.nrows();
    let mut treated_sum = 0.0; // sum T y / e
    let mut treated_wsum = 0.0; // sum T / e
    let mut control_sum = 0.0; // sum (1-T) y / (1-e)
    let mut control_wsum = 0.0; // sum (1-T) / (1-e)
    let mut att_ctrl_sum = 0.0; // sum (1-T) y e/(1-e)
    let mut att_ctrl_wsum = 0.0; // sum (1-T) e/(1-e)
    let mut treated_mean = 0.0;
    let mut n1 = 0usize;
    for i in 0..n {
        let xi: Vec<f64> = (0..x.ncols()).map(|j| x[[i, j]]).collect();
        let e = model.probability(&xi);
        if e <= 0.0 || e >= 1.0 {
            return Err(Error::InvalidArgument(format!(
                "fitted propensity for unit {i} is numerically 0 or 1"
            )));
        }
        if dataset.treatment()[i] == 1 {
            treated_sum += y[i] / e;
            treated_wsum += 1.0 / e;
            treated_mean += y[i];
            n1 += 1;
        } else {
            control_sum += y[i] / (1.0 - e);
            control_wsum += 1.0 / (1.0 - e);
            att_ctrl_sum += y[i] * e / (1.0 - e);
            att_ctrl_wsum += e / (1.0 - e);
        }
    }
    if n1 == 0 || n1 == n {
        return Err(Error::EmptyArm(usize::from(n1 == 0)));
    }
    let nf = n as f64;
    let (ate, att) = match style {
        IpwStyle::HorvitzThompson => (
            (treated_sum - control_sum) / nf,
            (treated_mean - att_ctrl_sum) / n1 as f64,
        ),
        IpwStyle::Hajek => (
            treated_sum / treated_wsum - control_sum / control_wsum,
            treated_mean / n1 as f64 - att_ctrl_sum / att_ctrl_wsum,
        ),
    };
    Ok(IpwEstimates { ate, att })
}

/// For each unit of `source_arm`, the uniform average outcome of its `k`
/// nearest opposite-arm units (Euclidean distance on the dataset's
/// covariate columns, ties broken toward the lowest index, matching with
/// replacement). Returns one value per source-arm unit, in arm order.
pub fn knn_impute_into(dataset: &Dataset, k: usize, source_arm: usize) -> Result<Vec<f64>> {
    if dataset.arms() != 2 {
        return Err(Error::InvalidArgument(
            "nearest-neighbor imputation requires exactly two arms".into(),
        ));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if source_arm > 1 {
        return Err(Error::InvalidArgument(format!(
            "source arm {source_arm} out of range"
        )));
    }
    let sources = dataset.arm_indices(source_arm);
    let pool = dataset.arm_indices(1 - source_arm);
    if k > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the opposite arm's size {}",
            pool.len()
        )));
    }
    let x = dataset.covariates();
    let y = dataset.outcomes();
    let d = x.ncols();
    let mut imputed = Vec::with_capacity(sources.len());
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(pool.len());
    for &i in &sources {
        cand.clear();
        for &j in &pool {
            let mut dist = 0.0;
            for c in 0..d {
                let diff = x[[i, c]] - x[[j, c]];
                dist += diff * diff;
            }
            cand.push((dist, j));
        }
        // ties toward the lowest index: the pool is index-sorted, so a
        // stable sort by distance preserves index order among ties
        cand.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut acc = 0.0;
        for (_, j) in cand.iter().take(k) {
            acc += y[*j];
        }
        imputed.push(acc / k as f64);
    }
    Ok(imputed)
}

/// Counterfactual imputations for every unit (both directions), indexed by
/// dataset row. Requires both arms to have at least `k` members.
pub fn knn_impute(dataset: &Dataset, k: usize) -> Result<Vec<f64>> {
    let from0 = knn_impute_into(dataset, k, 0)?;
    let from1 = knn_impute_into(dataset, k, 1)?;
    let mut imputed = vec![0.0; dataset.len()];
    for (pos, &i) in dataset.arm_indices(0).iter().enumerate() {
        imputed[i] = from0[pos];
    }
    for (pos, &i) in dataset.arm_indices(1).iter().enumerate() {
        imputed[i] = from1[pos];
    }
    Ok(imputed)
}

/// ATE from nearest-neighbor imputation: mean over all units of the
/// treated-minus-control contrast, observed outcome on the unit's own arm.
pub fn knn_ate(dataset: &Dataset, k: usize) -> Result<f64> {
    let imputed = knn_impute(dataset, k)?;
    let y = dataset.outcomes();
    let n = y.len();
    let mut acc = 0.0;
    for i in 0..n {
        let contrast = if dataset.treatment()[i] == 1 {
            y[i] - imputed[i]
        } else {
            imputed[i] - y[i]
        };
        acc += contrast;
    }
    Ok(acc / n as f64)
}

/// ATT from nearest-neighbor imputation: mean over treated units of
/// (observed minus imputed control outcome).
pub fn knn_att(dataset: &Dataset, k: usize) -> Result<f64> {
    let imputed = knn_impute_into(dataset, k, 1)?;
    let y = dataset.outcomes();
    let idx1 = dataset.arm_indices(1);
    let acc: f64 = idx1
        .iter()
        .zip(imputed.iter())
        .map(|(&i, v)| y[i] - v)
        .sum();
    Ok(acc / idx1.len() as f64)
}

/// Observed arm-mean difference, mean(Y | T=1) - mean(Y | T=0).
pub fn unadjusted(dataset: &Dataset) -> Result<f64> {
    let idx0 = dataset.arm_indices(0);
    let idx1 = dataset.arm_indices(1);
    if idx0.is_empty() || idx1.is_empty() {
        return Err(Error::EmptyArm(usize::from(idx1.is_empty())));
    }
    let y = dataset.outcomes();
    let m1: f64 = idx1.iter().map(|&i| y[i]).sum::<f64>() / idx1.len() as f64;
    let m0: f64 = idx0.iter().map(|&i| y[i]).sum::<f64>() / idx0.len() as f64;
    Ok(m1 - m0)
}
