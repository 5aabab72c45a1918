//! From an optimal coupling to causal estimates: conditional match
//! weights, counterfactual imputation, and ATE/ATT.

use crate::divergences::Divergence;
use crate::error::{Error, Result};
use crate::measures::{build_cost, CostSpec, Dataset, DiscreteMeasure};
use crate::solver::{
    assemble_coupling, ipfp, ipfp_from, Coupling, Potentials, SinkhornConfig, SolveOutcome,
};
use ndarray::Array2;
use std::collections::hash_map::Entry;
use std::collections::HashMap;

/// Default row-mass drop threshold, relative to the uniform share of the
/// coupling's total mass.
pub const DEFAULT_DROP_THRESHOLD: f64 = 1e-3;

/// How retained source units are weighted when averaging their
/// treatment-minus-imputed contrasts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitWeighting {
    /// Every retained unit counts equally (the display convention,
    /// adjusted for drops).
    Uniform,
    /// Units weighted by their retained coupling mass.
    Mass,
}

/// Row-stochastic conditional match weights from a source arm onto a
/// target arm.
#[derive(Debug, Clone)]
pub struct ConditionalWeights {
    source_arm: usize,
    target_arm: usize,
    /// N_source x N_target, row-major; dropped rows are all-zero.
    weights: Vec<f64>,
    n_source: usize,
    n_target: usize,
    /// Pre-normalization row masses.
    retained_mass: Vec<f64>,
    dropped: Vec<bool>,
}

impl ConditionalWeights {
    pub fn source_arm(&self) -> usize {
        self.source_arm
    }

    pub fn target_arm(&self) -> usize {
        self.target_arm
    }

    pub fn n_source(&self) -> usize {
        self.n_source
    }

    pub fn n_target(&self) -> usize {
        self.n_target
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.n_target..(i + 1) * self.n_target]
    }

    pub fn retained_mass(&self) -> &[f64] {
        &self.retained_mass
    }

    pub fn dropped(&self) -> &[bool] {
        &self.dropped
    }

    pub fn retained_count(&self) -> usize {
        self.dropped.iter().filter(|d| !**d).count()
    }
}

/// Normalize the coupling's (source, target) marginalization into
/// conditional weights, dropping source rows whose share of the total
/// mass is at or below `drop_threshold` relative to the uniform share.
pub fn conditional_weights(
    coupling: &Coupling,
    source_arm: usize,
    target_arm: usize,
    drop_threshold: f64,
) -> Result<ConditionalWeights> {
    if source_arm == target_arm {
        return Err(Error::InvalidArgument(
            "source and target arms must differ".into(),
        ));
    }
    if !(0.0..f64::INFINITY).contains(&drop_threshold) {
        return Err(Error::InvalidArgument(
            "drop_threshold must be finite and nonnegative".into(),
        ));
    }
    let matrix = coupling.pair_matrix(source_arm, target_arm)?;
    let n_source = coupling.shape()[source_arm];
    let n_target = coupling.shape()[target_arm];
    let cutoff = drop_threshold * coupling.total_mass() / n_source as f64;
    let mut weights = vec![0.0; matrix.len()];
    let mut retained_mass = Vec::with_capacity(n_source);
    let mut dropped = Vec::with_capacity(n_source);
    let mut kept = 0usize;
    for i in 0..n_source {
        let row = &matrix[i * n_target..(i + 1) * n_target];
        let mass: f64 = row.iter().sum();
        retained_mass.push(mass);
        if mass <= cutoff {
            dropped.push(true);
            continue;
        }
        dropped.push(false);
        kept += 1;
        let out = &mut weights[i * n_target..(i + 1) * n_target];
        for (w, m) in out.iter_mut().zip(row.iter()) {
            *w = m / mass;
        }
    }
    log::debug!(
        "conditional weights {source_arm}->{target_arm}: kept {kept}/{n_source} rows"
    );
    Ok(ConditionalWeights {
        source_arm,
        target_arm,
        weights,
        n_source,
        n_target,
        retained_mass,
        dropped,
    })
}

/// Weighted average of target outcomes per retained source row. Dropped
/// rows return `None`.
pub fn impute_counterfactual(
    weights: &ConditionalWeights,
    target_outcomes: &[f64],
) -> Result<Vec<Option<f64>>> {
    if target_outcomes.len() != weights.n_target {
        return Err(Error::DimensionMismatch(format!(
            "{} outcomes for {} target units",
            target_outcomes.len(),
            weights.n_target
        )));
    }
    if weights.retained_count() == 0 {
        return Err(Error::NoOverlap {
            from_arm: weights.source_arm,
            to_arm: weights.target_arm,
        });
    }
    let mut imputed = Vec::with_capacity(weights.n_source);
    for i in 0..weights.n_source {
        if weights.dropped[i] {
            imputed.push(None);
        } else {
            let v: f64 = weights
                .row(i)
                .iter()
                .zip(target_outcomes.iter())
                .map(|(w, y)| w * y)
                .sum();
            imputed.push(Some(v));
        }
    }
    Ok(imputed)
}

/// What a [`CausalEstimate`] estimates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Estimand {
    Ate,
    /// Average effect on the given reference arm's units.
    Att { reference_arm: usize },
    /// Mean potential outcome under the given arm.
    ExpectedPotentialOutcome { arm: usize },
}

/// A point estimate plus the per-arm counts that produced it; bootstrap
/// fields are attached by the inference layer.
#[derive(Debug, Clone)]
pub struct CausalEstimate {
    pub estimand: Estimand,
    pub point: f64,
    /// Units contributing per arm, after dropping.
    pub n_used: Vec<usize>,
}

/// Per-arm pairing of a conditional-weight matrix with the arms' outcomes,
/// as needed by the mean-potential-outcome estimator.
pub struct ArmCoupling<'a> {
    /// Weights conditioning source-arm units on the target (imputed) arm.
    pub weights: &'a ConditionalWeights,
}

/// Mean potential outcome under arm `j`: observed outcomes of arm-`j`
/// members plus counterfactuals imputed into every other arm, averaged
/// over the contributing individuals (observed members plus retained
/// imputed members).
///
/// `couplings` must hold, for every arm `t != j`, conditional weights with
/// `source_arm == t` and `target_arm == j`.
pub fn expected_potential_outcome(
    dataset: &Dataset,
    couplings: &[ArmCoupling<'_>],
    arm: usize,
    _drop_threshold: f64,
) -> Result<CausalEstimate> {
    let arms = dataset.arms();
    if arm >= arms {
        return Err(Error::InvalidArgument(format!(
            "arm {arm} out of range for {arms} arms"
        )));
    }
    let mut seen = vec![false; arms];
    seen[arm] = true;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut n_used = vec![0usize; arms];
    // observed members
    let own = dataset.arm_indices(arm);
    for &i in &own {
        total += dataset.outcomes()[i];
    }
    count += own.len();
    n_used[arm] = own.len();
    // imputed members from each other arm
    for ac in couplings {
        let w = ac.weights;
        if w.target_arm != arm {
            return Err(Error::InvalidArgument(format!(
                "weights targeting arm {} cannot impute arm {arm}",
                w.target_arm
            )));
        }
        let t = w.source_arm;
        if seen[t] {
            return Err(Error::InvalidArgument(format!(
                "duplicate or self coupling for source arm {t}"
            )));
        }
        seen[t] = true;
        let target_idx = dataset.arm_indices(arm);
        let outcomes: Vec<f64> = target_idx.iter().map(|&k| dataset.outcomes()[k]).collect();
        let imputed = impute_counterfactual(w, &outcomes)?;
        for v in imputed.iter().flatten() {
            total += v;
            count += 1;
        }
        n_used[t] = imputed.iter().filter(|v| v.is_some()).count();
    }
    if !seen.iter().all(|s| *s) {
        return Err(Error::InvalidArgument(
            "missing a coupling for at least one arm".into(),
        ));
    }
    Ok(CausalEstimate {
        estimand: Estimand::ExpectedPotentialOutcome { arm },
        point: total / count as f64,
        n_used,
    })
}

/// Average effect on the `treated_arm` units: the weighted mean over
/// retained treated units of (observed outcome - imputed counterfactual
/// under `control_arm`).
pub fn att(
    dataset: &Dataset,
    weights: &ConditionalWeights,
    treated_arm: usize,
    control_arm: usize,
    weighting: UnitWeighting,
) -> Result<CausalEstimate> {
    if weights.source_arm != treated_arm || weights.target_arm != control_arm {
        return Err(Error::InvalidArgument(format!(
            "weights map arm {} onto arm {}, expected {treated_arm} onto {control_arm}",
            weights.source_arm, weights.target_arm
        )));
    }
    let treated_idx = dataset.arm_indices(treated_arm);
    let control_idx = dataset.arm_indices(control_arm);
    if treated_idx.len() != weights.n_source || control_idx.len() != weights.n_target {
        return Err(Error::DimensionMismatch(
            "weights do not match the arm sizes".into(),
        ));
    }
    let control_outcomes: Vec<f64> =
        control_idx.iter().map(|&k| dataset.outcomes()[k]).collect();
    let imputed = impute_counterfactual(weights, &control_outcomes)?;
    let mut num = 0.0;
    let mut den = 0.0;
    let mut used = 0usize;
    for (pos, v) in imputed.iter().enumerate() {
        if let Some(counterfactual) = v {
            let own = dataset.outcomes()[treated_idx[pos]];
            let w = match weighting {
                UnitWeighting::Uniform => 1.0,
                UnitWeighting::Mass => weights.retained_mass[pos],
            };
            num += w * (own - counterfactual);
            den += w;
            used += 1;
        }
    }
    if used == 0 || den <= 0.0 {
        return Err(Error::NoOverlap {
            from_arm: treated_arm,
            to_arm: control_arm,
        });
    }
    let mut n_used = vec![0usize; dataset.arms()];
    n_used[treated_arm] = used;
    n_used[control_arm] = control_idx.len();
    Ok(CausalEstimate {
        estimand: Estimand::Att {
            reference_arm: treated_arm,
        },
        point: num / den,
        n_used,
    })
}

/// ATE between two arms as the difference of mean potential outcomes,
/// each computed from the supplied conditional weights: `into_treated`
/// imputes treated outcomes at control units (source = control arm) and
/// `into_control` the reverse.
pub fn ate(
    dataset: &Dataset,
    into_treated: &ConditionalWeights,
    into_control: &ConditionalWeights,
    treated_arm: usize,
    control_arm: usize,
    drop_threshold: f64,
) -> Result<CausalEstimate> {
    let ey1 = expected_potential_outcome(
        dataset,
        &[ArmCoupling {
            weights: into_treated,
        }],
        treated_arm,
        drop_threshold,
    )?;
    let ey0 = expected_potential_outcome(
        dataset,
        &[ArmCoupling {
            weights: into_control,
        }],
        control_arm,
        drop_threshold,
    )?;
    let mut n_used = vec![0usize; dataset.arms()];
    for (a, b) in n_used.iter_mut().zip(ey1.n_used.iter().zip(ey0.n_used.iter())) {
        *a = b.0 + b.1;
    }
    Ok(CausalEstimate {
        estimand: Estimand::Ate,
        point: ey1.point - ey0.point,
        n_used,
    })
}

/// Mass-weighted smoothing bias proxy for the control->treated imputation:
/// the gap between the coupling-smoothed control outcome and the plain
/// control mean, `sum_ik y0_k W[i,k] a_i - mean(y0)`, with `a` the
/// retained-mass shares of the treated rows. Zero when the smoothing
/// kernel preserves the control outcome profile; grows with the
/// regularization strength on poorly overlapped designs.
pub fn bias_diagnostic(
    weights: &ConditionalWeights,
    control_outcomes: &[f64],
) -> Result<f64> {
    let imputed = impute_counterfactual(weights, control_outcomes)?;
    let mass_total: f64 = weights
        .retained_mass
        .iter()
        .zip(weights.dropped.iter())
        .filter(|(_, d)| !**d)
        .map(|(m, _)| m)
        .sum();
    if mass_total <= 0.0 {
        return Err(Error::NoOverlap {
            from_arm: weights.source_arm,
            to_arm: weights.target_arm,
        });
    }
    let smoothed: f64 = imputed
        .iter()
        .zip(weights.retained_mass.iter())
        .filter_map(|(v, m)| v.map(|v| v * m))
        .sum::<f64>()
        / mass_total;
    let plain = control_outcomes.iter().sum::<f64>() / control_outcomes.len() as f64;
    Ok(smoothed - plain)
}

/// How the squared-Euclidean cost matrix is scaled before the solve.
///
/// Dividing the costs by their largest entry puts them on [0, 1], which
/// makes a given (epsilon, marginal-scale) pair mean the same thing across
/// datasets of different diameters. Solving the unit-scaled problem at
/// (epsilon, kl(rho)) is exactly equivalent to solving the raw problem at
/// (epsilon·max, kl(rho·max)).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostScale {
    /// Costs used as-is.
    Raw,
    /// Costs divided by the largest entry (no-op when all costs are zero).
    UnitMax,
}

/// End-to-end configuration for coupling-based matching on a two-arm
/// dataset: entropic solver settings plus estimator conventions.
#[derive(Debug, Clone)]
pub struct OtMatchConfig {
    pub solver: SinkhornConfig,
    /// Marginal divergence applied to both arms.
    pub divergence: Divergence,
    pub drop_threshold: f64,
    pub weighting: UnitWeighting,
    pub cost_scale: CostScale,
}

impl OtMatchConfig {
    /// Defaults: soft marginals (scale 1), matching drop threshold, uniform
    /// unit weighting, raw costs.
    pub fn new(epsilon: f64) -> Self {
        OtMatchConfig {
            solver: SinkhornConfig::new(epsilon),
            divergence: Divergence::Kl { rho: 1.0 },
            drop_threshold: DEFAULT_DROP_THRESHOLD,
            weighting: UnitWeighting::Uniform,
            cost_scale: CostScale::Raw,
        }
    }
}

/// Everything the coupling-based pipeline produces for a two-arm dataset.
#[derive(Debug, Clone)]
pub struct OtMatchOutcome {
    pub ate: f64,
    pub att: f64,
    /// Retained (non-dropped) source rows for the (control->treated,
    /// treated->control) weight matrices.
    pub kept: [usize; 2],
    pub potentials: Potentials,
    pub iterations: usize,
    pub converged: bool,
}

/// Build per-arm uniform probability measures on the dataset's covariates.
pub fn arm_measures(dataset: &Dataset) -> Result<Vec<DiscreteMeasure>> {
    let d = dataset.covariates().ncols();
    (0..dataset.arms())
        .map(|arm| {
            let idx = dataset.arm_indices(arm);
            let mut pts = Array2::zeros((idx.len(), d));
            for (r, &i) in idx.iter().enumerate() {
                for c in 0..d {
                    pts[[r, c]] = dataset.covariates()[[i, c]];
                }
            }
            DiscreteMeasure::new(pts, vec![1.0 / idx.len() as f64; idx.len()])
        })
        .collect()
}

/// One arm with bit-identical covariate rows merged into single atoms whose
/// weight carries the multiplicity. Bootstrap resamples are full of exact
/// duplicates, and duplicated rows provably share a potential at the fixed
/// point, so the solver can run on the merged problem — same solution, far
/// fewer kernel cells — and the per-row potentials are recovered by copying.
struct MergedArm {
    measure: DiscreteMeasure,
    /// arm-member position -> merged atom index
    atom_of_member: Vec<usize>,
    /// merged atom index -> first arm-member position holding it
    first_member: Vec<usize>,
}

fn merge_duplicate_rows(dataset: &Dataset, arm: usize) -> Result<MergedArm> {
    let cov = dataset.covariates();
    let d = cov.ncols();
    let idx = dataset.arm_indices(arm);
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::with_capacity(idx.len());
    let mut atom_of_member = Vec::with_capacity(idx.len());
    let mut first_member: Vec<usize> = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    for (m, &i) in idx.iter().enumerate() {
        let key: Vec<u64> = (0..d).map(|c| cov[[i, c]].to_bits()).collect();
        match seen.entry(key) {
            Entry::Occupied(e) => {
                let u = *e.get();
                counts[u] += 1.0;
                atom_of_member.push(u);
            }
            Entry::Vacant(e) => {
                let u = first_member.len();
                e.insert(u);
                first_member.push(m);
                counts.push(1.0);
                atom_of_member.push(u);
            }
        }
    }
    let mut pts = Array2::zeros((first_member.len(), d));
    for (r, &m) in first_member.iter().enumerate() {
        for c in 0..d {
            pts[[r, c]] = cov[[idx[m], c]];
        }
    }
    let n = idx.len() as f64;
    let weights = counts.iter().map(|k| k / n).collect();
    Ok(MergedArm {
        measure: DiscreteMeasure::new(pts, weights)?,
        atom_of_member,
        first_member,
    })
}

/// Solve the two-arm entropic problem on `dataset` and produce ATE/ATT via
/// conditional-weight imputation. `warm` supplies previous potentials plus
/// per-arm resample positions (as produced by the bootstrap) to start the
/// solver near its fixed point.
pub fn ot_match(
    dataset: &Dataset,
    config: &OtMatchConfig,
    warm: Option<(&Potentials, &[Vec<usize>])>,
) -> Result<OtMatchOutcome> {
    if dataset.arms() != 2 {
        return Err(Error::InvalidArgument(
            "coupling-based matching runs on exactly two arms here; \
             marginalize multi-arm problems pairwise"
                .into(),
        ));
    }
    let measures = arm_measures(dataset)?;
    let mut cost = build_cost(&measures, &CostSpec::SquaredEuclidean)?;
    let cost_factor = match config.cost_scale {
        CostScale::Raw => 1.0,
        CostScale::UnitMax => {
            let max = cost.values().iter().fold(0.0f64, |m, v| m.max(*v));
            if max > 0.0 {
                1.0 / max
            } else {
                1.0
            }
        }
    };
    if cost_factor != 1.0 {
        cost = cost.scaled(cost_factor);
    }
    let divergences = vec![config.divergence; 2];
    let merged = [
        merge_duplicate_rows(dataset, 0)?,
        merge_duplicate_rows(dataset, 1)?,
    ];
    let has_duplicates = merged
        .iter()
        .zip(&measures)
        .any(|(m, full)| m.first_member.len() < full.len());
    // the per-row warm start, when given
    let member_initial = match warm {
        Some((potentials, positions)) => {
            let refs: Vec<&[usize]> = positions.iter().map(|p| p.as_slice()).collect();
            Some(potentials.gather(&refs)?)
        }
        None => None,
    };
    let out = if has_duplicates {
        let [m0, m1] = merged;
        let solve_measures = vec![m0.measure, m1.measure];
        let mut solve_cost = build_cost(&solve_measures, &CostSpec::SquaredEuclidean)?;
        if cost_factor != 1.0 {
            // same factor as the full matrix so the merged problem stays
            // exactly the quotient of the member-level one
            solve_cost = solve_cost.scaled(cost_factor);
        }
        let solved = match member_initial {
            Some(init) => {
                let picked = [&m0.first_member, &m1.first_member]
                    .iter()
                    .enumerate()
                    .map(|(a, firsts)| {
                        let arm = init.arm(a);
                        firsts.iter().map(|&m| arm[m]).collect()
                    })
                    .collect();
                ipfp_from(
                    &solve_measures,
                    &solve_cost,
                    &divergences,
                    &config.solver,
                    Potentials::from_vectors(picked),
                )?
            }
            None => ipfp(&solve_measures, &solve_cost, &divergences, &config.solver)?,
        };
        // copy each merged atom's potential back onto its duplicate rows
        let expanded = [&m0.atom_of_member, &m1.atom_of_member]
            .iter()
            .enumerate()
            .map(|(a, atoms)| {
                let arm = solved.potentials.arm(a);
                atoms.iter().map(|&u| arm[u]).collect()
            })
            .collect();
        SolveOutcome {
            potentials: Potentials::from_vectors(expanded),
            ..solved
        }
    } else {
        match member_initial {
            Some(init) => ipfp_from(&measures, &cost, &divergences, &config.solver, init)?,
            None => ipfp(&measures, &cost, &divergences, &config.solver)?,
        }
    };
    let coupling = assemble_coupling(
        &out.potentials,
        &cost,
        &measures,
        config.solver.epsilon,
    )?;
    let into_treated = conditional_weights(&coupling, 0, 1, config.drop_threshold)?;
    let into_control = conditional_weights(&coupling, 1, 0, config.drop_threshold)?;
    let ate_est = ate(
        dataset,
        &into_treated,
        &into_control,
        1,
        0,
        config.drop_threshold,
    )?;
    let att_est = att(dataset, &into_control, 1, 0, config.weighting)?;
    Ok(OtMatchOutcome {
        ate: ate_est.point,
        att: att_est.point,
        kept: [
            into_treated.retained_count(),
            into_control.retained_count(),
        ],
        potentials: out.potentials,
        iterations: out.iterations,
        converged: out.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::Dataset;
    use crate::solver::Coupling;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array1, Array2};

    fn coupling2(values: Vec<f64>, n0: usize, n1: usize) -> Coupling {
        Coupling::from_values(vec![n0, n1], values).unwrap()
    }

    #[test]
    fn diagonal_coupling_gives_identity_weights() {
        let c = coupling2(vec![0.5, 0.0, 0.0, 0.5], 2, 2);
        let w = conditional_weights(&c, 0, 1, 1e-3).unwrap();
        assert_eq!(w.row(0), &[1.0, 0.0]);
        assert_eq!(w.row(1), &[0.0, 1.0]);
        assert_eq!(w.retained_mass(), &[0.5, 0.5]);
        assert_eq!(w.retained_count(), 2);
    }

    #[test]
    fn rows_normalize_and_zero_rows_drop() {
        let c = coupling2(vec![0.3, 0.1, 0.0, 0.6], 2, 2);
        let w = conditional_weights(&c, 0, 1, 1e-3).unwrap();
        assert_abs_diff_eq!(w.row(0)[0], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(w.row(0)[1], 0.25, epsilon = 1e-12);
        assert_eq!(w.row(1), &[0.0, 1.0]);
    }

    #[test]
    fn tiny_mass_row_is_dropped_and_flagged() {
        let c = coupling2(vec![1e-9, 1e-9, 0.5, 0.5], 2, 2);
        let w = conditional_weights(&c, 0, 1, 1e-3).unwrap();
        assert!(w.dropped()[0]);
        assert!(!w.dropped()[1]);
        assert_eq!(w.row(0), &[0.0, 0.0]);
        let imp = impute_counterfactual(&w, &[10.0, 20.0]).unwrap();
        assert!(imp[0].is_none());
        assert_abs_diff_eq!(imp[1].unwrap(), 15.0, epsilon = 1e-12);
    }

    #[test]
    fn imputation_is_weighted_average() {
        let c = coupling2(vec![0.3, 0.7], 1, 2);
        let w = conditional_weights(&c, 0, 1, 1e-3).unwrap();
        let imp = impute_counterfactual(&w, &[10.0, 20.0]).unwrap();
        assert_abs_diff_eq!(imp[0].unwrap(), 17.0, epsilon = 1e-12);
    }

    #[test]
    fn all_rows_dropped_is_no_overlap() {
        let c = coupling2(vec![0.0, 0.0, 0.0, 0.0], 2, 2);
        let w = conditional_weights(&c, 0, 1, 1e-3).unwrap();
        let err = impute_counterfactual(&w, &[1.0, 2.0]).unwrap_err();
        assert!(matches!(err, Error::NoOverlap { .. }));
    }

    fn two_arm_dataset(
        x0: &[[f64; 2]],
        y0: &[f64],
        x1: &[[f64; 2]],
        y1: &[f64],
    ) -> Dataset {
        let n = x0.len() + x1.len();
        let mut xs = Array2::zeros((n, 2));
        let mut t = Vec::with_capacity(n);
        let mut y = Array1::zeros(n);
        for (i, (row, out)) in x0.iter().zip(y0).enumerate() {
            xs[[i, 0]] = row[0];
            xs[[i, 1]] = row[1];
            t.push(0usize);
            y[i] = *out;
        }
        for (i, (row, out)) in x1.iter().zip(y1).enumerate() {
            let r = x0.len() + i;
            xs[[r, 0]] = row[0];
            xs[[r, 1]] = row[1];
            t.push(1usize);
            y[r] = *out;
        }
        Dataset::new(
            xs,
            t,
            y,
            vec!["a".into(), "b".into()],
        )
        .unwrap()
    }

    #[test]
    fn att_with_identity_match_recovers_constant_shift() {
        // identical covariates in both arms, Y(1) = Y(0) + 2
        let x = [[0.0, 0.0], [1.0, 0.5], [0.3, 0.9]];
        let y0 = [1.0, 2.0, 3.0];
        let y1 = [3.0, 4.0, 5.0];
        let ds = two_arm_dataset(&x, &y0, &x, &y1);
        // treated-sourced diagonal coupling
        let c = coupling2(
            vec![0.2, 0.0, 0.0, 0.0, 0.5, 0.0, 0.0, 0.0, 0.3],
            3,
            3,
        );
        let w = conditional_weights(&c, 1, 0, 1e-3).unwrap();
        // note: pair_matrix(1, 0) transposes, so build weights on (1,0)
        let est = att(&ds, &w, 1, 0, UnitWeighting::Uniform).unwrap();
        assert_abs_diff_eq!(est.point, 2.0, epsilon = 1e-10);
        let est_mass = att(&ds, &w, 1, 0, UnitWeighting::Mass).unwrap();
        assert_abs_diff_eq!(est_mass.point, 2.0, epsilon = 1e-10);
    }

    #[test]
    fn att_mixed_match_arithmetic() {
        // one treated point matched 50/50 to controls with Y 0 and 4, own 5
        let ds = two_arm_dataset(
            &[[0.0, 0.0], [1.0, 1.0]],
            &[0.0, 4.0],
            &[[0.5, 0.5]],
            &[5.0],
        );
        let c = coupling2(vec![0.5, 0.5], 1, 2);
        let w = conditional_weights(&c, 0, 1, 1e-3).unwrap();
        // coupling axes: (treated-as-arm0-of-coupling, controls); here the
        // coupling was built treated-first, so source arm 0 of the coupling
        // corresponds to dataset arm 1.
        let wt = ConditionalWeights {
            source_arm: 1,
            target_arm: 0,
            ..w
        };
        let est = att(&ds, &wt, 1, 0, UnitWeighting::Uniform).unwrap();
        assert_abs_diff_eq!(est.point, 3.0, epsilon = 1e-12);
    }

    #[test]
    fn expected_potential_outcome_identical_arms_is_pooled_mean() {
        // identical covariates, deterministic outcome f(x) in both arms
        let x = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        let f = [1.0, 2.0, 3.0];
        let ds = two_arm_dataset(&x, &f, &x, &f);
        let c = coupling2(
            vec![0.4, 0.0, 0.0, 0.0, 0.4, 0.0, 0.0, 0.0, 0.2],
            3,
            3,
        );
        let w01 = conditional_weights(&c, 0, 1, 1e-3).unwrap();
        let est = expected_potential_outcome(
            &ds,
            &[ArmCoupling { weights: &w01 }],
            1,
            1e-3,
        )
        .unwrap();
        let pooled = f.iter().sum::<f64>() / 3.0; // same mean both arms
        assert_abs_diff_eq!(est.point, pooled, epsilon = 1e-10);
        assert_eq!(est.n_used, vec![3, 3]);
    }

    #[test]
    fn single_point_arms_average_observed_and_imputed() {
        let ds = two_arm_dataset(&[[0.0, 0.0]], &[10.0], &[[1.0, 1.0]], &[20.0]);
        let c = coupling2(vec![1.0], 1, 1);
        let w01 = conditional_weights(&c, 0, 1, 1e-3).unwrap();
        let est = expected_potential_outcome(
            &ds,
            &[ArmCoupling { weights: &w01 }],
            1,
            1e-3,
        )
        .unwrap();
        // observed treated outcome 20 plus the imputed value at the lone
        // control unit, which matches the single treated point exactly
        assert_abs_diff_eq!(est.point, 20.0, epsilon = 1e-12);
        let w10 = conditional_weights(&c, 1, 0, 1e-3).unwrap();
        let full = ate(&ds, &w01, &w10, 1, 0, 1e-3).unwrap();
        assert_abs_diff_eq!(full.point, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn ate_identical_arms_constant_shift() {
        let x = [[0.0, 0.0], [1.0, 0.0]];
        let y0 = [1.0, 3.0];
        let y1 = [3.0, 5.0];
        let ds = two_arm_dataset(&x, &y0, &x, &y1);
        let c = coupling2(vec![0.5, 0.0, 0.0, 0.5], 2, 2);
        let into_treated = conditional_weights(&c, 0, 1, 1e-3).unwrap();
        let into_control = conditional_weights(&c, 1, 0, 1e-3).unwrap();
        let wt = ConditionalWeights {
            source_arm: 0,
            target_arm: 1,
            ..into_treated
        };
        let est = ate(&ds, &wt, &into_control, 1, 0, 1e-3).unwrap();
        assert_abs_diff_eq!(est.point, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn outcome_shift_equivariance() {
        let x0 = [[0.0, 0.0], [1.0, 0.2], [0.4, 0.8]];
        let x1 = [[0.2, 0.1], [0.8, 0.6]];
        let y0 = [1.0, 2.0, 0.5];
        let y1 = [4.0, 3.0];
        let ds = two_arm_dataset(&x0, &y0, &x1, &y1);
        let vals = vec![0.2, 0.1, 0.05, 0.15, 0.3, 0.2];
        let c = coupling2(vals.clone(), 3, 2);
        let w = conditional_weights(&c, 0, 1, 1e-3).unwrap();
        let base = expected_potential_outcome(&ds, &[ArmCoupling { weights: &w }], 1, 1e-3)
            .unwrap()
            .point;
        let shifted: Vec<f64> = y1.iter().map(|v| v + 7.5).collect();
        let ds2 = two_arm_dataset(&x0, &y0, &x1, &shifted);
        let with_shift =
            expected_potential_outcome(&ds2, &[ArmCoupling { weights: &w }], 1, 1e-3)
                .unwrap()
                .point;
        assert_abs_diff_eq!(with_shift - base, 7.5, epsilon = 1e-10);
    }

    #[test]
    fn bias_diagnostic_identity_match_is_zero() {
        let c = coupling2(vec![0.5, 0.0, 0.0, 0.5], 2, 2);
        let w = conditional_weights(&c, 0, 1, 1e-3).unwrap();
        let b = bias_diagnostic(&w, &[3.0, 9.0]).unwrap();
        assert_abs_diff_eq!(b, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn bias_diagnostic_independence_coupling_uniform_weights_is_zero() {
        let c = coupling2(vec![0.25; 4], 2, 2);
        let w = conditional_weights(&c, 0, 1, 1e-3).unwrap();
        let b = bias_diagnostic(&w, &[3.0, 9.0]).unwrap();
        assert_abs_diff_eq!(b, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn weight_rows_sum_to_one_and_lie_in_unit_interval() {
        let vals = vec![0.12, 0.03, 0.05, 0.2, 0.01, 0.09, 0.25, 0.15, 0.1];
        let c = coupling2(vals, 3, 3);
        let w = conditional_weights(&c, 0, 1, 1e-3).unwrap();
        for i in 0..3 {
            let row = w.row(i);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            assert_abs_diff_eq!(row.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn small_epsilon_weights_match_exact_assignment() {
        use crate::measures::{build_cost, CostSpec, DiscreteMeasure};
        use crate::solver::{
            assemble_coupling, exact_ot_bruteforce, ipfp, SinkhornConfig,
        };
        // six well-separated point pairs; the optimal plan is the identity
        // assignment, and the entropic coupling should approach it
        let pts: Vec<[f64; 2]> = (0..6)
            .map(|i| [i as f64 * 3.0, (i % 2) as f64])
            .collect();
        let jitter: Vec<[f64; 2]> = pts
            .iter()
            .map(|p| [p[0] + 0.05, p[1] - 0.03])
            .collect();
        let flat0: Vec<f64> = pts.iter().flat_map(|p| p.to_vec()).collect();
        let flat1: Vec<f64> = jitter.iter().flat_map(|p| p.to_vec()).collect();
        let m0 = DiscreteMeasure::new(
            Array2::from_shape_vec((6, 2), flat0).unwrap(),
            vec![1.0 / 6.0; 6],
        )
        .unwrap();
        let m1 = DiscreteMeasure::new(
            Array2::from_shape_vec((6, 2), flat1).unwrap(),
            vec![1.0 / 6.0; 6],
        )
        .unwrap();
        let measures = vec![m0, m1];
        let cost = build_cost(&measures, &CostSpec::SquaredEuclidean).unwrap();
        let (_, exact) = exact_ot_bruteforce(&measures, &cost).unwrap();
        let cfg = SinkhornConfig::new(1e-4);
        let divs = vec![crate::divergences::Divergence::Balanced; 2];
        let out = ipfp(&measures, &cost, &divs, &cfg).unwrap();
        let coupling =
            assemble_coupling(&out.potentials, &cost, &measures, 1e-4).unwrap();
        let w = conditional_weights(&coupling, 0, 1, 1e-3).unwrap();
        for i in 0..6 {
            // the exact plan is a permutation here; the entropic row must
            // put essentially all weight on the same partner
            let exact_row = &exact.values()[i * 6..(i + 1) * 6];
            let partner = exact_row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert!(w.row(i)[partner] > 1.0 - 1e-6);
        }
    }

    #[test]
    fn ot_match_recovers_constant_shift_on_identical_arms() {
        let x = [[0.0, 0.0], [1.0, 0.4], [0.3, 0.9], [0.7, 0.2]];
        let y0 = [1.0, 2.0, 3.0, 1.5];
        let y1: Vec<f64> = y0.iter().map(|v| v + 2.5).collect();
        let ds = two_arm_dataset(&x, &y0, &x, &y1);
        let config = OtMatchConfig::new(0.01);
        let out = ot_match(&ds, &config, None).unwrap();
        assert!(out.converged);
        assert_abs_diff_eq!(out.att, 2.5, epsilon = 1e-6);
        assert_abs_diff_eq!(out.ate, 2.5, epsilon = 1e-6);
        assert_eq!(out.kept, [4, 4]);
        // warm start from the fixed point converges immediately
        let identity: Vec<Vec<usize>> = vec![vec![0, 1, 2, 3]; 2];
        let warm = ot_match(&ds, &config, Some((&out.potentials, &identity))).unwrap();
        assert!(warm.iterations <= 2);
        assert_abs_diff_eq!(warm.att, out.att, epsilon = 1e-9);
    }

    #[test]
    fn duplicate_rows_solve_matches_the_member_level_pipeline() {
        // covariate duplicates with distinct outcomes, as bootstrap
        // resamples produce; the merged solve must reproduce the plain
        // member-level pipeline exactly
        let x0 = [[0.0, 0.0], [0.0, 0.0], [1.0, 0.4], [1.0, 0.4], [2.0, 1.0]];
        let y0 = [1.0, 1.4, 2.0, 2.2, 3.0];
        let x1 = [[0.1, 0.05], [0.1, 0.05], [1.8, 0.9]];
        let y1 = [4.0, 4.4, 5.5];
        let ds = two_arm_dataset(&x0, &y0, &x1, &y1);
        let mut config = OtMatchConfig::new(0.1);
        config.solver.tolerance = 1e-11;
        let merged = ot_match(&ds, &config, None).unwrap();
        assert!(merged.converged);
        // duplicate rows carry one potential
        let p0 = merged.potentials.arm(0);
        assert_abs_diff_eq!(p0[0], p0[1], epsilon = 1e-12);
        let p1 = merged.potentials.arm(1);
        assert_abs_diff_eq!(p1[0], p1[1], epsilon = 1e-12);
        // reference: the same estimates computed without merging
        let measures = arm_measures(&ds).unwrap();
        let cost = build_cost(&measures, &CostSpec::SquaredEuclidean).unwrap();
        let divs = vec![config.divergence; 2];
        let solved = ipfp(&measures, &cost, &divs, &config.solver).unwrap();
        let coupling =
            assemble_coupling(&solved.potentials, &cost, &measures, 0.1).unwrap();
        let into_treated = conditional_weights(&coupling, 0, 1, config.drop_threshold).unwrap();
        let into_control = conditional_weights(&coupling, 1, 0, config.drop_threshold).unwrap();
        let ate_ref = ate(&ds, &into_treated, &into_control, 1, 0, config.drop_threshold)
            .unwrap()
            .point;
        let att_ref = att(&ds, &into_control, 1, 0, config.weighting).unwrap().point;
        assert_abs_diff_eq!(merged.ate, ate_ref, epsilon = 1e-8);
        assert_abs_diff_eq!(merged.att, att_ref, epsilon = 1e-8);
        for j in 0..2 {
            for (a, b) in merged
                .potentials
                .arm(j)
                .iter()
                .zip(solved.potentials.arm(j))
            {
                assert_abs_diff_eq!(a, b, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn unit_max_cost_scaling_equals_rescaled_raw_parameters() {
        // dividing the costs by their largest entry is the same problem as
        // multiplying epsilon and the kl scale by that entry; the estimates
        // must agree and the potentials must differ by exactly that factor
        let x0 = [[0.0, 0.0], [1.0, 0.4], [2.0, 1.0], [0.5, -0.3]];
        let y0 = [1.0, 2.0, 3.0, 1.5];
        let x1 = [[0.1, 0.05], [1.8, 0.9]];
        let y1 = [4.0, 5.5];
        let ds = two_arm_dataset(&x0, &y0, &x1, &y1);
        let measures = arm_measures(&ds).unwrap();
        let cost = build_cost(&measures, &CostSpec::SquaredEuclidean).unwrap();
        let max = cost.values().iter().fold(0.0f64, |m, v| m.max(*v));
        assert!(max > 1.0);

        let mut scaled_cfg = OtMatchConfig::new(0.05);
        scaled_cfg.solver.tolerance = 1e-12;
        scaled_cfg.cost_scale = CostScale::UnitMax;
        let scaled = ot_match(&ds, &scaled_cfg, None).unwrap();

        let mut raw_cfg = OtMatchConfig::new(0.05 * max);
        raw_cfg.divergence = Divergence::Kl { rho: max };
        raw_cfg.solver.tolerance = 1e-12 * max;
        let raw = ot_match(&ds, &raw_cfg, None).unwrap();

        assert!(scaled.converged && raw.converged);
        assert_abs_diff_eq!(scaled.ate, raw.ate, epsilon = 1e-8);
        assert_abs_diff_eq!(scaled.att, raw.att, epsilon = 1e-8);
        assert_eq!(scaled.kept, raw.kept);
        for a in 0..2 {
            for (s, r) in scaled
                .potentials
                .arm(a)
                .iter()
                .zip(raw.potentials.arm(a))
            {
                assert_abs_diff_eq!(s * max, *r, epsilon = 1e-8 * max);
            }
        }
    }

    #[test]
    fn permutation_invariance_of_att() {
        let x0 = [[0.0, 0.0], [1.0, 0.2], [0.4, 0.8]];
        let y0 = [1.0, 2.0, 0.5];
        let x1 = [[0.2, 0.1], [0.8, 0.6]];
        let y1 = [4.0, 3.0];
        let ds = two_arm_dataset(&x0, &y0, &x1, &y1);
        // coupling on (treated, control) axes
        let vals = vec![0.2, 0.1, 0.05, 0.15, 0.3, 0.2];
        let c = coupling2(vals.clone(), 2, 3);
        let w = ConditionalWeights {
            source_arm: 1,
            target_arm: 0,
            ..conditional_weights(&c, 0, 1, 1e-3).unwrap()
        };
        let base = att(&ds, &w, 1, 0, UnitWeighting::Uniform).unwrap().point;
        // permute control rows (and coupling columns to match)
        let perm = [2usize, 0, 1];
        let x0p: Vec<[f64; 2]> = perm.iter().map(|&i| x0[i]).collect();
        let y0p: Vec<f64> = perm.iter().map(|&i| y0[i]).collect();
        let dsp = two_arm_dataset(&x0p, &y0p, &x1, &y1);
        let mut vp = vec![0.0; 6];
        for r in 0..2 {
            for (knew, kold) in perm.iter().enumerate() {
                vp[r * 3 + knew] = vals[r * 3 + kold];
            }
        }
        let cp = coupling2(vp, 2, 3);
        let wp = ConditionalWeights {
            source_arm: 1,
            target_arm: 0,
            ..conditional_weights(&cp, 0, 1, 1e-3).unwrap()
        };
        let permuted = att(&dsp, &wp, 1, 0, UnitWeighting::Uniform).unwrap().point;
        assert_abs_diff_eq!(base, permuted, epsilon = 1e-12);
    }
}
