//! Synthetic-data generators and the benchmark harness comparing the
//! coupling-based estimator against nearest-neighbor, inverse-probability,
//! and unadjusted baselines on two partially overlapping designs.

use crate::baselines::{fit_propensity, ipw_estimates, knn_att, knn_impute, IpwStyle};
use crate::divergences::Divergence;
use crate::error::{Error, Result};
use crate::inference::{resample, BootstrapMode, Resample};
use crate::linalg::cholesky_in_place;
use crate::matching::{ot_match, CostScale, OtMatchConfig, OtMatchOutcome, UnitWeighting};
use crate::measures::Dataset;
use crate::rng::Rng;
use crate::solver::SinkhornConfig;
use ndarray::{Array1, Array2};
use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

/// One mixture-of-Gaussians component: (weight, mean, covariance).
#[derive(Debug, Clone)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major d x d covariance matrix.
    pub covariance: Vec<f64>,
}

/// A finite Gaussian mixture with validated weights and positive-definite
/// covariances (the Cholesky factors are precomputed at construction).
#[derive(Debug, Clone)]
pub struct MixtureSpec {
    components: Vec<MixtureComponent>,
    /// Lower-triangular Cholesky factor per component, row-major.
    factors: Vec<Vec<f64>>,
    dimension: usize,
}

impl MixtureSpec {
    pub fn new(components: Vec<MixtureComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidArgument(
                "mixture needs at least one component".into(),
            ));
        }
        let dimension = components[0].mean.len();
        let mut total = 0.0;
        let mut factors = Vec::with_capacity(components.len());
        for c in &components {
            if c.weight < 0.0 || !c.weight.is_finite() {
                return Err(Error::InvalidArgument(
                    "component weights must be nonnegative".into(),
                ));
            }
            total += c.weight;
            if c.mean.len() != dimension || c.covariance.len() != dimension * dimension {
                return Err(Error::DimensionMismatch(
                    "mixture components must share one dimension".into(),
                ));
            }
            let mut factor = c.covariance.clone();
            cholesky_in_place(dimension, &mut factor)?;
            factors.push(factor);
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!(
                "component weights sum to {total}, expected 1"
            )));
        }
        Ok(MixtureSpec {
            components,
            factors,
            dimension,
        })
    }

    /// Convenience: equal-weight two-component mixture with isotropic
    /// covariances `scale * I`.
    fn half_and_half(d: usize, mean_a: f64, scale_a: f64, mean_b: f64, scale_b: f64) -> Self {
        let iso = |s: f64| {
            let mut m = vec![0.0; d * d];
            for i in 0..d {
                m[i * d + i] = s;
            }
            m
        };
        MixtureSpec::new(vec![
            MixtureComponent {
                weight: 0.5,
                mean: vec![mean_a; d],
                covariance: iso(scale_a),
            },
            MixtureComponent {
                weight: 0.5,
                mean: vec![mean_b; d],
                covariance: iso(scale_b),
            },
        ])
        .expect("hard-coded mixture is valid")
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn components(&self) -> &[MixtureComponent] {
        &self.components
    }

    /// Draw one point into `out` using `rng`: component by inverse CDF on
    /// one uniform, then mean + L z with z independent standard normals.
    fn draw_into(&self, rng: &mut Rng, out: &mut [f64], scratch: &mut [f64]) {
        let u = rng.uniform();
        let mut acc = 0.0;
        let mut chosen = self.components.len() - 1;
        for (ci, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                chosen = ci;
                break;
            }
        }
        let d = self.dimension;
        for z in scratch.iter_mut().take(d) {
            *z = rng.normal();
        }
        let mean = &self.components[chosen].mean;
        let l = &self.factors[chosen];
        for i in 0..d {
            let mut v = mean[i];
            for k in 0..=i {
                v += l[i * d + k] * scratch[k];
            }
            out[i] = v;
        }
    }
}

/// Draw `n` points from the mixture; rows are points. Fully determined by
/// `seed`.
pub fn sample_mixture(spec: &MixtureSpec, n: usize, seed: u64) -> Array2<f64> {
    let d = spec.dimension;
    let mut rng = Rng::new(seed);
    let mut out = Array2::zeros((n, d));
    let mut row = vec![0.0; d];
    let mut scratch = vec![0.0; d];
    for i in 0..n {
        spec.draw_into(&mut rng, &mut row, &mut scratch);
        for c in 0..d {
            out[[i, c]] = row[c];
        }
    }
    out
}

/// Control-group covariate law shared by both benchmark cases:
/// half N(-1, 2I), half N(0.5, I) on two coordinates.
pub fn control_mixture() -> MixtureSpec {
    MixtureSpec::half_and_half(2, -1.0, 2.0, 0.5, 1.0)
}

/// Case-1 treated covariates: half N(+1, 2I), half N(0.5, I) — partial
/// overlap with the controls through the shared second component.
pub fn case1_treated_mixture() -> MixtureSpec {
    MixtureSpec::half_and_half(2, 1.0, 2.0, 0.5, 1.0)
}

/// Case-2 treated covariates: half N(+1, 0.5I), half N(0.5, 0.5I) —
/// concentrated inside the control support.
pub fn case2_treated_mixture() -> MixtureSpec {
    MixtureSpec::half_and_half(2, 1.0, 0.5, 0.5, 0.5)
}

/// The two synthetic benchmark designs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SimCase {
    Case1,
    Case2,
}

impl SimCase {
    pub fn treated_mixture(self) -> MixtureSpec {
        match self {
            SimCase::Case1 => case1_treated_mixture(),
            SimCase::Case2 => case2_treated_mixture(),
        }
    }
}

/// Conditional mean of the control potential outcome, -1 + x1 x2.
pub fn control_surface(x1: f64, x2: f64) -> f64 {
    -1.0 + x1 * x2
}

/// Conditional mean of the treated potential outcome, 2 + 2 x1 + x2.
pub fn treated_surface(x1: f64, x2: f64) -> f64 {
    2.0 + 2.0 * x1 + x2
}

/// Unit-level effect surface, treated minus control conditional mean.
pub fn effect_surface(x1: f64, x2: f64) -> f64 {
    treated_surface(x1, x2) - control_surface(x1, x2)
}

/// Noise scales: control outcomes have unit variance; the treated noise
/// parameter 0.5 reads as a variance by default (`noise_is_sd` switches it
/// to a standard deviation).
fn noise_sd(arm: usize, noise_is_sd: bool) -> f64 {
    match (arm, noise_is_sd) {
        (0, _) => 1.0,
        (_, false) => 0.5f64.sqrt(),
        (_, true) => 0.5,
    }
}

/// Draw outcomes for covariate rows `x` under arm 0 (control surface,
/// unit-variance noise) or arm 1 (treated surface).
pub fn sample_outcomes(
    x: &Array2<f64>,
    arm: usize,
    seed: u64,
    noise_is_sd: bool,
) -> Result<Array1<f64>> {
    if x.ncols() != 2 {
        return Err(Error::DimensionMismatch(format!(
            "outcome surfaces are defined on 2 covariates, got {}",
            x.ncols()
        )));
    }
    if arm > 1 {
        return Err(Error::InvalidArgument(format!(
            "outcome arm must be 0 or 1, got {arm}"
        )));
    }
    let sd = noise_sd(arm, noise_is_sd);
    let mut rng = Rng::new(seed);
    let mut y = Array1::zeros(x.nrows());
    for i in 0..x.nrows() {
        let m = if arm == 0 {
            control_surface(x[[i, 0]], x[[i, 1]])
        } else {
            treated_surface(x[[i, 0]], x[[i, 1]])
        };
        y[i] = m + sd * rng.normal();
    }
    Ok(y)
}

/// Assemble one benchmark dataset: `n0` control rows then `n1` treated
/// rows, with covariates and noise drawn from fixed child streams of
/// `seed`.
pub fn draw_case_dataset(
    case: SimCase,
    n0: usize,
    n1: usize,
    seed: u64,
    noise_is_sd: bool,
) -> Result<Dataset> {
    if n0 == 0 || n1 == 0 {
        return Err(Error::InvalidArgument("both arms need members".into()));
    }
    let x0 = sample_mixture(&control_mixture(), n0, Rng::child_seed(seed, 0));
    let x1 = sample_mixture(&case.treated_mixture(), n1, Rng::child_seed(seed, 1));
    let y0 = sample_outcomes(&x0, 0, Rng::child_seed(seed, 2), noise_is_sd)?;
    let y1 = sample_outcomes(&x1, 1, Rng::child_seed(seed, 3), noise_is_sd)?;
    let n = n0 + n1;
    let mut covariates = Array2::zeros((n, 2));
    let mut outcomes = Array1::zeros(n);
    let mut treatment = Vec::with_capacity(n);
    for i in 0..n0 {
        covariates[[i, 0]] = x0[[i, 0]];
        covariates[[i, 1]] = x0[[i, 1]];
        outcomes[i] = y0[i];
        treatment.push(0);
    }
    for i in 0..n1 {
        covariates[[n0 + i, 0]] = x1[[i, 0]];
        covariates[[n0 + i, 1]] = x1[[i, 1]];
        outcomes[n0 + i] = y1[i];
        treatment.push(1);
    }
    Dataset::new(
        covariates,
        treatment,
        outcomes,
        vec!["x1".into(), "x2".into()],
    )
}

/// Number of Monte-Carlo draws behind the cached population effect means.
const TRUTH_DRAWS: usize = 10_000_000;
/// Fixed oracle stream for the population-truth Monte Carlo.
const TRUTH_SEED: u64 = 0xA7E0_0BA5_E001;
/// Fixed oracle stream for estimator-sd ground truth.
const SD_TRUTH_SEED: u64 = 0xA7E0_0BA5_E002;

fn mixture_effect_mean(spec: &MixtureSpec, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut row = vec![0.0; spec.dimension()];
    let mut scratch = vec![0.0; spec.dimension()];
    let mut acc = 0.0;
    for _ in 0..TRUTH_DRAWS {
        spec.draw_into(&mut rng, &mut row, &mut scratch);
        acc += effect_surface(row[0], row[1]);
    }
    acc / TRUTH_DRAWS as f64
}

fn effect_means(case: SimCase) -> (f64, f64) {
    static CACHE: OnceLock<Mutex<HashMap<SimCase, (f64, f64)>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = cache.lock().expect("truth cache poisoned");
    *guard.entry(case).or_insert_with(|| {
        let control = mixture_effect_mean(&control_mixture(), TRUTH_SEED);
        let treated =
            mixture_effect_mean(&case.treated_mixture(), Rng::child_seed(TRUTH_SEED, 1));
        log::info!(
            "cached population effect means for {case:?}: control {control:.6}, treated {treated:.6}"
        );
        (control, treated)
    })
}

/// Population ATE for the benchmark design with arm shares n0 : n1,
/// computed once per case from a 10^7-draw Monte-Carlo oracle on a fixed
/// stream and cached.
pub fn true_ate(case: SimCase, n0: usize, n1: usize) -> f64 {
    let (control, treated) = effect_means(case);
    let total = (n0 + n1) as f64;
    (n0 as f64 * control + n1 as f64 * treated) / total
}

/// Plug-in effect truth for the realized treated sample: the mean of the
/// effect surface over the dataset's treated rows.
pub fn plug_in_att_truth(dataset: &Dataset) -> f64 {
    let idx = dataset.arm_indices(1);
    let x = dataset.covariates();
    idx.iter()
        .map(|&i| effect_surface(x[[i, 0]], x[[i, 1]]))
        .sum::<f64>()
        / idx.len() as f64
}

/// Coupling-estimator parameters for one benchmark row.
#[derive(Debug, Clone, Copy)]
pub struct OtParams {
    pub epsilon: f64,
    /// Soft-marginal scale; `None` enforces exact marginals.
    pub rho: Option<f64>,
    pub drop_threshold: f64,
}

impl OtParams {
    pub fn new(epsilon: f64) -> Self {
        OtParams {
            epsilon,
            rho: Some(DEFAULT_SIM_RHO),
            drop_threshold: crate::matching::DEFAULT_DROP_THRESHOLD,
        }
    }

    fn divergence(&self) -> Divergence {
        match self.rho {
            Some(rho) => Divergence::Kl { rho },
            None => Divergence::Balanced,
        }
    }
}

/// Default soft-marginal scale for the benchmark rows.
pub const DEFAULT_SIM_RHO: f64 = 0.5;

/// One estimator column of the benchmark table.
#[derive(Debug, Clone, Copy)]
pub enum SimMethod {
    Ot(OtParams),
    Knn(usize),
    Ipw,
    Unadjusted,
}

impl SimMethod {
    pub fn label(&self) -> String {
        match self {
            SimMethod::Ot(_) => "ot".into(),
            SimMethod::Knn(k) => format!("knn{k}"),
            SimMethod::Ipw => "ipw".into(),
            SimMethod::Unadjusted => "unadjusted".into(),
        }
    }

    pub fn epsilon(&self) -> Option<f64> {
        match self {
            SimMethod::Ot(p) => Some(p.epsilon),
            _ => None,
        }
    }
}

/// Shared protocol knobs for a benchmark run.
#[derive(Debug, Clone, Copy)]
pub struct SimProtocol {
    pub n0: usize,
    pub n1: usize,
    /// Bootstrap resamples per dataset.
    pub bootstrap: usize,
    /// Independent datasets averaged into each row.
    pub replications: usize,
    pub noise_is_sd: bool,
    /// Fresh datasets behind the cached true estimator sd.
    pub sd_truth_replicates: usize,
}

impl SimProtocol {
    /// The benchmark's headline protocol: 1000 controls, 100 treated, 100
    /// bootstrap resamples, one dataset per row.
    pub fn standard() -> Self {
        SimProtocol {
            n0: 1000,
            n1: 100,
            bootstrap: 100,
            replications: 1,
            noise_is_sd: false,
            sd_truth_replicates: 64,
        }
    }
}

/// One output row of the benchmark table: mean absolute errors of the
/// bootstrap estimates against the truth, plus the bootstrap-sd error.
#[derive(Debug, Clone)]
pub struct ExperimentRow {
    pub method: String,
    pub epsilon: Option<f64>,
    pub ate_diff: f64,
    pub att_diff: f64,
    pub att_sd_diff: f64,
    pub replications: usize,
    pub seed: u64,
}

/// Point ATE/ATT of one method on one dataset. `warm` carries coupling
/// potentials between bootstrap replicates.
fn estimate_once(
    dataset: &Dataset,
    method: &SimMethod,
    warm: Option<(&crate::solver::Potentials, &[Vec<usize>])>,
) -> Result<(f64, f64, Option<OtMatchOutcome>)> {
    match method {
        SimMethod::Ot(params) => {
            let mut config = OtMatchConfig {
                solver: SinkhornConfig::new(params.epsilon),
                divergence: params.divergence(),
                drop_threshold: params.drop_threshold,
                weighting: UnitWeighting::Uniform,
                // benchmark convention: costs on [0,1] so the epsilon grid
                // and the marginal scale are comparable across draws
                cost_scale: CostScale::UnitMax,
            };
            config.solver.max_iterations = 40_000;
            let out = ot_match(dataset, &config, warm)?;
            Ok((out.ate, out.att, Some(out)))
        }
        SimMethod::Knn(k) => {
            let imputed = knn_impute(dataset, *k)?;
            let y = dataset.outcomes();
            let n = dataset.len();
            let mut ate_acc = 0.0;
            for i in 0..n {
                let contrast = if dataset.treatment()[i] == 1 {
                    y[i] - imputed[i]
                } else {
                    imputed[i] - y[i]
                };
                ate_acc += contrast;
            }
            Ok((ate_acc / n as f64, knn_att(dataset, *k)?, None))
        }
        SimMethod::Ipw => {
            let model = fit_propensity(dataset, false)?;
            let est = ipw_estimates(dataset, &model, IpwStyle::HorvitzThompson)?;
            Ok((est.ate, est.att, None))
        }
        SimMethod::Unadjusted => {
            let v = crate::baselines::unadjusted(dataset)?;
            Ok((v, v, None))
        }
    }
}

fn sample_sd(values: &[f64]) -> f64 {
    let m = values.len();
    if m < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / m as f64;
    (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64).sqrt()
}

/// True sampling sd of a method's ATT estimator under the case design,
/// from `sd_truth_replicates` fresh datasets on a fixed oracle stream.
/// Cached per (case, method, protocol) fingerprint.
pub fn true_att_sd(case: SimCase, method: &SimMethod, protocol: &SimProtocol) -> Result<f64> {
    static CACHE: OnceLock<Mutex<HashMap<String, f64>>> = OnceLock::new();
    let key = format!(
        "{case:?}|{method:?}|{}|{}|{}|{}",
        protocol.n0, protocol.n1, protocol.noise_is_sd, protocol.sd_truth_replicates
    );
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(v) = cache.lock().expect("sd cache poisoned").get(&key) {
        return Ok(*v);
    }
    let mut atts = Vec::with_capacity(protocol.sd_truth_replicates);
    let case_tag = match case {
        SimCase::Case1 => 1u64,
        SimCase::Case2 => 2u64,
    };
    let stream = Rng::child_seed(SD_TRUTH_SEED, case_tag);
    for r in 0..protocol.sd_truth_replicates {
        let ds = draw_case_dataset(
            case,
            protocol.n0,
            protocol.n1,
            Rng::child_seed(stream, r as u64),
            protocol.noise_is_sd,
        )?;
        let (_, att, _) = estimate_once(&ds, method, None)?;
        atts.push(att);
    }
    let sd = sample_sd(&atts);
    log::info!("true ATT sd for {key}: {sd:.6}");
    cache.lock().expect("sd cache poisoned").insert(key, sd);
    Ok(sd)
}

/// Run one method row: `replications` datasets, each with a stratified
/// bootstrap of size `protocol.bootstrap`, reporting the mean absolute
/// errors against the population ATE and the per-resample plug-in ATT
/// truth, plus the mean bootstrap-sd error.
fn run_method(
    case: SimCase,
    method: &SimMethod,
    protocol: &SimProtocol,
    master_seed: u64,
) -> Result<ExperimentRow> {
    let ate_truth = true_ate(case, protocol.n0, protocol.n1);
    let att_sd_truth = true_att_sd(case, method, protocol)?;
    let mut ate_diffs = Vec::with_capacity(protocol.replications);
    let mut att_diffs = Vec::with_capacity(protocol.replications);
    let mut sd_diffs = Vec::with_capacity(protocol.replications);
    for r in 0..protocol.replications {
        let data_seed = Rng::child_seed(master_seed, 2 * r as u64);
        let boot_seed = Rng::child_seed(master_seed, 2 * r as u64 + 1);
        let ds = draw_case_dataset(case, protocol.n0, protocol.n1, data_seed, protocol.noise_is_sd)?;
        // base fit on the full dataset, reused to warm-start replicates
        let (_, _, base) = estimate_once(&ds, method, None)?;
        let warm_potentials = base.map(|o| o.potentials);
        let mut ate_err_acc = 0.0;
        let mut att_err_acc = 0.0;
        let mut atts = Vec::with_capacity(protocol.bootstrap);
        let mut failures = 0usize;
        for b in 0..protocol.bootstrap {
            let mut rng = Rng::child(boot_seed, b as u64);
            let rs: Resample = resample(&ds, BootstrapMode::Stratified, &mut rng)?;
            let warm = warm_potentials
                .as_ref()
                .map(|p| (p, rs.arm_positions.as_slice()));
            match estimate_once(&rs.dataset, method, warm) {
                Ok((ate_b, att_b, _)) if ate_b.is_finite() && att_b.is_finite() => {
                    ate_err_acc += (ate_b - ate_truth).abs();
                    att_err_acc += (att_b - plug_in_att_truth(&rs.dataset)).abs();
                    atts.push(att_b);
                }
                _ => failures += 1,
            }
        }
        if (failures as f64) > 0.2 * protocol.bootstrap as f64 {
            return Err(Error::BootstrapFailures {
                failed: failures,
                total: protocol.bootstrap,
            });
        }
        let ok = (protocol.bootstrap - failures) as f64;
        ate_diffs.push(ate_err_acc / ok);
        att_diffs.push(att_err_acc / ok);
        sd_diffs.push((sample_sd(&atts) - att_sd_truth).abs());
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(ExperimentRow {
        method: method.label(),
        epsilon: method.epsilon(),
        ate_diff: mean(&ate_diffs),
        att_diff: mean(&att_diffs),
        att_sd_diff: mean(&sd_diffs),
        replications: protocol.replications,
        seed: master_seed,
    })
}

/// Run the benchmark table for one case: one row per method, deterministic
/// in `master_seed`, with every method seeing the same datasets and
/// resample draws.
pub fn run_case(
    case: SimCase,
    methods: &[SimMethod],
    protocol: &SimProtocol,
    master_seed: u64,
) -> Result<Vec<ExperimentRow>> {
    if protocol.bootstrap < 2 {
        return Err(Error::InvalidArgument(
            "protocol needs at least two bootstrap resamples".into(),
        ));
    }
    if protocol.replications == 0 {
        return Err(Error::InvalidArgument(
            "protocol needs at least one replication".into(),
        ));
    }
    methods
        .iter()
        .map(|m| run_method(case, m, protocol, master_seed))
        .collect()
}

/// The three-arm Gaussian illustration's specs: three bivariate normals
/// with distinct locations and scales.
pub fn illustration_specs() -> [MixtureSpec; 3] {
    let single = |mean: [f64; 2], cov: [f64; 4]| {
        MixtureSpec::new(vec![MixtureComponent {
            weight: 1.0,
            mean: mean.to_vec(),
            covariance: cov.to_vec(),
        }])
        .expect("hard-coded spec is valid")
    };
    [
        single([1.0, 0.0], [1.0, 0.0, 0.0, 1.0]),
        single([0.5, -0.2], [1.0, 0.1, 0.1, 1.0]),
        single([0.7, -0.2], [0.5, 0.1, 0.1, 0.5]),
    ]
}

/// Arm sizes for the three-arm illustration.
pub const ILLUSTRATION_SIZES: [usize; 3] = [70, 60, 80];

/// Result of the three-arm illustration: solver health and per-arm
/// marginal errors of the fitted coupling.
#[derive(Debug, Clone)]
pub struct IllustrationReport {
    pub marginal_errors: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub total_mass: f64,
}

/// Sample the three Gaussian arms and fit a three-marginal coupling,
/// reporting per-arm sup-norm marginal errors.
pub fn run_illustration(
    epsilon: f64,
    divergence: Divergence,
    seed: u64,
) -> Result<IllustrationReport> {
    use crate::measures::{build_cost, CostSpec, DiscreteMeasure};
    use crate::solver::{assemble_coupling, ipfp};
    let specs = illustration_specs();
    let mut measures = Vec::with_capacity(3);
    for (j, spec) in specs.iter().enumerate() {
        let n = ILLUSTRATION_SIZES[j];
        let pts = sample_mixture(spec, n, Rng::child_seed(seed, j as u64));
        measures.push(DiscreteMeasure::new(pts, vec![1.0 / n as f64; n])?);
    }
    let cost = build_cost(&measures, &CostSpec::SquaredEuclidean)?;
    let config = SinkhornConfig::new(epsilon);
    let divergences = vec![divergence; 3];
    let out = ipfp(&measures, &cost, &divergences, &config)?;
    let coupling = assemble_coupling(&out.potentials, &cost, &measures, epsilon)?;
    let mut marginal_errors = Vec::with_capacity(3);
    for j in 0..3 {
        let fitted = coupling.marginal(j);
        let err = fitted
            .iter()
            .zip(measures[j].weights())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        marginal_errors.push(err);
    }
    Ok(IllustrationReport {
        marginal_errors,
        iterations: out.iterations,
        converged: out.converged,
        total_mass: coupling.total_mass(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_component_sample_mean_is_near_zero() {
        let spec = MixtureSpec::new(vec![MixtureComponent {
            weight: 1.0,
            mean: vec![0.0, 0.0],
            covariance: vec![1.0, 0.0, 0.0, 1.0],
        }])
        .unwrap();
        let x = sample_mixture(&spec, 100_000, 31);
        for c in 0..2 {
            let mean = x.column(c).sum() / 100_000.0;
            assert!(mean.abs() < 0.02, "coordinate {c} mean {mean}");
        }
    }

    #[test]
    fn zero_weight_component_is_never_sampled() {
        let spec = MixtureSpec::new(vec![
            MixtureComponent {
                weight: 1.0,
                mean: vec![0.0],
                covariance: vec![1.0],
            },
            MixtureComponent {
                weight: 0.0,
                mean: vec![1000.0],
                covariance: vec![1.0],
            },
        ])
        .unwrap();
        let x = sample_mixture(&spec, 20_000, 7);
        assert!(x.iter().all(|v| v.abs() < 10.0));
    }

    #[test]
    fn control_mixture_mean_matches_weighted_component_means() {
        let x = sample_mixture(&control_mixture(), 1_000_000, 99);
        for c in 0..2 {
            let mean = x.column(c).sum() / 1e6;
            // 0.5 * (-1) + 0.5 * 0.5 = -0.25
            assert!(
                (mean + 0.25).abs() < 0.01,
                "coordinate {c} mean {mean}"
            );
        }
    }

    #[test]
    fn covariance_factor_shapes_the_spread() {
        let spec = MixtureSpec::new(vec![MixtureComponent {
            weight: 1.0,
            mean: vec![0.0, 0.0],
            covariance: vec![4.0, 0.0, 0.0, 0.25],
        }])
        .unwrap();
        let x = sample_mixture(&spec, 200_000, 5);
        let var = |c: usize| {
            let m = x.column(c).sum() / 2e5;
            x.column(c).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 2e5
        };
        assert!((var(0) - 4.0).abs() < 0.1);
        assert!((var(1) - 0.25).abs() < 0.01);
    }

    #[test]
    fn non_positive_definite_covariance_is_rejected() {
        let r = MixtureSpec::new(vec![MixtureComponent {
            weight: 1.0,
            mean: vec![0.0, 0.0],
            covariance: vec![1.0, 2.0, 2.0, 1.0],
        }]);
        assert!(r.is_err());
    }

    #[test]
    fn outcome_surfaces_at_the_origin() {
        assert_abs_diff_eq!(control_surface(0.0, 0.0), -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(treated_surface(0.0, 0.0), 2.0, epsilon = 1e-15);
        let x = Array2::zeros((50_000, 2));
        let y0 = sample_outcomes(&x, 0, 3, false).unwrap();
        let y1 = sample_outcomes(&x, 1, 4, false).unwrap();
        assert!((y0.sum() / 5e4 + 1.0).abs() < 0.02);
        assert!((y1.sum() / 5e4 - 2.0).abs() < 0.02);
    }

    #[test]
    fn treated_noise_parameter_reads_as_variance_by_default() {
        let x = Array2::zeros((200_000, 2));
        let spread = |y: &Array1<f64>| {
            let m = y.sum() / y.len() as f64;
            y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / y.len() as f64
        };
        let default = sample_outcomes(&x, 1, 8, false).unwrap();
        let as_sd = sample_outcomes(&x, 1, 8, true).unwrap();
        assert!((spread(&default) - 0.5).abs() < 0.01);
        assert!((spread(&as_sd) - 0.25).abs() < 0.005);
    }

    #[test]
    fn outcomes_reproduce_bitwise_for_a_fixed_seed() {
        let x = sample_mixture(&control_mixture(), 50, 2);
        let a = sample_outcomes(&x, 0, 77, false).unwrap();
        let b = sample_outcomes(&x, 0, 77, false).unwrap();
        assert_eq!(a.as_slice().unwrap(), b.as_slice().unwrap());
    }

    #[test]
    fn population_truth_matches_the_closed_form() {
        // E[effect | control mixture] = 0.5*(-1) + 0.5*4.25 = 1.625;
        // E[effect | treated mixture] = 4.625 (either case);
        // shares 1000:100 give (1000*1.625 + 100*4.625)/1100
        let expect = (1000.0 * 1.625 + 100.0 * 4.625) / 1100.0;
        let got = true_ate(SimCase::Case1, 1000, 100);
        assert!(
            (got - expect).abs() < 0.01,
            "Monte-Carlo ATE {got} vs analytic {expect}"
        );
        let again = true_ate(SimCase::Case2, 1000, 100);
        assert!((again - expect).abs() < 0.01);
    }

    #[test]
    fn plug_in_att_truth_is_the_treated_effect_mean() {
        let ds = draw_case_dataset(SimCase::Case1, 5, 3, 12, false).unwrap();
        let idx = ds.arm_indices(1);
        let expect: f64 = idx
            .iter()
            .map(|&i| {
                effect_surface(ds.covariates()[[i, 0]], ds.covariates()[[i, 1]])
            })
            .sum::<f64>()
            / 3.0;
        assert_abs_diff_eq!(plug_in_att_truth(&ds), expect, epsilon = 1e-12);
    }

    #[test]
    fn datasets_are_deterministic_and_block_ordered() {
        let a = draw_case_dataset(SimCase::Case2, 30, 10, 5, false).unwrap();
        let b = draw_case_dataset(SimCase::Case2, 30, 10, 5, false).unwrap();
        assert_eq!(a.covariates(), b.covariates());
        assert_eq!(a.outcomes(), b.outcomes());
        assert!(a.treatment()[..30].iter().all(|t| *t == 0));
        assert!(a.treatment()[30..].iter().all(|t| *t == 1));
    }

    #[test]
    fn benchmark_rows_are_finite_and_reproducible() {
        let protocol = SimProtocol {
            n0: 60,
            n1: 20,
            bootstrap: 8,
            replications: 2,
            noise_is_sd: false,
            sd_truth_replicates: 6,
        };
        let methods = [
            SimMethod::Ot(OtParams {
                epsilon: 0.05,
                rho: Some(0.5),
                drop_threshold: 1e-3,
            }),
            SimMethod::Knn(1),
            SimMethod::Unadjusted,
        ];
        let rows = run_case(SimCase::Case1, &methods, &protocol, 9001).unwrap();
        assert_eq!(rows.len(), 3);
        for row in &rows {
            assert!(row.ate_diff.is_finite() && row.ate_diff >= 0.0);
            assert!(row.att_diff.is_finite() && row.att_diff >= 0.0);
            assert!(row.att_sd_diff.is_finite() && row.att_sd_diff >= 0.0);
            assert_eq!(row.replications, 2);
        }
        let again = run_case(SimCase::Case1, &methods, &protocol, 9001).unwrap();
        for (a, b) in rows.iter().zip(again.iter()) {
            assert_eq!(a.ate_diff.to_bits(), b.ate_diff.to_bits());
            assert_eq!(a.att_diff.to_bits(), b.att_diff.to_bits());
            assert_eq!(a.att_sd_diff.to_bits(), b.att_sd_diff.to_bits());
        }
    }

    #[test]
    fn illustration_reports_small_marginal_errors() {
        let report =
            run_illustration(0.1, Divergence::Kl { rho: 1.0 }, 77).unwrap();
        assert!(report.converged);
        assert_eq!(report.marginal_errors.len(), 3);
        // soft marginals track the arm weights loosely but finitely
        for err in &report.marginal_errors {
            assert!(err.is_finite() && *err < 0.05);
        }
        assert!(report.total_mass > 0.0);
    }
}
