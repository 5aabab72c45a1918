//! Entropy-regularized transport matching for observational causal
//! inference: a log-domain IPFP solver over two or more marginals with
//! hard or KL-penalized marginal constraints, conditional-weight
//! counterfactual imputation, classical baselines, stratified bootstrap
//! inference, covariate-balance diagnostics, and a simulation harness.

pub mod baselines;
pub mod diagnostics;
pub mod divergences;
pub mod error;
pub mod inference;
mod linalg;
pub mod matching;
pub mod measures;
pub mod rng;
pub mod simulation;
pub mod solver;
pub mod special;

pub use diagnostics::{
    balance_report, f_variance, ks_two_sample, welch_t, BalanceColumn, BalanceRow,
};
pub use divergences::Divergence;
pub use baselines::{
    fit_propensity, ipw_estimates, knn_ate, knn_att, knn_impute, knn_impute_into,
    unadjusted, IpwEstimates, IpwStyle, PropensityModel,
};
pub use error::{Error, Result};
pub use inference::{bootstrap, resample, BootstrapMode, BootstrapSummary, Resample};
pub use matching::{
    arm_measures, att, ate, bias_diagnostic, conditional_weights,
    expected_potential_outcome, impute_counterfactual, ot_match, ArmCoupling,
    CausalEstimate, ConditionalWeights, CostScale, Estimand, OtMatchConfig,
    OtMatchOutcome, UnitWeighting, DEFAULT_DROP_THRESHOLD,
};
pub use measures::{
    build_cost, build_cost_with_cap, load_csv, load_nsw, standardize, ColumnTransform,
    CostSpec, CostTensor, Dataset, DiscreteMeasure, DEFAULT_COST_CAP, NSW_COLUMNS,
};
pub use rng::Rng;
pub use solver::{
    assemble_coupling, dual_objective, exact_ot_bruteforce, foc_residual, ipfp, ipfp_from,
    primal_objective, softmin, Coupling, Potentials, SinkhornConfig, SolveOutcome, SweepMode,
};
