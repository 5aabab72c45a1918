//! Log-domain Sinkhorn/IPFP for balanced and KL-penalized transport,
//! coupling assembly, and optimality verification.
//!
//! # Algorithm
//!
//! The solver maximizes the dual of the divergence-regularized transport
//! problem by cyclic block updates. One sweep updates each arm in order
//! using the soft-min of the cost against the other arms' current
//! potentials, passed through the divergence's proximity operator (the
//! identity for a hard marginal constraint, the damping `rho/(rho+eps)`
//! for a KL penalty). Every inner accumulation is a log-sum-exp with a
//! running maximum, so tiny regularization values (`eps = 1e-3` on
//! standardized covariates) neither overflow nor underflow.
//!
//! Two accelerations keep large solves cheap without changing the fixed
//! point:
//!
//! * **Constant-shift rebalancing.** After each sweep the dual is maximized
//!   exactly over per-arm constant shifts. For all-KL penalties this is a
//!   closed form (see [`ipfp`] internals); it is a dual ascent step, so the
//!   dual-monotonicity property is preserved, and it removes the slow
//!   "mass equilibration" mode that otherwise dominates at small `eps`.
//!   For all-balanced penalties constant shifts are a pure gauge: arms
//!   `0..J-2` are recentered to zero weighted mean and the constants are
//!   absorbed into the last arm, pinning the normalization without
//!   touching the coupling.
//! * **Active-set sweeps.** For large two-arm problems the kernel
//!   `exp((phi_0 + phi_1 - c)/eps)` is numerically supported on a thin
//!   band of entries. Sweeps iterate only entries within `ACTIVE_BAND`
//!   log-units of their row or column maximum; the set is rebuilt from a
//!   dense pass whenever the potentials have drifted enough for the band
//!   to go stale, and convergence is only declared after a dense pass, so
//!   the truncation is certified (relative error below `n * exp(-band/2)`,
//!   about 1e-10 here).

use crate::divergences::{phi_divergence, Divergence};
use crate::error::{Error, Result};
use crate::measures::{CostTensor, DiscreteMeasure};
use std::collections::VecDeque;

/// Configuration for [`ipfp`].
#[derive(Debug, Clone)]
pub struct SinkhornConfig {
    /// Entropic regularization strength (> 0).
    pub epsilon: f64,
    /// Sweep budget; the solver returns its best iterate with
    /// `converged = false` when the budget runs out.
    pub max_iterations: usize,
    /// Stop when the sup-norm potential change over a sweep falls below
    /// this.
    pub tolerance: f64,
    /// With balanced (hard-constraint) arms, additionally require the worst
    /// marginal error to fall below this before stopping: a tiny potential
    /// change at small `eps` does not by itself guarantee feasibility.
    pub marginal_tolerance: f64,
    /// Sweep strategy.
    pub sweep: SweepMode,
}

impl SinkhornConfig {
    pub fn new(epsilon: f64) -> Self {
        SinkhornConfig {
            epsilon,
            max_iterations: 10_000,
            tolerance: 1e-9,
            marginal_tolerance: 1e-7,
            sweep: SweepMode::Auto,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::InvalidArgument("max_iterations must be >= 1".into()));
        }
        if !(self.tolerance > 0.0) || !(self.marginal_tolerance > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Sweep strategy for [`ipfp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepMode {
    /// Active-set sweeps on two-arm problems with at least
    /// `SPARSE_MIN_CELLS` kernel entries, dense sweeps otherwise.
    Auto,
    /// Always dense.
    Dense,
}

/// Two-arm problems at or above this many cells use active-set sweeps under
/// [`SweepMode::Auto`].
pub const SPARSE_MIN_CELLS: usize = 20_000;

/// Active-set inclusion band in log units (see module docs).
const ACTIVE_BAND: f64 = 60.0;

/// Rebuild the active set after the cumulative potential drift exceeds
/// `ACTIVE_BAND * eps / DRIFT_DIVISOR`.
const DRIFT_DIVISOR: f64 = 8.0;

/// Rebuild the active set at least every this many sweeps.
const REFRESH_EVERY: usize = 64;

/// Window depth of the residual-mixing accelerator: how many recent sweep
/// images enter the least-squares combination.
const MIX_DEPTH: usize = 8;

/// Mixing coefficients larger than this in absolute value mean the window is
/// near-degenerate; the accelerator restarts instead of taking such a step.
/// Legitimate coefficients scale like 1 / (1 - rate) and the slowest damping
/// rates sit near one, so the cap must sit well above that scale.
const MIX_COEFF_CAP: f64 = 1e6;

/// Restart the accelerator when the sweep residual has not improved on its
/// best within-window value for this many consecutive sweeps.
const MIX_STALL_LIMIT: usize = 24;

/// Window least-squares accelerator over sweep images (Anderson mixing).
///
/// A full sweep maps the stacked potentials x to G(x) with residual
/// f = G(x) - x. Near the fixed point G is affine and the slow error modes
/// (one per loosely coupled group of points, all damped like
/// rho / (rho + eps)) span a low-dimensional space; combining the recent
/// images to minimize the combined residual removes the whole slow cluster
/// at once instead of waiting out the per-sweep damping factor. The mixed
/// iterate only replaces the sweep output as a restart point — stopping
/// still requires a genuinely small plain-sweep residual plus the dense
/// certification pass, so a bad window can waste sweeps but never fake
/// convergence. Guards: the window restarts on oversized coefficients, a
/// singular least-squares system, non-finite values, or a residual that
/// stalls above its best-in-window for too long.
struct SweepMixer {
    /// Recent sweep images G(x), newest last.
    gs: VecDeque<Vec<f64>>,
    /// Residuals f = G(x) - x matching `gs`.
    fs: VecDeque<Vec<f64>>,
    best_residual: f64,
    since_best: usize,
}

impl SweepMixer {
    fn new() -> Self {
        SweepMixer {
            gs: VecDeque::with_capacity(MIX_DEPTH),
            fs: VecDeque::with_capacity(MIX_DEPTH),
            best_residual: f64::INFINITY,
            since_best: 0,
        }
    }

    fn reset(&mut self) {
        self.gs.clear();
        self.fs.clear();
        self.best_residual = f64::INFINITY;
        self.since_best = 0;
    }

    /// Feed one sweep (previous iterate `x`, sweep output `g`, residual
    /// sup-norm `residual`) and return the mixed iterate to continue from,
    /// or `None` to keep the plain sweep output.
    fn step(&mut self, x: &[f64], g: &[f64], residual: f64) -> Option<Vec<f64>> {
        if residual < self.best_residual {
            self.best_residual = residual;
            self.since_best = 0;
        } else {
            self.since_best += 1;
            if self.since_best >= MIX_STALL_LIMIT {
                self.reset();
                return None;
            }
        }
        let f: Vec<f64> = g.iter().zip(x).map(|(gi, xi)| gi - xi).collect();
        if self.gs.len() == MIX_DEPTH {
            self.gs.pop_front();
            self.fs.pop_front();
        }
        self.gs.push_back(g.to_vec());
        self.fs.push_back(f);
        let k = self.fs.len() - 1;
        if k == 0 {
            return None;
        }
        // Solve min over gamma of || f_k - sum_j gamma_j (f_{j+1} - f_j) ||
        // via the normal equations, then take the matching combination of
        // sweep images: g_k - sum_j gamma_j (g_{j+1} - g_j).
        let n = x.len();
        let fk = &self.fs[k];
        let mut m = vec![0.0; k * k];
        let mut rhs = vec![0.0; k];
        for a in 0..k {
            for b in a..k {
                let mut s = 0.0;
                for i in 0..n {
                    let da = self.fs[a + 1][i] - self.fs[a][i];
                    let db = self.fs[b + 1][i] - self.fs[b][i];
                    s += da * db;
                }
                m[a * k + b] = s;
                m[b * k + a] = s;
            }
            let mut s = 0.0;
            for i in 0..n {
                s += (self.fs[a + 1][i] - self.fs[a][i]) * fk[i];
            }
            rhs[a] = s;
        }
        let ridge = 1e-12
            * (0..k)
                .map(|a| m[a * k + a])
                .fold(0.0_f64, f64::max)
                .max(f64::MIN_POSITIVE);
        for a in 0..k {
            m[a * k + a] += ridge;
        }
        if crate::linalg::solve_spd_in_place(k, &mut m, &mut rhs).is_err() {
            self.reset();
            return None;
        }
        if rhs.iter().any(|c| !c.is_finite() || c.abs() > MIX_COEFF_CAP) {
            self.reset();
            return None;
        }
        let gk = &self.gs[k];
        let mut mixed = gk.clone();
        for (j, gamma) in rhs.iter().enumerate() {
            if *gamma == 0.0 {
                continue;
            }
            for i in 0..n {
                mixed[i] -= gamma * (self.gs[j + 1][i] - self.gs[j][i]);
            }
        }
        if mixed.iter().any(|v| !v.is_finite()) {
            self.reset();
            return None;
        }
        Some(mixed)
    }
}

/// Dual potentials, one vector per arm.
#[derive(Debug, Clone)]
pub struct Potentials {
    per_arm: Vec<Vec<f64>>,
}

impl Potentials {
    pub fn zeros(sizes: &[usize]) -> Self {
        Potentials {
            per_arm: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn from_vectors(per_arm: Vec<Vec<f64>>) -> Self {
        Potentials { per_arm }
    }

    pub fn arms(&self) -> usize {
        self.per_arm.len()
    }

    pub fn arm(&self, j: usize) -> &[f64] {
        &self.per_arm[j]
    }

    /// Potentials gathered at resampled indices: the warm start for a
    /// bootstrap replicate's solve.
    pub fn gather(&self, indices: &[&[usize]]) -> Result<Potentials> {
        if indices.len() != self.per_arm.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} index lists for {} arms",
                indices.len(),
                self.per_arm.len()
            )));
        }
        let mut per_arm = Vec::with_capacity(indices.len());
        for (j, idx) in indices.iter().enumerate() {
            per_arm.push(idx.iter().map(|&i| self.per_arm[j][i]).collect());
        }
        Ok(Potentials { per_arm })
    }
}

/// Result of one [`ipfp`] solve.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub potentials: Potentials,
    /// Full sweeps performed.
    pub iterations: usize,
    /// Whether the stopping criteria were met within the budget.
    pub converged: bool,
    /// Sup-norm potential change over the last sweep.
    pub last_change: f64,
    /// Worst absolute marginal error of the implied coupling against the
    /// input weights, evaluated densely at the final iterate.
    pub marginal_error: f64,
}

fn check_problem(
    measures: &[DiscreteMeasure],
    cost: &CostTensor,
    divergences: &[Divergence],
) -> Result<()> {
    if measures.len() < 2 {
        return Err(Error::InvalidArgument("need at least two arms".into()));
    }
    if measures.len() != cost.arms() || cost.arms() != divergences.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} measures, {}-way cost, {} divergences",
            measures.len(),
            cost.arms(),
            divergences.len()
        )));
    }
    for (j, m) in measures.iter().enumerate() {
        if m.len() != cost.shape()[j] {
            return Err(Error::DimensionMismatch(format!(
                "arm {j}: {} points vs cost axis {}",
                m.len(),
                cost.shape()[j]
            )));
        }
        if m.total_mass() <= 0.0 {
            return Err(Error::InvalidArgument(format!("arm {j} has zero total mass")));
        }
    }
    Ok(())
}

fn log_weights(m: &DiscreteMeasure) -> Vec<f64> {
    m.weights().iter().map(|&w| w.ln()).collect()
}

/// How constant shifts are rebalanced between sweeps.
#[derive(Clone, Copy, PartialEq)]
enum Rebalance {
    /// All arms balanced: shifts are a pure gauge; pin it by recentering.
    Recenter,
    /// All arms KL: closed-form exact dual maximization over shifts.
    KlShift,
    /// Mixed penalties: leave the shifts to the plain iteration.
    None,
}

fn rebalance_mode(divergences: &[Divergence]) -> Rebalance {
    if divergences.iter().all(|d| d.is_balanced()) {
        Rebalance::Recenter
    } else if divergences.iter().all(|d| !d.is_balanced()) {
        Rebalance::KlShift
    } else {
        Rebalance::None
    }
}

/// Solve for the dual potentials from a zero initialization.
pub fn ipfp(
    measures: &[DiscreteMeasure],
    cost: &CostTensor,
    divergences: &[Divergence],
    config: &SinkhornConfig,
) -> Result<SolveOutcome> {
    let sizes: Vec<usize> = measures.iter().map(|m| m.len()).collect();
    ipfp_from(measures, cost, divergences, config, Potentials::zeros(&sizes))
}

/// Solve for the dual potentials from a caller-supplied starting point
/// (e.g. the base solution's potentials gathered at bootstrap indices).
pub fn ipfp_from(
    measures: &[DiscreteMeasure],
    cost: &CostTensor,
    divergences: &[Divergence],
    config: &SinkhornConfig,
    initial: Potentials,
) -> Result<SolveOutcome> {
    config.validate()?;
    check_problem(measures, cost, divergences)?;
    if initial.arms() != measures.len()
        || initial
            .per_arm
            .iter()
            .zip(measures)
            .any(|(p, m)| p.len() != m.len())
    {
        return Err(Error::DimensionMismatch(
            "initial potentials do not match the arm sizes".into(),
        ));
    }
    let two_arm = measures.len() == 2;
    let cells = cost.values().len();
    let use_active_set =
        two_arm && config.sweep == SweepMode::Auto && cells >= SPARSE_MIN_CELLS;
    if two_arm {
        let mut solver = PairSolver::new(measures, cost, divergences, config, use_active_set);
        solver.run(initial)
    } else {
        let mut solver = MultiSolver::new(measures, cost, divergences, config);
        solver.run(initial)
    }
}

// --------------------------------------------------------------------------
// Two-arm solver with optional active-set sweeps.
// --------------------------------------------------------------------------

struct PairSolver<'a> {
    c: &'a [f64],   // row-major n0 x n1
    ct: Vec<f64>,   // transpose, n1 x n0
    n0: usize,
    n1: usize,
    lw0: Vec<f64>,
    lw1: Vec<f64>,
    eps: f64,
    damp: [f64; 2],
    rebalance: Rebalance,
    divergences: [Divergence; 2],
    masses: [f64; 2],
    weights: [&'a [f64]; 2],
    cfg: &'a SinkhornConfig,
    active: Option<ActiveSet>,
    // scratch for dense refresh passes (allocated once in active-set mode)
    log_kernel: Vec<f64>,
}

struct ActiveSet {
    row_ptr: Vec<u32>,
    cols: Vec<u32>,
    col_ptr: Vec<u32>,
    rows: Vec<u32>,
    drift: f64,
    sweeps_since_refresh: usize,
}

impl<'a> PairSolver<'a> {
    fn new(
        measures: &'a [DiscreteMeasure],
        cost: &'a CostTensor,
        divergences: &'a [Divergence],
        cfg: &'a SinkhornConfig,
        use_active_set: bool,
    ) -> Self {
        let n0 = measures[0].len();
        let n1 = measures[1].len();
        let c = cost.values();
        let mut ct = vec![0.0; c.len()];
        for i in 0..n0 {
            for k in 0..n1 {
                ct[k * n0 + i] = c[i * n1 + k];
            }
        }
        PairSolver {
            c,
            ct,
            n0,
            n1,
            lw0: log_weights(&measures[0]),
            lw1: log_weights(&measures[1]),
            eps: cfg.epsilon,
            damp: [
                divergences[0].aprox_factor(cfg.epsilon),
                divergences[1].aprox_factor(cfg.epsilon),
            ],
            rebalance: rebalance_mode(divergences),
            divergences: [divergences[0], divergences[1]],
            masses: [measures[0].total_mass(), measures[1].total_mass()],
            weights: [measures[0].weights(), measures[1].weights()],
            cfg,
            active: if use_active_set {
                Some(ActiveSet {
                    row_ptr: Vec::new(),
                    cols: Vec::new(),
                    col_ptr: Vec::new(),
                    rows: Vec::new(),
                    drift: f64::INFINITY, // force an initial refresh
                    sweeps_since_refresh: 0,
                })
            } else {
                None
            },
            log_kernel: if use_active_set { vec![0.0; c.len()] } else { Vec::new() },
        }
    }

    /// Dense update of one arm's potentials; returns the sup-norm change.
    fn dense_half_sweep(&self, phi_self: &mut [f64], phi_other: &[f64], arm: usize) -> f64 {
        let (cost, lw_other, n_other) = if arm == 0 {
            (self.c, &self.lw1, self.n1)
        } else {
            (&self.ct[..], &self.lw0, self.n0)
        };
        let inv_eps = 1.0 / self.eps;
        // t[k] = phi_other[k]/eps + ln w_other[k]
        let t: Vec<f64> = phi_other
            .iter()
            .zip(lw_other.iter())
            .map(|(p, lw)| p * inv_eps + lw)
            .collect();
        let damp = self.damp[arm];
        let mut delta = 0.0f64;
        for (i, phi) in phi_self.iter_mut().enumerate() {
            let row = &cost[i * n_other..(i + 1) * n_other];
            let mut m = f64::NEG_INFINITY;
            for k in 0..n_other {
                let a = t[k] - row[k] * inv_eps;
                if a > m {
                    m = a;
                }
            }
            let mut s = 0.0;
            for k in 0..n_other {
                s += (t[k] - row[k] * inv_eps - m).exp();
            }
            // soft-min = -eps * (m + ln s); new potential = damp * soft-min
            let new = damp * (-self.eps) * (m + s.ln());
            let d = (new - *phi).abs();
            if d > delta {
                delta = d;
            }
            *phi = new;
        }
        delta
    }

    /// Active-set update of one arm's potentials.
    fn sparse_half_sweep(&self, phi_self: &mut [f64], phi_other: &[f64], arm: usize) -> f64 {
        let set = self.active.as_ref().expect("active set present");
        let (ptr, idx, cost, lw_other, n_other) = if arm == 0 {
            (&set.row_ptr, &set.cols, self.c, &self.lw1, self.n1)
        } else {
            (&set.col_ptr, &set.rows, &self.ct[..], &self.lw0, self.n0)
        };
        let inv_eps = 1.0 / self.eps;
        let t: Vec<f64> = phi_other
            .iter()
            .zip(lw_other.iter())
            .map(|(p, lw)| p * inv_eps + lw)
            .collect();
        let damp = self.damp[arm];
        let mut delta = 0.0f64;
        for (i, phi) in phi_self.iter_mut().enumerate() {
            let lo = ptr[i] as usize;
            let hi = ptr[i + 1] as usize;
            let base = i * n_other;
            let mut m = f64::NEG_INFINITY;
            for &k in &idx[lo..hi] {
                let a = t[k as usize] - cost[base + k as usize] * inv_eps;
                if a > m {
                    m = a;
                }
            }
            let mut s = 0.0;
            for &k in &idx[lo..hi] {
                s += (t[k as usize] - cost[base + k as usize] * inv_eps - m).exp();
            }
            let new = damp * (-self.eps) * (m + s.ln());
            let d = (new - *phi).abs();
            if d > delta {
                delta = d;
            }
            *phi = new;
        }
        delta
    }

    /// Exact dual maximization over per-arm constant shifts (all-KL case);
    /// applies the shifts and returns the largest absolute shift.
    fn kl_shift(&mut self, phi0: &mut [f64], phi1: &mut [f64]) -> f64 {
        let (rho0, rho1) = match (self.divergences[0], self.divergences[1]) {
            (Divergence::Kl { rho: a }, Divergence::Kl { rho: b }) => (a, b),
            _ => unreachable!("kl_shift only runs with all-KL penalties"),
        };
        let ln_b0 = lse_pairs(phi0, &self.lw0, -1.0 / rho0);
        let ln_b1 = lse_pairs(phi1, &self.lw1, -1.0 / rho1);
        let ln_e = self.log_total_mass(phi0, phi1);
        // maximize over (a0, a1): a_j = rho_j (ln B_j - ln E - S/eps),
        // S = a0 + a1 = eps * sum_j rho_j (ln B_j - ln E) / (eps + sum rho_j)
        let s = self.eps * (rho0 * (ln_b0 - ln_e) + rho1 * (ln_b1 - ln_e))
            / (self.eps + rho0 + rho1);
        let a0 = rho0 * (ln_b0 - ln_e - s / self.eps);
        let a1 = rho1 * (ln_b1 - ln_e - s / self.eps);
        for p in phi0.iter_mut() {
            *p += a0;
        }
        for p in phi1.iter_mut() {
            *p += a1;
        }
        a0.abs().max(a1.abs())
    }

    /// log of the coupling's total mass implied by the current potentials,
    /// over the active set if one is maintained (the excluded entries are
    /// below the inclusion band and contribute nothing at double precision).
    fn log_total_mass(&self, phi0: &[f64], phi1: &[f64]) -> f64 {
        let inv_eps = 1.0 / self.eps;
        let t: Vec<f64> = phi1
            .iter()
            .zip(self.lw1.iter())
            .map(|(p, lw)| p * inv_eps + lw)
            .collect();
        let mut m = f64::NEG_INFINITY;
        let terms = |i: usize, k: usize, max: &mut f64, sum: Option<&mut f64>| {
            let a = phi0[i] * inv_eps + self.lw0[i] + t[k] - self.c[i * self.n1 + k] * inv_eps;
            match sum {
                None => {
                    if a > *max {
                        *max = a;
                    }
                }
                Some(s) => *s += (a - *max).exp(),
            }
        };
        match self.active.as_ref() {
            Some(set) if !set.cols.is_empty() => {
                for i in 0..self.n0 {
                    for &k in &set.cols[set.row_ptr[i] as usize..set.row_ptr[i + 1] as usize] {
                        terms(i, k as usize, &mut m, None);
                    }
                }
                let mut s = 0.0;
                for i in 0..self.n0 {
                    for &k in &set.cols[set.row_ptr[i] as usize..set.row_ptr[i + 1] as usize] {
                        terms(i, k as usize, &mut m, Some(&mut s));
                    }
                }
                m + s.ln()
            }
            _ => {
                for i in 0..self.n0 {
                    for k in 0..self.n1 {
                        terms(i, k, &mut m, None);
                    }
                }
                let mut s = 0.0;
                for i in 0..self.n0 {
                    for k in 0..self.n1 {
                        terms(i, k, &mut m, Some(&mut s));
                    }
                }
                m + s.ln()
            }
        }
    }

    /// Recenters balanced potentials: arm 0 to zero weighted mean, constant
    /// absorbed into arm 1. Leaves the coupling untouched.
    fn recenter(&self, phi0: &mut [f64], phi1: &mut [f64]) {
        let mean0: f64 = phi0
            .iter()
            .zip(self.weights[0].iter())
            .map(|(p, w)| p * w)
            .sum::<f64>()
            / self.masses[0];
        for p in phi0.iter_mut() {
            *p -= mean0;
        }
        for p in phi1.iter_mut() {
            *p += mean0;
        }
    }

    /// Dense pass: recompute the log kernel, marginals, and (in active-set
    /// mode) rebuild the active set. Returns the worst marginal error.
    fn dense_refresh(&mut self, phi0: &[f64], phi1: &[f64]) -> f64 {
        let inv_eps = 1.0 / self.eps;
        let t: Vec<f64> = phi1
            .iter()
            .zip(self.lw1.iter())
            .map(|(p, lw)| p * inv_eps + lw)
            .collect();
        let mut m0 = vec![0.0f64; self.n0];
        let mut m1 = vec![0.0f64; self.n1];
        if let Some(mut set) = self.active.take() {
            let lk = &mut self.log_kernel;
            let mut rmax = vec![f64::NEG_INFINITY; self.n0];
            let mut cmax = vec![f64::NEG_INFINITY; self.n1];
            for i in 0..self.n0 {
                let base_val = phi0[i] * inv_eps + self.lw0[i];
                let row_cost = &self.c[i * self.n1..(i + 1) * self.n1];
                let out = &mut lk[i * self.n1..(i + 1) * self.n1];
                for k in 0..self.n1 {
                    let l = base_val + t[k] - row_cost[k] * inv_eps;
                    out[k] = l;
                    if l > rmax[i] {
                        rmax[i] = l;
                    }
                    if l > cmax[k] {
                        cmax[k] = l;
                    }
                }
            }
            // marginals (dense, exact) and active-set selection in one pass
            set.row_ptr.clear();
            set.cols.clear();
            set.row_ptr.push(0);
            let mut col_counts = vec![0u32; self.n1];
            for i in 0..self.n0 {
                let row = &lk[i * self.n1..(i + 1) * self.n1];
                for (k, &l) in row.iter().enumerate() {
                    m0[i] += exp_or_zero(l);
                    m1[k] += exp_or_zero(l);
                    if l >= rmax[i].min(cmax[k]) - ACTIVE_BAND {
                        set.cols.push(k as u32);
                        col_counts[k] += 1;
                    }
                }
                set.row_ptr.push(set.cols.len() as u32);
            }
            // transpose the CSR listing into CSC
            set.col_ptr.clear();
            set.col_ptr.push(0);
            for k in 0..self.n1 {
                set.col_ptr.push(set.col_ptr[k] + col_counts[k]);
            }
            set.rows.resize(set.cols.len(), 0);
            let mut cursor: Vec<u32> = set.col_ptr[..self.n1].to_vec();
            for i in 0..self.n0 {
                for &k in &set.cols[set.row_ptr[i] as usize..set.row_ptr[i + 1] as usize] {
                    set.rows[cursor[k as usize] as usize] = i as u32;
                    cursor[k as usize] += 1;
                }
            }
            set.drift = 0.0;
            set.sweeps_since_refresh = 0;
            log::debug!(
                "active-set refresh: {} of {} entries",
                set.cols.len(),
                self.c.len()
            );
            self.active = Some(set);
        } else {
            for i in 0..self.n0 {
                let base_val = phi0[i] * inv_eps + self.lw0[i];
                let row_cost = &self.c[i * self.n1..(i + 1) * self.n1];
                for k in 0..self.n1 {
                    let g = exp_or_zero(base_val + t[k] - row_cost[k] * inv_eps);
                    m0[i] += g;
                    m1[k] += g;
                }
            }
        }
        marginal_error_against(&m0, self.weights[0], &self.divergences[0])
            .max(marginal_error_against(&m1, self.weights[1], &self.divergences[1]))
    }

    fn run(&mut self, initial: Potentials) -> Result<SolveOutcome> {
        let mut phi0 = initial.per_arm[0].clone();
        let mut phi1 = initial.per_arm[1].clone();
        let balanced = self.rebalance == Rebalance::Recenter;
        let drift_limit = ACTIVE_BAND * self.eps / DRIFT_DIVISOR;
        let mut last_change = f64::INFINITY;
        let mut marginal_error = f64::INFINITY;
        let mut iterations = 0;
        let mut converged = false;

        // See `SweepMixer`: the plain sweeps are accelerated by re-combining
        // recent iterates, which collapses the slow near-one damping modes
        // that soft marginals produce at small eps.
        let mut prev0 = phi0.clone();
        let mut prev1 = phi1.clone();
        let mut mixer = SweepMixer::new();
        let mut stacked_x = vec![0.0; phi0.len() + phi1.len()];
        let mut stacked_g = vec![0.0; phi0.len() + phi1.len()];

        if self.active.is_some() {
            self.dense_refresh(&phi0, &phi1);
        }

        while iterations < self.cfg.max_iterations {
            prev0.copy_from_slice(&phi0);
            prev1.copy_from_slice(&phi1);
            let sparse_ok = self
                .active
                .as_ref()
                .map(|s| s.drift <= drift_limit && s.sweeps_since_refresh < REFRESH_EVERY)
                .unwrap_or(false);
            let refreshed = !sparse_ok && self.active.is_some();
            let mut delta = if sparse_ok {
                let d0 = self.sparse_half_sweep(&mut phi0, &phi1, 0);
                let d1 = self.sparse_half_sweep(&mut phi1, &phi0, 1);
                d0.max(d1)
            } else {
                if refreshed {
                    // stale set: refresh against the current iterate first
                    marginal_error = self.dense_refresh(&phi0, &phi1);
                }
                let d0 = self.dense_half_sweep(&mut phi0, &phi1, 0);
                let d1 = self.dense_half_sweep(&mut phi1, &phi0, 1);
                d0.max(d1)
            };
            match self.rebalance {
                Rebalance::Recenter => self.recenter(&mut phi0, &mut phi1),
                Rebalance::KlShift => delta += self.kl_shift(&mut phi0, &mut phi1),
                Rebalance::None => {}
            }
            iterations += 1;
            if let Some(set) = self.active.as_mut() {
                set.drift += delta;
                set.sweeps_since_refresh += 1;
            }
            if !delta.is_finite()
                || phi0.iter().any(|p| !p.is_finite())
                || phi1.iter().any(|p| !p.is_finite())
            {
                return Err(Error::NonFinite { iteration: iterations });
            }
            last_change = delta;
            if delta < self.cfg.tolerance {
                // candidate stop: certify with a dense pass
                marginal_error = self.dense_refresh(&phi0, &phi1);
                if !balanced || marginal_error < self.cfg.marginal_tolerance {
                    converged = true;
                    break;
                }
            }
            // accelerate the tail by mixing recent sweep images
            if refreshed {
                // a rebuilt active set slightly changes the sweep map, and
                // mixing across the change produces oversized corrections
                // whose drift forces a refresh storm — restart the window
                mixer.reset();
            }
            if delta > 16.0 * self.cfg.tolerance {
                let n0 = phi0.len();
                stacked_x[..n0].copy_from_slice(&prev0);
                stacked_x[n0..].copy_from_slice(&prev1);
                stacked_g[..n0].copy_from_slice(&phi0);
                stacked_g[n0..].copy_from_slice(&phi1);
                if let Some(mixed) = mixer.step(&stacked_x, &stacked_g, delta) {
                    let sup = mixed
                        .iter()
                        .zip(stacked_g.iter())
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0_f64, f64::max);
                    phi0.copy_from_slice(&mixed[..n0]);
                    phi1.copy_from_slice(&mixed[n0..]);
                    if let Some(set) = self.active.as_mut() {
                        set.drift += sup;
                    }
                    log::trace!(
                        "sweep {iterations}: mixed window, sup correction {sup:.3e}"
                    );
                }
            } else {
                mixer.reset();
            }
        }
        if !converged || marginal_error.is_infinite() {
            marginal_error = self.dense_refresh(&phi0, &phi1);
        }
        log::debug!(
            "pair solve: {iterations} sweeps, change {last_change:.3e}, \
             marginal error {marginal_error:.3e}, converged {converged}"
        );
        Ok(SolveOutcome {
            potentials: Potentials::from_vectors(vec![phi0, phi1]),
            iterations,
            converged,
            last_change,
            marginal_error,
        })
    }
}

#[inline]
fn exp_or_zero(l: f64) -> f64 {
    // exp underflows to 0.0 for l < -745; that is the correct limit here.
    l.exp()
}

/// log sum_i exp(scale * x_i + y_i)
fn lse_pairs(x: &[f64], y: &[f64], scale: f64) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for (a, b) in x.iter().zip(y.iter()) {
        let v = scale * a + b;
        if v > m {
            m = v;
        }
    }
    if m.is_infinite() {
        return m;
    }
    let mut s = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        s += (scale * a + b - m).exp();
    }
    m + s.ln()
}

/// For balanced arms the relevant error is against the input weights; for
/// KL arms feasibility is soft, so the same gap is reported as a diagnostic.
fn marginal_error_against(marginal: &[f64], weights: &[f64], _d: &Divergence) -> f64 {
    marginal
        .iter()
        .zip(weights.iter())
        .map(|(m, w)| (m - w).abs())
        .fold(0.0, f64::max)
}

// --------------------------------------------------------------------------
// Generic dense multimarginal solver (J >= 3).
// --------------------------------------------------------------------------

struct MultiSolver<'a> {
    cost: &'a CostTensor,
    lw: Vec<Vec<f64>>,
    weights: Vec<&'a [f64]>,
    masses: Vec<f64>,
    damp: Vec<f64>,
    divergences: &'a [Divergence],
    rebalance: Rebalance,
    cfg: &'a SinkhornConfig,
    strides: Vec<usize>,
}

impl<'a> MultiSolver<'a> {
    fn new(
        measures: &'a [DiscreteMeasure],
        cost: &'a CostTensor,
        divergences: &'a [Divergence],
        cfg: &'a SinkhornConfig,
    ) -> Self {
        let shape = cost.shape();
        let mut strides = vec![1usize; shape.len()];
        for j in (0..shape.len() - 1).rev() {
            strides[j] = strides[j + 1] * shape[j + 1];
        }
        MultiSolver {
            cost,
            lw: measures.iter().map(log_weights).collect(),
            weights: measures.iter().map(|m| m.weights()).collect(),
            masses: measures.iter().map(|m| m.total_mass()).collect(),
            damp: divergences
                .iter()
                .map(|d| d.aprox_factor(cfg.epsilon))
                .collect(),
            divergences,
            rebalance: rebalance_mode(divergences),
            cfg,
            strides,
        }
    }

    /// Sum over all cells of exp((sum phi - c)/eps + sum ln w), split into
    /// per-slice log-sum-exps along axis `j`. Returns soft-min vectors or
    /// accumulates marginals depending on the caller.
    fn axis_lse(&self, phi: &[Vec<f64>], j: usize) -> Vec<f64> {
        let shape = self.cost.shape();
        let n_j = shape[j];
        let inv_eps = 1.0 / self.cfg.epsilon;
        let values = self.cost.values();
        let mut maxes = vec![f64::NEG_INFINITY; n_j];
        let mut sums = vec![0.0f64; n_j];
        // two passes: running max per slice, then exp-sum
        for pass in 0..2 {
            let mut idx = vec![0usize; shape.len()];
            for &v in values {
                // a = sum_{l != j} (phi_l/eps + ln w_l) - c/eps
                let mut a = -v * inv_eps;
                for l in 0..shape.len() {
                    if l != j {
                        a += phi[l][idx[l]] * inv_eps + self.lw[l][idx[l]];
                    }
                }
                let s = idx[j];
                if pass == 0 {
                    if a > maxes[s] {
                        maxes[s] = a;
                    }
                } else {
                    sums[s] += (a - maxes[s]).exp();
                }
                for l in (0..idx.len()).rev() {
                    idx[l] += 1;
                    if idx[l] < shape[l] {
                        break;
                    }
                    idx[l] = 0;
                }
            }
        }
        maxes
            .iter()
            .zip(sums.iter())
            .map(|(m, s)| m + s.ln())
            .collect()
    }

    fn marginals(&self, phi: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let shape = self.cost.shape();
        let inv_eps = 1.0 / self.cfg.epsilon;
        let values = self.cost.values();
        let mut out: Vec<Vec<f64>> = shape.iter().map(|&n| vec![0.0; n]).collect();
        let mut idx = vec![0usize; shape.len()];
        for &v in values {
            let mut a = -v * inv_eps;
            for l in 0..shape.len() {
                a += phi[l][idx[l]] * inv_eps + self.lw[l][idx[l]];
            }
            let g = exp_or_zero(a);
            for l in 0..shape.len() {
                out[l][idx[l]] += g;
            }
            for l in (0..idx.len()).rev() {
                idx[l] += 1;
                if idx[l] < shape[l] {
                    break;
                }
                idx[l] = 0;
            }
        }
        out
    }

    fn run(&mut self, initial: Potentials) -> Result<SolveOutcome> {
        let mut phi = initial.per_arm;
        let arms = phi.len();
        let balanced = self.rebalance == Rebalance::Recenter;
        let mut last_change;
        let mut marginal_error;
        let mut iterations = 0;
        let mut converged = false;
        let _ = &self.strides; // strides document the layout; axis_lse walks an odometer

        loop {
            let mut delta = 0.0f64;
            for j in 0..arms {
                let lse = self.axis_lse(&phi, j);
                let damp = self.damp[j];
                for (p, l) in phi[j].iter_mut().zip(lse.iter()) {
                    let new = damp * (-self.cfg.epsilon) * l;
                    let d = (new - *p).abs();
                    if d > delta {
                        delta = d;
                    }
                    *p = new;
                }
            }
            match self.rebalance {
                Rebalance::Recenter => {
                    let mut carried = 0.0;
                    for j in 0..arms - 1 {
                        let mean: f64 = phi[j]
                            .iter()
                            .zip(self.weights[j].iter())
                            .map(|(p, w)| p * w)
                            .sum::<f64>()
                            / self.masses[j];
                        for p in phi[j].iter_mut() {
                            *p -= mean;
                        }
                        carried += mean;
                    }
                    for p in phi[arms - 1].iter_mut() {
                        *p += carried;
                    }
                }
                Rebalance::KlShift => {
                    delta += self.kl_shift(&mut phi);
                }
                Rebalance::None => {}
            }
            iterations += 1;
            if phi.iter().flatten().any(|p| !p.is_finite()) || !delta.is_finite() {
                return Err(Error::NonFinite { iteration: iterations });
            }
            last_change = delta;
            if delta < self.cfg.tolerance {
                let margs = self.marginals(&phi);
                marginal_error = self.worst_marginal_error(&margs);
                if !balanced || marginal_error < self.cfg.marginal_tolerance {
                    converged = true;
                    break;
                }
            }
            if iterations >= self.cfg.max_iterations {
                break;
            }
        }
        let margs = self.marginals(&phi);
        marginal_error = self.worst_marginal_error(&margs);
        Ok(SolveOutcome {
            potentials: Potentials::from_vectors(phi),
            iterations,
            converged,
            last_change,
            marginal_error,
        })
    }

    fn worst_marginal_error(&self, margs: &[Vec<f64>]) -> f64 {
        margs
            .iter()
            .enumerate()
            .map(|(j, m)| marginal_error_against(m, self.weights[j], &self.divergences[j]))
            .fold(0.0, f64::max)
    }

    fn kl_shift(&self, phi: &mut [Vec<f64>]) -> f64 {
        let rhos: Vec<f64> = self
            .divergences
            .iter()
            .map(|d| match d {
                Divergence::Kl { rho } => *rho,
                Divergence::Balanced => unreachable!("kl_shift only runs with all-KL penalties"),
            })
            .collect();
        let ln_b: Vec<f64> = phi
            .iter()
            .zip(self.lw.iter())
            .zip(rhos.iter())
            .map(|((p, lw), rho)| lse_pairs(p, lw, -1.0 / rho))
            .collect();
        // log total coupling mass
        let shape = self.cost.shape();
        let inv_eps = 1.0 / self.cfg.epsilon;
        let values = self.cost.values();
        let mut m = f64::NEG_INFINITY;
        let mut s = 0.0;
        for pass in 0..2 {
            let mut idx = vec![0usize; shape.len()];
            for &v in values {
                let mut a = -v * inv_eps;
                for l in 0..shape.len() {
                    a += phi[l][idx[l]] * inv_eps + self.lw[l][idx[l]];
                }
                if pass == 0 {
                    if a > m {
                        m = a;
                    }
                } else {
                    s += (a - m).exp();
                }
                for l in (0..idx.len()).rev() {
                    idx[l] += 1;
                    if idx[l] < shape[l] {
                        break;
                    }
                    idx[l] = 0;
                }
            }
        }
        let ln_e = m + s.ln();
        let eps = self.cfg.epsilon;
        let rho_sum: f64 = rhos.iter().sum();
        let shift_sum = eps
            * rhos
                .iter()
                .zip(ln_b.iter())
                .map(|(rho, b)| rho * (b - ln_e))
                .sum::<f64>()
            / (eps + rho_sum);
        let mut largest = 0.0f64;
        for ((p, rho), b) in phi.iter_mut().zip(rhos.iter()).zip(ln_b.iter()) {
            let a = rho * (b - ln_e - shift_sum / eps);
            for x in p.iter_mut() {
                *x += a;
            }
            if a.abs() > largest {
                largest = a.abs();
            }
        }
        largest
    }
}

// --------------------------------------------------------------------------
// Verification utilities.
// --------------------------------------------------------------------------

/// Soft-min along axis `j`: `-eps ln sum_{others} exp((sum_{l!=j} phi_l -
/// c)/eps) * prod w_l`, one value per point of arm `j`. Dense evaluation.
pub fn softmin(
    potentials: &Potentials,
    cost: &CostTensor,
    measures: &[DiscreteMeasure],
    axis: usize,
    epsilon: f64,
) -> Result<Vec<f64>> {
    if axis >= cost.arms() {
        return Err(Error::InvalidArgument(format!(
            "axis {axis} out of range for {} arms",
            cost.arms()
        )));
    }
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let shape = cost.shape();
    let lw: Vec<Vec<f64>> = measures.iter().map(log_weights).collect();
    let inv_eps = 1.0 / epsilon;
    let n_j = shape[axis];
    let mut maxes = vec![f64::NEG_INFINITY; n_j];
    let mut sums = vec![0.0f64; n_j];
    for pass in 0..2 {
        let mut idx = vec![0usize; shape.len()];
        for &v in cost.values() {
            let mut a = -v * inv_eps;
            for l in 0..shape.len() {
                if l != axis {
                    a += potentials.arm(l)[idx[l]] * inv_eps + lw[l][idx[l]];
                }
            }
            let s = idx[axis];
            if pass == 0 {
                if a > maxes[s] {
                    maxes[s] = a;
                }
            } else {
                sums[s] += (a - maxes[s]).exp();
            }
            for l in (0..idx.len()).rev() {
                idx[l] += 1;
                if idx[l] < shape[l] {
                    break;
                }
                idx[l] = 0;
            }
        }
    }
    Ok(maxes
        .iter()
        .zip(sums.iter())
        .map(|(m, s)| -epsilon * (m + s.ln()))
        .collect())
}

/// The optimal matching as a dense nonnegative tensor with its marginals.
#[derive(Debug, Clone)]
pub struct Coupling {
    shape: Vec<usize>,
    values: Vec<f64>,
    marginals: Vec<Vec<f64>>,
    total_mass: f64,
}

impl Coupling {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn arms(&self) -> usize {
        self.shape.len()
    }

    /// Row-major dense values (last axis fastest).
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn marginal(&self, j: usize) -> &[f64] {
        &self.marginals[j]
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        let mut flat = 0;
        for (i, d) in idx.iter().zip(&self.shape) {
            flat = flat * d + i;
        }
        self.values[flat]
    }

    /// Marginalize onto the ordered axis pair `(a, b)`: the returned
    /// row-major `n_a x n_b` matrix sums the coupling over all other axes.
    pub fn pair_matrix(&self, a: usize, b: usize) -> Result<Vec<f64>> {
        if a == b || a >= self.arms() || b >= self.arms() {
            return Err(Error::InvalidArgument(format!(
                "invalid axis pair ({a}, {b}) for {} arms",
                self.arms()
            )));
        }
        let (na, nb) = (self.shape[a], self.shape[b]);
        if self.arms() == 2 {
            if a == 0 {
                return Ok(self.values.clone());
            }
            let mut out = vec![0.0; na * nb];
            for i in 0..nb {
                for k in 0..na {
                    out[k * nb + i] = self.values[i * na + k];
                }
            }
            return Ok(out);
        }
        let mut out = vec![0.0; na * nb];
        let mut idx = vec![0usize; self.shape.len()];
        for &v in &self.values {
            out[idx[a] * nb + idx[b]] += v;
            for l in (0..idx.len()).rev() {
                idx[l] += 1;
                if idx[l] < self.shape[l] {
                    break;
                }
                idx[l] = 0;
            }
        }
        Ok(out)
    }

    /// Construct directly from dense values (used by tests and the exact-LP
    /// oracle).
    pub fn from_values(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "shape {shape:?} does not hold {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "coupling values must be finite and nonnegative".into(),
            ));
        }
        let mut marginals: Vec<Vec<f64>> = shape.iter().map(|&n| vec![0.0; n]).collect();
        let mut idx = vec![0usize; shape.len()];
        let mut total = 0.0;
        for &v in &values {
            total += v;
            for l in 0..shape.len() {
                marginals[l][idx[l]] += v;
            }
            for l in (0..idx.len()).rev() {
                idx[l] += 1;
                if idx[l] < shape[l] {
                    break;
                }
                idx[l] = 0;
            }
        }
        Ok(Coupling {
            shape,
            values,
            marginals,
            total_mass: total,
        })
    }
}

/// Exponentiate the tilted kernel into a dense coupling.
pub fn assemble_coupling(
    potentials: &Potentials,
    cost: &CostTensor,
    measures: &[DiscreteMeasure],
    epsilon: f64,
) -> Result<Coupling> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let shape = cost.shape().to_vec();
    let lw: Vec<Vec<f64>> = measures.iter().map(log_weights).collect();
    let inv_eps = 1.0 / epsilon;
    let mut values = Vec::with_capacity(cost.values().len());
    let mut idx = vec![0usize; shape.len()];
    for &v in cost.values() {
        let mut a = -v * inv_eps;
        for l in 0..shape.len() {
            a += potentials.arm(l)[idx[l]] * inv_eps + lw[l][idx[l]];
        }
        let g = exp_or_zero(a);
        if g.is_infinite() {
            return Err(Error::CouplingOverflow);
        }
        values.push(g);
        for l in (0..idx.len()).rev() {
            idx[l] += 1;
            if idx[l] < shape[l] {
                break;
            }
            idx[l] = 0;
        }
    }
    Coupling::from_values(shape, values)
}

/// Sup-norm fixed-point residual: `max_j || phi_j - damp_j * softmin_j ||`.
pub fn foc_residual(
    potentials: &Potentials,
    cost: &CostTensor,
    measures: &[DiscreteMeasure],
    epsilon: f64,
    divergences: &[Divergence],
) -> Result<f64> {
    let mut worst = 0.0f64;
    for j in 0..cost.arms() {
        let smin = softmin(potentials, cost, measures, j, epsilon)?;
        let damp = divergences[j].aprox_factor(epsilon);
        for (p, s) in potentials.arm(j).iter().zip(smin.iter()) {
            let r = (p - damp * s).abs();
            if r > worst {
                worst = r;
            }
        }
    }
    Ok(worst)
}

/// The dual functional: `-sum_j int phi_j*(-phi_j) dmu_j - eps int
/// [exp((sum phi - c)/eps) - 1] d prod mu_j`.
pub fn dual_objective(
    potentials: &Potentials,
    cost: &CostTensor,
    measures: &[DiscreteMeasure],
    epsilon: f64,
    divergences: &[Divergence],
) -> Result<f64> {
    let shape = cost.shape();
    let lw: Vec<Vec<f64>> = measures.iter().map(log_weights).collect();
    let inv_eps = 1.0 / epsilon;
    let mut m = f64::NEG_INFINITY;
    let mut s = 0.0;
    for pass in 0..2 {
        let mut idx = vec![0usize; shape.len()];
        for &v in cost.values() {
            let mut a = -v * inv_eps;
            for l in 0..shape.len() {
                a += potentials.arm(l)[idx[l]] * inv_eps + lw[l][idx[l]];
            }
            if pass == 0 {
                if a > m {
                    m = a;
                }
            } else {
                s += (a - m).exp();
            }
            for l in (0..idx.len()).rev() {
                idx[l] += 1;
                if idx[l] < shape[l] {
                    break;
                }
                idx[l] = 0;
            }
        }
    }
    let kernel_mass = exp_or_zero(m + s.ln());
    let product_mass: f64 = measures.iter().map(|mm| mm.total_mass()).product();
    let mut dual = -epsilon * (kernel_mass - product_mass);
    for (j, d) in divergences.iter().enumerate() {
        let mut term = 0.0;
        for (p, w) in potentials.arm(j).iter().zip(measures[j].weights()) {
            term += w * d.phi_star(-p);
        }
        dual -= term;
    }
    Ok(dual)
}

/// The primal objective evaluated on an assembled coupling: transport cost
/// plus `eps` times the mass-corrected entropy against the product measure,
/// plus the marginal penalties. Balanced arms contribute no penalty term
/// (the solve enforces feasibility; the evaluated coupling is treated as
/// feasible).
pub fn primal_objective(
    coupling: &Coupling,
    cost: &CostTensor,
    measures: &[DiscreteMeasure],
    epsilon: f64,
    divergences: &[Divergence],
) -> Result<f64> {
    if coupling.shape() != cost.shape() {
        return Err(Error::DimensionMismatch(
            "coupling and cost shapes differ".into(),
        ));
    }
    let mut transport = 0.0;
    for (g, c) in coupling.values().iter().zip(cost.values().iter()) {
        transport += g * c;
    }
    // KL(gamma || prod mu) with mass correction, computed cellwise:
    // sum gamma ln(gamma / prod w) - mass(gamma) + prod-mass.
    let shape = coupling.shape().to_vec();
    let lw: Vec<Vec<f64>> = measures.iter().map(log_weights).collect();
    let mut idx = vec![0usize; shape.len()];
    let mut entropy = 0.0;
    for &g in coupling.values() {
        if g > 0.0 {
            let mut ln_prod = 0.0;
            for l in 0..shape.len() {
                ln_prod += lw[l][idx[l]];
            }
            entropy += g * (g.ln() - ln_prod);
        }
        for l in (0..idx.len()).rev() {
            idx[l] += 1;
            if idx[l] < shape[l] {
                break;
            }
            idx[l] = 0;
        }
    }
    let product_mass: f64 = measures.iter().map(|m| m.total_mass()).product();
    entropy += product_mass - coupling.total_mass();
    let mut penalties = 0.0;
    for (j, d) in divergences.iter().enumerate() {
        if !d.is_balanced() {
            penalties += phi_divergence(d, coupling.marginal(j), measures[j].weights())?;
        }
    }
    Ok(transport + epsilon * entropy + penalties)
}

// --------------------------------------------------------------------------
// Exact-LP oracle (two arms): transportation simplex.
// --------------------------------------------------------------------------

/// Maximum number of cells [`exact_ot_bruteforce`] accepts.
pub const EXACT_OT_MAX_CELLS: usize = 10_000;

/// Solve the exact (unregularized, hard-constraint) two-arm transport
/// problem by the transportation simplex. Returns the optimal cost and the
/// optimal plan (row-major).
///
/// Supplies are the first measure's weights, demands the second's; total
/// masses must agree to 1e-9 relative. Intended as a small-instance test
/// oracle, not a production LP solver.
pub fn exact_ot_bruteforce(
    measures: &[DiscreteMeasure],
    cost: &CostTensor,
) -> Result<(f64, Coupling)> {
    if measures.len() != 2 || cost.arms() != 2 {
        return Err(Error::InvalidArgument(
            "exact_ot_bruteforce handles exactly two arms".into(),
        ));
    }
    let n0 = measures[0].len();
    let n1 = measures[1].len();
    if n0 * n1 > EXACT_OT_MAX_CELLS {
        return Err(Error::InvalidArgument(format!(
            "instance with {} cells exceeds the {EXACT_OT_MAX_CELLS}-cell oracle cap",
            n0 * n1
        )));
    }
    let total0 = measures[0].total_mass();
    let total1 = measures[1].total_mass();
    if (total0 - total1).abs() > 1e-9 * total0.max(total1) {
        return Err(Error::InvalidArgument(format!(
            "unbalanced masses {total0} vs {total1}; the exact oracle is balanced-only"
        )));
    }
    let c = cost.values();
    let mut supply: Vec<f64> = measures[0].weights().to_vec();
    let mut demand: Vec<f64> = measures[1].weights().to_vec();
    // repair any tiny mass mismatch so the last corner cell closes exactly
    let scale: f64 = total0 / total1;
    for d in demand.iter_mut() {
        *d *= scale;
    }

    // Northwest-corner initial basic feasible solution.
    let mut plan = vec![0.0f64; n0 * n1];
    let mut basis: Vec<(usize, usize)> = Vec::with_capacity(n0 + n1 - 1);
    {
        let (mut i, mut k) = (0usize, 0usize);
        loop {
            let q = supply[i].min(demand[k]);
            plan[i * n1 + k] = q;
            basis.push((i, k));
            supply[i] -= q;
            demand[k] -= q;
            if i == n0 - 1 && k == n1 - 1 {
                break;
            }
            // advance along the dimension that is exhausted; prefer rows on
            // ties unless the row index is already at its end
            if supply[i] <= demand[k] && i < n0 - 1 {
                i += 1;
            } else {
                k += 1;
            }
        }
    }

    let max_pivots = 50_000;
    for _pivot in 0..max_pivots {
        // Dual variables from the basis tree: u_i + v_k = c_ik on the basis.
        let mut u = vec![f64::NAN; n0];
        let mut v = vec![f64::NAN; n1];
        u[0] = 0.0;
        let mut settled = 1;
        while settled < n0 + n1 {
            let mut progressed = false;
            for &(i, k) in &basis {
                if u[i].is_nan() && !v[k].is_nan() {
                    u[i] = c[i * n1 + k] - v[k];
                    settled += 1;
                    progressed = true;
                } else if v[k].is_nan() && !u[i].is_nan() {
                    v[k] = c[i * n1 + k] - u[i];
                    settled += 1;
                    progressed = true;
                }
            }
            if !progressed {
                return Err(Error::InvalidArgument(
                    "transportation simplex: disconnected basis".into(),
                ));
            }
        }
        // Entering cell: most negative reduced cost, lowest flat index ties.
        let mut entering = None;
        let mut best = -1e-12;
        for i in 0..n0 {
            for k in 0..n1 {
                let r = c[i * n1 + k] - u[i] - v[k];
                if r < best {
                    best = r;
                    entering = Some((i, k));
                }
            }
        }
        let Some((ei, ek)) = entering else {
            break; // optimal
        };
        // Unique cycle in basis + entering: alternating row/column moves.
        // Find it by depth-first search over basis adjacency.
        let mut row_cells: Vec<Vec<usize>> = vec![Vec::new(); n0];
        let mut col_cells: Vec<Vec<usize>> = vec![Vec::new(); n1];
        for (b, &(i, k)) in basis.iter().enumerate() {
            row_cells[i].push(b);
            col_cells[k].push(b);
        }
        // path of basis-cell indices from a cell in row ei back to column ek
        fn search(
            want_row_move: bool,
            at_row: usize,
            at_col: usize,
            target_col: usize,
            basis: &[(usize, usize)],
            row_cells: &[Vec<usize>],
            col_cells: &[Vec<usize>],
            used: &mut Vec<bool>,
            path: &mut Vec<usize>,
        ) -> bool {
            if want_row_move {
                // move along row `at_row` to some basis cell, then switch
                for &b in &row_cells[at_row] {
                    if used[b] {
                        continue;
                    }
                    let (_, k) = basis[b];
                    used[b] = true;
                    path.push(b);
                    if k == target_col
                        || search(false, at_row, k, target_col, basis, row_cells, col_cells, used, path)
                    {
                        return true;
                    }
                    path.pop();
                    used[b] = false;
                }
            } else {
                for &b in &col_cells[at_col] {
                    if used[b] {
                        continue;
                    }
                    let (i, _) = basis[b];
                    used[b] = true;
                    path.push(b);
                    if search(true, i, at_col, target_col, basis, row_cells, col_cells, used, path) {
                        return true;
                    }
                    path.pop();
                    used[b] = false;
                }
            }
            false
        }
        let mut used = vec![false; basis.len()];
        let mut path: Vec<usize> = Vec::new();
        if !search(
            true, ei, ek, ek, &basis, &row_cells, &col_cells, &mut used, &mut path,
        ) {
            return Err(Error::InvalidArgument(
                "transportation simplex: no augmenting cycle".into(),
            ));
        }
        // Cycle: entering, path[0], path[1], ...; odd positions lose mass.
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for (pos, &b) in path.iter().enumerate() {
            if pos % 2 == 0 {
                let (i, k) = basis[b];
                let q = plan[i * n1 + k];
                if q < theta {
                    theta = q;
                    leave = b;
                }
            }
        }
        plan[ei * n1 + ek] += theta;
        for (pos, &b) in path.iter().enumerate() {
            let (i, k) = basis[b];
            if pos % 2 == 0 {
                plan[i * n1 + k] -= theta;
            } else {
                plan[i * n1 + k] += theta;
            }
        }
        basis[leave] = (ei, ek);
    }

    for p in plan.iter_mut() {
        if *p < 0.0 {
            *p = 0.0; // numeric dust from repeated pivots
        }
    }
    let value = plan.iter().zip(c.iter()).map(|(p, cc)| p * cc).sum();
    Ok((value, Coupling::from_values(vec![n0, n1], plan)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{build_cost, CostSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;

    fn measure_1d(xs: &[f64]) -> DiscreteMeasure {
        let pts = Array2::from_shape_vec((xs.len(), 1), xs.to_vec()).unwrap();
        DiscreteMeasure::empirical(pts).unwrap()
    }

    fn weighted_1d(xs: &[f64], ws: &[f64]) -> DiscreteMeasure {
        let pts = Array2::from_shape_vec((xs.len(), 1), xs.to_vec()).unwrap();
        DiscreteMeasure::new(pts, ws.to_vec()).unwrap()
    }

    #[test]
    fn softmin_single_atom() {
        let ms = [measure_1d(&[0.0]), measure_1d(&[1.0])];
        let cost = CostTensor::from_values(vec![1, 1], vec![1.0]).unwrap();
        let pot = Potentials::zeros(&[1, 1]);
        let s = softmin(&pot, &cost, &ms, 0, 1.0).unwrap();
        assert_abs_diff_eq!(s[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn softmin_zero_cost_uniform_weights_is_zero() {
        let ms = [measure_1d(&[0.0, 0.0, 0.0]), measure_1d(&[0.0, 0.0])];
        let cost = CostTensor::from_values(vec![3, 2], vec![0.0; 6]).unwrap();
        let pot = Potentials::zeros(&[3, 2]);
        for axis in 0..2 {
            for v in softmin(&pot, &cost, &ms, axis, 0.7).unwrap() {
                assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn softmin_two_cell_row() {
        let ms = [measure_1d(&[0.0]), measure_1d(&[0.0, 1.0])];
        let cost = CostTensor::from_values(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let pot = Potentials::zeros(&[1, 2]);
        let s = softmin(&pot, &cost, &ms, 0, 1.0).unwrap();
        let expect = -(0.5 + 0.5 * (-1.0f64).exp()).ln();
        assert_abs_diff_eq!(s[0], expect, epsilon = 1e-12);
        assert_abs_diff_eq!(s[0], 0.379885, epsilon = 1e-6);
    }

    fn balanced2() -> [Divergence; 2] {
        [Divergence::Balanced, Divergence::Balanced]
    }

    #[test]
    fn single_cell_instance_converges_to_the_only_coupling() {
        let ms = [measure_1d(&[0.0]), measure_1d(&[3.0])];
        let cost = build_cost(&ms, &CostSpec::SquaredEuclidean).unwrap();
        let out = ipfp(&ms, &cost, &balanced2(), &SinkhornConfig::new(1.0)).unwrap();
        assert!(out.converged);
        assert!(out.iterations <= 2);
        let g = assemble_coupling(&out.potentials, &cost, &ms, 1.0).unwrap();
        assert_abs_diff_eq!(g.at(&[0, 0]), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(g.total_mass(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn symmetric_two_point_fixed_point() {
        let ms = [measure_1d(&[0.0, 1.0]), measure_1d(&[0.0, 1.0])];
        let cost = CostTensor::from_values(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = ipfp(&ms, &cost, &balanced2(), &SinkhornConfig::new(1.0)).unwrap();
        assert!(out.converged);
        let g = assemble_coupling(&out.potentials, &cost, &ms, 1.0).unwrap();
        // closed form: diagonal mass 0.5/(1+exp(-1)), off-diagonal
        // 0.5 exp(-1)/(1+exp(-1))
        let diag = 0.5 / (1.0 + (-1.0f64).exp());
        let off = 0.5 * (-1.0f64).exp() / (1.0 + (-1.0f64).exp());
        assert_abs_diff_eq!(g.at(&[0, 0]), diag, epsilon = 1e-9);
        assert_abs_diff_eq!(g.at(&[1, 1]), diag, epsilon = 1e-9);
        assert_abs_diff_eq!(g.at(&[0, 1]), off, epsilon = 1e-9);
        assert_abs_diff_eq!(g.at(&[0, 0]), 0.365529, epsilon = 1e-6);
        assert_abs_diff_eq!(g.at(&[0, 1]), 0.134471, epsilon = 1e-6);
    }

    #[test]
    fn kl_zero_cost_identical_measures_fixed_point_at_zero() {
        let ms = [measure_1d(&[0.0, 1.0]), measure_1d(&[0.0, 1.0])];
        let cost = CostTensor::from_values(vec![2, 2], vec![0.0; 4]).unwrap();
        let d = [Divergence::kl(1.0).unwrap(), Divergence::kl(1.0).unwrap()];
        let out = ipfp(&ms, &cost, &d, &SinkhornConfig::new(0.5)).unwrap();
        assert!(out.converged);
        for j in 0..2 {
            for &p in out.potentials.arm(j) {
                assert_abs_diff_eq!(p, 0.0, epsilon = 1e-10);
            }
        }
        let g = assemble_coupling(&out.potentials, &cost, &ms, 0.5).unwrap();
        for &v in g.values() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-10);
        }
    }

    #[test]
    fn balanced_potentials_recentred_to_zero_weighted_mean() {
        let ms = [
            weighted_1d(&[0.0, 0.7, 2.0], &[0.2, 0.5, 0.3]),
            weighted_1d(&[0.4, 1.5], &[0.6, 0.4]),
        ];
        let cost = build_cost(&ms, &CostSpec::SquaredEuclidean).unwrap();
        let out = ipfp(&ms, &cost, &balanced2(), &SinkhornConfig::new(0.3)).unwrap();
        assert!(out.converged);
        let mean: f64 = out
            .potentials
            .arm(0)
            .iter()
            .zip(ms[0].weights())
            .map(|(p, w)| p * w)
            .sum();
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-9);
        assert!(out.marginal_error < 1e-7);
    }

    #[test]
    fn foc_residual_small_after_convergence_and_grows_when_perturbed() {
        let ms = [measure_1d(&[0.0, 1.0, 2.5]), measure_1d(&[0.3, 1.8, 2.2])];
        let cost = build_cost(&ms, &CostSpec::SquaredEuclidean).unwrap();
        let eps = 0.25;
        let div = balanced2();
        let out = ipfp(&ms, &cost, &div, &SinkhornConfig::new(eps)).unwrap();
        let base = foc_residual(&out.potentials, &cost, &ms, eps, &div).unwrap();
        assert!(base < 1e-8, "residual {base}");
        let mut bumped = out.potentials.per_arm.clone();
        bumped[0][1] += 1e-3;
        let worse =
            foc_residual(&Potentials::from_vectors(bumped), &cost, &ms, eps, &div).unwrap();
        assert!(worse > base);
    }

    #[test]
    fn dual_objective_monotone_along_sweeps() {
        let ms = [measure_1d(&[0.0, 1.0, 2.5]), measure_1d(&[0.3, 1.8])];
        let cost = build_cost(&ms, &CostSpec::SquaredEuclidean).unwrap();
        let eps = 0.2;
        let div = [Divergence::kl(0.8).unwrap(), Divergence::kl(1.3).unwrap()];
        let mut last = f64::NEG_INFINITY;
        for sweeps in [1, 2, 3, 5, 8, 13, 30] {
            let mut cfg = SinkhornConfig::new(eps);
            cfg.max_iterations = sweeps;
            cfg.tolerance = 1e-300; // run exactly `sweeps` iterations
            let out = ipfp(&ms, &cost, &div, &cfg).unwrap();
            let dual = dual_objective(&out.potentials, &cost, &ms, eps, &div).unwrap();
            assert!(
                dual >= last - 1e-12,
                "dual decreased: {last} -> {dual} at {sweeps} sweeps"
            );
            last = dual;
        }
    }

    #[test]
    fn duality_gap_closes_on_random_instances() {
        let mut rng = crate::rng::Rng::new(11);
        for _ in 0..5 {
            let n = 5;
            let xs: Vec<f64> = (0..n).map(|_| rng.uniform() * 3.0).collect();
            let ys: Vec<f64> = (0..n).map(|_| rng.uniform() * 3.0).collect();
            let ws: Vec<f64> = (0..n).map(|_| 0.5 + rng.uniform()).collect();
            let total: f64 = ws.iter().sum();
            let ws: Vec<f64> = ws.iter().map(|w| w / total).collect();
            let ms = [weighted_1d(&xs, &ws), measure_1d(&ys)];
            let cost = build_cost(&ms, &CostSpec::SquaredEuclidean).unwrap();
            let eps = 0.1;
            let div = balanced2();
            let out = ipfp(&ms, &cost, &div, &SinkhornConfig::new(eps)).unwrap();
            assert!(out.converged);
            let g = assemble_coupling(&out.potentials, &cost, &ms, eps).unwrap();
            let primal = primal_objective(&g, &cost, &ms, eps, &div).unwrap();
            let dual = dual_objective(&out.potentials, &cost, &ms, eps, &div).unwrap();
            assert!(
                (primal - dual).abs() < 1e-6,
                "gap {} on instance",
                primal - dual
            );
        }
    }

    #[test]
    fn kl_marginal_identity_links_potentials_and_marginals() {
        // With a KL(rho) penalty the optimal marginal satisfies
        // m_j = exp(-phi_j / rho) * w_j; this pins both signs and scale.
        let ms = [measure_1d(&[0.0, 1.0, 2.0]), measure_1d(&[0.5, 1.4])];
        let cost = build_cost(&ms, &CostSpec::SquaredEuclidean).unwrap();
        let rho = 0.7;
        let eps = 0.15;
        let div = [Divergence::kl(rho).unwrap(), Divergence::kl(rho).unwrap()];
        let mut cfg = SinkhornConfig::new(eps);
        cfg.tolerance = 1e-12;
        let out = ipfp(&ms, &cost, &div, &cfg).unwrap();
        assert!(out.converged);
        let g = assemble_coupling(&out.potentials, &cost, &ms, eps).unwrap();
        for j in 0..2 {
            for (i, &m) in g.marginal(j).iter().enumerate() {
                let predicted =
                    (-out.potentials.arm(j)[i] / rho).exp() * ms[j].weights()[i];
                assert_abs_diff_eq!(m, predicted, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn warm_start_matches_cold_start_fixed_point() {
        let ms = [measure_1d(&[0.0, 0.5, 1.9, 3.0]), measure_1d(&[0.2, 2.8])];
        let cost = build_cost(&ms, &CostSpec::SquaredEuclidean).unwrap();
        let div = [Divergence::kl(1.0).unwrap(), Divergence::kl(1.0).unwrap()];
        let mut cfg = SinkhornConfig::new(0.05);
        cfg.tolerance = 1e-12;
        let cold = ipfp(&ms, &cost, &div, &cfg).unwrap();
        let warm = ipfp_from(&ms, &cost, &div, &cfg, cold.potentials.clone()).unwrap();
        assert!(warm.iterations <= 2);
        for j in 0..2 {
            for (a, b) in warm.potentials.arm(j).iter().zip(cold.potentials.arm(j)) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn slow_kl_tail_is_extrapolated_to_the_unique_fixed_point() {
        // At eps = 1e-3 and rho = 0.5 the soft-marginal damping factor is
        // rho / (rho + eps) ~ 0.998, so plain sweeps would need thousands of
        // iterations to reach a 1e-9 tolerance. The geometric-tail jump must
        // (a) cut that by an order of magnitude and (b) still land on the
        // unique fixed point, which we verify by restarting from a perturbed
        // iterate and from the exact first-order conditions.
        let mut rng = crate::rng::Rng::new(77);
        let xs: Vec<f64> = (0..160).map(|_| rng.uniform() * 3.0).collect();
        let ys: Vec<f64> = (0..40).map(|_| rng.uniform() * 3.0).collect();
        let ms = [measure_1d(&xs), measure_1d(&ys)];
        let cost = build_cost(&ms, &CostSpec::SquaredEuclidean).unwrap();
        let eps = 1e-3;
        let div = [Divergence::kl(0.5).unwrap(), Divergence::kl(0.5).unwrap()];
        let cfg = SinkhornConfig::new(eps);
        let out = ipfp(&ms, &cost, &div, &cfg).unwrap();
        assert!(out.converged);
        assert!(
            out.iterations < 1500,
            "tail extrapolation should cut the ~8000-sweep plain run, got {}",
            out.iterations
        );
        let res = foc_residual(&out.potentials, &cost, &ms, eps, &div).unwrap();
        assert!(res < 1e-7, "first-order residual {res}");
        let mut bumped = out.potentials.per_arm.clone();
        for (i, p) in bumped[0].iter_mut().enumerate() {
            *p += 0.01 * ((i as f64) * 0.7).sin();
        }
        for (i, p) in bumped[1].iter_mut().enumerate() {
            *p -= 0.01 * ((i as f64) * 1.3).cos();
        }
        let again =
            ipfp_from(&ms, &cost, &div, &cfg, Potentials::from_vectors(bumped)).unwrap();
        assert!(again.converged);
        for j in 0..2 {
            for (a, b) in again.potentials.arm(j).iter().zip(out.potentials.arm(j)) {
                assert_abs_diff_eq!(a, b, epsilon = 5e-6);
            }
        }
    }

    #[test]
    fn three_arm_balanced_solve_is_feasible() {
        let ms = [
            measure_1d(&[0.0, 1.0]),
            measure_1d(&[0.2, 0.9, 1.5]),
            measure_1d(&[0.5, 2.0]),
        ];
        let cost = build_cost(&ms, &CostSpec::SquaredEuclidean).unwrap();
        let div = [Divergence::Balanced; 3];
        let out = ipfp(&ms, &cost, &div, &SinkhornConfig::new(1.0)).unwrap();
        assert!(out.converged);
        assert!(out.marginal_error < 1e-7, "err {}", out.marginal_error);
        let g = assemble_coupling(&out.potentials, &cost, &ms, 1.0).unwrap();
        for j in 0..3 {
            for (m, w) in g.marginal(j).iter().zip(ms[j].weights()) {
                assert_abs_diff_eq!(m, w, epsilon = 1e-7);
            }
        }
        // pairwise marginalizations are consistent with the axis marginals
        let pm = g.pair_matrix(0, 2).unwrap();
        let row_sums: Vec<f64> = (0..2)
            .map(|i| (0..2).map(|k| pm[i * 2 + k]).sum())
            .collect();
        for (r, w) in row_sums.iter().zip(ms[0].weights()) {
            assert_abs_diff_eq!(r, w, epsilon = 1e-7);
        }
    }

    #[test]
    fn non_convergence_reports_flag_without_error() {
        let ms = [measure_1d(&[0.0, 1.0, 2.5]), measure_1d(&[0.3, 1.8])];
        let cost = build_cost(&ms, &CostSpec::SquaredEuclidean).unwrap();
        let mut cfg = SinkhornConfig::new(0.1);
        cfg.max_iterations = 2;
        cfg.tolerance = 1e-300; // unreachable: budget must run out
        let out = ipfp(&ms, &cost, &balanced2(), &cfg).unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 2);
        assert!(out.last_change.is_finite());
        assert!(out.marginal_error.is_finite());
    }

    #[test]
    fn three_arm_kl_solve_converges_with_shift_step() {
        let ms = [
            measure_1d(&[0.0, 1.0]),
            measure_1d(&[0.2, 0.9, 1.5]),
            measure_1d(&[0.5, 2.0]),
        ];
        let cost = build_cost(&ms, &CostSpec::SquaredEuclidean).unwrap();
        let div = [Divergence::kl(1.0).unwrap(); 3];
        let mut cfg = SinkhornConfig::new(0.05);
        cfg.tolerance = 1e-11;
        let out = ipfp(&ms, &cost, &div, &cfg).unwrap();
        assert!(out.converged, "iters {}", out.iterations);
        let resid = foc_residual(&out.potentials, &cost, &ms, 0.05, &div).unwrap();
        assert!(resid < 1e-8, "residual {resid}");
        // the KL marginal identity holds arm-wise
        let g = assemble_coupling(&out.potentials, &cost, &ms, 0.05).unwrap();
        for j in 0..3 {
            for (i, &m) in g.marginal(j).iter().enumerate() {
                let predicted = (-out.potentials.arm(j)[i]).exp() * ms[j].weights()[i];
                assert_abs_diff_eq!(m, predicted, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn exact_lp_identity_instance() {
        let ms = [measure_1d(&[0.0, 1.0]), measure_1d(&[0.0, 1.0])];
        let cost = CostTensor::from_values(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let (value, plan) = exact_ot_bruteforce(&ms, &cost).unwrap();
        assert_abs_diff_eq!(value, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(plan.at(&[0, 0]), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(plan.at(&[1, 1]), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn exact_lp_single_atoms() {
        let ms = [measure_1d(&[0.0]), measure_1d(&[1.0])];
        let cost = build_cost(&ms, &CostSpec::SquaredEuclidean).unwrap();
        let (value, _) = exact_ot_bruteforce(&ms, &cost).unwrap();
        assert_abs_diff_eq!(value, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn exact_lp_matches_greedy_on_sorted_line() {
        // 1-D squared distance with equal weights: the monotone (sorted)
        // assignment is optimal.
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys = [0.5, 1.5, 2.5, 3.5];
        let ms = [measure_1d(&xs), measure_1d(&ys)];
        let cost = build_cost(&ms, &CostSpec::SquaredEuclidean).unwrap();
        let (value, _) = exact_ot_bruteforce(&ms, &cost).unwrap();
        assert_abs_diff_eq!(value, 0.25, epsilon = 1e-10);
    }

    #[test]
    fn entropic_cost_approaches_exact_lp_as_epsilon_shrinks() {
        let mut rng = crate::rng::Rng::new(23);
        let xs: Vec<f64> = (0..5).map(|_| rng.uniform()).collect();
        let ys: Vec<f64> = (0..5).map(|_| rng.uniform()).collect();
        let ws: Vec<f64> = {
            let raw: Vec<f64> = (0..5).map(|_| 0.5 + rng.uniform()).collect();
            let t: f64 = raw.iter().sum();
            raw.iter().map(|w| w / t).collect()
        };
        let ms = [weighted_1d(&xs, &ws), measure_1d(&ys)];
        let cost = build_cost(&ms, &CostSpec::SquaredEuclidean).unwrap();
        let (exact, _) = exact_ot_bruteforce(&ms, &cost).unwrap();
        let mut gaps = Vec::new();
        for eps in [1.0, 0.1, 0.01, 1e-3, 1e-4] {
            let mut cfg = SinkhornConfig::new(eps);
            cfg.max_iterations = 200_000;
            let out = ipfp(&ms, &cost, &balanced2(), &cfg).unwrap();
            assert!(out.converged, "eps {eps}");
            let g = assemble_coupling(&out.potentials, &cost, &ms, eps).unwrap();
            let cost_val: f64 = g
                .values()
                .iter()
                .zip(cost.values())
                .map(|(a, b)| a * b)
                .sum();
            gaps.push((cost_val - exact).abs());
        }
        for w in gaps.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "gaps {gaps:?}");
        }
        assert!(*gaps.last().unwrap() < 5e-3, "gaps {gaps:?}");
    }

    #[test]
    fn active_set_solve_matches_dense_solve() {
        // big enough to trip the active-set path under Auto
        let mut rng = crate::rng::Rng::new(4);
        let n0 = 220;
        let n1 = 120;
        let xs = Array2::from_shape_fn((n0, 2), |_| rng.normal());
        let ys = Array2::from_shape_fn((n1, 2), |_| rng.normal() + 0.3);
        let ms = [
            DiscreteMeasure::empirical(xs).unwrap(),
            DiscreteMeasure::empirical(ys).unwrap(),
        ];
        let cost = build_cost(&ms, &CostSpec::SquaredEuclidean).unwrap();
        assert!(cost.values().len() >= SPARSE_MIN_CELLS);
        let div = [Divergence::kl(1.0).unwrap(), Divergence::kl(1.0).unwrap()];
        let mut cfg = SinkhornConfig::new(0.01);
        cfg.tolerance = 1e-10;
        let auto = ipfp(&ms, &cost, &div, &cfg).unwrap();
        let mut dense_cfg = cfg.clone();
        dense_cfg.sweep = SweepMode::Dense;
        let dense = ipfp(&ms, &cost, &div, &dense_cfg).unwrap();
        assert!(auto.converged && dense.converged);
        for j in 0..2 {
            for (a, b) in auto.potentials.arm(j).iter().zip(dense.potentials.arm(j)) {
                assert_abs_diff_eq!(a, b, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn determinism_bitwise() {
        let ms = [measure_1d(&[0.0, 0.4, 1.1]), measure_1d(&[0.2, 0.9])];
        let cost = build_cost(&ms, &CostSpec::SquaredEuclidean).unwrap();
        let div = [Divergence::kl(2.0).unwrap(), Divergence::kl(2.0).unwrap()];
        let cfg = SinkhornConfig::new(0.05);
        let a = ipfp(&ms, &cost, &div, &cfg).unwrap();
        let b = ipfp(&ms, &cost, &div, &cfg).unwrap();
        for j in 0..2 {
            assert_eq!(a.potentials.arm(j), b.potentials.arm(j));
        }
    }
}
