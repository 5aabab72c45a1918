//! Calibration scan for the synthetic benchmark: sweeps the soft-marginal
//! scale and the regularization strength over many master seeds and prints
//! the per-method error summaries the harness reports.
//!
//! Usage: benchmark_scan [phase] with phase one of
//!   smoke  — one OT row, timing check
//!   rho    — OT ATT/ATE errors at eps=1e-3 for several marginal scales
//!   trend  — OT ATE error across eps for one marginal scale
//!   base   — KNN / IPW / unadjusted reference rows
//! Environment: REPS (replications, default 8), RHO (trend scale, 0.5).

use otmatch_core::simulation::{
    run_case, OtParams, SimCase, SimMethod, SimProtocol,
};
use std::time::Instant;

fn protocol(reps: usize) -> SimProtocol {
    SimProtocol {
        n0: 1000,
        n1: 100,
        bootstrap: 100,
        replications: reps,
        noise_is_sd: false,
        sd_truth_replicates: 64,
    }
}

fn ot(epsilon: f64, rho: f64) -> SimMethod {
    SimMethod::Ot(OtParams {
        epsilon,
        rho: Some(rho),
        drop_threshold: 1e-3,
    })
}

const MASTER_SEED: u64 = 4242;

fn notes_seed() -> u64 {
    std::env::var("SEED")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(9000)
}

fn main() {
    let phase = std::env::args().nth(1).unwrap_or_else(|| "smoke".into());
    let reps: usize = std::env::var("REPS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(8);
    let rho_env: f64 = std::env::var("RHO")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.5);
    let proto = protocol(reps);
    let cases = [SimCase::Case1, SimCase::Case2];
    match phase.as_str() {
        "smoke" => {
            let p = protocol(1);
            let t = Instant::now();
            let rows = run_case(SimCase::Case1, &[ot(1e-3, 0.5)], &p, MASTER_SEED).unwrap();
            let r = &rows[0];
            println!(
                "smoke: ATEd={:.4} ATTd={:.4} SDd={:.4}  [{:.1}s]",
                r.ate_diff,
                r.att_diff,
                r.att_sd_diff,
                t.elapsed().as_secs_f64()
            );
        }
        "one" => {
            let ds = otmatch_core::simulation::draw_case_dataset(
                SimCase::Case1,
                1000,
                100,
                notes_seed(),
                false,
            )
            .unwrap();
            for eps in [1e-3, 5e-3, 1e-2, 5e-2] {
                let mut cfg = otmatch_core::OtMatchConfig::new(eps);
                cfg.solver.max_iterations = 40_000;
                cfg.divergence = otmatch_core::Divergence::kl(rho_env).unwrap();
                cfg.cost_scale = otmatch_core::CostScale::UnitMax;
                let t = Instant::now();
                let out = otmatch_core::ot_match(&ds, &cfg, None).unwrap();
                println!(
                    "eps={eps:<6}: iters={} conv={} ate={:.4} att={:.4} kept={:?} unadj={:.4} [{:.2}s]",
                    out.iterations,
                    out.converged,
                    out.ate,
                    out.att,
                    out.kept,
                    otmatch_core::baselines::unadjusted(&ds).unwrap(),
                    t.elapsed().as_secs_f64()
                );
            }
        }
        "warm" => {
            let ds = otmatch_core::simulation::draw_case_dataset(
                SimCase::Case1,
                1000,
                100,
                notes_seed(),
                false,
            )
            .unwrap();
            let mut cfg = otmatch_core::OtMatchConfig::new(1e-3);
            cfg.solver.max_iterations = 40_000;
            cfg.divergence = otmatch_core::Divergence::kl(rho_env).unwrap();
            cfg.cost_scale = otmatch_core::CostScale::UnitMax;
            let t = Instant::now();
            let base = otmatch_core::ot_match(&ds, &cfg, None).unwrap();
            println!("cold: iters={} [{:.2}s]", base.iterations, t.elapsed().as_secs_f64());
            let mut rng = otmatch_core::Rng::new(123);
            for b in 0..10 {
                let rs = otmatch_core::resample(
                    &ds,
                    otmatch_core::BootstrapMode::Stratified,
                    &mut rng,
                )
                .unwrap();
                let t = Instant::now();
                let out = otmatch_core::ot_match(
                    &rs.dataset,
                    &cfg,
                    Some((&base.potentials, &rs.arm_positions)),
                )
                .unwrap();
                println!(
                    "warm {b}: iters={} conv={} [{:.2}s]",
                    out.iterations,
                    out.converged,
                    t.elapsed().as_secs_f64()
                );
            }
        }
        "rho" => {
            for rho in [0.1, 0.5, 1.0, 5.0] {
                for case in cases {
                    let t = Instant::now();
                    let rows = run_case(case, &[ot(1e-3, rho)], &proto, MASTER_SEED).unwrap();
                    let r = &rows[0];
                    println!(
                        "rho={rho:<4} {case:?}: ATEd={:.4} ATTd={:.4} SDd={:.4}  [{:.0}s]",
                        r.ate_diff,
                        r.att_diff,
                        r.att_sd_diff,
                        t.elapsed().as_secs_f64()
                    );
                }
            }
        }
        "trend" => {
            for eps in [1e-3, 5e-3, 1e-2, 5e-2] {
                let t = Instant::now();
                let rows =
                    run_case(SimCase::Case1, &[ot(eps, rho_env)], &proto, MASTER_SEED).unwrap();
                let r = &rows[0];
                println!(
                    "eps={eps:<6} rho={rho_env}: ATEd={:.4} ATTd={:.4} SDd={:.4}  [{:.0}s]",
                    r.ate_diff,
                    r.att_diff,
                    r.att_sd_diff,
                    t.elapsed().as_secs_f64()
                );
            }
        }
        "ipw" => {
            use otmatch_core::baselines::{fit_propensity, ipw_estimates, IpwStyle};
            for case in cases {
                let ds = otmatch_core::simulation::draw_case_dataset(
                    case, 1000, 100, notes_seed(), false,
                )
                .unwrap();
                let model = fit_propensity(&ds, false).unwrap();
                println!("{case:?} coefficients: {:?}", model.coefficients);
                let x = ds.covariates();
                let mut e_treated: Vec<f64> = Vec::new();
                let mut e_control: Vec<f64> = Vec::new();
                for i in 0..ds.len() {
                    let xi: Vec<f64> = (0..x.ncols()).map(|j| x[[i, j]]).collect();
                    let e = model.probability(&xi);
                    if ds.treatment()[i] == 1 {
                        e_treated.push(e);
                    } else {
                        e_control.push(e);
                    }
                }
                e_treated.sort_by(f64::total_cmp);
                e_control.sort_by(f64::total_cmp);
                let q = |v: &[f64], p: f64| v[((v.len() - 1) as f64 * p) as usize];
                println!(
                    "  treated e: min={:.2e} q10={:.3} med={:.3} max={:.3}  sum 1/e = {:.0}",
                    e_treated[0],
                    q(&e_treated, 0.1),
                    q(&e_treated, 0.5),
                    e_treated[e_treated.len() - 1],
                    e_treated.iter().map(|e| 1.0 / e).sum::<f64>()
                );
                println!(
                    "  control e: min={:.2e} med={:.3} q90={:.3} max={:.3}  sum 1/(1-e) = {:.0}",
                    e_control[0],
                    q(&e_control, 0.5),
                    q(&e_control, 0.9),
                    e_control[e_control.len() - 1],
                    e_control.iter().map(|e| 1.0 / (1.0 - e)).sum::<f64>()
                );
                let ht = ipw_estimates(&ds, &model, IpwStyle::HorvitzThompson).unwrap();
                let hj = ipw_estimates(&ds, &model, IpwStyle::Hajek).unwrap();
                println!("  original: HT ate={:.4} att={:.4} | Hajek ate={:.4} att={:.4}", ht.ate, ht.att, hj.ate, hj.att);
                let mut rng = otmatch_core::Rng::new(notes_seed() ^ 0xABCD);
                let mut ests: Vec<f64> = Vec::new();
                let mut fails = 0usize;
                for _ in 0..40 {
                    let rs = otmatch_core::resample(
                        &ds,
                        otmatch_core::BootstrapMode::Stratified,
                        &mut rng,
                    )
                    .unwrap();
                    match fit_propensity(&rs.dataset, false)
                        .and_then(|m| ipw_estimates(&rs.dataset, &m, IpwStyle::HorvitzThompson))
                    {
                        Ok(est) => ests.push(est.ate),
                        Err(_) => fails += 1,
                    }
                }
                ests.sort_by(f64::total_cmp);
                println!(
                    "  40 resamples: HT ate min={:.3} med={:.3} max={:.3} fails={fails}",
                    ests[0],
                    ests[ests.len() / 2],
                    ests[ests.len() - 1]
                );
            }
        }
        "base" => {
            let methods = [SimMethod::Knn(1), SimMethod::Knn(3), SimMethod::Ipw, SimMethod::Unadjusted];
            for case in cases {
                let t = Instant::now();
                let rows = run_case(case, &methods, &proto, MASTER_SEED).unwrap();
                for r in &rows {
                    println!(
                        "{case:?} {:<10}: ATEd={:.4} ATTd={:.4} SDd={:.4}",
                        r.method, r.ate_diff, r.att_diff, r.att_sd_diff
                    );
                }
                println!("  [{:.0}s]", t.elapsed().as_secs_f64());
            }
        }
        other => eprintln!("unknown phase {other}"),
    }
}
