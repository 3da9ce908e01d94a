//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Every criterion runs even when an earlier one fails. The process exits
//! with status 0 so the rest of the workspace suite still runs; set
//! `ACCEPTANCE_STRICT=1` to turn any failure into a nonzero exit.

use std::time::Instant;

use pvcell::coverage::{coverage_closed, ClosedFormCoverage, CoverageEvaluator, CoverageFn, CoverageSettings};
use pvcell::equilibrium::{
    critical_p, delay_formula, dimension_buffer, evolve, k1_closed, solve_busy, solve_busy_infinite, total_variation,
    DimensioningRequest, SolverSettings,
};
use pvcell::error::Error;
use pvcell::geomsim::{
    estimate_kpis, merge_replications, run, run_replications, sample_scenario, Geometry, QSchedule, ReplicationPlan,
    RunSettings, ScenarioSettings, SimMode,
};
use pvcell::model::{Buffer, NetworkParams};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn closed(c: f64) -> ClosedFormCoverage {
    ClosedFormCoverage::new(c).unwrap()
}

/// Network used by the simulation criteria: `w = 2`, threshold calibrated
/// to `C = 4`, so mean-field station activity `w q` stays below one.
fn sim_params() -> NetworkParams {
    NetworkParams::builder()
        .lambda0(2.0)
        .lambda1(1.0)
        .calibrate_constant(4.0)
        .unwrap()
        .build()
        .unwrap()
}

fn c1_quadrature_vs_closed_form() -> Outcome {
    let settings = CoverageSettings {
        kappa0_reduction: false,
        memoize: false,
        ..CoverageSettings::default()
    };
    let mut worst: f64 = 0.0;
    for &c in &[1.0, 4.0, 8.0] {
        let params = NetworkParams::builder().calibrate_constant(c).unwrap().build().unwrap();
        let ev = CoverageEvaluator::with_settings(params, settings).unwrap();
        for i in 1..=100 {
            let q = i as f64 / 100.0;
            worst = worst.max((ev.coverage(q).unwrap() - coverage_closed(q, c)).abs());
        }
    }
    outcome(worst < 1e-6, format!("max |V - q/(1+Cq)| = {worst:.3e} (tol 1e-6)"))
}

fn c2_k1_solver_vs_quadratic() -> Outcome {
    let cov = closed(4.0);
    let settings = SolverSettings::default();
    let mut worst: f64 = 0.0;
    for i in 1..=50 {
        let p = 0.3 * i as f64 / 50.0;
        let s = solve_busy(p, 1, &cov, &settings).unwrap();
        worst = worst.max((s.q_star - k1_closed(p, 4.0).unwrap().q_star).abs());
    }
    outcome(worst < 1e-9, format!("max |q* - q*_closed| = {worst:.3e} over 50 rates (tol 1e-9)"))
}

fn c3_unbounded_criticality() -> Outcome {
    let cov = closed(4.0);
    let settings = SolverSettings::default();
    let mut worst: f64 = 0.0;
    let mut ok = true;
    for i in 1..=19 {
        let p = i as f64 / 100.0;
        match solve_busy_infinite(p, &cov, &settings) {
            Ok(s) => worst = worst.max((s.q_star - p / (1.0 - 4.0 * p)).abs()),
            Err(_) => ok = false,
        }
    }
    let mut infeasible = 0;
    for &p in &[0.21, 0.25, 0.3] {
        if matches!(solve_busy_infinite(p, &cov, &settings), Err(Error::Infeasible { .. })) {
            infeasible += 1;
        }
    }
    let pc_err = (critical_p(4.0) - 0.2).abs();
    let pass = ok && worst < 1e-9 && infeasible == 3 && pc_err < 1e-9;
    outcome(
        pass,
        format!("max |q* - p/(1-4p)| = {worst:.3e}, infeasible {infeasible}/3, |p_c - 0.2| = {pc_err:.1e}"),
    )
}

fn c4_balance_identity() -> Outcome {
    let cov = closed(4.0);
    let settings = SolverSettings::default();
    let mut worst: f64 = 0.0;
    let mut cells = 0;
    for &k in &[1, 2, 4, 8] {
        for i in 1..=50 {
            let p = 0.3 * i as f64 / 50.0;
            if let Ok(s) = solve_busy(p, k, &cov, &settings) {
                let pi_k = *s.pi().unwrap().last().unwrap();
                worst = worst.max((p * (1.0 - pi_k) - s.coverage).abs());
                cells += 1;
            }
        }
    }
    outcome(worst < 1e-9, format!("max |p(1-pi_K) - V(q*)| = {worst:.3e} over {cells} converged cells"))
}

fn c5_delay_coherence() -> Outcome {
    let cov = closed(4.0);
    let settings = SolverSettings::default();
    let mut worst: f64 = 0.0;
    for i in 1..=30 {
        let p = 0.01 * i as f64;
        let s = solve_busy(p, 1, &cov, &settings).unwrap();
        let d = delay_formula(p, s.q_star, s.coverage, 1);
        worst = worst.max((d - (s.q_star - p) / (p * (1.0 - p))).abs());
    }
    let big = solve_busy(0.1, 64, &cov, &settings).unwrap();
    let gap = (big.kpis.delay - 0.8).abs();
    let formula_gap = (delay_formula(0.1, big.q_star, big.coverage, 64) - 0.8).abs();
    outcome(
        worst < 1e-10 && gap < 1e-6,
        format!("K=1 max gap {worst:.3e} (tol 1e-10); K=64 |D - 0.8| = {gap:.3e} (formula {formula_gap:.3e}, tol 1e-6)"),
    )
}

fn c6_strong_ergodicity() -> Outcome {
    let cov = closed(4.0);
    let settings = SolverSettings::default();
    let mut worst_tv: f64 = 0.0;
    let mut worst_q: f64 = 0.0;
    for &k in &[1u32, 4, 8] {
        let n = k as usize + 1;
        let mut at_zero = vec![0.0; n];
        at_zero[0] = 1.0;
        let mut at_top = vec![0.0; n];
        at_top[k as usize] = 1.0;
        let uniform = vec![1.0 / n as f64; n];
        for init in [at_zero, at_top, uniform] {
            let e = evolve(0.1, k, &cov, 10_000, Some(init), &settings).unwrap();
            worst_tv = worst_tv.max(*e.tv.last().unwrap());
            worst_q = worst_q.max((e.q.last().unwrap() - e.limit.q_star).abs());
        }
    }
    outcome(
        worst_tv < 1e-8 && worst_q < 1e-9,
        format!("max d_TV at n=1e4: {worst_tv:.3e} (tol 1e-8); max |q_n - q*| = {worst_q:.3e} (tol 1e-9)"),
    )
}

fn c7_dimensioning_window() -> Outcome {
    let settings = SolverSettings::default();
    let request = DimensioningRequest::new(0.09, 0.03, 6.0);
    let ks: Vec<u32> = (1..=16).collect();
    let expected: Vec<u32> = (4..=9).collect();
    let mut lines = Vec::new();
    let mut hit = false;
    for &c in &[4.0, 5.0] {
        let d = dimension_buffer(&request, &closed(c), &ks, &settings).unwrap();
        hit |= d.feasible == expected;
        let first_delay_fail = d.per_k.iter().find(|b| b.max_delay > request.max_delay).map(|b| b.k);
        lines.push(format!(
            "C={c}: feasible {:?}, loss monotone {}, delay monotone {}, first K over D_max {:?}",
            d.feasible, d.loss_monotone, d.delay_monotone, first_delay_fail
        ));
    }
    outcome(hit, format!("expected {expected:?}; {}", lines.join("; ")))
}

fn c8_non_monotone_coverage() -> Outcome {
    let mut found = None;
    for &kappa in &[0.005, 0.01, 0.05, 0.1] {
        let params = NetworkParams::builder()
            .lambda0(10.0)
            .lambda1(1.0)
            .beta(4.0)
            .kappa(kappa)
            .mu(1.0)
            .threshold(1.0)
            .build()
            .unwrap();
        let ev = CoverageEvaluator::new(params).unwrap();
        let values: Vec<(f64, f64)> = (1..=40).map(|i| i as f64 / 40.0).map(|q| (q, ev.coverage(q).unwrap())).collect();
        let peak = values.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        if let Some(&(q2, v2)) = values.iter().find(|(q, v)| *q > peak.0 && peak.1 > v + 1e-9) {
            found = Some((kappa, peak.0, peak.1, q2, v2));
            break;
        }
    }
    match found {
        Some((kappa, q1, v1, q2, v2)) => outcome(true, format!("kappa={kappa}: V({q1})={v1:.9} > V({q2})={v2:.9}")),
        None => outcome(false, "no decreasing pair found"),
    }
}

fn c9_lemma_conditional_oracle() -> Outcome {
    let params = sim_params();
    let scenario = sample_scenario(&params, &ScenarioSettings::default(), 2024).unwrap();
    let q = 0.3;
    let stats = run(&scenario, 0.2, Buffer::Finite(4), &SimMode::MeanFieldFixed(q), &RunSettings::with_slots(100_000), 77).unwrap();
    let est = estimate_kpis(&stats, 0.2).conditional_success;
    let oracle = scenario.conditional_coverage(q) / q;
    let z = (est.mean - oracle) / est.std_error;
    outcome(
        z.abs() < 3.0,
        format!(
            "empirical {:.5} +/- {:.5} over {} busy slots vs layout oracle {oracle:.5} (z = {z:.2})",
            est.mean, est.std_error, stats.busy_slots
        ),
    )
}

fn c10_pure_loss_rate() -> Outcome {
    let params = sim_params();
    let c = params.c_constant().unwrap();
    let plan = ReplicationPlan {
        scenario: ScenarioSettings::default(),
        run: RunSettings::with_slots(10_000),
        master_seed: 10,
        count: 120,
    };
    let reps = run_replications(&params, 0.1, Buffer::Zero, &SimMode::PureLoss, &plan).unwrap();
    let rates: Vec<f64> = reps.iter().map(|r| r.stats.losses as f64 / r.stats.slots as f64).collect();
    let n = rates.len() as f64;
    let mean = rates.iter().sum::<f64>() / n;
    let sd = (rates.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let se = sd / n.sqrt();
    let target = c * 0.01 / (1.0 + c * 0.1);
    let z = (mean - target) / se;
    outcome(
        z.abs() < 3.0 && (target - 0.028_571_4).abs() < 1e-6,
        format!("loss rate {mean:.5} +/- {se:.5} over {} layouts vs {target:.7} (z = {z:.2})", reps.len()),
    )
}

fn c11_littles_law() -> Outcome {
    let params = sim_params();
    let cov = closed(4.0);
    let p = 0.1;
    let k = 8;
    let solution = solve_busy(p, k, &cov, &SolverSettings::default()).unwrap();
    let schedule = QSchedule::from_coverage(p, Buffer::Finite(k), &cov, 10_000).unwrap();
    let plan = ReplicationPlan {
        scenario: ScenarioSettings::default(),
        run: RunSettings {
            geometry: Geometry::Annealed,
            ..RunSettings::with_slots(200_000)
        },
        master_seed: 11,
        count: 20,
    };
    let reps = run_replications(&params, p, Buffer::Finite(k), &SimMode::MeanFieldAdaptive(schedule), &plan).unwrap();
    let pooled = merge_replications(&reps).unwrap();
    let est = estimate_kpis(&pooled, p);
    let rel = (est.delay.mean - solution.kpis.delay).abs() / solution.kpis.delay;
    let tv = total_variation(&est.pi_hat, solution.pi().unwrap());
    outcome(
        rel < 0.05 && tv < 0.02,
        format!(
            "E[B]/p = {:.4} vs D = {:.4} (rel {rel:.4}, tol 0.05); d_TV = {tv:.4} (tol 0.02), annealed layouts",
            est.delay.mean, solution.kpis.delay
        ),
    )
}

fn c12_exact_vs_meanfield_report() -> Outcome {
    let params = sim_params();
    let cov = closed(4.0);
    let p = 0.1;
    let k = 4;
    // Exact mode is quadratic in the station count; a 14 x 14 window keeps
    // about 200 stations.
    let plan = ReplicationPlan {
        scenario: ScenarioSettings {
            window_side: 14.0,
            ..ScenarioSettings::default()
        },
        run: RunSettings::with_slots(20_000),
        master_seed: 12,
        count: 8,
    };
    let schedule = QSchedule::from_coverage(p, Buffer::Finite(k), &cov, 10_000).unwrap();
    let exact = merge_replications(&run_replications(&params, p, Buffer::Finite(k), &SimMode::Exact, &plan).unwrap()).unwrap();
    let mf = merge_replications(&run_replications(&params, p, Buffer::Finite(k), &SimMode::MeanFieldAdaptive(schedule), &plan).unwrap())
        .unwrap();
    let e = estimate_kpis(&exact, p);
    let m = estimate_kpis(&mf, p);
    let tv = total_variation(&e.pi_hat, &m.pi_hat);
    let gap = e.conditional_success.mean - m.conditional_success.mean;
    let busy_gap = e.interferer_busy_fraction - m.interferer_busy_fraction;
    outcome(
        tv.is_finite() && gap.is_finite(),
        format!(
            "report: d_TV(exact, meanfield) = {tv:.4}, success gap = {gap:+.4} (exact {:.4}, meanfield {:.4}), interferer activity gap = {busy_gap:+.4}",
            e.conditional_success.mean, m.conditional_success.mean
        ),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        ("quadrature vs closed form", c1_quadrature_vs_closed_form),
        ("K=1 solver vs quadratic", c2_k1_solver_vs_quadratic),
        ("K=inf criticality", c3_unbounded_criticality),
        ("balance identity", c4_balance_identity),
        ("delay coherence", c5_delay_coherence),
        ("strong ergodicity", c6_strong_ergodicity),
        ("dimensioning window", c7_dimensioning_window),
        ("non-monotone coverage", c8_non_monotone_coverage),
        ("simulator conditional coverage", c9_lemma_conditional_oracle),
        ("pure-loss simulation", c10_pure_loss_rate),
        ("Little's law in simulation", c11_littles_law),
        ("exact vs mean-field report", c12_exact_vs_meanfield_report),
    ];
    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = f();
        let secs = start.elapsed().as_secs_f64();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {tag} [{secs:6.2}s] {name}: {}", i + 1, o.detail);
        if !o.pass {
            failed.push(i + 1);
        }
    }
    println!(
        "acceptance: {} passed, {} failed {:?}",
        criteria.len() - failed.len(),
        failed.len(),
        failed
    );
    if !failed.is_empty() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
