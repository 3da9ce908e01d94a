//! The four subcommands. Each returns the CSV text it produced so the
//! binary and the tests share one code path.

use std::path::{Path, PathBuf};

use pvcell::coverage::{coverage_closed, CoverageFn};
use pvcell::equilibrium::{
    dimension_buffer, limiting_pi, slot_empty_probability, solve, DimensioningRequest, EquilibriumSolution, SolverSettings,
};
use pvcell::geomsim::{
    estimate_kpis, merge_replications, run_replications, validate_run, QSchedule, Replication, ReplicationPlan, SimMode, SimStats,
};
use pvcell::model::{Buffer, NetworkBuilder, NetworkParams, TrafficParams};
use pvcell::Error;
use rayon::prelude::*;

use crate::config::{network_coverage, CoverageChoice, ModeChoice, RunConfig};
use crate::output::{emit, fmt_bool, fmt_f64, Table};
use crate::CliError;

pub const SOLVE_COLUMNS: &[&str] = &[
    "p", "K", "k_label", "q_star", "coverage", "throughput", "loss_prob", "delay", "ld_product", "converged", "iterations", "status", "C",
    "kappa", "sigma2", "T", "delta", "w",
];

/// Outcome of one `(p, K)` cell.
#[derive(Debug)]
pub struct Cell {
    pub p: f64,
    pub buffer: Buffer,
    pub outcome: Result<EquilibriumSolution, Error>,
}

impl Cell {
    pub fn status(&self) -> &'static str {
        match &self.outcome {
            Ok(s) if s.converged => "ok",
            Ok(_) | Err(Error::NonConvergence { .. }) => "not_converged",
            Err(Error::Infeasible { .. }) => "infeasible",
            Err(_) => "error",
        }
    }

    fn row(&self, net: &NetworkParams, c: f64) -> Vec<String> {
        let nan = f64::NAN;
        let (q, v, thr, loss, delay, ld, conv, iters) = match &self.outcome {
            Ok(s) => (
                s.q_star,
                s.coverage,
                s.kpis.throughput,
                s.kpis.loss_probability,
                s.kpis.delay,
                s.kpis.ld_product,
                s.converged,
                s.iterations,
            ),
            Err(Error::NonConvergence { iterations, .. }) => (nan, nan, nan, nan, nan, nan, false, *iterations),
            Err(_) => (nan, nan, nan, nan, nan, nan, false, 0),
        };
        vec![
            fmt_f64(self.p),
            self.buffer.code().to_string(),
            self.buffer.to_string(),
            fmt_f64(q),
            fmt_f64(v),
            fmt_f64(thr),
            fmt_f64(loss),
            fmt_f64(delay),
            fmt_f64(ld),
            fmt_bool(conv),
            iters.to_string(),
            self.status().into(),
            fmt_f64(c),
            fmt_f64(net.kappa()),
            fmt_f64(net.sigma2()),
            fmt_f64(net.threshold()),
            fmt_f64(net.delta()),
            fmt_f64(net.w()),
        ]
    }
}

pub fn solve_cell<C: CoverageFn + ?Sized>(p: f64, buffer: Buffer, coverage: &C, settings: &SolverSettings) -> Cell {
    let outcome = TrafficParams::new(p, buffer).and_then(|t| solve(&t, coverage, settings));
    Cell { p, buffer, outcome }
}

/// All cells of a K-major, p-ascending grid, solved concurrently.
pub fn solve_grid<C: CoverageFn + ?Sized>(ps: &[f64], ks: &[Buffer], coverage: &C, settings: &SolverSettings) -> Vec<Cell> {
    let jobs: Vec<(Buffer, f64)> = ks.iter().flat_map(|&k| ps.iter().map(move |&p| (k, p))).collect();
    jobs.par_iter().map(|&(k, p)| solve_cell(p, k, coverage, settings)).collect()
}

fn model_error(e: Error) -> CliError {
    match e {
        Error::InvalidParameter { .. } | Error::Divergent { .. } | Error::SingularAttenuation => CliError::Config(e.to_string()),
        Error::Infeasible { p, p_c } => CliError::Infeasible { p, p_c },
        Error::NonConvergence { .. } => CliError::NonConvergence(e.to_string()),
        other => CliError::Runtime(other.to_string()),
    }
}

/// Single `(p, K)`: human report on stderr, one CSV row to `out`.
pub fn cmd_solve(cfg: &RunConfig, out: Option<&Path>) -> Result<String, CliError> {
    let coverage = cfg.coverage_fn()?;
    let cell = solve_cell(cfg.p, cfg.buffer, &*coverage, &cfg.solver);
    let mut table = Table::new(SOLVE_COLUMNS);
    table.push(cell.row(&cfg.network, cfg.c));
    let text = table.render("solve", cfg);
    emit(&text, out)?;

    eprintln!("p = {}, K = {}, C = {:.6}", cfg.p, cfg.buffer, cfg.c);
    match cell.outcome {
        Ok(s) => {
            eprintln!("  q*          = {:.10}", s.q_star);
            eprintln!("  V_T(q*)     = {:.10}", s.coverage);
            eprintln!("  throughput  = {:.10}", s.kpis.throughput);
            eprintln!("  loss        = {:.6e}", s.kpis.loss_probability);
            eprintln!("  delay       = {:.10}", s.kpis.delay);
            eprintln!("  L*D         = {:.6e}", s.kpis.ld_product);
            eprintln!("  iterations  = {} (converged: {})", s.iterations, s.converged);
            if s.converged {
                Ok(text)
            } else {
                Err(CliError::NonConvergence(format!("no fixed point after {} iterations", s.iterations)))
            }
        }
        Err(e) => Err(model_error(e)),
    }
}

pub fn cmd_sweep(cfg: &RunConfig, out: Option<&Path>) -> Result<String, CliError> {
    let coverage = cfg.coverage_fn()?;
    let cells = solve_grid(&cfg.p_grid, &cfg.k_list, &*coverage, &cfg.solver);
    let mut table = Table::new(SOLVE_COLUMNS);
    for cell in &cells {
        table.push(cell.row(&cfg.network, cfg.c));
    }
    let text = table.render("sweep", cfg);
    emit(&text, out)?;
    let failed = cells.iter().filter(|c| c.status() != "ok").count();
    if failed > 0 {
        eprintln!("sweep: {failed} of {} cells did not converge or are infeasible", cells.len());
    }
    Ok(text)
}

pub const SIMULATE_COLUMNS: &[&str] = &[
    "replication",
    "mode",
    "geometry",
    "p",
    "K",
    "k_label",
    "q_mode",
    "scenario_seed",
    "run_seed",
    "scenario_attempts",
    "slots",
    "arrivals",
    "throughput",
    "throughput_se",
    "loss_prob",
    "loss_prob_se",
    "loss_rate",
    "delay",
    "delay_se",
    "conditional_success",
    "conditional_success_se",
    "lemma_success",
    "analytic_success",
    "analytic_loss_rate",
    "mean_buffer",
    "interferer_busy_fraction",
    "conservation_ok",
    "lindley_violations",
    "pi_hat",
];

/// Mean-field prediction for a link whose busy interferers appear with
/// probability `q`: success per busy slot and losses per slot.
#[derive(Debug, Clone, Copy)]
pub struct Analytic {
    pub q: f64,
    pub success: f64,
    pub loss_rate: f64,
}

/// Losses per slot of the buffer chain with a frozen success probability.
pub fn chain_loss_rate(p: f64, u: f64, buffer: Buffer) -> Result<f64, Error> {
    match buffer {
        Buffer::Zero => Ok(p * (1.0 - u)),
        Buffer::Infinite => Ok(0.0),
        Buffer::Finite(k) => {
            let q = 1.0 - (1.0 - p) * slot_empty_probability(p, u, k)?;
            if q <= p {
                return Ok(0.0);
            }
            let pi = limiting_pi(p, q, u, k)?;
            Ok(p * pi[k as usize])
        }
    }
}

fn analytic(cfg: &RunConfig, mode: &SimMode, coverage: &dyn CoverageFn) -> Analytic {
    let p = cfg.p;
    let q = match mode {
        SimMode::PureLoss => Some(p),
        SimMode::MeanFieldFixed(q) => Some(*q),
        SimMode::MeanFieldAdaptive(s) => Some(s.at(usize::MAX)),
        SimMode::Exact => None,
    };
    let (q, success) = match q {
        Some(q) => (q, if q > 0.0 { coverage.success_given_busy(q).unwrap_or(f64::NAN) } else { 1.0 }),
        None => match solve_cell(p, cfg.buffer, coverage, &cfg.solver).outcome {
            Ok(s) => (s.q_star, s.u_star),
            Err(_) => (f64::NAN, f64::NAN),
        },
    };
    let loss_rate = chain_loss_rate(p, success.min(1.0), cfg.buffer).unwrap_or(f64::NAN);
    Analytic { q, success, loss_rate }
}

#[allow(clippy::too_many_arguments)]
fn sim_row(
    label: String,
    seeds: Option<(u64, u64)>,
    attempts: u64,
    lemma_success: f64,
    stats: &SimStats,
    cfg: &RunConfig,
    mode: &SimMode,
    a: &Analytic,
) -> Vec<String> {
    let est = estimate_kpis(stats, cfg.p);
    let q_mode = if matches!(mode, SimMode::Exact) { f64::NAN } else { a.q };
    let loss_rate = if stats.slots == 0 { f64::NAN } else { stats.losses as f64 / stats.slots as f64 };
    let pi_hat = est.pi_hat.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(";");
    let geometry = match cfg.sim.run.geometry {
        pvcell::geomsim::Geometry::Quenched => "quenched",
        pvcell::geomsim::Geometry::Annealed => "annealed",
    };
    vec![
        label,
        mode.name().into(),
        geometry.into(),
        fmt_f64(cfg.p),
        cfg.buffer.code().to_string(),
        cfg.buffer.to_string(),
        fmt_f64(q_mode),
        seeds.map(|s| s.0.to_string()).unwrap_or_default(),
        seeds.map(|s| s.1.to_string()).unwrap_or_default(),
        attempts.to_string(),
        stats.slots.to_string(),
        stats.arrivals.to_string(),
        fmt_f64(est.throughput.mean),
        fmt_f64(est.throughput.std_error),
        fmt_f64(est.loss_probability.mean),
        fmt_f64(est.loss_probability.std_error),
        fmt_f64(loss_rate),
        fmt_f64(est.delay.mean),
        fmt_f64(est.delay.std_error),
        fmt_f64(est.conditional_success.mean),
        fmt_f64(est.conditional_success.std_error),
        fmt_f64(lemma_success),
        fmt_f64(a.success),
        fmt_f64(a.loss_rate),
        fmt_f64(est.mean_buffer),
        fmt_f64(est.interferer_busy_fraction),
        fmt_bool(stats.conservation.holds()),
        stats.lindley.violations.to_string(),
        pi_hat,
    ]
}

fn sim_mode(cfg: &RunConfig, coverage: &dyn CoverageFn) -> Result<SimMode, CliError> {
    Ok(match cfg.sim.mode {
        ModeChoice::PureLoss => SimMode::PureLoss,
        ModeChoice::Exact => SimMode::Exact,
        ModeChoice::MeanFieldFixed => SimMode::MeanFieldFixed(cfg.sim.q),
        ModeChoice::MeanFieldAdaptive => {
            let len = usize::try_from(cfg.sim.run.n_slots).unwrap_or(usize::MAX).min(100_000);
            SimMode::MeanFieldAdaptive(QSchedule::from_coverage(cfg.p, cfg.buffer, coverage, len).map_err(model_error)?)
        }
    })
}

/// Per-replication rows followed by one pooled `all` row.
pub fn cmd_simulate(cfg: &RunConfig, out: Option<&Path>) -> Result<String, CliError> {
    if cfg.sim.replications == 0 {
        return Err(CliError::Config("`replications` must be >= 1".into()));
    }
    let coverage = cfg.coverage_fn()?;
    let mode = sim_mode(cfg, &*coverage)?;
    validate_run(cfg.p, cfg.buffer, &mode, &cfg.sim.run, cfg.network.w()).map_err(|e| CliError::Config(e.to_string()))?;
    let plan = ReplicationPlan {
        scenario: cfg.sim.scenario,
        run: cfg.sim.run,
        master_seed: cfg.seed,
        count: cfg.sim.replications,
    };
    let reps: Vec<Replication> = run_replications(&cfg.network, cfg.p, cfg.buffer, &mode, &plan).map_err(model_error)?;
    let a = analytic(cfg, &mode, &*coverage);

    let mut table = Table::new(SIMULATE_COLUMNS);
    for r in &reps {
        table.push(sim_row(
            r.index.to_string(),
            Some((r.scenario_seed, r.run_seed)),
            u64::from(r.scenario_attempts),
            r.lemma_success,
            &r.stats,
            cfg,
            &mode,
            &a,
        ));
    }
    if let Some(pooled) = merge_replications(&reps) {
        let lemma = reps.iter().map(|r| r.lemma_success).sum::<f64>() / reps.len() as f64;
        let attempts = reps.iter().map(|r| u64::from(r.scenario_attempts)).sum();
        table.push(sim_row("all".into(), None, attempts, lemma, &pooled, cfg, &mode, &a));
    }
    let text = table.render("simulate", cfg);
    emit(&text, out)?;
    Ok(text)
}

fn fixed_network(kappa: f64, sigma2: f64) -> Result<NetworkParams, CliError> {
    NetworkBuilder {
        lambda0: 10.0,
        lambda1: 1.0,
        dim: 2,
        beta: 4.0,
        kappa,
        mu: 1.0,
        sigma2,
        threshold: 1.0,
    }
    .build()
    .map_err(model_error)
}

pub const FIG1_COLUMNS: &[&str] = &["p", "q_star", "coverage", "throughput", "loss_prob", "delay", "converged"];
pub const FIG2_COLUMNS: &[&str] = &["p", "K", "k_label", "q_star", "coverage", "converged", "status"];
pub const FIG3_COLUMNS: &[&str] = &["p", "K", "k_label", "loss_prob", "delay", "ld_product", "converged", "status"];
pub const FIG4_COLUMNS: &[&str] = &["kind", "p", "K", "loss_prob", "delay", "L_max", "D_max", "feasible"];
pub const FIG5_COLUMNS: &[&str] = &["kappa", "sigma2", "q", "coverage", "method"];
pub const FIG6_COLUMNS: &[&str] = &["kappa", "p", "K", "k_label", "q_star", "throughput", "converged", "status"];

fn pick(cell: &Cell, f: impl Fn(&EquilibriumSolution) -> f64) -> String {
    fmt_f64(cell.outcome.as_ref().map(f).unwrap_or(f64::NAN))
}

fn converged(cell: &Cell) -> String {
    fmt_bool(cell.status() == "ok")
}

fn figure1(cfg: &RunConfig, coverage: &dyn CoverageFn) -> Table {
    let n = cfg.p_grid.len();
    let ps: Vec<f64> = (1..=n).map(|i| i as f64 / (n + 1) as f64).collect();
    let mut t = Table::new(FIG1_COLUMNS);
    for cell in solve_grid(&ps, &[Buffer::Finite(1)], coverage, &cfg.solver) {
        t.push(vec![
            fmt_f64(cell.p),
            pick(&cell, |s| s.q_star),
            pick(&cell, |s| s.coverage),
            pick(&cell, |s| s.kpis.throughput),
            pick(&cell, |s| s.kpis.loss_probability),
            pick(&cell, |s| s.kpis.delay),
            converged(&cell),
        ]);
    }
    t
}

fn figure2_3(cfg: &RunConfig, coverage: &dyn CoverageFn) -> (Table, Table) {
    let mut t2 = Table::new(FIG2_COLUMNS);
    let mut t3 = Table::new(FIG3_COLUMNS);
    for cell in solve_grid(&cfg.p_grid, &cfg.k_list, coverage, &cfg.solver) {
        let head = [fmt_f64(cell.p), cell.buffer.code().to_string(), cell.buffer.to_string()];
        let tail = [converged(&cell), cell.status().to_string()];
        let mut r2 = head.to_vec();
        r2.extend([pick(&cell, |s| s.q_star), pick(&cell, |s| s.coverage)]);
        r2.extend(tail.clone());
        let mut r3 = head.to_vec();
        r3.extend([
            pick(&cell, |s| s.kpis.loss_probability),
            pick(&cell, |s| s.kpis.delay),
            pick(&cell, |s| s.kpis.ld_product),
        ]);
        r3.extend(tail);
        t2.push(r2);
        t3.push(r3);
    }
    (t2, t3)
}

/// Point rows at the configured rates, then one `sup` row per K with the
/// worst loss and delay over `(0, p0]` and the feasibility verdict.
fn figure4(cfg: &RunConfig, coverage: &dyn CoverageFn) -> Result<Table, CliError> {
    let d = &cfg.dimension;
    let ks: Vec<u32> = (1..=16).collect();
    let buffers: Vec<Buffer> = ks.iter().map(|&k| Buffer::Finite(k)).collect();
    let mut t = Table::new(FIG4_COLUMNS);
    let cells = solve_grid(&d.fig4_p, &buffers, coverage, &cfg.solver);
    let mut ordered: Vec<&Cell> = cells.iter().collect();
    // p-major so each rate's K curve is contiguous.
    ordered.sort_by(|a, b| a.p.total_cmp(&b.p).then(a.buffer.cmp(&b.buffer)));
    for cell in ordered {
        t.push(vec![
            "point".into(),
            fmt_f64(cell.p),
            cell.buffer.code().to_string(),
            pick(cell, |s| s.kpis.loss_probability),
            pick(cell, |s| s.kpis.delay),
            fmt_f64(d.max_loss),
            fmt_f64(d.max_delay),
            String::new(),
        ]);
    }
    let request = DimensioningRequest::new(d.p0, d.max_loss, d.max_delay);
    let dim = dimension_buffer(&request, coverage, &ks, &cfg.solver).map_err(model_error)?;
    for check in &dim.per_k {
        t.push(vec![
            "sup".into(),
            fmt_f64(d.p0),
            check.k.to_string(),
            fmt_f64(check.max_loss),
            fmt_f64(check.max_delay),
            fmt_f64(d.max_loss),
            fmt_f64(d.max_delay),
            fmt_bool(check.feasible),
        ]);
    }
    Ok(t)
}

fn figure5(cfg: &RunConfig) -> Result<Table, CliError> {
    let f = &cfg.figure;
    let n = f.fig5_q_points;
    let qs: Vec<f64> = (0..=n).map(|i| i as f64 / n.max(1) as f64).collect();
    let mut t = Table::new(FIG5_COLUMNS);
    for &kappa in &f.fig5_kappa {
        for &sigma2 in &f.fig5_sigma2 {
            let net = fixed_network(kappa, sigma2)?;
            let closed = net.is_closed_form();
            let c = net.c_constant().map_err(model_error)?;
            let coverage = network_coverage(&net, CoverageChoice::Auto)?;
            let values: Vec<Result<f64, Error>> = qs
                .par_iter()
                .map(|&q| if closed { Ok(coverage_closed(q, c)) } else { coverage.coverage(q) })
                .collect();
            let method = match (closed, kappa == 0.0) {
                (true, _) => "closed",
                (false, true) => "noise",
                (false, false) => "numeric",
            };
            for (q, v) in qs.iter().zip(values) {
                t.push(vec![fmt_f64(kappa), fmt_f64(sigma2), fmt_f64(*q), fmt_f64(v.map_err(model_error)?), method.into()]);
            }
        }
    }
    Ok(t)
}

fn figure6(cfg: &RunConfig) -> Result<Table, CliError> {
    let mut t = Table::new(FIG6_COLUMNS);
    for &kappa in &cfg.figure.fig6_kappa {
        let net = fixed_network(kappa, 0.0)?;
        let coverage = network_coverage(&net, CoverageChoice::Auto)?;
        for cell in solve_grid(&cfg.p_grid, &[cfg.buffer], &*coverage, &cfg.solver) {
            t.push(vec![
                fmt_f64(kappa),
                fmt_f64(cell.p),
                cell.buffer.code().to_string(),
                cell.buffer.to_string(),
                pick(&cell, |s| s.q_star),
                pick(&cell, |s| s.kpis.throughput),
                converged(&cell),
                cell.status().into(),
            ]);
        }
    }
    Ok(t)
}

/// Writes `figN.csv` for each requested id into `dir`; returns the paths.
pub fn cmd_figures(cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create `{}`: {e}", dir.display())))?;
    let coverage = cfg.coverage_fn()?;
    let mut written = Vec::new();
    let mut fig23: Option<(Table, Table)> = None;
    for &id in &cfg.figures {
        let table = match id {
            1 => figure1(cfg, &*coverage),
            2 | 3 => {
                let (t2, t3) = fig23.get_or_insert_with(|| figure2_3(cfg, &*coverage));
                if id == 2 { t2.clone() } else { t3.clone() }
            }
            4 => figure4(cfg, &*coverage)?,
            5 => figure5(cfg)?,
            6 => figure6(cfg)?,
            other => return Err(CliError::Config(format!("unknown figure id {other} (expected 1..6)"))),
        };
        let path = dir.join(format!("fig{id}.csv"));
        emit(&table.render(&format!("fig{id}"), cfg), Some(&path))?;
        written.push(path);
    }
    Ok(written)
}
