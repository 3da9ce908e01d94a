//! Mean-field buffer analysis.
//!
//! Given a coverage curve, the busy-link probability solves the balance
//! map `q = F(q)`; the limiting buffer law is a truncated geometric
//! distribution for finite capacity and a geometric one without a bound.

use rayon::prelude::*;

use crate::coverage::CoverageFn;
use crate::error::{check, Error, Result};
use crate::model::{invert_scaled_tail, Buffer, TrafficParams};

/// Tri-diagonal transition matrix of the buffer chain on `{0, .., K}` for one
/// slot with conditional success probability `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    up: Vec<f64>,
    down: Vec<f64>,
}

impl TransitionMatrix {
    pub fn new(p: f64, u: f64, k: u32) -> Result<Self> {
        check(p > 0.0 && p < 1.0, "p", p, "must lie in (0, 1)")?;
        check(u > 0.0 && u <= 1.0, "U", u, "must lie in (0, 1]")?;
        check(k >= 1, "K", k as f64, "must be >= 1")?;
        let k = k as usize;
        let mut up = vec![p * (1.0 - u); k + 1];
        let mut down = vec![(1.0 - p) * u; k + 1];
        up[k] = 0.0;
        down[0] = 0.0;
        // A full buffer drops the arrival, so any success empties one slot.
        down[k] = u;
        Ok(Self { up, down })
    }

    /// Number of states, `K + 1`.
    pub fn size(&self) -> usize {
        self.up.len()
    }

    pub fn up(&self, i: usize) -> f64 {
        self.up[i]
    }

    pub fn down(&self, i: usize) -> f64 {
        self.down[i]
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if j == i {
            1.0 - self.up[i] - self.down[i]
        } else if j == i + 1 {
            self.up[i]
        } else if i > 0 && j == i - 1 {
            self.down[i]
        } else {
            0.0
        }
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        let n = self.size();
        let lo = i.saturating_sub(1);
        let hi = (i + 1).min(n - 1);
        (lo..=hi).map(|j| self.entry(i, j)).sum()
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.size();
        (0..n).map(|i| (0..n).map(|j| self.entry(i, j)).collect()).collect()
    }

    /// Row vector times matrix, `mu M`.
    pub fn apply(&self, mu: &[f64]) -> Vec<f64> {
        let n = self.size();
        assert_eq!(mu.len(), n, "distribution length must match the matrix");
        (0..n)
            .map(|j| {
                let mut s = mu[j] * (1.0 - self.up[j] - self.down[j]);
                if j > 0 {
                    s += mu[j - 1] * self.up[j - 1];
                }
                if j + 1 < n {
                    s += mu[j + 1] * self.down[j + 1];
                }
                s
            })
            .collect()
    }
}

/// Upward-to-downward jump ratio `b = p (1 - U) / ((1 - p) U)`.
pub fn jump_ratio(p: f64, u: f64) -> f64 {
    p * (1.0 - u) / ((1.0 - p) * u)
}

fn check_slot_inputs(p: f64, u: f64, k: u32) -> Result<()> {
    check(p > 0.0 && p < 1.0, "p", p, "must lie in (0, 1)")?;
    check(k >= 1, "K", k as f64, "must be >= 1")?;
    if u == 0.0 {
        return Err(Error::DegenerateCoverage { q: f64::NAN });
    }
    check(u > 0.0 && u <= 1.0, "U", u, "must lie in (0, 1]")
}

/// Unnormalized weights `1, b, .., b^{K-1}, (1-p) b^K` rescaled so the
/// largest is one.
fn truncated_geometric_weights(p: f64, b: f64, k: usize) -> Vec<f64> {
    if b == 0.0 {
        let mut w = vec![0.0; k + 1];
        w[0] = 1.0;
        return w;
    }
    let lb = b.ln();
    let top = if lb > 0.0 { k as f64 * lb + (1.0 - p).ln().min(0.0) } else { 0.0 };
    let top = if lb > 0.0 { top.max((k as f64 - 1.0) * lb) } else { top };
    let mut w: Vec<f64> = (0..k).map(|j| (j as f64 * lb - top).exp()).collect();
    w.push((1.0 - p) * (k as f64 * lb - top).exp());
    w
}

/// Stationary law of the homogeneous chain with success probability `u`:
/// `nu_k ~ b^k` for `k < K` and `nu_K ~ (1 - p) b^K`.
pub fn slot_stationary(p: f64, u: f64, k: u32) -> Result<Vec<f64>> {
    check_slot_inputs(p, u, k)?;
    let b = jump_ratio(p, u);
    let mut w = truncated_geometric_weights(p, b, k as usize);
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    Ok(w)
}

/// `nu_0` alone. Summed term by term so `b` close to one needs no special
/// casing.
pub fn slot_empty_probability(p: f64, u: f64, k: u32) -> Result<f64> {
    check_slot_inputs(p, u, k)?;
    let b = jump_ratio(p, u);
    if b > 1.0 {
        return Ok(slot_stationary(p, u, k)?[0]);
    }
    let mut sum = 0.0;
    let mut term = 1.0;
    for _ in 0..k {
        sum += term;
        term *= b;
    }
    sum += (1.0 - p) * term;
    Ok(1.0 / sum)
}

/// The balance map `F(q) = 1 - (1 - p) nu_0(U(q))`.
pub fn map_f<C: CoverageFn + ?Sized>(q: f64, p: f64, k: u32, coverage: &C) -> Result<f64> {
    check(q > 0.0 && q <= 1.0, "q", q, "must lie in (0, 1]")?;
    let u = coverage.success_given_busy(q)?;
    if u <= 0.0 {
        return Err(Error::DegenerateCoverage { q });
    }
    Ok(1.0 - (1.0 - p) * slot_empty_probability(p, u.min(1.0), k)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    /// Stop once `|q_n - q_{n-1}|` drops below this.
    pub tol: f64,
    pub max_iterations: usize,
    /// Relaxation weight used after an oscillating trace is detected.
    pub damping: f64,
    /// Scan `q - F(q)` below the limit for an earlier root.
    pub verify_minimal: bool,
    pub scan_step: f64,
    pub fd_step: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iterations: 10_000,
            damping: 0.5,
            verify_minimal: true,
            scan_step: 1e-4,
            fd_step: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kpis {
    pub throughput: f64,
    pub loss_probability: f64,
    pub delay: f64,
    /// Loss-delay product.
    pub ld_product: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BufferDistribution {
    Truncated(Vec<f64>),
    Geometric { ratio: f64 },
}

impl BufferDistribution {
    pub fn pmf(&self, k: usize) -> f64 {
        match self {
            BufferDistribution::Truncated(v) => v.get(k).copied().unwrap_or(0.0),
            BufferDistribution::Geometric { ratio } => ratio.powi(k as i32) * (1.0 - ratio),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            BufferDistribution::Truncated(v) => v.iter().enumerate().map(|(k, x)| k as f64 * x).sum(),
            BufferDistribution::Geometric { ratio } => ratio / (1.0 - ratio),
        }
    }

    /// First `n` probabilities.
    pub fn head(&self, n: usize) -> Vec<f64> {
        (0..n).map(|k| self.pmf(k)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    pub p: f64,
    pub buffer: Buffer,
    pub q_star: f64,
    /// `V_T(q*)`.
    pub coverage: f64,
    pub u_star: f64,
    pub b: f64,
    pub distribution: BufferDistribution,
    pub kpis: Kpis,
    pub iterations: usize,
    pub trace: Vec<f64>,
    pub converged: bool,
    /// `None` when the scan was skipped.
    pub minimal_solution: Option<bool>,
    /// `F'(q*) < 1` (finite K) or `V_T'(q*) > 0` (no bound).
    pub locally_stable: bool,
    pub damped: bool,
    /// `|F(q*) - q*|`.
    pub residual: f64,
}

impl EquilibriumSolution {
    pub fn pi(&self) -> Option<&[f64]> {
        match &self.distribution {
            BufferDistribution::Truncated(v) => Some(v),
            BufferDistribution::Geometric { .. } => None,
        }
    }
}

struct Iteration {
    q: f64,
    trace: Vec<f64>,
    damped: bool,
}

fn iterate<G>(start: f64, settings: &SolverSettings, mut map: G) -> Result<Iteration>
where
    G: FnMut(f64) -> Result<Option<f64>>,
{
    let mut q = start;
    let mut trace = vec![q];
    let mut damped = false;
    let mut last_sign = 0.0_f64;
    let mut flips = 0;
    let mut last_step = f64::INFINITY;

    for _ in 0..settings.max_iterations {
        let Some(f) = map(q)? else {
            return Ok(Iteration { q: f64::NAN, trace, damped });
        };
        let next = if damped { (1.0 - settings.damping) * q + settings.damping * f } else { f };
        let step = next - q;
        let sign = step.signum();
        if step != 0.0 && last_sign != 0.0 && sign != last_sign {
            flips += 1;
        } else {
            flips = 0;
        }
        if step != 0.0 {
            last_sign = sign;
        }
        if flips >= 3 && !damped {
            damped = true;
            flips = 0;
        }
        q = next;
        trace.push(q);
        last_step = step.abs();
        if last_step < settings.tol {
            return Ok(Iteration { q, trace, damped });
        }
    }
    Err(Error::NonConvergence {
        iterations: settings.max_iterations,
        last_step,
        trace,
    })
}

/// Minimal fixed point of `q = F(q)` for a finite buffer `K >= 1`, iterating
/// from `q_0 = p`.
pub fn solve_busy<C: CoverageFn + ?Sized>(p: f64, k: u32, coverage: &C, settings: &SolverSettings) -> Result<EquilibriumSolution> {
    check(p > 0.0 && p < 1.0, "p", p, "must lie in (0, 1)")?;
    check(k >= 1, "K", k as f64, "must be >= 1")?;

    let f = |q: f64| map_f(q, p, k, coverage);
    let it = iterate(p, settings, |q| f(q.min(1.0)).map(Some))?;
    let q_star = it.q.min(1.0);
    let residual = (f(q_star)? - q_star).abs();

    let h = settings.fd_step;
    let lo = (q_star - h).max(p);
    let hi = (q_star + h).min(1.0);
    let slope = if hi > lo { (f(hi)? - f(lo)?) / (hi - lo) } else { 0.0 };

    let minimal_solution = if settings.verify_minimal {
        let mut minimal = true;
        let mut q = p;
        while q < q_star - settings.scan_step {
            if q - f(q)? >= 0.0 {
                minimal = false;
                break;
            }
            q += settings.scan_step;
        }
        Some(minimal)
    } else {
        None
    };

    let v = coverage.coverage(q_star)?;
    let u_star = (v / q_star).min(1.0);
    let pi = slot_stationary(p, u_star, k)?;
    let kpis = finite_kpis(p, &pi);
    Ok(EquilibriumSolution {
        p,
        buffer: Buffer::Finite(k),
        q_star,
        coverage: v,
        u_star,
        b: jump_ratio(p, u_star),
        distribution: BufferDistribution::Truncated(pi),
        kpis,
        iterations: it.trace.len() - 1,
        trace: it.trace,
        converged: true,
        minimal_solution,
        locally_stable: slope < 1.0,
        damped: it.damped,
        residual,
    })
}

/// Minimal solution of `V_T(q) = p` via `q_n = p / U(q_{n-1})`; returns
/// [`Error::Infeasible`] when the iteration leaves `(0, 1]`.
pub fn solve_busy_infinite<C: CoverageFn + ?Sized>(p: f64, coverage: &C, settings: &SolverSettings) -> Result<EquilibriumSolution> {
    check(p > 0.0 && p < 1.0, "p", p, "must lie in (0, 1)")?;
    let infeasible = || -> Result<Error> {
        Ok(Error::Infeasible {
            p,
            p_c: critical_probability(coverage)?,
        })
    };

    let it = iterate(p, settings, |q| {
        let u = coverage.success_given_busy(q)?;
        let next = p / u;
        Ok((next.is_finite() && next > 0.0 && next <= 1.0).then_some(next))
    });
    let it = match it {
        Ok(it) if it.q.is_nan() => return Err(infeasible()?),
        Ok(it) => it,
        Err(Error::NonConvergence { trace, .. }) if trace.windows(2).all(|w| w[1] >= w[0]) => {
            // Creeping towards q = 1 without settling: no balance point.
            return Err(infeasible()?);
        }
        Err(e) => return Err(e),
    };
    let q_star = it.q;
    let v = coverage.coverage(q_star)?;
    let residual = (p * q_star / v - q_star).abs();

    let h = settings.fd_step;
    let lo = (q_star - h).max(f64::MIN_POSITIVE);
    let hi = (q_star + h).min(1.0);
    let slope = (coverage.coverage(hi)? - coverage.coverage(lo)?) / (hi - lo);

    let minimal_solution = if settings.verify_minimal {
        let mut minimal = true;
        let mut q = p;
        while q < q_star - settings.scan_step {
            if coverage.coverage(q)? >= p {
                minimal = false;
                break;
            }
            q += settings.scan_step;
        }
        Some(minimal)
    } else {
        None
    };

    let ratio = limiting_geometric_ratio(p, q_star)?;
    let delay = (q_star - p) / ((1.0 - q_star) * p);
    Ok(EquilibriumSolution {
        p,
        buffer: Buffer::Infinite,
        q_star,
        coverage: v,
        u_star: v / q_star,
        b: ratio,
        distribution: BufferDistribution::Geometric { ratio },
        kpis: Kpis {
            throughput: p,
            loss_probability: 0.0,
            delay,
            ld_product: 0.0,
        },
        iterations: it.trace.len() - 1,
        trace: it.trace,
        converged: true,
        minimal_solution,
        locally_stable: slope > 0.0,
        damped: it.damped,
        residual,
    })
}

/// Pure-loss operating point: the link is busy exactly on arrivals.
pub fn solve_pure_loss<C: CoverageFn + ?Sized>(p: f64, coverage: &C) -> Result<EquilibriumSolution> {
    check(p > 0.0 && p < 1.0, "p", p, "must lie in (0, 1)")?;
    let v = coverage.coverage(p)?;
    let loss = 1.0 - v / p;
    Ok(EquilibriumSolution {
        p,
        buffer: Buffer::Zero,
        q_star: p,
        coverage: v,
        u_star: v / p,
        b: 0.0,
        distribution: BufferDistribution::Truncated(vec![1.0]),
        kpis: Kpis {
            throughput: v,
            loss_probability: loss,
            delay: 0.0,
            ld_product: 0.0,
        },
        iterations: 0,
        trace: vec![p],
        converged: true,
        minimal_solution: Some(true),
        locally_stable: true,
        damped: false,
        residual: 0.0,
    })
}

/// Dispatches on the buffer capacity.
pub fn solve<C: CoverageFn + ?Sized>(traffic: &TrafficParams, coverage: &C, settings: &SolverSettings) -> Result<EquilibriumSolution> {
    match traffic.buffer() {
        Buffer::Zero => solve_pure_loss(traffic.p(), coverage),
        Buffer::Finite(k) => solve_busy(traffic.p(), k, coverage, settings),
        Buffer::Infinite => solve_busy_infinite(traffic.p(), coverage, settings),
    }
}

/// Limiting buffer distribution: `pi_k = b^k pi_0` for `k < K`,
/// `pi_K = (1 - p) b^K pi_0`, with `pi_0 = (1 - q*) / (1 - p)`.
pub fn limiting_pi(p: f64, q_star: f64, u_star: f64, k: u32) -> Result<Vec<f64>> {
    check(p > 0.0 && p < 1.0, "p", p, "must lie in (0, 1)")?;
    check(q_star > p && q_star < 1.0, "q_star", q_star, "must lie in (p, 1)")?;
    check(u_star > 0.0 && u_star <= 1.0, "u_star", u_star, "must lie in (0, 1]")?;
    check(k >= 1, "K", k as f64, "must be >= 1")?;
    let b = jump_ratio(p, u_star);
    let pi0 = (1.0 - q_star) / (1.0 - p);
    let mut pi: Vec<f64> = (0..k as i32).map(|j| b.powi(j) * pi0).collect();
    pi.push((1.0 - p) * b.powi(k as i32) * pi0);
    Ok(pi)
}

/// Ratio `(q* - p) / (1 - p)` of the geometric law without a buffer bound.
pub fn limiting_geometric_ratio(p: f64, q_star: f64) -> Result<f64> {
    check(p > 0.0 && p < 1.0, "p", p, "must lie in (0, 1)")?;
    check(q_star >= p && q_star < 1.0, "q_star", q_star, "must lie in [p, 1)")?;
    Ok((q_star - p) / (1.0 - p))
}

/// Mean delay from the closed expression in terms of `q*` and `V_T(q*)`.
pub fn delay_formula(p: f64, q_star: f64, v: f64, k: u32) -> f64 {
    let k = k as f64;
    let denom = p * (v - p * q_star);
    let numer = v * (q_star - v) - q_star * k * (p - v);
    if numer == 0.0 {
        0.0
    } else {
        numer / denom
    }
}

fn finite_kpis(p: f64, pi: &[f64]) -> Kpis {
    let loss = *pi.last().expect("non-empty distribution");
    // Equals `delay_formula` at the fixed point, without its cancellation
    // between `V` and `p` when losses are tiny.
    let delay = pi.iter().enumerate().map(|(j, x)| j as f64 * x).sum::<f64>() / p;
    Kpis {
        throughput: p * (1.0 - loss),
        loss_probability: loss,
        delay,
        ld_product: loss * delay,
    }
}

/// Throughput, loss probability, delay and their product for a solution.
pub fn kpis(solution: &EquilibriumSolution) -> Result<Kpis> {
    match (&solution.buffer, &solution.distribution) {
        (Buffer::Finite(_), BufferDistribution::Truncated(pi)) => Ok(finite_kpis(solution.p, pi)),
        (Buffer::Infinite, _) => {
            if !solution.converged || solution.q_star >= 1.0 {
                return Err(Error::Infeasible {
                    p: solution.p,
                    p_c: f64::NAN,
                });
            }
            Ok(solution.kpis)
        }
        _ => Ok(solution.kpis),
    }
}

/// Nonhomogeneous evolution of the buffer law.
#[derive(Debug, Clone)]
pub struct Evolution {
    /// `q_0 = p, q_1, .., q_n`.
    pub q: Vec<f64>,
    pub u: Vec<f64>,
    /// `pi^0, .., pi^n`.
    pub pi: Vec<Vec<f64>>,
    /// Total variation distance of `pi^n` to the limit.
    pub tv: Vec<f64>,
    pub limit: EquilibriumSolution,
}

pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().max(b.len());
    0.5 * (0..n)
        .map(|i| (a.get(i).copied().unwrap_or(0.0) - b.get(i).copied().unwrap_or(0.0)).abs())
        .sum::<f64>()
}

/// Runs `q_n = 1 - (1 - p) nu_0^{n-1}`, `U_n = V_T(q_n) / q_n`,
/// `pi^n = pi^{n-1} M_n` for `n_slots` slots. `initial` defaults to an empty
/// buffer.
pub fn evolve<C: CoverageFn + ?Sized>(
    p: f64,
    k: u32,
    coverage: &C,
    n_slots: usize,
    initial: Option<Vec<f64>>,
    settings: &SolverSettings,
) -> Result<Evolution> {
    let limit = solve_busy(p, k, coverage, settings)?;
    let target = limit.pi().expect("finite buffer").to_vec();

    let mut pi = match initial {
        Some(v) => {
            check(v.len() == k as usize + 1, "initial", v.len() as f64, "must have K + 1 entries")?;
            let total: f64 = v.iter().sum();
            check(v.iter().all(|x| *x >= 0.0) && (total - 1.0).abs() < 1e-9, "initial", total, "must be a probability vector")?;
            v
        }
        None => {
            let mut v = vec![0.0; k as usize + 1];
            v[0] = 1.0;
            v
        }
    };

    let mut q = p;
    let mut u = coverage.success_given_busy(q)?.min(1.0);
    let mut qs = Vec::with_capacity(n_slots + 1);
    let mut us = Vec::with_capacity(n_slots + 1);
    let mut pis = Vec::with_capacity(n_slots + 1);
    let mut tv = Vec::with_capacity(n_slots + 1);
    qs.push(q);
    us.push(u);
    tv.push(total_variation(&pi, &target));
    pis.push(pi.clone());

    for _ in 0..n_slots {
        q = 1.0 - (1.0 - p) * slot_empty_probability(p, u, k)?;
        u = coverage.success_given_busy(q)?.min(1.0);
        if u <= 0.0 {
            return Err(Error::DegenerateCoverage { q });
        }
        pi = TransitionMatrix::new(p, u, k)?.apply(&pi);
        qs.push(q);
        us.push(u);
        tv.push(total_variation(&pi, &target));
        pis.push(pi.clone());
    }

    Ok(Evolution {
        q: qs,
        u: us,
        pi: pis,
        tv,
        limit,
    })
}

/// Closed-form solution for `K = 1` with coverage `q / (1 + C q)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingleSlotClosed {
    pub q_star: f64,
    pub throughput: f64,
    pub delay: f64,
}

pub fn k1_closed(p: f64, c: f64) -> Result<SingleSlotClosed> {
    check(p > 0.0 && p < 1.0, "p", p, "must lie in (0, 1)")?;
    check(c > 0.0, "C", c, "must be positive")?;
    let cp = c * p;
    let root = ((1.0 - cp).powi(2) + 4.0 * cp * p).sqrt();
    // Rationalized forms of the quadratic roots; no cancellation at small p.
    let q_star = 2.0 * p / (root + 1.0 - cp);
    let throughput = 2.0 * p / (1.0 + cp + root);
    Ok(SingleSlotClosed {
        q_star,
        throughput,
        delay: (q_star - p) / (p * (1.0 - p)),
    })
}

/// Closed-form solution without a buffer bound for coverage `q / (1 + C q)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnboundedClosed {
    pub q_star: f64,
    pub b: f64,
    pub delay: f64,
}

pub fn critical_p(c: f64) -> f64 {
    1.0 / (1.0 + c)
}

pub fn kinf_closed(p: f64, c: f64) -> Result<UnboundedClosed> {
    check(p > 0.0 && p < 1.0, "p", p, "must lie in (0, 1)")?;
    check(c > 0.0, "C", c, "must be positive")?;
    let p_c = critical_p(c);
    if p > p_c {
        return Err(Error::Infeasible { p, p_c });
    }
    let cp = c * p;
    Ok(UnboundedClosed {
        q_star: p / (1.0 - cp),
        b: cp * p / ((1.0 - cp) * (1.0 - p)),
        delay: cp / (1.0 - p * (1.0 + c)),
    })
}

/// Largest threshold `T` for which the unbounded buffer is stable at rate `p`.
pub fn t_max(p: f64, delta: f64, w: f64) -> Result<f64> {
    check(p > 0.0 && p < 1.0, "p", p, "must lie in (0, 1)")?;
    check(delta > 1.0, "delta", delta, "must exceed 1")?;
    check(w > 0.0, "w", w, "must be positive")?;
    Ok(invert_scaled_tail((1.0 / p - 1.0) / w, delta)?.powf(delta))
}

/// Numerical critical rate `max_q V_T(q)`: a 64-point grid followed by a
/// golden-section refinement around the best node.
pub fn critical_probability<C: CoverageFn + ?Sized>(coverage: &C) -> Result<f64> {
    const N: usize = 64;
    let grid: Vec<f64> = (1..=N).map(|i| i as f64 / N as f64).collect();
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &q) in grid.iter().enumerate() {
        let v = coverage.coverage(q)?;
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    let mut a = if best == 0 { 1e-12 } else { grid[best - 1] };
    let mut b = if best + 1 < N { grid[best + 1] } else { 1.0 };
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = b - ratio * (b - a);
    let mut x2 = a + ratio * (b - a);
    let mut f1 = coverage.coverage(x1)?;
    let mut f2 = coverage.coverage(x2)?;
    while b - a > 1e-10 {
        if f1 < f2 {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + ratio * (b - a);
            f2 = coverage.coverage(x2)?;
        } else {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - ratio * (b - a);
            f1 = coverage.coverage(x1)?;
        }
    }
    Ok(best_v.max(f1).max(f2).max(coverage.coverage(1.0)?))
}

/// Asymptotic loss rate `p - V_T(p)` of the pure-loss system.
pub fn pure_loss_rate<C: CoverageFn + ?Sized>(p: f64, coverage: &C) -> Result<f64> {
    check((0.0..1.0).contains(&p), "p", p, "must lie in [0, 1)")?;
    if p == 0.0 {
        return Ok(0.0);
    }
    Ok(p - coverage.coverage(p)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BufferCheck {
    pub k: u32,
    pub max_loss: f64,
    pub max_delay: f64,
    pub feasible: bool,
    /// Grid points whose solver failed; such a K is never feasible.
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dimensioning {
    pub feasible: Vec<u32>,
    pub per_k: Vec<BufferCheck>,
    /// Loss nonincreasing in K at every grid rate.
    pub loss_monotone: bool,
    /// Delay nondecreasing in K at every grid rate.
    pub delay_monotone: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DimensioningRequest {
    pub p0: f64,
    pub max_loss: f64,
    pub max_delay: f64,
    pub grid_points: usize,
}

impl DimensioningRequest {
    pub fn new(p0: f64, max_loss: f64, max_delay: f64) -> Self {
        Self {
            p0,
            max_loss,
            max_delay,
            grid_points: 256,
        }
    }
}

/// Buffer sizes meeting both the loss and the delay bound for every rate
/// on a uniform grid over `(0, p0]`.
pub fn dimension_buffer<C: CoverageFn + ?Sized>(
    request: &DimensioningRequest,
    coverage: &C,
    candidates: &[u32],
    settings: &SolverSettings,
) -> Result<Dimensioning> {
    check(request.p0 > 0.0 && request.p0 < 1.0, "p0", request.p0, "must lie in (0, 1)")?;
    check(request.max_loss >= 0.0, "L_max", request.max_loss, "must be >= 0")?;
    check(request.max_delay > 0.0, "D_max", request.max_delay, "must be positive")?;
    check(request.grid_points >= 1, "grid_points", request.grid_points as f64, "must be >= 1")?;
    for &k in candidates {
        check(k >= 1, "K", k as f64, "candidates must be finite and >= 1")?;
    }

    let n = request.grid_points;
    let grid: Vec<f64> = (1..=n).map(|i| request.p0 * i as f64 / n as f64).collect();
    let mut ks = candidates.to_vec();
    ks.sort_unstable();
    ks.dedup();

    // Per K: the (loss, delay) curve over the grid, None on solver failure.
    let curves: Vec<Vec<Option<(f64, f64)>>> = ks
        .par_iter()
        .map(|&k| {
            grid.iter()
                .map(|&p| {
                    solve_busy(p, k, coverage, settings)
                        .ok()
                        .map(|s| (s.kpis.loss_probability, s.kpis.delay))
                })
                .collect()
        })
        .collect();

    let mut per_k = Vec::with_capacity(ks.len());
    let mut feasible = Vec::new();
    for (&k, curve) in ks.iter().zip(&curves) {
        let failures = curve.iter().filter(|x| x.is_none()).count();
        let max_loss = curve.iter().flatten().map(|x| x.0).fold(0.0, f64::max);
        let max_delay = curve.iter().flatten().map(|x| x.1).fold(0.0, f64::max);
        let ok = failures == 0 && max_loss <= request.max_loss && max_delay <= request.max_delay;
        if ok {
            feasible.push(k);
        }
        per_k.push(BufferCheck {
            k,
            max_loss,
            max_delay,
            feasible: ok,
            failures,
        });
    }

    let slack = 1e-12;
    let mut loss_monotone = true;
    let mut delay_monotone = true;
    for pair in curves.windows(2) {
        for (a, b) in pair[0].iter().zip(&pair[1]) {
            if let (Some(a), Some(b)) = (a, b) {
                loss_monotone &= b.0 <= a.0 + slack;
                delay_monotone &= b.1 >= a.1 - slack * a.1.max(1.0);
            }
        }
    }

    Ok(Dimensioning {
        feasible,
        per_k,
        loss_monotone,
        delay_monotone,
    })
}
