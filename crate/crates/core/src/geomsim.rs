//! Slot-level Monte Carlo over sampled Poisson deployments in the plane.
//!
//! A [`Scenario`] fixes base stations, users and a tagged link on a square
//! window (a flat torus by default). [`run`] then plays the buffer dynamics
//! of the tagged link slot by slot with Rayleigh fading, under one of four
//! interference models ([`SimMode`]).
//!
//! Interference comes from base stations. For the mean-field modes each
//! interfering station is active with probability `w q`, so the field is a
//! thinning of intensity `lambda1 w q = lambda0 q`, matching the analysis.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Exp1, Poisson};
use rayon::prelude::*;

use crate::coverage::CoverageFn;
use crate::equilibrium::slot_empty_probability;
use crate::error::{Error, Result};
use crate::model::{attenuation_normalized, Buffer, NetworkParams};

const RECEIVER_STREAM: u64 = 0x5245_4356;

/// SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of stream `stream` under `master`; distinct streams are decorrelated
/// by two SplitMix64 rounds before seeding ChaCha8.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    splitmix64(master ^ splitmix64(stream))
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn sim_error(msg: impl Into<String>) -> Error {
    Error::Simulation(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Window {
    pub side: f64,
    /// Wrap-around distances; without it the box has hard edges.
    pub wrap: bool,
}

impl Window {
    pub fn area(&self) -> f64 {
        self.side * self.side
    }

    pub fn center(&self) -> [f64; 2] {
        [0.5 * self.side, 0.5 * self.side]
    }

    pub fn distance(&self, a: [f64; 2], b: [f64; 2]) -> f64 {
        let mut dx = (a[0] - b[0]).abs();
        let mut dy = (a[1] - b[1]).abs();
        if self.wrap {
            dx = dx.min(self.side - dx);
            dy = dy.min(self.side - dy);
        }
        dx.hypot(dy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioSettings {
    pub window_side: f64,
    pub wrap: bool,
    /// Lower bound on `lambda1 L^2`.
    pub min_expected_bs: f64,
    pub max_attempts: u32,
}

impl Default for ScenarioSettings {
    fn default() -> Self {
        Self {
            window_side: 20.0,
            wrap: true,
            min_expected_bs: 50.0,
            max_attempts: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetLink {
    pub ue: usize,
    pub server: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interferer {
    pub bs: usize,
    /// Distance to the tagged receiver.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub params: NetworkParams,
    pub window: Window,
    pub bs_points: Vec<[f64; 2]>,
    pub ue_points: Vec<[f64; 2]>,
    pub target: TargetLink,
    pub interferers: Vec<Interferer>,
    pub seed: u64,
    /// Sampling attempts used (1 when the first draw had a usable cell).
    pub attempts: u32,
}

impl Scenario {
    pub fn link_v(&self) -> f64 {
        self.params.normalized_distance(self.target.distance)
    }

    pub fn interferer_vs(&self) -> Vec<f64> {
        self.interferers
            .iter()
            .map(|i| self.params.normalized_distance(i.distance))
            .collect()
    }

    /// Conditional coverage `V_T(q; x, Phi_x)` of this layout,
    /// with each interfering station active with probability `w q`.
    pub fn conditional_coverage(&self, q: f64) -> f64 {
        let theta = (self.params.w() * q).min(1.0);
        crate::coverage::conditional_coverage(&self.params, q, theta, self.link_v(), self.interferer_vs())
    }

    fn nearest_bs(&self, x: [f64; 2]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, &b) in self.bs_points.iter().enumerate() {
            let d = self.window.distance(x, b);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        best
    }

    /// One receiver per station: a uniformly chosen user of its cell, the
    /// tagged user for the server. A station with an empty cell gets a
    /// point drawn in its cell within its nearest-neighbour radius.
    pub fn cell_receivers(&self) -> Vec<[f64; 2]> {
        let n = self.bs_points.len();
        let mut rng = rng_for(derive_seed(self.seed, RECEIVER_STREAM));
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (i, &u) in self.ue_points.iter().enumerate() {
            members[self.nearest_bs(u)].push(i);
        }
        let mut out = Vec::with_capacity(n);
        for (k, cell) in members.iter().enumerate() {
            if k == self.target.server {
                out.push(self.ue_points[self.target.ue]);
                continue;
            }
            if !cell.is_empty() {
                out.push(self.ue_points[cell[rng.random_range(0..cell.len())]]);
                continue;
            }
            let bs = self.bs_points[k];
            let nn = self
                .bs_points
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != k)
                .map(|(_, &b)| self.window.distance(bs, b))
                .fold(f64::INFINITY, f64::min);
            let mut chosen = None;
            for _ in 0..256 {
                let r = nn * rng.random::<f64>().sqrt();
                let phi = std::f64::consts::TAU * rng.random::<f64>();
                let x = self.wrap_point([bs[0] + r * phi.cos(), bs[1] + r * phi.sin()]);
                if self.nearest_bs(x) == k {
                    chosen = Some(x);
                    break;
                }
            }
            // Inside half the nearest-neighbour distance the cell is certain.
            let fallback = self.wrap_point([bs[0] + 0.25 * nn, bs[1]]);
            out.push(chosen.unwrap_or(fallback));
        }
        out
    }

    fn wrap_point(&self, x: [f64; 2]) -> [f64; 2] {
        if self.window.wrap {
            [x[0].rem_euclid(self.window.side), x[1].rem_euclid(self.window.side)]
        } else {
            [x[0].clamp(0.0, self.window.side), x[1].clamp(0.0, self.window.side)]
        }
    }
}

fn poisson_count(rng: &mut ChaCha8Rng, mean: f64) -> Result<usize> {
    let dist = Poisson::new(mean).map_err(|e| sim_error(format!("Poisson mean {mean}: {e}")))?;
    Ok(dist.sample(rng) as usize)
}

fn uniform_points(rng: &mut ChaCha8Rng, n: usize, side: f64) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| [side * rng.random::<f64>(), side * rng.random::<f64>()])
        .collect()
}

/// Samples stations and users as independent Poisson processes on the
/// window, then tags a uniformly chosen user in the cell of the station
/// nearest the window center. Empty cells trigger a redraw under a derived
/// sub-seed.
pub fn sample_scenario(params: &NetworkParams, settings: &ScenarioSettings, seed: u64) -> Result<Scenario> {
    if params.dim() != 2 {
        return Err(sim_error(format!("the simulator supports d = 2 only, got d = {}", params.dim())));
    }
    let side = settings.window_side;
    if !(side > 0.0 && side.is_finite()) {
        return Err(sim_error(format!("window side must be positive, got {side}")));
    }
    let window = Window {
        side,
        wrap: settings.wrap,
    };
    let expected_bs = params.lambda1() * window.area();
    if expected_bs < settings.min_expected_bs {
        return Err(sim_error(format!(
            "expected station count {expected_bs} is below the minimum {}",
            settings.min_expected_bs
        )));
    }

    for attempt in 0..settings.max_attempts.max(1) {
        let sub_seed = if attempt == 0 { seed } else { derive_seed(seed, attempt as u64) };
        let mut rng = rng_for(sub_seed);
        let n_bs = poisson_count(&mut rng, expected_bs)?;
        let n_ue = poisson_count(&mut rng, params.lambda0() * window.area())?;
        if n_bs < 2 {
            continue;
        }
        let bs_points = uniform_points(&mut rng, n_bs, side);
        let ue_points = uniform_points(&mut rng, n_ue, side);

        let center = window.center();
        let server = (0..n_bs)
            .min_by(|&a, &b| window.distance(center, bs_points[a]).total_cmp(&window.distance(center, bs_points[b])))
            .expect("at least two stations");
        let s = bs_points[server];
        let cell: Vec<usize> = (0..n_ue)
            .filter(|&i| {
                let u = ue_points[i];
                let d0 = window.distance(u, s);
                bs_points
                    .iter()
                    .enumerate()
                    .all(|(j, &b)| j == server || window.distance(u, b) >= d0)
            })
            .collect();
        if cell.is_empty() {
            continue;
        }
        let ue = cell[rng.random_range(0..cell.len())];
        let x = ue_points[ue];
        let interferers = (0..n_bs)
            .filter(|&j| j != server)
            .map(|j| Interferer {
                bs: j,
                distance: window.distance(x, bs_points[j]),
            })
            .collect();
        return Ok(Scenario {
            params: *params,
            window,
            bs_points,
            ue_points,
            target: TargetLink {
                ue,
                server,
                distance: window.distance(x, s),
            },
            interferers,
            seed,
            attempts: attempt + 1,
        });
    }
    Err(sim_error(format!(
        "no user in the central cell after {} attempts (seed {seed})",
        settings.max_attempts
    )))
}

/// Busy probabilities `q_0 = p, q_1, ..` driving the adaptive mode. After
/// the recursion settles the last value is held.
#[derive(Debug, Clone, PartialEq)]
pub struct QSchedule {
    values: Vec<f64>,
}

impl QSchedule {
    pub fn constant(q: f64) -> Self {
        Self { values: vec![q] }
    }

    /// `q_n = 1 - (1 - p) nu_0(U_{n-1})` for finite capacity,
    /// `q_n = p / U(q_{n-1})` without a bound, `q_n = p` without a buffer.
    pub fn from_coverage<C: CoverageFn + ?Sized>(p: f64, buffer: Buffer, coverage: &C, max_len: usize) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(sim_error(format!("adaptive schedule needs p in (0, 1), got {p}")));
        }
        let mut values = vec![p];
        if buffer == Buffer::Zero {
            return Ok(Self { values });
        }
        let mut q = p;
        while values.len() < max_len.max(1) {
            let u = coverage.success_given_busy(q)?.min(1.0);
            let next = match buffer {
                Buffer::Finite(k) => 1.0 - (1.0 - p) * slot_empty_probability(p, u, k)?,
                _ => (p / u).min(1.0),
            };
            values.push(next);
            if (next - q).abs() < 1e-15 {
                break;
            }
            q = next;
        }
        Ok(Self { values })
    }

    pub fn at(&self, n: usize) -> f64 {
        self.values[n.min(self.values.len() - 1)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SimMode {
    /// The link transmits only fresh arrivals; stations interfere with
    /// probability `w p`.
    PureLoss,
    /// Every station runs its own buffer with arrival probability `p w`.
    Exact,
    /// Stations interfere independently with probability `w q`.
    MeanFieldFixed(f64),
    /// As above with `q_n` following the schedule.
    MeanFieldAdaptive(QSchedule),
}

impl SimMode {
    pub fn name(&self) -> &'static str {
        match self {
            SimMode::PureLoss => "pure_loss",
            SimMode::Exact => "exact",
            SimMode::MeanFieldFixed(_) => "meanfield_fixed",
            SimMode::MeanFieldAdaptive(_) => "meanfield_adaptive",
        }
    }
}

/// Whether the layout is held fixed over the run or redrawn each slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Geometry {
    Quenched,
    /// Fresh link distance and interferer field every slot, drawn in
    /// normalized coordinates over a disk of the window's expected station
    /// count. Not available in exact mode.
    Annealed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSettings {
    pub n_slots: u64,
    pub warmup_fraction: f64,
    pub batches: usize,
    pub geometry: Geometry,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            n_slots: 100_000,
            warmup_fraction: 0.1,
            batches: 16,
            geometry: Geometry::Quenched,
        }
    }
}

impl RunSettings {
    pub fn with_slots(n_slots: u64) -> Self {
        Self {
            n_slots,
            ..Self::default()
        }
    }

    pub fn warmup_slots(&self) -> u64 {
        (self.n_slots as f64 * self.warmup_fraction).floor() as u64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchSums {
    pub slots: u64,
    pub arrivals: u64,
    pub busy: u64,
    pub successes: u64,
    pub losses: u64,
    pub buffer_sum: u64,
}

/// Whole-run packet bookkeeping of the tagged link, warm-up included.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Conservation {
    pub arrivals: u64,
    pub delivered: u64,
    pub buffered: u64,
    pub lost: u64,
}

impl Conservation {
    pub fn holds(&self) -> bool {
        self.arrivals == self.delivered + self.buffered + self.lost
    }

    fn merge(self, o: Self) -> Self {
        Self {
            arrivals: self.arrivals + o.arrivals,
            delivered: self.delivered + o.delivered,
            buffered: self.buffered + o.buffered,
            lost: self.lost + o.lost,
        }
    }
}

/// The counter `D_n = (D_{n-1} + A_n - Z_n)^+` tracked next to `B_n + L_n`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LindleySummary {
    pub final_value: u64,
    pub max: u64,
    /// Slots where `D_n != B_n + L_n`.
    pub violations: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimStats {
    /// Recorded slots after warm-up.
    pub slots: u64,
    pub warmup: u64,
    pub histogram: Vec<u64>,
    pub arrivals: u64,
    pub busy_slots: u64,
    pub successes: u64,
    pub losses: u64,
    pub buffer_sum: u64,
    /// Active interferers summed over sampled slots.
    pub interferer_active: u64,
    /// Interferers present summed over the same slots.
    pub interferer_present: u64,
    pub lindley: LindleySummary,
    pub conservation: Conservation,
    pub batches: Vec<BatchSums>,
    pub replications: u64,
}

impl SimStats {
    fn empty(batches: usize, capacity: Option<u64>) -> Self {
        Self {
            slots: 0,
            warmup: 0,
            histogram: vec![0; capacity.map_or(1, |k| k as usize + 1)],
            arrivals: 0,
            busy_slots: 0,
            successes: 0,
            losses: 0,
            buffer_sum: 0,
            interferer_active: 0,
            interferer_present: 0,
            lindley: LindleySummary::default(),
            conservation: Conservation::default(),
            batches: vec![BatchSums::default(); batches.max(1)],
            replications: 1,
        }
    }

    /// Mean of `Z_n` over recorded slots.
    pub fn coverage_rate(&self) -> f64 {
        self.successes as f64 / self.slots as f64
    }

    /// Successes per busy slot.
    pub fn conditional_success(&self) -> f64 {
        self.successes as f64 / self.busy_slots as f64
    }

    pub fn mean_buffer(&self) -> f64 {
        self.buffer_sum as f64 / self.slots as f64
    }

    pub fn pi_hat(&self) -> Vec<f64> {
        self.histogram.iter().map(|&c| c as f64 / self.slots as f64).collect()
    }

    pub fn interferer_busy_fraction(&self) -> f64 {
        self.interferer_active as f64 / self.interferer_present as f64
    }

    /// Associative combination of independent runs; batches concatenate.
    pub fn merge(mut self, other: &SimStats) -> SimStats {
        if self.histogram.len() < other.histogram.len() {
            self.histogram.resize(other.histogram.len(), 0);
        }
        for (a, b) in self.histogram.iter_mut().zip(&other.histogram) {
            *a += b;
        }
        self.slots += other.slots;
        self.warmup += other.warmup;
        self.arrivals += other.arrivals;
        self.busy_slots += other.busy_slots;
        self.successes += other.successes;
        self.losses += other.losses;
        self.buffer_sum += other.buffer_sum;
        self.interferer_active += other.interferer_active;
        self.interferer_present += other.interferer_present;
        self.lindley = LindleySummary {
            final_value: self.lindley.final_value + other.lindley.final_value,
            max: self.lindley.max.max(other.lindley.max),
            violations: self.lindley.violations + other.lindley.violations,
        };
        self.conservation = self.conservation.merge(other.conservation);
        self.batches.extend_from_slice(&other.batches);
        self.replications += other.replications;
        self
    }
}

/// Buffer and loss state of one link.
#[derive(Debug, Clone, Copy, Default)]
struct LinkState {
    b: u64,
    lost: u64,
    delivered: u64,
    arrived: u64,
    lindley: u64,
}

impl LinkState {
    fn busy(&self, arrival: bool) -> bool {
        arrival || self.b > 0
    }

    /// Applies one slot and returns whether a packet was dropped. With a
    /// full buffer the arrival is dropped and a success frees one place.
    fn update(&mut self, capacity: Option<u64>, arrival: bool, success: bool) -> bool {
        let a = arrival as u64;
        let z = success as u64;
        let lost = match capacity {
            Some(0) => {
                arrival && !success
            }
            Some(k) if self.b == k && arrival => {
                self.b = k - z;
                true
            }
            _ => {
                self.b = self.b + a - z;
                false
            }
        };
        self.arrived += a;
        self.delivered += z;
        self.lost += lost as u64;
        self.lindley = (self.lindley + a).saturating_sub(z);
        lost
    }
}

fn capacity(buffer: Buffer) -> Option<u64> {
    match buffer {
        Buffer::Zero => Some(0),
        Buffer::Finite(k) => Some(k as u64),
        Buffer::Infinite => None,
    }
}

struct Recorder {
    stats: SimStats,
    warmup: u64,
    recorded: u64,
}

impl Recorder {
    fn new(settings: &RunSettings, cap: Option<u64>) -> Self {
        let warmup = settings.warmup_slots();
        let mut stats = SimStats::empty(settings.batches, cap);
        stats.warmup = warmup;
        Self {
            stats,
            warmup,
            recorded: settings.n_slots - warmup,
        }
    }

    fn record(&mut self, n: u64, link: &LinkState, arrival: bool, busy: bool, success: bool, lost: bool) {
        let s = &mut self.stats;
        if link.lindley != link.b + link.lost {
            s.lindley.violations += 1;
        }
        s.lindley.max = s.lindley.max.max(link.lindley);
        if n < self.warmup {
            return;
        }
        let b = link.b as usize;
        if b >= s.histogram.len() {
            s.histogram.resize(b + 1, 0);
        }
        s.histogram[b] += 1;
        s.slots += 1;
        s.arrivals += arrival as u64;
        s.busy_slots += busy as u64;
        s.successes += success as u64;
        s.losses += lost as u64;
        s.buffer_sum += link.b;
        let nb = s.batches.len() as u64;
        let idx = ((n - self.warmup) * nb / self.recorded) as usize;
        let batch = &mut s.batches[idx];
        batch.slots += 1;
        batch.arrivals += arrival as u64;
        batch.busy += busy as u64;
        batch.successes += success as u64;
        batch.losses += lost as u64;
        batch.buffer_sum += link.b;
    }

    fn finish(mut self, link: &LinkState) -> SimStats {
        self.stats.lindley.final_value = link.lindley;
        self.stats.conservation = Conservation {
            arrivals: link.arrived,
            delivered: link.delivered,
            buffered: link.b,
            lost: link.lost,
        };
        self.stats
    }
}

/// Fast path for the common integer exponents.
fn attenuation(params: &NetworkParams, v: f64) -> f64 {
    let kappa = params.kappa();
    let delta = params.delta();
    if delta == 2.0 {
        let d = v * v + kappa;
        if d == 0.0 {
            f64::INFINITY
        } else {
            (1.0 + kappa) / d
        }
    } else {
        attenuation_normalized(v, kappa, delta)
    }
}

/// Draws the tagged link's success given interferers active with
/// probability `theta`; stops drawing fading once failure is certain.
struct FieldSampler {
    fading: Exp<f64>,
    threshold: f64,
    sigma2: f64,
    link_a: f64,
    interferer_a: Vec<f64>,
    v_max: f64,
}

impl FieldSampler {
    fn new(scenario: &Scenario) -> Result<Self> {
        let p = &scenario.params;
        Ok(Self {
            fading: Exp::new(p.mu()).map_err(|e| sim_error(format!("fading rate: {e}")))?,
            threshold: p.threshold(),
            sigma2: p.sigma2(),
            link_a: attenuation(p, scenario.link_v()),
            interferer_a: scenario.interferer_vs().into_iter().map(|v| attenuation(p, v)).collect(),
            v_max: p.lambda1() * scenario.window.area(),
        })
    }

    /// Returns `(success, active interferers)`.
    fn quenched(&self, rng: &mut ChaCha8Rng, theta: f64) -> (bool, usize) {
        let signal = self.fading.sample(rng) * self.link_a;
        let budget = signal / self.threshold - self.sigma2;
        let mut interference = 0.0;
        let mut active = 0;
        let mut failed = budget <= 0.0;
        for &a in &self.interferer_a {
            if rng.random::<f64>() < theta {
                active += 1;
                if !failed {
                    interference += self.fading.sample(rng) * a;
                    failed = interference >= budget;
                }
            }
        }
        (!failed, active)
    }

    fn annealed(&self, rng: &mut ChaCha8Rng, params: &NetworkParams, theta: f64) -> bool {
        let v_link: f64 = Exp1.sample(rng);
        if v_link >= self.v_max {
            return true;
        }
        let signal = self.fading.sample(rng) * attenuation(params, v_link);
        let budget = signal / self.threshold - self.sigma2;
        if budget <= 0.0 {
            return false;
        }
        if theta <= 0.0 {
            return true;
        }
        let gaps = Exp::new(theta).expect("positive rate");
        let mut u = v_link;
        let mut interference = 0.0;
        loop {
            u += gaps.sample(rng);
            if u >= self.v_max {
                return true;
            }
            interference += self.fading.sample(rng) * attenuation(params, u);
            if interference >= budget {
                return false;
            }
        }
    }
}

fn activity(w: f64, q: f64, what: &str) -> Result<f64> {
    let theta = w * q;
    if theta > 1.0 + 1e-12 {
        return Err(sim_error(format!(
            "{what}: station activity w q = {theta} exceeds 1; the mean-field field cannot be thinned from the station process"
        )));
    }
    Ok(theta.min(1.0))
}

/// Checks a run request without sampling anything; `w = lambda0 / lambda1`.
pub fn validate_run(p: f64, buffer: Buffer, mode: &SimMode, settings: &RunSettings, w: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(sim_error(format!("p must lie in [0, 1), got {p}")));
    }
    if buffer == Buffer::Finite(0) {
        return Err(sim_error("finite capacity must be >= 1 (use K = 0 for no buffer)"));
    }
    if settings.n_slots == 0 {
        return Err(sim_error("n_slots must be >= 1"));
    }
    if !(0.0..1.0).contains(&settings.warmup_fraction) {
        return Err(sim_error(format!("warm-up fraction must lie in [0, 1), got {}", settings.warmup_fraction)));
    }
    if settings.batches == 0 || settings.n_slots - settings.warmup_slots() < settings.batches as u64 {
        return Err(sim_error("need at least one recorded slot per batch"));
    }
    match mode {
        SimMode::PureLoss => {
            if buffer != Buffer::Zero {
                return Err(sim_error(format!("pure_loss mode requires K = 0, got K = {buffer}")));
            }
            activity(w, p, "pure_loss")?;
        }
        SimMode::Exact => {
            let rho = p * w;
            if rho >= 1.0 {
                return Err(sim_error(format!("exact mode needs rho = p w < 1, got rho = {rho}")));
            }
            if settings.geometry == Geometry::Annealed {
                return Err(sim_error("exact mode needs a quenched layout"));
            }
        }
        SimMode::MeanFieldFixed(q) => {
            if !(0.0..=1.0).contains(q) {
                return Err(sim_error(format!("meanfield_fixed q must lie in [0, 1], got {q}")));
            }
            activity(w, *q, "meanfield_fixed")?;
        }
        SimMode::MeanFieldAdaptive(schedule) => {
            activity(w, schedule.max(), "meanfield_adaptive")?;
        }
    }
    Ok(())
}

/// Simulates `settings.n_slots` slots of the tagged link.
pub fn run(scenario: &Scenario, p: f64, buffer: Buffer, mode: &SimMode, settings: &RunSettings, seed: u64) -> Result<SimStats> {
    let params = scenario.params;
    let w = params.w();
    validate_run(p, buffer, mode, settings, w)?;
    if let SimMode::Exact = mode {
        return run_exact(scenario, p, buffer, settings, seed);
    }

    let cap = capacity(buffer);
    let mut rng = rng_for(seed);
    let sampler = FieldSampler::new(scenario)?;
    let mut link = LinkState::default();
    let mut rec = Recorder::new(settings, cap);
    let n_interferers = scenario.interferers.len() as u64;

    for n in 0..settings.n_slots {
        let theta = match mode {
            SimMode::PureLoss => activity(w, p, "pure_loss")?,
            SimMode::MeanFieldFixed(q) => activity(w, *q, "meanfield_fixed")?,
            SimMode::MeanFieldAdaptive(s) => activity(w, s.at(n as usize + 1), "meanfield_adaptive")?,
            SimMode::Exact => unreachable!("handled above"),
        };
        let arrival = rng.random::<f64>() < p;
        let busy = link.busy(arrival);
        let mut success = false;
        if busy {
            success = match settings.geometry {
                Geometry::Quenched => {
                    let (ok, active) = sampler.quenched(&mut rng, theta);
                    if n >= rec.warmup {
                        rec.stats.interferer_active += active as u64;
                        rec.stats.interferer_present += n_interferers;
                    }
                    ok
                }
                Geometry::Annealed => sampler.annealed(&mut rng, &params, theta),
            };
        }
        let lost = link.update(cap, arrival, success);
        rec.record(n, &link, arrival, busy, success, lost);
    }
    Ok(rec.finish(&link))
}

fn run_exact(scenario: &Scenario, p: f64, buffer: Buffer, settings: &RunSettings, seed: u64) -> Result<SimStats> {
    let params = scenario.params;
    let n = scenario.bs_points.len();
    let server = scenario.target.server;
    let receivers = scenario.cell_receivers();
    let fading = Exp::new(params.mu()).map_err(|e| sim_error(format!("fading rate: {e}")))?;
    let t = params.threshold();
    let sigma2 = params.sigma2();
    let rho = p * params.w();

    // gain[k * n + j]: attenuation from station j to the receiver of k.
    let mut gain = vec![0.0; n * n];
    for (k, &r) in receivers.iter().enumerate() {
        for (j, &b) in scenario.bs_points.iter().enumerate() {
            let v = params.normalized_distance(scenario.window.distance(r, b));
            gain[k * n + j] = attenuation(&params, v);
        }
    }

    let cap = capacity(buffer);
    let mut rng = rng_for(seed);
    let mut links = vec![LinkState::default(); n];
    let mut arrivals = vec![false; n];
    let mut busy_set: Vec<usize> = Vec::with_capacity(n);
    let mut success = vec![false; n];
    let mut rec = Recorder::new(settings, cap);

    for slot in 0..settings.n_slots {
        busy_set.clear();
        for k in 0..n {
            let prob = if k == server { p } else { rho };
            arrivals[k] = rng.random::<f64>() < prob;
            if links[k].busy(arrivals[k]) {
                busy_set.push(k);
            }
        }
        success.iter_mut().for_each(|s| *s = false);
        for &k in &busy_set {
            let row = &gain[k * n..(k + 1) * n];
            let budget = fading.sample(&mut rng) * row[k] / t - sigma2;
            let mut interference = 0.0;
            let mut ok = budget > 0.0;
            for &j in &busy_set {
                if !ok {
                    break;
                }
                if j != k {
                    interference += fading.sample(&mut rng) * row[j];
                    ok = interference < budget;
                }
            }
            success[k] = ok;
        }
        let target_busy = busy_set.contains(&server);
        let mut target_lost = false;
        for k in 0..n {
            let lost = links[k].update(cap, arrivals[k], success[k]);
            if k == server {
                target_lost = lost;
            }
        }
        if slot >= rec.warmup {
            let others = busy_set.iter().filter(|&&k| k != server).count();
            rec.stats.interferer_active += others as u64;
            rec.stats.interferer_present += n as u64 - 1;
        }
        rec.record(slot, &links[server], arrivals[server], target_busy, success[server], target_lost);
    }
    Ok(rec.finish(&links[server]))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    /// Batch-means standard error; NaN with fewer than two batches.
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KpiEstimates {
    pub throughput: Estimate,
    pub loss_probability: Estimate,
    pub delay: Estimate,
    pub conditional_success: Estimate,
    pub mean_buffer: f64,
    pub pi_hat: Vec<f64>,
    pub interferer_busy_fraction: f64,
}

fn batch_estimate(mean: f64, values: impl Iterator<Item = f64>) -> Estimate {
    let v: Vec<f64> = values.filter(|x| x.is_finite()).collect();
    let std_error = if v.len() < 2 {
        f64::NAN
    } else {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (var / v.len() as f64).sqrt()
    };
    Estimate { mean, std_error }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        if a == 0 {
            0.0
        } else {
            f64::NAN
        }
    } else {
        a as f64 / b as f64
    }
}

/// Point estimates from pooled counts, errors from batch means. The delay
/// uses Little's law, `E[B] / p`.
pub fn estimate_kpis(stats: &SimStats, p: f64) -> KpiEstimates {
    let delay = |buffer_sum: u64, slots: u64| {
        if buffer_sum == 0 {
            0.0
        } else {
            ratio(buffer_sum, slots) / p
        }
    };
    let cond = |s: u64, b: u64| if b == 0 { f64::NAN } else { s as f64 / b as f64 };
    let batches = &stats.batches;
    KpiEstimates {
        throughput: batch_estimate(ratio(stats.successes, stats.slots), batches.iter().map(|b| ratio(b.successes, b.slots))),
        loss_probability: batch_estimate(
            ratio(stats.losses, stats.arrivals),
            batches.iter().map(|b| if b.arrivals == 0 { f64::NAN } else { ratio(b.losses, b.arrivals) }),
        ),
        delay: batch_estimate(delay(stats.buffer_sum, stats.slots), batches.iter().map(|b| delay(b.buffer_sum, b.slots))),
        conditional_success: batch_estimate(cond(stats.successes, stats.busy_slots), batches.iter().map(|b| cond(b.successes, b.busy))),
        mean_buffer: ratio(stats.buffer_sum, stats.slots),
        pi_hat: stats.pi_hat(),
        interferer_busy_fraction: if stats.interferer_present == 0 { f64::NAN } else { stats.interferer_busy_fraction() },
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub index: u64,
    pub scenario_seed: u64,
    pub run_seed: u64,
    pub scenario_attempts: u32,
    /// `V_T(q; x, Phi_x) / q` of the sampled layout at the mode's `q`
    /// (`p` in pure-loss mode, the last scheduled value when adaptive);
    /// NaN in exact mode.
    pub lemma_success: f64,
    pub stats: SimStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationPlan {
    pub scenario: ScenarioSettings,
    pub run: RunSettings,
    pub master_seed: u64,
    pub count: u64,
}

/// Independent replications: replication `i` samples its layout under
/// `derive_seed(master, 2 i)` and its dynamics under `derive_seed(master,
/// 2 i + 1)`. Runs concurrently; results come back in index order.
pub fn run_replications(params: &NetworkParams, p: f64, buffer: Buffer, mode: &SimMode, plan: &ReplicationPlan) -> Result<Vec<Replication>> {
    validate_run(p, buffer, mode, &plan.run, params.w())?;
    (0..plan.count)
        .into_par_iter()
        .map(|i| {
            let scenario_seed = derive_seed(plan.master_seed, 2 * i);
            let run_seed = derive_seed(plan.master_seed, 2 * i + 1);
            let scenario = sample_scenario(params, &plan.scenario, scenario_seed)?;
            let stats = run(&scenario, p, buffer, mode, &plan.run, run_seed)?;
            let q = match mode {
                SimMode::PureLoss => Some(p),
                SimMode::MeanFieldFixed(q) => Some(*q),
                SimMode::MeanFieldAdaptive(s) => Some(s.at(usize::MAX)),
                SimMode::Exact => None,
            };
            let lemma_success = match q {
                Some(q) if q > 0.0 => scenario.conditional_coverage(q) / q,
                _ => f64::NAN,
            };
            Ok(Replication {
                index: i,
                scenario_seed,
                run_seed,
                scenario_attempts: scenario.attempts,
                lemma_success,
                stats,
            })
        })
        .collect()
}

/// Pools replications; `None` for an empty slice.
pub fn merge_replications(reps: &[Replication]) -> Option<SimStats> {
    let (first, rest) = reps.split_first()?;
    Some(rest.iter().fold(first.stats.clone(), |acc, r| acc.merge(&r.stats)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> NetworkParams {
        NetworkParams::builder().lambda0(2.0).calibrate_constant(4.0).unwrap().build().unwrap()
    }

    fn scenario() -> Scenario {
        let settings = ScenarioSettings {
            window_side: 10.0,
            ..ScenarioSettings::default()
        };
        sample_scenario(&params(), &settings, 7).unwrap()
    }

    #[test]
    fn seeds_are_mixed() {
        assert_ne!(derive_seed(1, 0), derive_seed(1, 1));
        assert_ne!(derive_seed(1, 0), derive_seed(2, 0));
        assert_eq!(derive_seed(5, 9), derive_seed(5, 9));
    }

    #[test]
    fn torus_distance_wraps() {
        let w = Window { side: 10.0, wrap: true };
        assert!((w.distance([0.5, 0.5], [9.5, 9.5]) - 2f64.sqrt()).abs() < 1e-12);
        let flat = Window { side: 10.0, wrap: false };
        assert!((flat.distance([0.5, 0.5], [9.5, 9.5]) - 9.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn interferers_are_farther_than_server() {
        let s = scenario();
        assert!(s.interferers.iter().all(|i| i.distance >= s.target.distance));
        assert_eq!(s.interferers.len() + 1, s.bs_points.len());
    }

    #[test]
    fn window_too_small_is_rejected() {
        let settings = ScenarioSettings {
            window_side: 2.0,
            ..ScenarioSettings::default()
        };
        assert!(sample_scenario(&params(), &settings, 1).is_err());
    }

    #[test]
    fn idle_link_stays_empty() {
        let s = scenario();
        let stats = run(&s, 0.0, Buffer::Finite(4), &SimMode::MeanFieldFixed(0.2), &RunSettings::with_slots(2_000), 3).unwrap();
        assert_eq!(stats.successes, 0);
        assert_eq!(stats.losses, 0);
        assert_eq!(stats.histogram[0], stats.slots);
        assert_eq!(stats.coverage_rate(), 0.0);
    }

    #[test]
    fn bookkeeping_is_exact() {
        let s = scenario();
        for (buffer, mode) in [
            (Buffer::Zero, SimMode::PureLoss),
            (Buffer::Finite(2), SimMode::MeanFieldFixed(0.4)),
            (Buffer::Infinite, SimMode::MeanFieldFixed(0.1)),
            (Buffer::Finite(3), SimMode::Exact),
        ] {
            let stats = run(&s, 0.2, buffer, &mode, &RunSettings::with_slots(3_000), 11).unwrap();
            assert!(stats.conservation.holds(), "{mode:?}");
            assert_eq!(stats.lindley.violations, 0, "{mode:?}");
            assert_eq!(stats.histogram.iter().sum::<u64>(), stats.slots);
            assert!(stats.losses <= stats.arrivals);
            assert_eq!(stats.batches.iter().map(|b| b.slots).sum::<u64>(), stats.slots);
        }
    }

    #[test]
    fn perfect_coverage_has_no_loss_or_delay() {
        // Without interferers and noise every transmission succeeds.
        let mut s = scenario();
        s.interferers.clear();
        let stats = run(&s, 0.3, Buffer::Finite(2), &SimMode::MeanFieldFixed(0.5), &RunSettings::with_slots(5_000), 2).unwrap();
        let k = estimate_kpis(&stats, 0.3);
        assert_eq!(k.loss_probability.mean, 0.0);
        assert_eq!(k.delay.mean, 0.0);
        assert_eq!(stats.successes, stats.arrivals);
    }

    #[test]
    fn mode_checks() {
        let s = scenario();
        let rs = RunSettings::with_slots(100);
        // w = 2 here, so q = 0.6 asks for station activity 1.2.
        assert!(run(&s, 0.1, Buffer::Finite(1), &SimMode::MeanFieldFixed(0.6), &rs, 1).is_err());
        assert!(run(&s, 0.5, Buffer::Finite(1), &SimMode::Exact, &rs, 1).is_err());
        assert!(run(&s, 0.1, Buffer::Finite(1), &SimMode::PureLoss, &rs, 1).is_err());
        let annealed = RunSettings {
            geometry: Geometry::Annealed,
            ..rs
        };
        assert!(run(&s, 0.1, Buffer::Finite(1), &SimMode::Exact, &annealed, 1).is_err());
    }

    #[test]
    fn empirical_success_tracks_layout_coverage() {
        let s = scenario();
        let stats = run(&s, 0.2, Buffer::Finite(2), &SimMode::MeanFieldFixed(0.3), &RunSettings::with_slots(20_000), 5).unwrap();
        let oracle = s.conditional_coverage(0.3) / 0.3;
        let est = estimate_kpis(&stats, 0.2).conditional_success;
        assert!((est.mean - oracle).abs() < 4.0 * est.std_error + 1e-3, "{est:?} vs {oracle}");
    }

    #[test]
    fn merge_is_associative() {
        let s = scenario();
        let rs = RunSettings::with_slots(1_000);
        let mode = SimMode::MeanFieldFixed(0.3);
        let runs: Vec<SimStats> = (0..3).map(|i| run(&s, 0.2, Buffer::Finite(2), &mode, &rs, i).unwrap()).collect();
        let left = runs[0].clone().merge(&runs[1]).merge(&runs[2]);
        let right = runs[0].clone().merge(&runs[1].clone().merge(&runs[2]));
        assert_eq!(left, right);
        assert_eq!(left.replications, 3);
    }

    #[test]
    fn schedule_holds_last_value() {
        let cov = crate::coverage::ClosedFormCoverage { c: 4.0 };
        let s = QSchedule::from_coverage(0.1, Buffer::Finite(1), &cov, 10_000).unwrap();
        assert!((s.at(1) - 0.134_615_384_615_384_6).abs() < 1e-12);
        assert_eq!(s.at(usize::MAX), *s.values().last().unwrap());
        assert!((s.at(usize::MAX) - 0.151_387_818_865_997).abs() < 1e-10);
    }
}
