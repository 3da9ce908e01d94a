//! Python bindings: network parameters, coverage curves, the equilibrium
//! solver, closed forms, buffer dimensioning and the slot simulator.

use pvcell_core::coverage::{coverage_closed, coverage_for, CoverageFn};
use pvcell_core::equilibrium::{self, DimensioningRequest, EquilibriumSolution, SolverSettings};
use pvcell_core::geomsim::{self, Geometry, QSchedule, ReplicationPlan, RunSettings, ScenarioSettings, SimMode};
use pvcell_core::model::{self, Buffer, NetworkBuilder, TrafficParams};
use pvcell_core::Error;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

create_exception!(pvcell, InfeasibleError, PyException, "Arrival rate above the critical probability.");
create_exception!(pvcell, ConvergenceError, PyException, "Fixed-point iteration did not converge.");

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Infeasible { p, p_c } => InfeasibleError::new_err((format!("p = {p} exceeds p_c = {p_c}"), p, p_c)),
        Error::NonConvergence { .. } => ConvergenceError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_buffer(k: &Bound<'_, PyAny>) -> PyResult<Buffer> {
    if let Ok(n) = k.extract::<u32>() {
        return Ok(Buffer::from_capacity(n));
    }
    if let Ok(f) = k.extract::<f64>() {
        if f.is_infinite() && f > 0.0 {
            return Ok(Buffer::Infinite);
        }
    }
    let s: String = k.extract().map_err(|_| PyValueError::new_err("K must be a non-negative int, 'inf' or math.inf"))?;
    s.parse().map_err(PyValueError::new_err)
}

/// Network and propagation parameters. Give at most one of `threshold`
/// and `c`; with `c` the threshold is calibrated to match.
#[pyclass(name = "NetworkParams", frozen, module = "pvcell")]
pub struct PyNetwork {
    inner: model::NetworkParams,
    coverage: Box<dyn CoverageFn + Send>,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (lambda0=10.0, lambda1=1.0, dim=2, beta=4.0, kappa=0.0, mu=1.0, sigma2=0.0, threshold=None, c=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        lambda0: f64,
        lambda1: f64,
        dim: u32,
        beta: f64,
        kappa: f64,
        mu: f64,
        sigma2: f64,
        threshold: Option<f64>,
        c: Option<f64>,
    ) -> PyResult<Self> {
        let mut b = NetworkBuilder {
            lambda0,
            lambda1,
            dim,
            beta,
            kappa,
            mu,
            sigma2,
            threshold: threshold.unwrap_or(1.0),
        };
        match (threshold, c) {
            (Some(_), Some(_)) => return Err(PyValueError::new_err("give either threshold or c, not both")),
            (None, Some(c)) => b = b.calibrate_constant(c).map_err(to_py)?,
            _ => {}
        }
        let inner = b.build().map_err(to_py)?;
        let coverage = coverage_for(&inner).map_err(to_py)?;
        Ok(Self { inner, coverage })
    }

    #[getter]
    fn lambda0(&self) -> f64 {
        self.inner.lambda0()
    }
    #[getter]
    fn lambda1(&self) -> f64 {
        self.inner.lambda1()
    }
    #[getter]
    fn dim(&self) -> u32 {
        self.inner.dim()
    }
    #[getter]
    fn beta(&self) -> f64 {
        self.inner.beta()
    }
    #[getter]
    fn kappa(&self) -> f64 {
        self.inner.kappa()
    }
    #[getter]
    fn mu(&self) -> f64 {
        self.inner.mu()
    }
    #[getter]
    fn sigma2(&self) -> f64 {
        self.inner.sigma2()
    }
    #[getter]
    fn threshold(&self) -> f64 {
        self.inner.threshold()
    }
    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta()
    }
    #[getter]
    fn w(&self) -> f64 {
        self.inner.w()
    }

    /// `C_{T,delta,w}`.
    fn c_constant(&self) -> PyResult<f64> {
        self.inner.c_constant().map_err(to_py)
    }

    /// Attenuation at normalized distance `v`.
    fn attenuation(&self, v: f64) -> f64 {
        self.inner.attenuation(v)
    }

    /// `V_T(q)`.
    fn coverage(&self, q: f64) -> PyResult<f64> {
        self.coverage.coverage(q).map_err(to_py)
    }

    /// `V_T(q) / q`.
    fn success_given_busy(&self, q: f64) -> PyResult<f64> {
        self.coverage.success_given_busy(q).map_err(to_py)
    }

    /// `max_q V_T(q)`, the largest stable arrival rate without a buffer bound.
    fn critical_probability(&self) -> PyResult<f64> {
        equilibrium::critical_probability(&*self.coverage).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        let n = &self.inner;
        format!(
            "NetworkParams(lambda0={}, lambda1={}, dim={}, beta={}, kappa={}, mu={}, sigma2={}, threshold={})",
            n.lambda0(),
            n.lambda1(),
            n.dim(),
            n.beta(),
            n.kappa(),
            n.mu(),
            n.sigma2(),
            n.threshold()
        )
    }
}

/// Stationary mean-field solution at one `(p, K)`.
#[pyclass(name = "Solution", frozen, module = "pvcell")]
pub struct PySolution {
    inner: EquilibriumSolution,
}

#[pymethods]
impl PySolution {
    #[getter]
    fn p(&self) -> f64 {
        self.inner.p
    }
    /// Buffer label: `"0"`, `"3"` or `"inf"`.
    #[getter]
    fn k(&self) -> String {
        self.inner.buffer.to_string()
    }
    #[getter]
    fn q_star(&self) -> f64 {
        self.inner.q_star
    }
    #[getter]
    fn coverage(&self) -> f64 {
        self.inner.coverage
    }
    #[getter]
    fn u_star(&self) -> f64 {
        self.inner.u_star
    }
    #[getter]
    fn throughput(&self) -> f64 {
        self.inner.kpis.throughput
    }
    #[getter]
    fn loss_probability(&self) -> f64 {
        self.inner.kpis.loss_probability
    }
    #[getter]
    fn delay(&self) -> f64 {
        self.inner.kpis.delay
    }
    #[getter]
    fn ld_product(&self) -> f64 {
        self.inner.kpis.ld_product
    }
    #[getter]
    fn iterations(&self) -> usize {
        self.inner.iterations
    }
    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }
    /// Limiting buffer law; for an unbounded buffer the first `n` terms.
    #[pyo3(signature = (n=64))]
    fn buffer_distribution(&self, n: usize) -> Vec<f64> {
        match self.inner.pi() {
            Some(pi) => pi.to_vec(),
            None => self.inner.distribution.head(n),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Solution(p={}, K={}, q_star={}, throughput={}, loss={}, delay={})",
            self.inner.p,
            self.inner.buffer,
            self.inner.q_star,
            self.inner.kpis.throughput,
            self.inner.kpis.loss_probability,
            self.inner.kpis.delay
        )
    }
}

/// Minimal fixed point at arrival probability `p` and buffer `k`.
#[pyfunction]
#[pyo3(signature = (network, p, k, tol=1e-12, max_iter=10_000))]
fn solve(network: &PyNetwork, p: f64, k: &Bound<'_, PyAny>, tol: f64, max_iter: usize) -> PyResult<PySolution> {
    let traffic = TrafficParams::new(p, parse_buffer(k)?).map_err(to_py)?;
    let settings = SolverSettings {
        tol,
        max_iterations: max_iter,
        ..SolverSettings::default()
    };
    let inner = equilibrium::solve(&traffic, &*network.coverage, &settings).map_err(to_py)?;
    Ok(PySolution { inner })
}

/// `q / (1 + c q)`.
#[pyfunction(name = "coverage_closed")]
fn py_coverage_closed(q: f64, c: f64) -> f64 {
    coverage_closed(q, c)
}

/// `int_r^inf du / (1 + u^delta)`.
#[pyfunction]
fn k_delta(r: f64, delta: f64) -> PyResult<f64> {
    model::k_delta(r, delta).map_err(to_py)
}

/// `C_{T,delta,w}` without building a network.
#[pyfunction]
fn c_constant(threshold: f64, delta: f64, w: f64) -> PyResult<f64> {
    model::c_constant(threshold, delta, w).map_err(to_py)
}

#[pyfunction]
fn critical_p(c: f64) -> f64 {
    equilibrium::critical_p(c)
}

#[pyfunction]
fn t_max(p: f64, delta: f64, w: f64) -> PyResult<f64> {
    equilibrium::t_max(p, delta, w).map_err(to_py)
}

/// `(q_star, throughput, delay)` of the single-slot buffer under the closed form.
#[pyfunction]
fn k1_closed(p: f64, c: f64) -> PyResult<(f64, f64, f64)> {
    let s = equilibrium::k1_closed(p, c).map_err(to_py)?;
    Ok((s.q_star, s.throughput, s.delay))
}

/// `(q_star, b, delay)` of the unbounded buffer under the closed form.
#[pyfunction]
fn kinf_closed(p: f64, c: f64) -> PyResult<(f64, f64, f64)> {
    let s = equilibrium::kinf_closed(p, c).map_err(to_py)?;
    Ok((s.q_star, s.b, s.delay))
}

/// Buffer sizes in `1..=k_max` meeting both bounds for every rate in `(0, p0]`.
#[pyfunction]
#[pyo3(signature = (network, p0, max_loss, max_delay, k_max=16, grid_points=256))]
fn dimension_buffer(network: &PyNetwork, p0: f64, max_loss: f64, max_delay: f64, k_max: u32, grid_points: usize) -> PyResult<Vec<u32>> {
    let request = DimensioningRequest {
        grid_points,
        ..DimensioningRequest::new(p0, max_loss, max_delay)
    };
    let ks: Vec<u32> = (1..=k_max).collect();
    let d = equilibrium::dimension_buffer(&request, &*network.coverage, &ks, &SolverSettings::default()).map_err(to_py)?;
    Ok(d.feasible)
}

/// Pooled simulation estimates over independent layouts. `mode` is one of
/// `pure_loss`, `exact`, `meanfield_fixed` (needs `q`) or `meanfield_adaptive`.
#[pyfunction]
#[pyo3(signature = (network, p, k, mode="meanfield_adaptive", q=None, slots=100_000, replications=1, seed=1, window=20.0, wrap=true, geometry="quenched"))]
#[allow(clippy::too_many_arguments)]
fn simulate<'py>(
    py: Python<'py>,
    network: &PyNetwork,
    p: f64,
    k: &Bound<'py, PyAny>,
    mode: &str,
    q: Option<f64>,
    slots: u64,
    replications: u64,
    seed: u64,
    window: f64,
    wrap: bool,
    geometry: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let buffer = parse_buffer(k)?;
    let mode = match mode {
        "pure_loss" => SimMode::PureLoss,
        "exact" => SimMode::Exact,
        "meanfield_fixed" => SimMode::MeanFieldFixed(q.ok_or_else(|| PyValueError::new_err("meanfield_fixed needs q"))?),
        "meanfield_adaptive" => SimMode::MeanFieldAdaptive(
            QSchedule::from_coverage(p, buffer, &*network.coverage, slots.min(100_000) as usize).map_err(to_py)?,
        ),
        other => return Err(PyValueError::new_err(format!("unknown mode `{other}`"))),
    };
    let geometry = match geometry {
        "quenched" => Geometry::Quenched,
        "annealed" => Geometry::Annealed,
        other => return Err(PyValueError::new_err(format!("unknown geometry `{other}`"))),
    };
    let plan = ReplicationPlan {
        scenario: ScenarioSettings {
            window_side: window,
            wrap,
            ..ScenarioSettings::default()
        },
        run: RunSettings {
            geometry,
            ..RunSettings::with_slots(slots)
        },
        master_seed: seed,
        count: replications,
    };
    let reps = geomsim::run_replications(&network.inner, p, buffer, &mode, &plan).map_err(to_py)?;
    let stats = geomsim::merge_replications(&reps).ok_or_else(|| PyValueError::new_err("replications must be >= 1"))?;
    let est = geomsim::estimate_kpis(&stats, p);
    let out = PyDict::new(py);
    for (name, e) in [
        ("throughput", est.throughput),
        ("loss_probability", est.loss_probability),
        ("delay", est.delay),
        ("conditional_success", est.conditional_success),
    ] {
        out.set_item(name, e.mean)?;
        out.set_item(format!("{name}_se"), e.std_error)?;
    }
    out.set_item("mean_buffer", est.mean_buffer)?;
    out.set_item("interferer_busy_fraction", est.interferer_busy_fraction)?;
    out.set_item("pi_hat", est.pi_hat)?;
    out.set_item("slots", stats.slots)?;
    out.set_item("conservation_ok", stats.conservation.holds())?;
    Ok(out)
}

#[pymodule]
fn pvcell(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetwork>()?;
    m.add_class::<PySolution>()?;
    m.add("InfeasibleError", m.py().get_type::<InfeasibleError>())?;
    m.add("ConvergenceError", m.py().get_type::<ConvergenceError>())?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(py_coverage_closed, m)?)?;
    m.add_function(wrap_pyfunction!(k_delta, m)?)?;
    m.add_function(wrap_pyfunction!(c_constant, m)?)?;
    m.add_function(wrap_pyfunction!(critical_p, m)?)?;
    m.add_function(wrap_pyfunction!(t_max, m)?)?;
    m.add_function(wrap_pyfunction!(k1_closed, m)?)?;
    m.add_function(wrap_pyfunction!(kinf_closed, m)?)?;
    m.add_function(wrap_pyfunction!(dimension_buffer, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
