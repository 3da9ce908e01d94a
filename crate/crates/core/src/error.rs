use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter `{name}` = {value}: {reason}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    #[error("attenuation is singular at the origin when kappa = 0")]
    SingularAttenuation,

    #[error("tail integral diverges for delta = {delta} (need delta > 1)")]
    Divergent { delta: f64 },

    #[error("quadrature did not reach tolerance: estimate {value} +/- {error_estimate} after {subintervals} subintervals")]
    Quadrature {
        value: f64,
        error_estimate: f64,
        subintervals: usize,
    },

    #[error("conditional success probability is zero at q = {q}; the buffer drifts to capacity")]
    DegenerateCoverage { q: f64 },

    #[error("fixed-point iteration did not converge in {iterations} iterations (last step {last_step:e})")]
    NonConvergence {
        iterations: usize,
        last_step: f64,
        trace: Vec<f64>,
    },

    #[error("no steady state without losses: p = {p} exceeds the critical rate p_c = {p_c}")]
    Infeasible { p: f64, p_c: f64 },

    #[error("simulation configuration: {0}")]
    Simulation(String),
}

pub(crate) fn check(cond: bool, name: &'static str, value: f64, reason: &'static str) -> Result<()> {
    if cond && !value.is_nan() {
        Ok(())
    } else {
        Err(Error::InvalidParameter {
            name,
            value,
            reason,
        })
    }
}
