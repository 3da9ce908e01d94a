//! Mean-field retransmission model for Poisson-Voronoi downlink networks.
//!
//! * [`model`]: network and traffic parameters, attenuation, the constant `C`.
//! * [`coverage`]: the coverage function `V_T(q)` in closed and integral forms.
//! * [`equilibrium`]: the buffer chain, its fixed point and derived KPIs.
//! * [`geomsim`]: slot-level Monte Carlo on a periodic Poisson layout.

// Guards are written `!(x > a)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod coverage;
pub mod equilibrium;
pub mod error;
pub mod geomsim;
pub mod model;
pub mod quadrature;

pub use coverage::{coverage_for, ClosedFormCoverage, CoverageEvaluator, CoverageFn, CoverageSettings, NoiseLimitedCoverage};
pub use equilibrium::{EquilibriumSolution, Kpis, SolverSettings};
pub use error::{Error, Result};
pub use model::{Buffer, NetworkBuilder, NetworkParams, TrafficParams};
