//! Coverage probability `V_T(q)` of the tagged link when every other link
//! is busy independently with probability `q`.
//!
//! [`CoverageEvaluator`] integrates the general
//! representation over the exponential link coordinate `v = |x / ell0|^d`;
//! [`ClosedFormCoverage`] and [`NoiseLimitedCoverage`] are the `kappa = 0`
//! special cases.

use std::collections::HashMap;
use std::sync::Mutex;

use crate::error::{check, Result};
use crate::model::{attenuation_normalized, NetworkParams};
use crate::quadrature::Quadrature;

/// A coverage curve `q -> V_T(q)` on `[0, 1]`.
pub trait CoverageFn: Sync {
    fn coverage(&self, q: f64) -> Result<f64>;

    /// `U(q) = V_T(q) / q`, the success probability of a busy link.
    fn success_given_busy(&self, q: f64) -> Result<f64> {
        check(q > 0.0 && q <= 1.0, "q", q, "must lie in (0, 1]")?;
        Ok(self.coverage(q)? / q)
    }
}

impl<T: CoverageFn + ?Sized> CoverageFn for &T {
    fn coverage(&self, q: f64) -> Result<f64> {
        (**self).coverage(q)
    }
}

impl<T: CoverageFn + ?Sized> CoverageFn for Box<T> {
    fn coverage(&self, q: f64) -> Result<f64> {
        (**self).coverage(q)
    }
}

fn check_q(q: f64) -> Result<()> {
    check((0.0..=1.0).contains(&q), "q", q, "must lie in [0, 1]")
}

/// `q / (1 + C q)`: singular attenuation and no noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosedFormCoverage {
    pub c: f64,
}

impl ClosedFormCoverage {
    pub fn new(c: f64) -> Result<Self> {
        check(c > 0.0, "C", c, "must be positive")?;
        Ok(Self { c })
    }
}

impl CoverageFn for ClosedFormCoverage {
    fn coverage(&self, q: f64) -> Result<f64> {
        check_q(q)?;
        Ok(coverage_closed(q, self.c))
    }
}

pub fn coverage_closed(q: f64, c: f64) -> f64 {
    q / (1.0 + c * q)
}

/// Singular attenuation with background noise,
/// `q int_0^inf exp(-q C v - mu sigma2 T v^delta - v) dv`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLimitedCoverage {
    pub c: f64,
    /// The product `mu * sigma2 * T`.
    pub noise: f64,
    pub delta: f64,
}

impl CoverageFn for NoiseLimitedCoverage {
    fn coverage(&self, q: f64) -> Result<f64> {
        coverage_sigma(q, self.c, self.noise, 1.0, 1.0, self.delta)
    }
}

pub fn coverage_sigma(q: f64, c: f64, mu: f64, sigma2: f64, threshold: f64, delta: f64) -> Result<f64> {
    check_q(q)?;
    check(c > 0.0, "C", c, "must be positive")?;
    check(sigma2 >= 0.0, "sigma2", sigma2, "must be >= 0")?;
    check(delta > 1.0, "delta", delta, "must exceed 1")?;
    if q == 0.0 {
        return Ok(0.0);
    }
    let noise = mu * sigma2 * threshold;
    if noise == 0.0 {
        return Ok(coverage_closed(q, c));
    }
    let rate = 1.0 + q * c;
    let quad = Quadrature::with_rel_tol(1e-11);
    let integral = quad.integrate(|v| (-rate * v - noise * v.powf(delta)).exp(), 0.0, 40.0 / rate)?;
    Ok(q * integral.value)
}

/// Coverage given a fixed interferer point set.
///
/// `link_v` and `interferer_vs` are normalized coordinates `(r / ell0)^d`
/// measured from the receiver. The tagged link is busy with probability
/// `q_link` and every interferer independently with `q_interferer`; with
/// both equal this is `V_T(q; x, Phi_x)`.
pub fn conditional_coverage<I>(network: &NetworkParams, q_link: f64, q_interferer: f64, link_v: f64, interferer_vs: I) -> f64
where
    I: IntoIterator<Item = f64>,
{
    let kappa = network.kappa();
    let delta = network.delta();
    let t = network.threshold();
    let a_link = attenuation_normalized(link_v, kappa, delta);
    let mut log_sum = -network.mu() * t * network.sigma2() / a_link;
    for v in interferer_vs {
        let a = attenuation_normalized(v, kappa, delta);
        let ratio = if a.is_infinite() { 1.0 } else { t * a / (a_link + t * a) };
        log_sum += (-q_interferer * ratio).ln_1p();
    }
    q_link * log_sum.exp()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageSettings {
    /// Truncation point of the outer integral over `v`.
    pub outer_limit: f64,
    pub outer: Quadrature,
    pub inner: Quadrature,
    /// Use `exposure = q C v` for `kappa = 0` instead of integrating.
    pub kappa0_reduction: bool,
    pub memoize: bool,
}

impl Default for CoverageSettings {
    fn default() -> Self {
        Self {
            outer_limit: 40.0,
            outer: Quadrature::with_rel_tol(1e-10),
            inner: Quadrature::with_rel_tol(1e-10),
            kappa0_reduction: true,
            memoize: true,
        }
    }
}

/// The cheapest exact curve for `params`: the closed form without noise or
/// a bound, the one-dimensional noise integral with noise only, and full
/// quadrature once the attenuation is bounded.
pub fn coverage_for(params: &NetworkParams) -> Result<Box<dyn CoverageFn + Send>> {
    let c = params.c_constant()?;
    if params.is_closed_form() {
        Ok(Box::new(ClosedFormCoverage::new(c)?))
    } else if params.kappa() == 0.0 {
        Ok(Box::new(NoiseLimitedCoverage {
            c,
            noise: params.mu() * params.sigma2() * params.threshold(),
            delta: params.delta(),
        }))
    } else {
        Ok(Box::new(CoverageEvaluator::new(*params)?))
    }
}

/// Numerical `V_T(q)` for a general parameter set.
#[derive(Debug)]
pub struct CoverageEvaluator {
    params: NetworkParams,
    settings: CoverageSettings,
    c: f64,
    cache: Mutex<HashMap<u64, f64>>,
}

impl CoverageEvaluator {
    pub fn new(params: NetworkParams) -> Result<Self> {
        Self::with_settings(params, CoverageSettings::default())
    }

    pub fn with_settings(params: NetworkParams, settings: CoverageSettings) -> Result<Self> {
        check(settings.outer_limit > 0.0, "outer_limit", settings.outer_limit, "must be positive")?;
        Ok(Self {
            c: params.c_constant()?,
            params,
            settings,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn params(&self) -> &NetworkParams {
        &self.params
    }

    pub fn settings(&self) -> &CoverageSettings {
        &self.settings
    }

    /// `C_{T,delta,w}` of the underlying parameters.
    pub fn c_constant(&self) -> f64 {
        self.c
    }

    /// `q int_v^inf w T (kappa + v^delta) / (kappa + u^delta + T (kappa + v^delta)) du`.
    pub fn inner_exposure(&self, v: f64, q: f64) -> Result<f64> {
        check_q(q)?;
        check(v >= 0.0, "v", v, "must be >= 0")?;
        if q == 0.0 {
            return Ok(0.0);
        }
        if self.params.kappa() == 0.0 && self.settings.kappa0_reduction {
            return Ok(q * self.c * v);
        }
        Ok(q * self.exposure_integral(v)?)
    }

    fn exposure_integral(&self, v: f64) -> Result<f64> {
        let p = &self.params;
        let (kappa, delta, t) = (p.kappa(), p.delta(), p.threshold());
        let link = kappa + v.powf(delta);
        let numer = p.w() * t * link;
        if numer == 0.0 {
            return Ok(0.0);
        }
        let offset = kappa + t * link;
        let scale = offset.powf(1.0 / delta).max(v * 1e-3).max(1e-12);
        let integral = self
            .settings
            .inner
            .integrate_power_tail(|u| numer / (offset + u.powf(delta)), v, scale, delta)?;
        Ok(integral.value)
    }

    /// `V_T(q; x)` for a link at normalized coordinate `v`, averaged over
    /// fading and interferer placement.
    pub fn coverage_given_link(&self, q: f64, v: f64) -> Result<f64> {
        check_q(q)?;
        check(v >= 0.0, "v", v, "must be >= 0")?;
        if q == 0.0 {
            return Ok(0.0);
        }
        let p = &self.params;
        let kappa = p.kappa();
        let noise = p.mu() * p.threshold() * p.sigma2() * (kappa + v.powf(p.delta())) / (1.0 + kappa);
        let exposure = self.inner_exposure(v, q)?;
        Ok(q * (-noise - exposure).exp())
    }

    fn integrate_outer(&self, q: f64) -> Result<f64> {
        let mut failure = None;
        let integral = self.settings.outer.integrate(
            |v| match self.coverage_given_link(q, v) {
                Ok(c) => c * (-v).exp(),
                Err(e) => {
                    failure.get_or_insert(e);
                    0.0
                }
            },
            0.0,
            self.settings.outer_limit,
        )?;
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(integral.value.clamp(0.0, q))
    }
}

impl CoverageFn for CoverageEvaluator {
    fn coverage(&self, q: f64) -> Result<f64> {
        check_q(q)?;
        if q == 0.0 {
            return Ok(0.0);
        }
        if !self.settings.memoize {
            return self.integrate_outer(q);
        }
        let key = q.to_bits();
        if let Some(v) = self.cache.lock().expect("coverage cache poisoned").get(&key) {
            return Ok(*v);
        }
        let value = self.integrate_outer(q)?;
        self.cache.lock().expect("coverage cache poisoned").insert(key, value);
        Ok(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn figure_params(kappa: f64, sigma2: f64) -> NetworkParams {
        NetworkParams::builder()
            .lambda0(10.0)
            .lambda1(1.0)
            .kappa(kappa)
            .sigma2(sigma2)
            .build()
            .unwrap()
    }

    #[test]
    fn zero_load_gives_zero_coverage() {
        let ev = CoverageEvaluator::new(figure_params(0.05, 0.5)).unwrap();
        assert_eq!(ev.coverage(0.0).unwrap(), 0.0);
        assert_eq!(ev.inner_exposure(3.0, 0.0).unwrap(), 0.0);
        assert_eq!(ev.coverage_given_link(0.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn reduction_matches_general_integral_for_singular_attenuation() {
        let params = figure_params(0.0, 0.0);
        let reduced = CoverageEvaluator::new(params).unwrap();
        let general = CoverageEvaluator::with_settings(
            params,
            CoverageSettings {
                kappa0_reduction: false,
                ..Default::default()
            },
        )
        .unwrap();
        // (v=1, q=1, delta=2, T=1, w=10) -> C
        assert_relative_eq!(general.inner_exposure(1.0, 1.0).unwrap(), 7.853_981_633_974_483, max_relative = 1e-9);
        for &v in &[0.01, 0.3, 1.0, 4.5, 20.0] {
            for &q in &[0.1, 0.5, 1.0] {
                let a = reduced.inner_exposure(v, q).unwrap();
                let b = general.inner_exposure(v, q).unwrap();
                assert_relative_eq!(a, b, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn exposure_matches_arctan_form_for_delta_two() {
        let params = figure_params(0.05, 0.0);
        let ev = CoverageEvaluator::new(params).unwrap();
        for &v in &[0.0_f64, 0.02, 0.5, 2.0, 9.0] {
            let link = 0.05 + v * v;
            let c = 0.05 + link;
            let exact = 10.0 * link * (std::f64::consts::FRAC_PI_2 - (v / c.sqrt()).atan()) / c.sqrt();
            assert_relative_eq!(ev.inner_exposure(v, 1.0).unwrap(), exact, max_relative = 1e-9);
        }
    }

    #[test]
    fn closed_form_examples() {
        assert_relative_eq!(coverage_closed(1.0, 4.0), 0.2);
        assert_eq!(coverage_closed(0.0, 4.0), 0.0);
        assert_relative_eq!(coverage_closed(0.5, 4.0), 1.0 / 6.0);
        assert_relative_eq!(coverage_sigma(0.5, 4.0, 1.0, 0.0, 1.0, 2.0).unwrap(), 1.0 / 6.0);
        assert_eq!(coverage_sigma(0.0, 4.0, 1.0, 1.0, 1.0, 2.0).unwrap(), 0.0);
    }

    #[test]
    fn noise_kills_coverage() {
        let ev = CoverageEvaluator::new(figure_params(0.0, 1e6)).unwrap();
        assert!(ev.coverage(0.5).unwrap() < 1e-3);
        assert!(ev.coverage_given_link(0.5, 1.0).unwrap() < 1e-100);
    }

    #[test]
    fn memoized_values_are_bitwise_stable() {
        let ev = CoverageEvaluator::new(figure_params(0.005, 0.1)).unwrap();
        let a = ev.coverage(0.37).unwrap();
        let b = ev.coverage(0.37).unwrap();
        let fresh = CoverageEvaluator::with_settings(
            *ev.params(),
            CoverageSettings {
                memoize: false,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(a.to_bits(), fresh.coverage(0.37).unwrap().to_bits());
    }

    #[test]
    fn rejects_out_of_range_load() {
        let ev = CoverageEvaluator::new(figure_params(0.0, 0.0)).unwrap();
        assert!(ev.coverage(1.5).is_err());
        assert!(ev.coverage(-0.1).is_err());
        assert!(ClosedFormCoverage { c: 4.0 }.success_given_busy(0.0).is_err());
    }

    #[test]
    fn conditional_coverage_without_interferers() {
        let net = figure_params(0.0, 0.5);
        // Only noise: q exp(-mu T sigma2 / a(x)) with a(x) = v^{-2}.
        let v: f64 = 1.3;
        let value = conditional_coverage(&net, 0.4, 0.4, v, std::iter::empty());
        assert_relative_eq!(value, 0.4 * (-0.5 * v * v).exp(), max_relative = 1e-14);
    }
}
