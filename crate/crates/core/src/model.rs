//! Model parameters, the normalized attenuation family and the derived
//! constants shared by the analytic and simulated parts of the crate.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{check, Error, Result};
use crate::quadrature::Quadrature;

/// Spatial, radio and threshold parameters of the downlink network.
///
/// Construct through [`NetworkParams::builder`]; the derived quantities
/// `delta = beta / d`, `w = lambda0 / lambda1` and the reference radius
/// `ell0` are fixed at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkParams {
    lambda0: f64,
    lambda1: f64,
    dim: u32,
    beta: f64,
    kappa: f64,
    mu: f64,
    sigma2: f64,
    threshold: f64,
    delta: f64,
    w: f64,
    ell0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkBuilder {
    pub lambda0: f64,
    pub lambda1: f64,
    pub dim: u32,
    pub beta: f64,
    pub kappa: f64,
    pub mu: f64,
    pub sigma2: f64,
    pub threshold: f64,
}

impl Default for NetworkBuilder {
    fn default() -> Self {
        Self {
            lambda0: 10.0,
            lambda1: 1.0,
            dim: 2,
            beta: 4.0,
            kappa: 0.0,
            mu: 1.0,
            sigma2: 0.0,
            threshold: 1.0,
        }
    }
}

impl NetworkBuilder {
    pub fn lambda0(mut self, v: f64) -> Self {
        self.lambda0 = v;
        self
    }
    pub fn lambda1(mut self, v: f64) -> Self {
        self.lambda1 = v;
        self
    }
    pub fn dim(mut self, d: u32) -> Self {
        self.dim = d;
        self
    }
    pub fn beta(mut self, v: f64) -> Self {
        self.beta = v;
        self
    }
    pub fn kappa(mut self, v: f64) -> Self {
        self.kappa = v;
        self
    }
    pub fn mu(mut self, v: f64) -> Self {
        self.mu = v;
        self
    }
    pub fn sigma2(mut self, v: f64) -> Self {
        self.sigma2 = v;
        self
    }
    pub fn threshold(mut self, v: f64) -> Self {
        self.threshold = v;
        self
    }

    /// Sets the threshold so that `C_{T,delta,w}` equals `c` for the
    /// current `beta`, `dim` and intensities.
    pub fn calibrate_constant(mut self, c: f64) -> Result<Self> {
        check(c > 0.0, "C", c, "must be positive")?;
        check(self.dim >= 1, "dim", self.dim as f64, "must be >= 1")?;
        let delta = self.beta / self.dim as f64;
        let w = self.lambda0 / self.lambda1;
        check(w > 0.0, "w", w, "lambda0/lambda1 must be positive")?;
        self.threshold = threshold_for_constant(c, delta, w)?;
        Ok(self)
    }

    pub fn build(self) -> Result<NetworkParams> {
        check(self.lambda0 > 0.0, "lambda0", self.lambda0, "must be positive")?;
        check(self.lambda1 > 0.0, "lambda1", self.lambda1, "must be positive")?;
        check(self.dim >= 1, "dim", self.dim as f64, "must be >= 1")?;
        let d = self.dim as f64;
        check(self.beta > d, "beta", self.beta, "must exceed the dimension")?;
        check(self.kappa >= 0.0, "kappa", self.kappa, "must be >= 0")?;
        check(self.mu > 0.0, "mu", self.mu, "must be positive")?;
        check(self.sigma2 >= 0.0, "sigma2", self.sigma2, "must be >= 0")?;
        check(self.threshold > 0.0, "T", self.threshold, "must be positive")?;
        check(self.lambda0.is_finite(), "lambda0", self.lambda0, "must be finite")?;
        check(self.sigma2.is_finite(), "sigma2", self.sigma2, "must be finite")?;

        Ok(NetworkParams {
            lambda0: self.lambda0,
            lambda1: self.lambda1,
            dim: self.dim,
            beta: self.beta,
            kappa: self.kappa,
            mu: self.mu,
            sigma2: self.sigma2,
            threshold: self.threshold,
            delta: self.beta / d,
            w: self.lambda0 / self.lambda1,
            ell0: (self.lambda1 * unit_ball_volume(self.dim)).powf(-1.0 / d),
        })
    }
}

impl NetworkParams {
    pub fn builder() -> NetworkBuilder {
        NetworkBuilder::default()
    }

    /// Back to a builder holding the same primary parameters.
    pub fn to_builder(&self) -> NetworkBuilder {
        NetworkBuilder {
            lambda0: self.lambda0,
            lambda1: self.lambda1,
            dim: self.dim,
            beta: self.beta,
            kappa: self.kappa,
            mu: self.mu,
            sigma2: self.sigma2,
            threshold: self.threshold,
        }
    }

    pub fn lambda0(&self) -> f64 {
        self.lambda0
    }
    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }
    pub fn dim(&self) -> u32 {
        self.dim
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn kappa(&self) -> f64 {
        self.kappa
    }
    pub fn mu(&self) -> f64 {
        self.mu
    }
    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }
    pub fn threshold(&self) -> f64 {
        self.threshold
    }
    pub fn delta(&self) -> f64 {
        self.delta
    }
    /// Mean number of UEs per cell, `lambda0 / lambda1`.
    pub fn w(&self) -> f64 {
        self.w
    }
    /// Radius of the ball whose volume equals the mean cell volume.
    pub fn ell0(&self) -> f64 {
        self.ell0
    }

    /// `C_{T,delta,w}`; only meaningful as a closed-form driver when
    /// `kappa = sigma2 = 0`.
    pub fn c_constant(&self) -> Result<f64> {
        c_constant(self.threshold, self.delta, self.w)
    }

    /// True when the coverage reduces to `q / (1 + C q)`.
    pub fn is_closed_form(&self) -> bool {
        self.kappa == 0.0 && self.sigma2 == 0.0
    }

    /// Normalized coordinate `v = (r / ell0)^d` of a Euclidean distance.
    pub fn normalized_distance(&self, r: f64) -> f64 {
        (r / self.ell0).powi(self.dim as i32)
    }

    pub fn attenuation(&self, v: f64) -> f64 {
        attenuation_normalized(v, self.kappa, self.delta)
    }
}

/// Volume of the unit ball in `d` dimensions.
pub fn unit_ball_volume(d: u32) -> f64 {
    match d {
        0 => 1.0,
        1 => 2.0,
        _ => 2.0 * PI / d as f64 * unit_ball_volume(d - 2),
    }
}

/// `(1 + kappa) / (v^delta + kappa)` for `v = |x / ell0|^d`.
///
/// With `kappa = 0` the value at `v = 0` is `+inf`; callers integrating over
/// `v` only sample interior nodes.
pub fn attenuation_normalized(v: f64, kappa: f64, delta: f64) -> f64 {
    let denom = v.powf(delta) + kappa;
    if denom == 0.0 {
        f64::INFINITY
    } else {
        (1.0 + kappa) / denom
    }
}

/// Checked variant of [`attenuation_normalized`] that reports the singular
/// point instead of returning the infinite sentinel.
pub fn try_attenuation(v: f64, kappa: f64, delta: f64) -> Result<f64> {
    check(v >= 0.0, "v", v, "must be >= 0")?;
    check(kappa >= 0.0, "kappa", kappa, "must be >= 0")?;
    check(delta > 1.0, "delta", delta, "must exceed 1")?;
    if kappa == 0.0 && v == 0.0 {
        return Err(Error::SingularAttenuation);
    }
    Ok(attenuation_normalized(v, kappa, delta))
}

/// `K_delta(r) = int_r^inf du / (1 + u^delta)`.
pub fn k_delta(r: f64, delta: f64) -> Result<f64> {
    if !(delta > 1.0) {
        return Err(Error::Divergent { delta });
    }
    check(r >= 0.0, "r", r, "must be >= 0")?;
    if r.is_infinite() {
        return Ok(0.0);
    }
    let quad = Quadrature::with_rel_tol(1e-10);
    let scale = r.max(1.0);
    Ok(quad
        .integrate_power_tail(|u| 1.0 / (1.0 + u.powf(delta)), r, scale, delta)?
        .value)
}

/// `C = T^{1/delta} K_delta(T^{-1/delta}) w`.
pub fn c_constant(threshold: f64, delta: f64, w: f64) -> Result<f64> {
    check(threshold > 0.0, "T", threshold, "must be positive")?;
    check(w > 0.0, "w", w, "must be positive")?;
    let y = threshold.powf(1.0 / delta);
    Ok(y * k_delta(1.0 / y, delta)? * w)
}

/// `y K_delta(1 / y)`, increasing in `y`.
pub fn scaled_tail(y: f64, delta: f64) -> Result<f64> {
    if y <= 0.0 {
        return Ok(0.0);
    }
    Ok(y * k_delta(1.0 / y, delta)?)
}

/// Solves `y K_delta(1/y) = target` for `y > 0` by bisection.
pub(crate) fn invert_scaled_tail(target: f64, delta: f64) -> Result<f64> {
    check(target > 0.0, "target", target, "must be positive")?;
    let mut lo = 0.0;
    let mut hi = 1.0;
    while scaled_tail(hi, delta)? < target {
        lo = hi;
        hi *= 2.0;
        if hi > 1e300 {
            return Err(Error::InvalidParameter {
                name: "target",
                value: target,
                reason: "out of range",
            });
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if scaled_tail(mid, delta)? < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Threshold `T` for which `C_{T,delta,w} = c`.
pub fn threshold_for_constant(c: f64, delta: f64, w: f64) -> Result<f64> {
    check(delta > 1.0, "delta", delta, "must exceed 1")?;
    check(w > 0.0, "w", w, "must be positive")?;
    Ok(invert_scaled_tail(c / w, delta)?.powf(delta))
}

/// Mean aggregate received power of a stationary emitter field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReceivedPower {
    Finite(f64),
    Infinite,
}

/// `P_avg = (1/mu) int_0^inf (1 + kappa) / (v^delta + kappa) dv`.
pub fn avg_received_power(kappa: f64, delta: f64, mu: f64) -> Result<ReceivedPower> {
    check(delta > 1.0, "delta", delta, "must exceed 1")?;
    check(mu > 0.0, "mu", mu, "must be positive")?;
    check(kappa >= 0.0, "kappa", kappa, "must be >= 0")?;
    if kappa == 0.0 {
        return Ok(ReceivedPower::Infinite);
    }
    // Split at the knee v = kappa^{1/delta} where the integrand turns over.
    let knee = kappa.powf(1.0 / delta);
    let quad = Quadrature::with_rel_tol(1e-11);
    let f = |v: f64| (1.0 + kappa) / (v.powf(delta) + kappa);
    let head = quad.integrate(f, 0.0, knee)?.value;
    let tail = quad.integrate_power_tail(f, knee, knee, delta)?.value;
    Ok(ReceivedPower::Finite((head + tail) / mu))
}

/// Buffer capacity of a link.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Buffer {
    /// Pure loss: failed transmissions are dropped.
    Zero,
    Finite(u32),
    /// No losses; every failed signal is eventually retransmitted.
    Infinite,
}

impl Buffer {
    pub fn from_capacity(k: u32) -> Self {
        if k == 0 {
            Buffer::Zero
        } else {
            Buffer::Finite(k)
        }
    }

    /// Numeric code used in CSV output; `-1` stands for an unbounded buffer.
    pub fn code(&self) -> i64 {
        match self {
            Buffer::Zero => 0,
            Buffer::Finite(k) => *k as i64,
            Buffer::Infinite => -1,
        }
    }
}

impl fmt::Display for Buffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Buffer::Zero => write!(f, "0"),
            Buffer::Finite(k) => write!(f, "{k}"),
            Buffer::Infinite => write!(f, "inf"),
        }
    }
}

impl FromStr for Buffer {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        match s.to_ascii_lowercase().as_str() {
            "inf" | "infinite" | "infinity" | "-1" => Ok(Buffer::Infinite),
            other => other
                .parse::<u32>()
                .map(Buffer::from_capacity)
                .map_err(|_| format!("invalid buffer size `{s}` (expected a non-negative integer or `inf`)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficParams {
    p: f64,
    buffer: Buffer,
}

impl TrafficParams {
    pub fn new(p: f64, buffer: Buffer) -> Result<Self> {
        check(p > 0.0 && p < 1.0, "p", p, "must lie in (0, 1)")?;
        if let Buffer::Finite(0) = buffer {
            return Err(Error::InvalidParameter {
                name: "K",
                value: 0.0,
                reason: "finite capacity must be >= 1 (use Buffer::Zero)",
            });
        }
        Ok(Self { p, buffer })
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn buffer(&self) -> Buffer {
        self.buffer
    }

    /// Per-slot service load of a base station, `p * lambda0 / lambda1`.
    pub fn rho(&self, network: &NetworkParams) -> f64 {
        self.p * network.w()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn attenuation_examples() {
        assert_eq!(attenuation_normalized(1.0, 0.5, 2.0), 1.0);
        assert_eq!(attenuation_normalized(0.0, 1.0, 2.0), 2.0);
        assert_eq!(attenuation_normalized(4.0, 0.0, 2.0), 1.0 / 16.0);
        assert_eq!(attenuation_normalized(0.0, 0.0, 2.0), f64::INFINITY);
        assert_eq!(try_attenuation(0.0, 0.0, 2.0), Err(Error::SingularAttenuation));
    }

    #[test]
    fn attenuation_normalized_to_one_at_reference_radius() {
        for &kappa in &[0.0, 0.005, 0.3, 1.0, 12.0] {
            for &delta in &[1.01, 1.5, 2.0, 3.7] {
                assert_relative_eq!(attenuation_normalized(1.0, kappa, delta), 1.0, max_relative = 1e-15);
            }
        }
    }

    #[test]
    fn k_delta_matches_arctan() {
        for i in 0..60 {
            let r = i as f64 * 0.25;
            let exact = std::f64::consts::FRAC_PI_2 - r.atan();
            assert!((k_delta(r, 2.0).unwrap() - exact).abs() <= 1e-10, "r = {r}");
        }
        assert_relative_eq!(k_delta(0.0, 2.0).unwrap(), std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        assert_relative_eq!(k_delta(1.0, 2.0).unwrap(), std::f64::consts::FRAC_PI_4, epsilon = 1e-12);
    }

    #[test]
    fn k_delta_rejects_non_integrable_exponent() {
        assert_eq!(k_delta(1.0, 1.0), Err(Error::Divergent { delta: 1.0 }));
        assert!(k_delta(1.0, 0.5).is_err());
    }

    #[test]
    fn c_constant_examples() {
        assert_relative_eq!(c_constant(1.0, 2.0, 10.0).unwrap(), 7.853_981_633_974_483, epsilon = 1e-9);
        assert!(c_constant(1e-12, 2.0, 10.0).unwrap() < 1e-5);
    }

    #[test]
    fn threshold_calibration_round_trips() {
        for &(c, delta, w) in &[(4.0, 2.0, 10.0), (4.0, 2.0, 1.0), (5.0, 1.5, 3.0), (0.3, 3.0, 10.0)] {
            let t = threshold_for_constant(c, delta, w).unwrap();
            assert_relative_eq!(c_constant(t, delta, w).unwrap(), c, max_relative = 1e-10);
        }
    }

    #[test]
    fn received_power() {
        assert_eq!(avg_received_power(0.0, 2.0, 1.0).unwrap(), ReceivedPower::Infinite);
        let ReceivedPower::Finite(p1) = avg_received_power(1.0, 2.0, 1.0).unwrap() else { panic!() };
        let ReceivedPower::Finite(p2) = avg_received_power(1.0, 2.0, 2.0).unwrap() else { panic!() };
        assert_relative_eq!(p1, std::f64::consts::PI, max_relative = 1e-9);
        assert_relative_eq!(p2, std::f64::consts::FRAC_PI_2, max_relative = 1e-9);
    }

    #[test]
    fn derived_fields() {
        let net = NetworkParams::builder().lambda0(5.0).lambda1(0.5).build().unwrap();
        assert_eq!(net.w(), 10.0);
        assert_eq!(net.delta(), 2.0);
        // |B(0, ell0)| = 1 / lambda1
        assert_relative_eq!(PI * net.ell0().powi(2), 2.0, max_relative = 1e-14);
        assert_relative_eq!(net.normalized_distance(net.ell0()), 1.0, max_relative = 1e-14);
    }

    #[test]
    fn builder_validation() {
        assert!(NetworkParams::builder().beta(2.0).build().is_err());
        assert!(NetworkParams::builder().lambda0(0.0).build().is_err());
        assert!(NetworkParams::builder().kappa(-0.1).build().is_err());
        assert!(NetworkParams::builder().threshold(0.0).build().is_err());
        assert!(NetworkParams::builder().mu(f64::NAN).build().is_err());
        assert!(NetworkParams::builder().dim(3).beta(3.5).build().is_ok());
    }

    #[test]
    fn unit_ball() {
        assert_relative_eq!(unit_ball_volume(2), PI, max_relative = 1e-15);
        assert_relative_eq!(unit_ball_volume(3), 4.0 * PI / 3.0, max_relative = 1e-15);
    }

    #[test]
    fn buffer_parsing() {
        assert_eq!("inf".parse::<Buffer>().unwrap(), Buffer::Infinite);
        assert_eq!("0".parse::<Buffer>().unwrap(), Buffer::Zero);
        assert_eq!(" 8 ".parse::<Buffer>().unwrap(), Buffer::Finite(8));
        assert!("x".parse::<Buffer>().is_err());
        assert_eq!(Buffer::Infinite.code(), -1);
    }

    #[test]
    fn traffic_validation() {
        assert!(TrafficParams::new(0.0, Buffer::Zero).is_err());
        assert!(TrafficParams::new(1.0, Buffer::Zero).is_err());
        assert!(TrafficParams::new(0.2, Buffer::Finite(0)).is_err());
        let net = NetworkParams::builder().build().unwrap();
        let t = TrafficParams::new(0.05, Buffer::Finite(3)).unwrap();
        assert_relative_eq!(t.rho(&net), 0.5);
    }
}
