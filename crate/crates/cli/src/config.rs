//! Flat `key=value` run configuration.
//!
//! Values come from built-in defaults, then an optional file, then `--set`
//! overrides. Everything is parsed and validated up front; the resolved
//! table is echoed into every output header.

use std::collections::BTreeMap;
use std::path::Path;

use pvcell::coverage::{coverage_for, ClosedFormCoverage, CoverageEvaluator, CoverageFn};
use pvcell::equilibrium::SolverSettings;
use pvcell::geomsim::{Geometry, RunSettings, ScenarioSettings};
use pvcell::model::{Buffer, NetworkBuilder, NetworkParams};
use sha2::{Digest, Sha256};

use crate::CliError;

const DEFAULTS: &[(&str, &str)] = &[
    ("lambda0", "10"),
    ("lambda1", "1"),
    ("dim", "2"),
    ("beta", "4"),
    ("kappa", "0"),
    ("mu", "1"),
    ("sigma2", "0"),
    ("T", ""),
    ("C", ""),
    ("coverage", "auto"),
    ("p", "0.1"),
    ("K", "1"),
    ("p_min", "0"),
    ("p_max", "0.3"),
    ("p_points", "50"),
    ("K_list", "0,1,2,4,8,inf"),
    ("tol", "1e-12"),
    ("max_iter", "10000"),
    ("verify_minimal", "true"),
    ("scan_step", "1e-4"),
    ("sim_mode", "meanfield_adaptive"),
    ("q", "0.3"),
    ("window", "20"),
    ("wrap", "true"),
    ("slots", "100000"),
    ("warmup", "0.1"),
    ("batches", "16"),
    ("geometry", "quenched"),
    ("replications", "4"),
    ("seed", "1"),
    ("figures", "all"),
    ("fig4_p", "0.03,0.06,0.09"),
    ("fig5_kappa", "0,0.005,0.05"),
    ("fig5_sigma2", "0,0.1,1"),
    ("fig5_q_points", "100"),
    ("fig6_kappa", "0,0.005"),
    ("dim_p0", "0.09"),
    ("L_max", "0.03"),
    ("D_max", "6"),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoverageChoice {
    /// Closed form when `kappa = sigma2 = 0`, quadrature otherwise.
    Auto,
    Closed,
    Numeric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeChoice {
    PureLoss,
    Exact,
    MeanFieldFixed,
    MeanFieldAdaptive,
}

impl ModeChoice {
    pub fn name(&self) -> &'static str {
        match self {
            ModeChoice::PureLoss => "pure_loss",
            ModeChoice::Exact => "exact",
            ModeChoice::MeanFieldFixed => "meanfield_fixed",
            ModeChoice::MeanFieldAdaptive => "meanfield_adaptive",
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub mode: ModeChoice,
    pub q: f64,
    pub scenario: ScenarioSettings,
    pub run: RunSettings,
    pub replications: u64,
}

#[derive(Debug, Clone)]
pub struct DimensionConfig {
    pub p0: f64,
    pub max_loss: f64,
    pub max_delay: f64,
    pub fig4_p: Vec<f64>,
}

/// Series of the bounded-attenuation and noise figures. These use a fixed
/// base network (`mu = T = 1`, `delta = 2`, `w = 10`) and vary only
/// `kappa` and `sigma2`.
#[derive(Debug, Clone)]
pub struct FigureConfig {
    pub fig5_kappa: Vec<f64>,
    pub fig5_sigma2: Vec<f64>,
    pub fig5_q_points: usize,
    pub fig6_kappa: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub network: NetworkParams,
    /// `C_{T,delta,w}` of `network`.
    pub c: f64,
    pub coverage: CoverageChoice,
    pub p: f64,
    pub buffer: Buffer,
    pub p_grid: Vec<f64>,
    pub k_list: Vec<Buffer>,
    pub solver: SolverSettings,
    pub sim: SimConfig,
    pub seed: u64,
    pub figures: Vec<u32>,
    pub dimension: DimensionConfig,
    pub figure: FigureConfig,
    resolved: BTreeMap<String, String>,
}

fn config_error(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn parse_line(line: &str, origin: &str) -> Result<Option<(String, String)>, CliError> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| config_error(format!("{origin}: expected key=value, got `{line}`")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(config_error(format!("{origin}: empty key in `{line}`")));
    }
    Ok(Some((k.to_string(), v.trim().to_string())))
}

struct Table<'a>(&'a BTreeMap<String, String>);

impl Table<'_> {
    fn raw(&self, key: &str) -> &str {
        self.0.get(key).map(String::as_str).unwrap_or("")
    }

    fn f64(&self, key: &str) -> Result<f64, CliError> {
        let raw = self.raw(key);
        raw.parse::<f64>()
            .ok()
            .filter(|x| !x.is_nan())
            .ok_or_else(|| config_error(format!("`{key}`: expected a number, got `{raw}`")))
    }

    fn opt_f64(&self, key: &str) -> Result<Option<f64>, CliError> {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.f64(key).map(Some)
        }
    }

    fn u64(&self, key: &str) -> Result<u64, CliError> {
        let raw = self.raw(key);
        raw.parse::<u64>()
            .map_err(|_| config_error(format!("`{key}`: expected a non-negative integer, got `{raw}`")))
    }

    fn bool(&self, key: &str) -> Result<bool, CliError> {
        match self.raw(key) {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            other => Err(config_error(format!("`{key}`: expected true or false, got `{other}`"))),
        }
    }

    fn buffer(&self, key: &str) -> Result<Buffer, CliError> {
        self.raw(key).parse::<Buffer>().map_err(|e| config_error(format!("`{key}`: {e}")))
    }

    fn list<T>(&self, key: &str, parse: impl Fn(&str) -> Option<T>) -> Result<Vec<T>, CliError> {
        let raw = self.raw(key);
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|s| parse(s.trim()).ok_or_else(|| config_error(format!("`{key}`: cannot parse entry `{s}`"))))
            .collect()
    }
}

fn in_unit_interval(key: &str, v: f64) -> Result<f64, CliError> {
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(config_error(format!("`{key}` must lie in (0, 1), got {v}")))
    }
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides` (each `key=value`).
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: BTreeMap<String, String> = DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let mut set = |k: String, v: String, origin: &str| -> Result<(), CliError> {
            if !table.contains_key(&k) {
                return Err(config_error(format!("{origin}: unknown key `{k}`")));
            }
            table.insert(k, v);
            Ok(())
        };
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_error(format!("cannot read config `{}`: {e}", path.display())))?;
            for (i, line) in text.lines().enumerate() {
                let origin = format!("{}:{}", path.display(), i + 1);
                if let Some((k, v)) = parse_line(line, &origin)? {
                    set(k, v, &origin)?;
                }
            }
        }
        for item in overrides {
            match parse_line(item, "--set")? {
                Some((k, v)) => set(k, v, "--set")?,
                None => return Err(config_error(format!("--set: expected key=value, got `{item}`"))),
            }
        }
        Self::from_table(table)
    }

    fn from_table(table: BTreeMap<String, String>) -> Result<Self, CliError> {
        let t = Table(&table);
        let dim = t.u64("dim")?;
        let mut builder = NetworkBuilder {
            lambda0: t.f64("lambda0")?,
            lambda1: t.f64("lambda1")?,
            dim: u32::try_from(dim).map_err(|_| config_error("`dim` out of range"))?,
            beta: t.f64("beta")?,
            kappa: t.f64("kappa")?,
            mu: t.f64("mu")?,
            sigma2: t.f64("sigma2")?,
            threshold: 1.0,
        };
        match (t.opt_f64("T")?, t.opt_f64("C")?) {
            (Some(_), Some(_)) => return Err(config_error("set either `T` or `C`, not both")),
            (Some(thr), None) => builder.threshold = thr,
            (None, Some(c)) => {
                if !(c > 0.0) {
                    return Err(config_error(format!("`C` must be positive, got {c}")));
                }
                builder = builder.calibrate_constant(c).map_err(|e| config_error(format!("`C`: {e}")))?;
            }
            (None, None) => {}
        }
        let network = builder.build().map_err(|e| config_error(e.to_string()))?;
        let c = network.c_constant().map_err(|e| config_error(e.to_string()))?;

        let coverage = match t.raw("coverage") {
            "auto" => CoverageChoice::Auto,
            "closed" => CoverageChoice::Closed,
            "numeric" => CoverageChoice::Numeric,
            other => return Err(config_error(format!("`coverage`: expected auto, closed or numeric, got `{other}`"))),
        };
        if coverage == CoverageChoice::Closed && !network.is_closed_form() {
            return Err(config_error("`coverage=closed` needs kappa = 0 and sigma2 = 0"));
        }

        let p = in_unit_interval("p", t.f64("p")?)?;
        let buffer = t.buffer("K")?;

        let p_min = t.f64("p_min")?;
        let p_max = t.f64("p_max")?;
        let p_points = t.u64("p_points")?;
        if !(0.0 <= p_min && p_min < p_max && p_max < 1.0) {
            return Err(config_error(format!("need 0 <= p_min < p_max < 1, got p_min={p_min}, p_max={p_max}")));
        }
        let p_grid = (1..=p_points).map(|i| p_min + (p_max - p_min) * i as f64 / p_points as f64).collect();
        let k_list = t.list("K_list", |s| s.parse::<Buffer>().ok())?;

        let tol = t.f64("tol")?;
        if !(tol > 0.0) {
            return Err(config_error(format!("`tol` must be positive, got {tol}")));
        }
        let max_iter = t.u64("max_iter")?;
        if max_iter == 0 {
            return Err(config_error("`max_iter` must be >= 1"));
        }
        let scan_step = t.f64("scan_step")?;
        if !(scan_step > 0.0 && scan_step < 1.0) {
            return Err(config_error(format!("`scan_step` must lie in (0, 1), got {scan_step}")));
        }
        let solver = SolverSettings {
            tol,
            max_iterations: max_iter as usize,
            verify_minimal: t.bool("verify_minimal")?,
            scan_step,
            ..SolverSettings::default()
        };

        let mode = match t.raw("sim_mode") {
            "pure_loss" => ModeChoice::PureLoss,
            "exact" => ModeChoice::Exact,
            "meanfield_fixed" => ModeChoice::MeanFieldFixed,
            "meanfield_adaptive" => ModeChoice::MeanFieldAdaptive,
            other => return Err(config_error(format!("`sim_mode`: unknown mode `{other}`"))),
        };
        let q = t.f64("q")?;
        if !(0.0..=1.0).contains(&q) {
            return Err(config_error(format!("`q` must lie in [0, 1], got {q}")));
        }
        let geometry = match t.raw("geometry") {
            "quenched" => Geometry::Quenched,
            "annealed" => Geometry::Annealed,
            other => return Err(config_error(format!("`geometry`: expected quenched or annealed, got `{other}`"))),
        };
        let batches = t.u64("batches")? as usize;
        let slots = t.u64("slots")?;
        let warmup = t.f64("warmup")?;
        if !(0.0..1.0).contains(&warmup) {
            return Err(config_error(format!("`warmup` must lie in [0, 1), got {warmup}")));
        }
        if slots == 0 || batches == 0 {
            return Err(config_error("`slots` and `batches` must be >= 1"));
        }
        let sim = SimConfig {
            mode,
            q,
            scenario: ScenarioSettings {
                window_side: t.f64("window")?,
                wrap: t.bool("wrap")?,
                ..ScenarioSettings::default()
            },
            run: RunSettings {
                n_slots: slots,
                warmup_fraction: warmup,
                batches,
                geometry,
            },
            replications: t.u64("replications")?,
        };

        let figures = if t.raw("figures") == "all" {
            (1..=6).collect()
        } else {
            t.list("figures", |s| s.parse::<u32>().ok())?
        };
        if let Some(bad) = figures.iter().find(|f| !(1..=6).contains(*f)) {
            return Err(config_error(format!("unknown figure id {bad} (expected 1..6)")));
        }

        let dimension = DimensionConfig {
            p0: in_unit_interval("dim_p0", t.f64("dim_p0")?)?,
            max_loss: t.f64("L_max")?,
            max_delay: t.f64("D_max")?,
            fig4_p: t.list("fig4_p", |s| s.parse::<f64>().ok().filter(|p| *p > 0.0 && *p < 1.0))?,
        };

        let non_negative = |s: &str| s.parse::<f64>().ok().filter(|x| *x >= 0.0);
        let figure = FigureConfig {
            fig5_kappa: t.list("fig5_kappa", non_negative)?,
            fig5_sigma2: t.list("fig5_sigma2", non_negative)?,
            fig5_q_points: t.u64("fig5_q_points")? as usize,
            fig6_kappa: t.list("fig6_kappa", non_negative)?,
        };

        Ok(Self {
            network,
            c,
            coverage,
            p,
            buffer,
            p_grid,
            k_list,
            solver,
            sim,
            seed: t.u64("seed")?,
            figures,
            dimension,
            figure,
            resolved: table,
        })
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.resolved.insert("seed".into(), seed.to_string());
    }

    pub fn set_figures(&mut self, ids: Vec<u32>) -> Result<(), CliError> {
        if let Some(bad) = ids.iter().find(|f| !(1..=6).contains(*f)) {
            return Err(config_error(format!("unknown figure id {bad} (expected 1..6)")));
        }
        let text = ids.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        self.resolved.insert("figures".into(), text);
        self.figures = ids;
        Ok(())
    }

    /// Resolved `key=value` pairs in key order.
    pub fn resolved(&self) -> impl Iterator<Item = (&str, &str)> {
        self.resolved.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// First 16 hex digits of the SHA-256 of the resolved table.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.resolved() {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Coverage function for the configured network.
    pub fn coverage_fn(&self) -> Result<Box<dyn CoverageFn + Send>, CliError> {
        network_coverage(&self.network, self.coverage)
    }
}

pub fn network_coverage(network: &NetworkParams, choice: CoverageChoice) -> Result<Box<dyn CoverageFn + Send>, CliError> {
    let err = |e: pvcell::Error| config_error(e.to_string());
    match choice {
        CoverageChoice::Auto => coverage_for(network).map_err(err),
        CoverageChoice::Closed => Ok(Box::new(ClosedFormCoverage::new(network.c_constant().map_err(err)?).map_err(err)?)),
        CoverageChoice::Numeric => Ok(Box::new(CoverageEvaluator::new(*network).map_err(err)?)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::load(None, &[]).unwrap();
        assert_eq!(c.p_grid.len(), 50);
        assert_eq!(c.k_list.len(), 6);
        assert_eq!(c.k_list[5], Buffer::Infinite);
        assert!((c.c - 7.853_981_633_974_483).abs() < 1e-9);
    }

    #[test]
    fn overrides_win_and_hash_changes() {
        let a = RunConfig::load(None, &[]).unwrap();
        let b = RunConfig::load(None, &["C=4".into()]).unwrap();
        assert!((b.c - 4.0).abs() < 1e-9);
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), RunConfig::load(None, &[]).unwrap().hash());
    }

    #[test]
    fn malformed_input_is_rejected() {
        for bad in ["p=abc", "nonsense=1", "K=-3", "p=1.5", "T=1", "coverage=maybe", "p_points=-1", "C=0"] {
            let mut args = vec![bad.to_string()];
            if bad == "T=1" {
                args.push("C=4".into());
            }
            assert!(RunConfig::load(None, &args).is_err(), "{bad}");
        }
        assert!(RunConfig::load(None, &["novalue".into()]).is_err());
    }

    #[test]
    fn empty_grid_is_allowed() {
        let c = RunConfig::load(None, &["p_points=0".into()]).unwrap();
        assert!(c.p_grid.is_empty());
    }
}
