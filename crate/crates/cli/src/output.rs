//! Versioned CSV emission.
//!
//! Every file starts with `#` comment lines naming the schema, command,
//! artifact version, config hash and seed, followed by the resolved config.
//! Floats use 17 significant digits so identical configurations produce
//! byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use crate::config::RunConfig;
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Shortest text that round-trips under any locale: `{:.16e}`, with
/// `nan`, `inf` and `-inf` spelled out.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "nan".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

pub fn fmt_bool(b: bool) -> String {
    if b { "true" } else { "false" }.into()
}

#[derive(Debug, Clone)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&'static str]) -> Self {
        Self {
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len(), "row width");
        self.rows.push(row);
    }

    pub fn render(&self, command: &str, config: &RunConfig) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# schema=pvcell-{command}/{SCHEMA_VERSION}");
        let _ = writeln!(s, "# command={command}");
        let _ = writeln!(s, "# version={}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "# config_hash={}", config.hash());
        let _ = writeln!(s, "# seed={}", config.seed);
        for (k, v) in config.resolved() {
            let _ = writeln!(s, "# config.{k}={v}");
        }
        s.push_str(&self.columns.join(","));
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }
}

/// Writes to `path`, or stdout when `None`.
pub fn emit(text: &str, path: Option<&Path>) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Io(format!("cannot write `{}`: {e}", p.display()))),
        None => {
            use std::io::Write;
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes()).map_err(|e| CliError::Io(format!("stdout: {e}")))
        }
    }
}
