//! Result emission. Everything except the manifest timestamp is a pure
//! function of the config and seed, so reruns are byte-identical.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::json;

use crate::diagnostic::Diagnostic;

pub struct Output {
    dir: Option<PathBuf>,
    command: String,
    seed: u64,
    config: serde_json::Value,
    cell_seeds: Vec<(String, u64)>,
    files: Vec<String>,
    summary: String,
}

/// One CSV cell.
pub enum Cell {
    F(f64),
    U(u64),
    B(bool),
    S(String),
}

impl std::fmt::Display for Cell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Cell::F(v) => write!(f, "{v:e}"),
            Cell::U(v) => write!(f, "{v}"),
            Cell::B(v) => write!(f, "{v}"),
            Cell::S(v) => write!(f, "{v}"),
        }
    }
}

impl Output {
    pub fn new(dir: Option<PathBuf>, command: &str, seed: u64, config: serde_json::Value) -> Result<Self, Diagnostic> {
        if let Some(d) = &dir {
            fs::create_dir_all(d)
                .map_err(|e| Diagnostic::failure("io", format!("cannot create {}: {e}", d.display())))?;
        }
        Ok(Self {
            dir,
            command: command.to_string(),
            seed,
            config,
            cell_seeds: Vec::new(),
            files: Vec::new(),
            summary: String::new(),
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn record_seed(&mut self, cell: impl Into<String>, seed: u64) {
        self.cell_seeds.push((cell.into(), seed));
    }

    pub fn line(&mut self, text: impl AsRef<str>) {
        self.summary.push_str(text.as_ref());
        self.summary.push('\n');
    }

    fn write(&mut self, name: &str, body: &str) -> Result<(), Diagnostic> {
        if let Some(d) = &self.dir {
            fs::write(d.join(name), body)?;
            self.files.push(name.to_string());
        }
        Ok(())
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), Diagnostic> {
        let mut body =
            serde_json::to_string_pretty(value).map_err(|e| Diagnostic::failure("serialization", e.to_string()))?;
        body.push('\n');
        self.write(name, &body)
    }

    pub fn csv(&mut self, name: &str, header: &[&str], rows: Vec<Vec<Cell>>) -> Result<(), Diagnostic> {
        let mut body = header.join(",");
        body.push('\n');
        for row in rows {
            let cells: Vec<String> = row.iter().map(Cell::to_string).collect();
            let _ = writeln!(body, "{}", cells.join(","));
        }
        self.write(name, &body)
    }

    /// Long-format `(series, t, value)` table for external plotting.
    pub fn series(&mut self, name: &str, series: &[(&str, &[f64], &[f64])]) -> Result<(), Diagnostic> {
        let mut rows = Vec::new();
        for (label, ts, vs) in series {
            for (t, v) in ts.iter().zip(vs.iter()) {
                rows.push(vec![Cell::S(label.to_string()), Cell::F(*t), Cell::F(*v)]);
            }
        }
        self.csv(name, &["series", "t", "value"], rows)
    }

    /// Writes the summary and manifest and echoes the summary to stdout.
    pub fn finish(mut self, status: &str) -> Result<(), Diagnostic> {
        print!("{}", self.summary);
        let summary = std::mem::take(&mut self.summary);
        self.write("summary.txt", &summary)?;
        let created = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let seeds: serde_json::Map<String, serde_json::Value> =
            self.cell_seeds.iter().map(|(k, v)| (k.clone(), json!(v))).collect();
        let manifest = json!({
            "tool": "entroproj",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "status": status,
            "seed": self.seed,
            "cell_seeds": seeds,
            "config": self.config,
            "files": self.files,
            "created_unix": created,
        });
        self.json("manifest.json", &manifest)
    }
}
