//! Artifact writing. Every file is staged next to its target and renamed into
//! place only after all of a run's files were written.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};

use rgflow::quadratic::fmt17;
use rgflow::FlowSequence;

use crate::CliError;

pub struct Artifacts {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Self {
        Artifacts {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn add(&mut self, name: &str, bytes: Vec<u8>) {
        self.files.push((name.to_string(), bytes));
    }

    /// `body` becomes the document; a `metadata` entry holding everything
    /// that may differ between identical runs is added alongside it.
    pub fn add_json(&mut self, name: &str, subcommand: &str, seed: u64, body: Value) -> Result<(), CliError> {
        let mut doc = body;
        let Value::Object(map) = &mut doc else {
            return Err(CliError::Io(format!("{name}: document is not an object")));
        };
        map.insert("metadata".into(), metadata(subcommand, seed));
        let mut text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))?;
        text.push('\n');
        self.add(name, text.into_bytes());
        Ok(())
    }

    pub fn commit(self) -> Result<Vec<PathBuf>, CliError> {
        let io = |p: &Path, e: std::io::Error| CliError::Io(format!("{}: {e}", p.display()));
        std::fs::create_dir_all(&self.dir).map_err(|e| io(&self.dir, e))?;
        let mut staged = Vec::new();
        for (name, bytes) in &self.files {
            let tmp = self.dir.join(format!(".{name}.{}.tmp", std::process::id()));
            if let Err(e) = std::fs::write(&tmp, bytes) {
                for (t, _) in &staged {
                    let _ = std::fs::remove_file(t);
                }
                let _ = std::fs::remove_file(&tmp);
                return Err(io(&tmp, e));
            }
            staged.push((tmp, self.dir.join(name)));
        }
        let mut done = Vec::new();
        for (tmp, dst) in staged {
            std::fs::rename(&tmp, &dst).map_err(|e| io(&dst, e))?;
            done.push(dst);
        }
        Ok(done)
    }
}

fn metadata(subcommand: &str, seed: u64) -> Value {
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    json!({
        "tool": "rgflow",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": subcommand,
        "seed": seed,
        "created_unix": now,
    })
}

pub fn to_value<T: Serialize>(x: &T) -> Result<Value, CliError> {
    serde_json::to_value(x).map_err(|e| CliError::Io(e.to_string()))
}

/// Columns `j, g, z, mu, chi, k_0 .. k_{d-1}`; `K` cells past an entry's own
/// dimension stay empty.
pub fn trajectory_csv(x: &FlowSequence, chi: &[f64]) -> Result<Vec<u8>, CliError> {
    let d = x.k.iter().map(Vec::len).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["j", "g", "z", "mu", "chi"].iter().map(|s| s.to_string()).collect();
    header.extend((0..d).map(|i| format!("k_{i}")));
    let err = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(&header).map_err(err)?;
    for (j, v) in x.v.iter().enumerate() {
        let mut row = vec![j.to_string(), fmt17(v.g), fmt17(v.z), fmt17(v.mu), fmt17(chi[j])];
        row.extend((0..d).map(|i| x.k[j].get(i).map(|&k| fmt17(k)).unwrap_or_default()));
        w.write_record(&row).map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::Io(e.to_string()))
}

/// Generic table with 17-digit floats.
pub struct Table {
    w: csv::Writer<Vec<u8>>,
}

pub enum Cell {
    Int(usize),
    Float(f64),
    Bool(bool),
    Text(String),
    Empty,
}

impl Table {
    pub fn new(header: &[&str]) -> Result<Self, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header).map_err(|e| CliError::Io(e.to_string()))?;
        Ok(Table { w })
    }

    pub fn row(&mut self, cells: Vec<Cell>) -> Result<(), CliError> {
        let rec: Vec<String> = cells
            .into_iter()
            .map(|c| match c {
                Cell::Int(i) => i.to_string(),
                Cell::Float(x) => fmt17(x),
                Cell::Bool(b) => b.to_string(),
                Cell::Text(s) => s,
                Cell::Empty => String::new(),
            })
            .collect();
        self.w.write_record(&rec).map_err(|e| CliError::Io(e.to_string()))
    }

    pub fn finish(self) -> Result<Vec<u8>, CliError> {
        self.w.into_inner().map_err(|e| CliError::Io(e.to_string()))
    }
}
