//! Closed-loop log and its CSV/JSON encodings.
//!
//! CSV columns are grouped by a prefix before the first dot: `k`, `x.*`,
//! `u.*`, `y.*`, `rho.*`, `rho_hat.*`, then `status`, `qp_iterations`,
//! `solve_time[s]`, `cost` and `softened`. Units appear in brackets. Floats
//! are written in shortest round-trip form, so both encodings are lossless.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelInfo {
    pub name: String,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogMeta {
    pub scenario: String,
    pub arm: String,
    pub predictor: String,
    pub terminal_mode: String,
    pub horizon: usize,
    pub sample_time: f64,
    pub seed: u64,
    pub states: Vec<ChannelInfo>,
    pub inputs: Vec<ChannelInfo>,
    pub outputs: Vec<ChannelInfo>,
    pub n_rho: usize,
    /// `(start sample, reference in display units)`.
    pub references: Vec<(usize, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub k: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    /// Outputs in display units.
    pub y: Vec<f64>,
    pub rho: Vec<f64>,
    /// `ρ(k|k), …, ρ(k+N_p−1|k)` flattened entry by entry.
    pub rho_hat: Vec<f64>,
    pub status: String,
    pub qp_iterations: usize,
    /// Prediction build, assembly and QP solve, in seconds.
    pub solve_time: f64,
    pub cost: f64,
    pub softened: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub k: usize,
    pub kind: String,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopLog {
    pub meta: LogMeta,
    pub rows: Vec<LogRow>,
    #[serde(default)]
    pub events: Vec<LogEvent>,
}

impl ClosedLoopLog {
    pub fn new(meta: LogMeta) -> Self {
        Self { meta, rows: Vec::new(), events: Vec::new() }
    }

    pub fn event(&mut self, k: usize, kind: &str, detail: impl Into<String>) {
        self.events.push(LogEvent { k, kind: kind.into(), detail: detail.into() });
    }

    /// CSV header; the column count is
    /// `1 + n_x + n_u + n_y + n_rho + n_rho·N_p + 5`.
    pub fn csv_header(&self) -> Vec<String> {
        let m = &self.meta;
        let mut h = vec!["k".to_string()];
        let ch = |prefix: &str, c: &ChannelInfo| format!("{prefix}.{}[{}]", c.name, c.unit);
        h.extend(m.states.iter().map(|c| ch("x", c)));
        h.extend(m.inputs.iter().map(|c| ch("u", c)));
        h.extend(m.outputs.iter().map(|c| ch("y", c)));
        h.extend((1..=m.n_rho).map(|i| format!("rho.{i}")));
        for j in 0..m.horizon {
            h.extend((1..=m.n_rho).map(|i| format!("rho_hat.j{j}.{i}")));
        }
        h.extend(["status", "qp_iterations", "solve_time[s]", "cost", "softened"].map(String::from));
        h
    }

    /// Rows with wall-clock columns zeroed, for determinism checks.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        for r in &mut out.rows {
            r.solve_time = 0.0;
        }
        out
    }
}

pub fn write_json(log: &ClosedLoopLog, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer(&mut w, log).map_err(|source| Error::Json { path: path.into(), source })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json(path: &Path) -> Result<ClosedLoopLog> {
    let file = File::open(path).map_err(|source| Error::Read { path: path.into(), source })?;
    serde_json::from_reader(BufReader::new(file)).map_err(|source| Error::Json { path: path.into(), source })
}

fn fmt(v: f64) -> String {
    // Display prints the shortest string that parses back to the same value
    format!("{v}")
}

pub fn write_csv(log: &ClosedLoopLog, path: &Path) -> Result<()> {
    let csv_err = |source| Error::Csv { path: path.into(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(log.csv_header()).map_err(csv_err)?;
    for r in &log.rows {
        let mut rec = vec![r.k.to_string()];
        for part in [&r.x, &r.u, &r.y, &r.rho, &r.rho_hat] {
            rec.extend(part.iter().copied().map(fmt));
        }
        rec.push(r.status.clone());
        rec.push(r.qp_iterations.to_string());
        rec.push(fmt(r.solve_time));
        rec.push(fmt(r.cost));
        rec.push(r.softened.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads rows written by [`write_csv`]; the metadata must come from elsewhere.
pub fn read_csv_rows(path: &Path) -> Result<(Vec<String>, Vec<LogRow>)> {
    let csv_err = |source| Error::Csv { path: path.into(), source };
    let bad = |what: String| Error::Config(format!("{}: {what}", path.display()));
    let mut rd = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = rd.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let group = |p: &str| header.iter().filter(|h| h.split('.').next() == Some(p) && h.contains('.')).count();
    let (nx, nu, ny, nr, nh) = (group("x"), group("u"), group("y"), group("rho"), group("rho_hat"));
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != header.len() {
            return Err(bad(format!("row has {} fields, header has {}", rec.len(), header.len())));
        }
        let f = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(format!("column {}: {e}", header[i])));
        let vec = |start: usize, n: usize| (start..start + n).map(f).collect::<Result<Vec<f64>>>();
        let mut c = 1;
        let x = vec(c, nx)?;
        c += nx;
        let u = vec(c, nu)?;
        c += nu;
        let y = vec(c, ny)?;
        c += ny;
        let rho = vec(c, nr)?;
        c += nr;
        let rho_hat = vec(c, nh)?;
        c += nh;
        rows.push(LogRow {
            k: rec[0].parse().map_err(|e| bad(format!("k: {e}")))?,
            x,
            u,
            y,
            rho,
            rho_hat,
            status: rec[c].to_string(),
            qp_iterations: rec[c + 1].parse().map_err(|e| bad(format!("qp_iterations: {e}")))?,
            solve_time: f(c + 2)?,
            cost: f(c + 3)?,
            softened: rec[c + 4].parse().map_err(|e| bad(format!("softened: {e}")))?,
        });
    }
    Ok((header, rows))
}
