//! CSV layouts.
//!
//! Space-time fields are wide: header `k,t,<x_0>,...,<x_{nx-1}>`, one row per
//! time node. Spatial profiles are `i,x,value`. Inputs are long: `t,x,value`
//! rows on the grid nodes. Values are written with 17 significant digits.

use std::fs::File;
use std::io::Write;
use std::path::Path;

use killbridge::{SpaceTimeField, SpaceTimeGrid};

use crate::error::{CliError, Result};

pub fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn create(path: &Path) -> Result<csv::Writer<File>> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn table_err(path: &Path, message: impl Into<String>) -> CliError {
    CliError::Table {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    table_err(path, e.to_string())
}

fn finish<W: Write>(path: &Path, w: csv::Writer<W>) -> Result<()> {
    w.into_inner()
        .map_err(|e| table_err(path, e.to_string()))?
        .flush()
        .map_err(|e| CliError::io(path, e))
}

pub fn write_field(path: &Path, field: &SpaceTimeField, g: &SpaceTimeGrid) -> Result<()> {
    field.check(g)?;
    let mut w = create(path)?;
    let mut header = vec!["k".to_string(), "t".to_string()];
    header.extend(g.xs().iter().map(|x| x.to_string()));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (k, row) in field.rows().enumerate() {
        let mut rec = vec![k.to_string(), fmt(g.t(k))];
        rec.extend(row.iter().map(|&v| fmt(v)));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    finish(path, w)
}

pub fn write_profile(path: &Path, name: &str, values: &[f64], g: &SpaceTimeGrid) -> Result<()> {
    let mut w = create(path)?;
    w.write_record(["i", "x", name]).map_err(|e| csv_err(path, e))?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([i.to_string(), fmt(g.x(i)), fmt(*v)])
            .map_err(|e| csv_err(path, e))?;
    }
    finish(path, w)
}

fn parse(path: &Path, line: u64, s: &str) -> Result<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| table_err(path, format!("line {line}: `{s}` is not a number")))
}

fn coordinate_matches(a: f64, b: f64, scale: f64) -> bool {
    (a - b).abs() <= 1e-9 * scale.max(1.0)
}

/// Read a wide space-time field written by [`write_field`].
pub fn read_field(path: &Path, g: &SpaceTimeGrid) -> Result<SpaceTimeField> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.len() != g.nx() + 2 || &header[0] != "k" || &header[1] != "t" {
        return Err(table_err(
            path,
            format!("expected header k,t and {} spatial columns, got {} columns", g.nx(), header.len()),
        ));
    }
    let span = g.x_max() - g.x_min();
    for i in 0..g.nx() {
        let x = parse(path, 1, &header[i + 2])?;
        if !coordinate_matches(x, g.x(i), span) {
            return Err(table_err(path, format!("column {} is x = {x}, grid node is {}", i + 2, g.x(i))));
        }
    }
    let mut data = Vec::with_capacity(g.nt() * g.nx());
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != g.nx() + 2 {
            return Err(table_err(path, format!("line {line}: {} columns", rec.len())));
        }
        for v in rec.iter().skip(2) {
            data.push(parse(path, line, v)?);
        }
        rows += 1;
    }
    if rows != g.nt() {
        return Err(table_err(path, format!("{rows} time rows, grid has {}", g.nt())));
    }
    Ok(SpaceTimeField::from_vec(g.nt(), g.nx(), data)?)
}

/// Read `t,x,value` rows covering every node of the grid (or every node at
/// `t = 0` when `initial_only`).
pub fn read_long(path: &Path, g: &SpaceTimeGrid, initial_only: bool) -> Result<SpaceTimeField> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let names: Vec<&str> = header.iter().collect();
    if names != ["t", "x", "value"] {
        return Err(table_err(path, format!("expected header t,x,value, got {}", names.join(","))));
    }
    let nt = if initial_only { 1 } else { g.nt() };
    let mut field = SpaceTimeField::zeros(nt, g.nx());
    let mut seen = vec![false; nt * g.nx()];
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 3 {
            return Err(table_err(path, format!("line {line}: expected 3 columns")));
        }
        let (t, x, v) = (parse(path, line, &rec[0])?, parse(path, line, &rec[1])?, parse(path, line, &rec[2])?);
        let k = node(t, 0.0, g.dt(), g.nt())
            .filter(|&k| k < nt)
            .ok_or_else(|| table_err(path, format!("line {line}: t = {t} is not a grid time")))?;
        let i = node(x, g.x_min(), g.dx(), g.nx())
            .ok_or_else(|| table_err(path, format!("line {line}: x = {x} is not a grid node")))?;
        if seen[k * g.nx() + i] {
            return Err(table_err(path, format!("line {line}: duplicate node (t = {t}, x = {x})")));
        }
        seen[k * g.nx() + i] = true;
        field.set(k, i, v);
    }
    if let Some(pos) = seen.iter().position(|s| !s) {
        return Err(table_err(
            path,
            format!("missing node t = {}, x = {}", g.t(pos / g.nx()), g.x(pos % g.nx())),
        ));
    }
    Ok(field)
}

fn node(v: f64, origin: f64, h: f64, n: usize) -> Option<usize> {
    let s = (v - origin) / h;
    let j = s.round();
    (j >= 0.0 && j < n as f64 && (s - j).abs() <= 1e-6).then_some(j as usize)
}
