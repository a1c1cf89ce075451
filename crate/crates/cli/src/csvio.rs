//! Typed CSV output.
//!
//! Reals are written in scientific notation with 17 significant digits
//! (`{:.16e}`), which round-trips every `f64` exactly. Non-finite values are
//! written as `NaN`, `inf` and `-inf`. An empty cell means "not available".

use std::fs::File;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ColumnType {
    Int,
    Real,
    Str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub ty: ColumnType,
    /// Whether the cell may be empty.
    pub optional: bool,
}

pub fn col(name: impl Into<String>, ty: ColumnType) -> Column {
    Column {
        name: name.into(),
        ty,
        optional: false,
    }
}

pub fn opt(name: impl Into<String>, ty: ColumnType) -> Column {
    Column {
        name: name.into(),
        ty,
        optional: true,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Real(f64),
    Str(String),
    Empty,
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Real(x)
    }
}

impl From<Option<f64>> for Cell {
    fn from(x: Option<f64>) -> Self {
        x.map_or(Cell::Empty, Cell::Real)
    }
}

impl From<usize> for Cell {
    fn from(x: usize) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<i64> for Cell {
    fn from(x: i64) -> Self {
        Cell::Int(x)
    }
}

impl From<bool> for Cell {
    fn from(x: bool) -> Self {
        Cell::Int(x as i64)
    }
}

impl From<&str> for Cell {
    fn from(x: &str) -> Self {
        Cell::Str(x.to_string())
    }
}

impl From<String> for Cell {
    fn from(x: String) -> Self {
        Cell::Str(x)
    }
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Real(x) => format_real(*x),
            Cell::Str(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }
}

pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

/// Checks every row against the schema without writing anything.
pub fn validate(schema: &[Column], rows: &[Vec<Cell>]) -> Result<()> {
    for (i, row) in rows.iter().enumerate() {
        if row.len() != schema.len() {
            bail!("row {i}: {} cells for {} columns", row.len(), schema.len());
        }
        for (c, cell) in schema.iter().zip(row) {
            let ok = match (c.ty, cell) {
                (_, Cell::Empty) => c.optional,
                (ColumnType::Int, Cell::Int(_)) | (ColumnType::Real, Cell::Real(_)) => true,
                (ColumnType::Str, Cell::Str(s)) => !s.is_empty(),
                _ => false,
            };
            if !ok {
                bail!("row {i}, column `{}`: {cell:?} does not fit {:?}", c.name, c.ty);
            }
        }
    }
    Ok(())
}

/// Renders header and rows to bytes, LF-terminated.
pub fn render_csv(schema: &[Column], rows: &[Vec<Cell>]) -> Result<Vec<u8>> {
    validate(schema, rows)?;
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(schema.iter().map(|c| c.name.as_str()))?;
    for row in rows {
        w.write_record(row.iter().map(Cell::render))?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

/// Validates, then writes the whole file. A schema violation leaves no file.
pub fn emit_csv(schema: &[Column], rows: &[Vec<Cell>], path: &Path) -> Result<()> {
    let bytes = render_csv(schema, rows)?;
    let mut f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Parses a file written by [`emit_csv`] back into typed cells.
pub fn read_csv(schema: &[Column], path: &Path) -> Result<Vec<Vec<Cell>>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let expected: Vec<&str> = schema.iter().map(|c| c.name.as_str()).collect();
    if header != expected {
        bail!("{}: header {header:?}, expected {expected:?}", path.display());
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = schema
            .iter()
            .zip(rec.iter())
            .map(|(c, s)| {
                Ok(match c.ty {
                    _ if s.is_empty() => Cell::Empty,
                    ColumnType::Int => Cell::Int(s.parse().with_context(|| format!("column `{}`", c.name))?),
                    ColumnType::Real => Cell::Real(s.parse().with_context(|| format!("column `{}`", c.name))?),
                    ColumnType::Str => Cell::Str(s.to_string()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}
