//! Rendering of stream items as lines, csv or an aligned table.

use std::io::{self, Write};

use clap::ValueEnum;
use livewatch::wire::text;
use livewatch::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    /// One canonical-encoded value per line.
    Lines,
    /// Numeric leaves flattened to dotted columns, with a header row.
    Csv,
    /// Aligned columns for reading in a terminal.
    Table,
}

/// Leaves of `v` keyed by dotted path. A non-record top level is `value`.
pub fn flatten(v: &Value) -> Vec<(String, &Value)> {
    fn walk<'a>(path: String, v: &'a Value, out: &mut Vec<(String, &'a Value)>) {
        let join = |k: &str| if path.is_empty() { k.to_owned() } else { format!("{path}.{k}") };
        match v {
            Value::Record(r) if !r.is_empty() => r.iter().for_each(|(k, x)| walk(join(k), x, out)),
            Value::List(xs) if !xs.is_empty() => xs.iter().enumerate().for_each(|(i, x)| walk(join(&i.to_string()), x, out)),
            leaf => out.push((if path.is_empty() { "value".to_owned() } else { path }, leaf)),
        }
    }
    let mut out = Vec::new();
    match v {
        Value::Record(r) if !r.is_empty() => walk(String::new(), v, &mut out),
        _ => walk("value".to_owned(), v, &mut out),
    }
    out
}

fn number_text(v: &Value) -> Option<String> {
    match v {
        Value::Int(i) => Some(i.to_string()),
        Value::Float(f) if f.is_nan() => Some("NaN".into()),
        Value::Float(f) if f.is_infinite() => Some(if *f > 0.0 { "Inf" } else { "-Inf" }.into()),
        Value::Float(f) => Some(format!("{f:?}")),
        _ => None,
    }
}

/// Table cells round floats so columns keep their width.
fn cell_text(v: &Value) -> String {
    match v {
        Value::Str(s) => s.clone(),
        Value::Float(f) if f.is_finite() && *f != 0.0 && !(1e-4..1e6).contains(&f.abs()) => format!("{f:.4e}"),
        Value::Float(f) if f.is_finite() => format!("{f:.6}"),
        other => number_text(other).unwrap_or_else(|| text::encode_value(other)),
    }
}

fn write_csv<W: Write>(out: &mut W, fields: &[String]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(fields)?;
    w.flush()
}

const MIN_WIDTH: usize = 10;

pub struct Printer<W: Write> {
    format: Format,
    out: W,
    columns: Option<Vec<String>>,
    warned_non_numeric: bool,
    warned_new_columns: bool,
}

impl<W: Write> Printer<W> {
    pub fn new(format: Format, out: W) -> Self {
        Printer { format, out, columns: None, warned_non_numeric: false, warned_new_columns: false }
    }

    pub fn item(&mut self, seq: u64, v: &Value) -> io::Result<()> {
        match self.format {
            Format::Lines => {
                writeln!(self.out, "{}", text::encode_value(v))?;
                self.out.flush()
            }
            Format::Csv => self.csv_row(v),
            Format::Table => self.table_row(seq, v),
        }
    }

    fn warn_once(flag: &mut bool, message: &str) {
        if !*flag {
            *flag = true;
            eprintln!("warning: {message}");
        }
    }

    fn csv_row(&mut self, v: &Value) -> io::Result<()> {
        let leaves = flatten(v);
        if leaves.iter().any(|(_, x)| number_text(x).is_none()) {
            Self::warn_once(&mut self.warned_non_numeric, "non-numeric fields are left out of csv output");
        }
        if self.columns.is_none() {
            let columns: Vec<String> = leaves.iter().filter(|(_, x)| number_text(x).is_some()).map(|(k, _)| k.clone()).collect();
            write_csv(&mut self.out, &columns)?;
            self.columns = Some(columns);
        }
        let columns = self.columns.as_ref().unwrap();
        if leaves.iter().any(|(k, x)| number_text(x).is_some() && !columns.contains(k)) {
            Self::warn_once(&mut self.warned_new_columns, "fields absent from the first item are left out of csv output");
        }
        let row: Vec<String> = columns
            .iter()
            .map(|c| leaves.iter().find(|(k, _)| k == c).and_then(|(_, x)| number_text(x)).unwrap_or_default())
            .collect();
        write_csv(&mut self.out, &row)?;
        self.out.flush()
    }

    fn table_row(&mut self, seq: u64, v: &Value) -> io::Result<()> {
        let leaves = flatten(v);
        if self.columns.is_none() {
            let columns: Vec<String> = leaves.iter().map(|(k, _)| k.clone()).collect();
            let header: Vec<String> = std::iter::once("seq".to_owned()).chain(columns.iter().cloned()).collect();
            let line = header.iter().map(|h| format!("{h:>w$}", w = h.len().max(MIN_WIDTH))).collect::<Vec<_>>().join("  ");
            writeln!(self.out, "{line}")?;
            writeln!(self.out, "{}", "-".repeat(line.len()))?;
            self.columns = Some(columns);
        }
        let columns = self.columns.as_ref().unwrap();
        let mut cells = vec![format!("{seq:>w$}", w = MIN_WIDTH.max(3))];
        for c in columns {
            let w = c.len().max(MIN_WIDTH);
            let cell = leaves.iter().find(|(k, _)| k == c).map(|(_, x)| cell_text(x)).unwrap_or_default();
            cells.push(format!("{cell:>w$}"));
        }
        writeln!(self.out, "{}", cells.join("  "))?;
        self.out.flush()
    }

    pub fn finish(mut self) -> io::Result<()> {
        self.out.flush()
    }
}
