//! Rendering command results as JSON, CSV or text on stdout.

use std::io::Write;

use clap::ValueEnum;
use serde::Serialize;
use serde_json::Value;

use crate::CmdResult;

#[derive(Clone, Copy, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Text,
}

fn cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

fn fields(v: &impl Serialize) -> anyhow::Result<serde_json::Map<String, Value>> {
    match serde_json::to_value(v)? {
        Value::Object(m) => Ok(m),
        other => anyhow::bail!("expected an object, got {other}"),
    }
}

/// One flat record.
pub fn emit(format: Format, record: &impl Serialize) -> CmdResult {
    emit_rows(format, std::slice::from_ref(record))
}

/// A table of flat records sharing their keys.
pub fn emit_rows<T: Serialize>(format: Format, rows: &[T]) -> CmdResult {
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match format {
        Format::Json => {
            if rows.len() == 1 {
                writeln!(out, "{}", serde_json::to_string(&rows[0]).map_err(anyhow::Error::from)?)?;
            } else {
                writeln!(out, "{}", serde_json::to_string(rows).map_err(anyhow::Error::from)?)?;
            }
        }
        Format::Csv => {
            let mut w = csv::Writer::from_writer(&mut out);
            for (i, row) in rows.iter().enumerate() {
                let m = fields(row)?;
                if i == 0 {
                    w.write_record(m.keys())?;
                }
                w.write_record(m.values().map(cell))?;
            }
            w.flush()?;
        }
        Format::Text => {
            for (i, row) in rows.iter().enumerate() {
                if i > 0 {
                    writeln!(out)?;
                }
                for (k, v) in fields(row)? {
                    writeln!(out, "{k}: {}", cell(&v))?;
                }
            }
        }
    }
    Ok(())
}
