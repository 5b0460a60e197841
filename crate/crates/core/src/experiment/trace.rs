//! Metric trace CSV.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::TraceRow;

pub const TRACE_HEADER: &str = "epoch,lr,train_clean_acc,test_clean_acc,test_robust_acc,train_loss,kd_clean,kd_adv,ker_clean,ker_adv,ks_cl_clean,ks_cl_adv,ks_al_adv,grad_evals";

pub const TIMING_HEADER: &str = "epoch,wall_seconds";

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// One CSV record; floats use the shortest representation that round-trips.
pub fn format_row(r: &TraceRow) -> String {
    [
        r.epoch.to_string(),
        r.lr.to_string(),
        r.train_clean_acc.to_string(),
        r.test_clean_acc.to_string(),
        r.test_robust_acc.to_string(),
        r.train_loss.to_string(),
        opt(r.kd_clean),
        opt(r.kd_adv),
        opt(r.ker_clean),
        opt(r.ker_adv),
        opt(r.ks_cl_clean),
        opt(r.ks_cl_adv),
        opt(r.ks_al_adv),
        r.grad_evals.to_string(),
    ]
    .join(",")
}

pub fn write_trace<W: Write>(mut w: W, rows: &[TraceRow]) -> std::io::Result<()> {
    writeln!(w, "{TRACE_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", format_row(r))?;
    }
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: usize) -> Result<T> {
    rec.get(i).and_then(|s| s.parse().ok()).ok_or_else(|| Error::Format {
        what: "trace",
        detail: format!("record {line}: bad field {i}"),
    })
}

fn opt_field(rec: &csv::StringRecord, i: usize, line: usize) -> Result<Option<f64>> {
    match rec.get(i) {
        Some("") => Ok(None),
        _ => field(rec, i, line).map(Some),
    }
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace(&text)
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(TRACE_HEADER) {
        return Err(Error::Format {
            what: "trace",
            detail: "header does not match the trace schema".into(),
        });
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (n, rec) in rdr.records().skip(1).enumerate() {
        let rec = rec.map_err(|e| Error::Format {
            what: "trace",
            detail: e.to_string(),
        })?;
        rows.push(TraceRow {
            epoch: field(&rec, 0, n)?,
            lr: field(&rec, 1, n)?,
            train_clean_acc: field(&rec, 2, n)?,
            test_clean_acc: field(&rec, 3, n)?,
            test_robust_acc: field(&rec, 4, n)?,
            train_loss: field(&rec, 5, n)?,
            kd_clean: opt_field(&rec, 6, n)?,
            kd_adv: opt_field(&rec, 7, n)?,
            ker_clean: opt_field(&rec, 8, n)?,
            ker_adv: opt_field(&rec, 9, n)?,
            ks_cl_clean: opt_field(&rec, 10, n)?,
            ks_cl_adv: opt_field(&rec, 11, n)?,
            ks_al_adv: opt_field(&rec, 12, n)?,
            grad_evals: field(&rec, 13, n)?,
        });
    }
    Ok(rows)
}
