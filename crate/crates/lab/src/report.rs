//! CSV files.
//!
//! Training logs: `iteration,phase,<stage columns...>`; unused cells are `NaN`.
//! Metric reports start with `#` comment lines naming the metric substitutions
//! and then hold one row per (model, item) or per model.

use std::fmt::Write as _;
use std::path::Path;

use vsrdistill_core::eval::MetricsReport;
use vsrdistill_core::train::{LogRow, TrainLog};

use crate::error::{format_err, io_err, LabResult};

/// Header comment carried by every metric file.
pub const METRICS_NOTE: &[&str] = &[
    "warp = mean squared warping error under the analytic scene flow, x1e3; not comparable with estimated-flow numbers",
    "hf_ratio = high-frequency energy of the output over that of the HR clip; stands in for no-reference perceptual scores",
];

pub fn log_to_csv(log: &TrainLog) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["iteration".to_string(), "phase".to_string()];
    header.extend(log.columns.iter().map(|c| c.to_string()));
    w.write_record(&header).expect("in-memory write");
    for r in &log.rows {
        let mut rec = vec![r.iteration.to_string(), r.phase.clone()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Parses a log written by [`log_to_csv`], checking the columns against
/// `columns`.
pub fn log_from_csv(text: &str, columns: &[&'static str], origin: &Path) -> LabResult<TrainLog> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| format_err(origin, e))?.clone();
    let expected: Vec<&str> = ["iteration", "phase"].into_iter().chain(columns.iter().copied()).collect();
    if header.iter().collect::<Vec<_>>() != expected {
        return Err(format_err(origin, format!("log columns {header:?} differ from {expected:?}")));
    }
    let mut log = TrainLog::new(columns);
    for rec in r.records() {
        let rec = rec.map_err(|e| format_err(origin, e))?;
        let parse = |s: &str| s.parse::<f64>().map_err(|e| format_err(origin, format!("{s}: {e}")));
        log.push(LogRow {
            iteration: rec[0].parse().map_err(|e| format_err(origin, e))?,
            phase: rec[1].to_string(),
            values: rec.iter().skip(2).map(parse).collect::<LabResult<_>>()?,
        });
    }
    Ok(log)
}

pub fn write_text(path: &Path, text: &str) -> LabResult<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

fn note(extra: &[String]) -> String {
    let mut s = String::new();
    for line in METRICS_NOTE.iter().map(|s| s.to_string()).chain(extra.iter().cloned()) {
        writeln!(s, "# {line}").expect("string write");
    }
    s
}

fn csv_body(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(&r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

/// Per-item rows for every report: `model,seed,item,psnr,ssim,warp,hf_ratio`.
pub fn metrics_items_csv(reports: &[MetricsReport]) -> String {
    let rows = reports.iter().flat_map(|r| {
        r.items.iter().map(move |m| {
            vec![r.label.clone(), r.seed.to_string(), m.index.to_string(), m.psnr.to_string(), m.ssim.to_string(), m.warp.to_string(), m.hf_ratio.to_string()]
        })
    });
    note(&[]) + &csv_body(&["model", "seed", "item", "psnr", "ssim", "warp", "hf_ratio"], rows)
}

/// One row per report: `model,seed,items,psnr,ssim,warp,hf_ratio`.
pub fn metrics_summary_csv(reports: &[MetricsReport]) -> String {
    let rows = reports.iter().map(|r| {
        vec![r.label.clone(), r.seed.to_string(), r.items.len().to_string(), r.psnr.to_string(), r.ssim.to_string(), r.warp.to_string(), r.hf_ratio.to_string()]
    });
    note(&[]) + &csv_body(&["model", "seed", "items", "psnr", "ssim", "warp", "hf_ratio"], rows)
}

/// Reads `model -> psnr` pairs back from a summary file.
pub fn read_summary_psnr(text: &str, origin: &Path) -> LabResult<Vec<(String, f64)>> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| format_err(origin, e))?;
        out.push((rec[0].to_string(), rec[3].parse().map_err(|e| format_err(origin, e))?));
    }
    Ok(out)
}

/// A generic table with a leading comment block.
pub fn table_csv(comments: &[String], header: &[&str], rows: Vec<Vec<String>>) -> String {
    note(comments) + &csv_body(header, rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_round_trip_is_exact() {
        let mut log = TrainLog::new(&["a", "b"]);
        log.push(LogRow { iteration: 0, phase: "aux".into(), values: vec![0.1 + 0.2, f64::NAN] });
        log.push(LogRow { iteration: 1, phase: "student".into(), values: vec![-1e-300, 12345.678901234567] });
        let back = log_from_csv(&log_to_csv(&log), &["a", "b"], Path::new("x")).unwrap();
        assert_eq!(back.rows.len(), 2);
        assert_eq!(back.rows[0].values[0].to_bits(), (0.1f64 + 0.2).to_bits());
        assert!(back.rows[0].values[1].is_nan());
        assert_eq!(back.rows[1].values, log.rows[1].values);
        assert!(log_from_csv(&log_to_csv(&log), &["a"], Path::new("x")).is_err());
    }
}
