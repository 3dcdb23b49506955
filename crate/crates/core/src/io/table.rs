//! Score tables as CSV: one row per case with the patient score, per-segment
//! scores, and ground truth. Floats print in Rust's shortest round-trip
//! form, so identical score vectors produce byte-identical files.

use crate::error::{Error, Result};
use crate::eval::ScoreRow;
use std::path::Path;

pub fn write_score_table(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::argument("score table needs at least one row"));
    }
    let n = rows[0].segment_scores.len();
    if rows
        .iter()
        .any(|r| r.segment_scores.len() != n || r.segment_labels.len() != n)
    {
        return Err(Error::argument("rows disagree on the segment count"));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(into_io(e)))?;
    let mut header = vec!["case_id".to_string(), "label".into(), "patient_score".into()];
    header.extend((1..=n).map(|s| format!("seg{s}_score")));
    header.extend((1..=n).map(|s| format!("seg{s}_label")));
    w.write_record(&header).map_err(|e| Error::Io(into_io(e)))?;
    for r in rows {
        let mut rec = vec![
            r.case_id.clone(),
            if r.label { "1".into() } else { "0".into() },
            r.patient_score.to_string(),
        ];
        rec.extend(r.segment_scores.iter().map(f64::to_string));
        rec.extend(r.segment_labels.iter().map(|&l| if l { "1".into() } else { "0".to_string() }));
        w.write_record(&rec).map_err(|e| Error::Io(into_io(e)))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_score_table(path: &Path) -> Result<Vec<ScoreRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Io(into_io(e)))?;
    let header = reader.headers().map_err(|e| Error::Io(into_io(e)))?.clone();
    let n = header.iter().filter(|h| h.ends_with("_score") && h.starts_with("seg")).count();
    if header.len() != 3 + 2 * n {
        return Err(Error::precondition("score table header is malformed"));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Io(into_io(e)))?;
        if record.len() != 3 + 2 * n {
            return Err(Error::precondition("score table row width is malformed"));
        }
        let field = |i: usize| record.get(i).expect("width checked");
        let parse_f64 = |i: usize| -> Result<f64> {
            field(i)
                .parse()
                .map_err(|e| Error::precondition(format!("bad float in score table: {e}")))
        };
        let parse_bool = |i: usize| -> Result<bool> {
            match field(i) {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(Error::precondition(format!("bad flag {other:?} in score table"))),
            }
        };
        rows.push(ScoreRow {
            case_id: field(0).to_string(),
            label: parse_bool(1)?,
            patient_score: parse_f64(2)?,
            segment_scores: (0..n).map(|s| parse_f64(3 + s)).collect::<Result<_>>()?,
            segment_labels: (0..n).map(|s| parse_bool(3 + n + s)).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

/// Unwrap a csv error to its io cause so `?` can lift it into [`Error`].
pub fn into_io(e: csv::Error) -> std::io::Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io,
        other => std::io::Error::other(format!("csv: {other:?}")),
    }
}
