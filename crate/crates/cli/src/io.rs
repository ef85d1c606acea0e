//! CSV ingestion and output.
//!
//! Single-level input has the header `z,m,r`; multilevel input has
//! `subject,session,z,m,r`. Columns may come in any order. Subject and
//! session labels are arbitrary strings and are mapped to dense ids in order
//! of first appearance.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use cma_core::{CmaError, MultilevelDataset, SessionKey, TrialSeries};
use serde::Serialize;

use crate::error::{CliError, Result};

const SINGLE_COLUMNS: [&str; 3] = ["z", "m", "r"];
const MULTI_COLUMNS: [&str; 5] = ["subject", "session", "z", "m", "r"];

/// Parsed rows with the input line each came from.
struct Table {
    rows: Vec<(u64, Vec<String>)>,
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> CliError {
    CliError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_table(path: &Path, columns: &[&str]) -> Result<Table> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let mut index = Vec::with_capacity(columns.len());
    for col in columns {
        match header.iter().position(|h| h.eq_ignore_ascii_case(col)) {
            Some(i) => index.push(i),
            None => {
                return Err(parse_error(
                    path,
                    1,
                    format!("missing column '{col}' (expected header {})", columns.join(",")),
                ))
            }
        }
    }
    if let Some(extra) = header
        .iter()
        .find(|h| !columns.iter().any(|c| h.eq_ignore_ascii_case(c)))
    {
        return Err(parse_error(path, 1, format!("unexpected column '{extra}'")));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        rows.push((line, index.iter().map(|&i| record[i].to_string()).collect()));
    }
    if rows.is_empty() {
        return Err(parse_error(path, 2, "no data rows"));
    }
    Ok(Table { rows })
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        csv::ErrorKind::UnequalLengths {
            expected_len, len, ..
        } => parse_error(path, line, format!("expected {expected_len} fields, found {len}")),
        csv::ErrorKind::Utf8 { err, .. } => parse_error(path, line, format!("invalid UTF-8: {err}")),
        other => parse_error(path, line, format!("{other:?}")),
    }
}

fn number(path: &Path, line: u64, column: &str, text: &str) -> Result<f64> {
    let v: f64 = text
        .parse()
        .map_err(|_| parse_error(path, line, format!("column '{column}': '{text}' is not a number")))?;
    if !v.is_finite() {
        return Err(parse_error(path, line, format!("column '{column}': value must be finite")));
    }
    if column == "z" && v != 0.0 && v != 1.0 {
        return Err(parse_error(path, line, format!("column 'z': treatment must be 0 or 1, found {text}")));
    }
    Ok(v)
}

fn series_from(path: &Path, rows: &[(u64, Vec<String>)], offset: usize) -> Result<TrialSeries> {
    let mut z = Vec::with_capacity(rows.len());
    let mut m = Vec::with_capacity(rows.len());
    let mut r = Vec::with_capacity(rows.len());
    for (line, fields) in rows {
        z.push(number(path, *line, "z", &fields[offset])?);
        m.push(number(path, *line, "m", &fields[offset + 1])?);
        r.push(number(path, *line, "r", &fields[offset + 2])?);
    }
    Ok(TrialSeries { z, m, r })
}

pub fn read_single(path: &Path) -> Result<TrialSeries> {
    let table = read_table(path, &SINGLE_COLUMNS)?;
    let raw = series_from(path, &table.rows, 0)?;
    cma_core::validate_series(raw).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

pub fn read_multilevel(path: &Path) -> Result<MultilevelDataset> {
    let table = read_table(path, &MULTI_COLUMNS)?;
    // Group rows by (subject, session), keeping first-appearance order.
    let mut groups: Vec<((String, String), Vec<(u64, Vec<String>)>)> = Vec::new();
    let mut lookup = std::collections::HashMap::new();
    for (line, fields) in table.rows {
        let key = (fields[0].clone(), fields[1].clone());
        if key.0.is_empty() || key.1.is_empty() {
            return Err(parse_error(path, line, "empty subject or session label"));
        }
        let slot = *lookup.entry(key.clone()).or_insert_with(|| {
            groups.push((key, Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push((line, fields));
    }
    let mut labeled = Vec::with_capacity(groups.len());
    for ((subject, session), rows) in &groups {
        let series = series_from(path, rows, 2)?;
        labeled.push((subject.as_str(), session.as_str(), series));
    }
    MultilevelDataset::from_labeled(labeled).map_err(|e| match e {
        CmaError::Session { key, source } => {
            let (subject, session) = label_of(&groups, key);
            CliError::Validation(format!(
                "{}: subject '{subject}' session '{session}': {source}",
                path.display()
            ))
        }
        other => CliError::Validation(format!("{}: {other}", path.display())),
    })
}

/// Recovers the input labels of a dense session key.
fn label_of(groups: &[((String, String), Vec<(u64, Vec<String>)>)], key: SessionKey) -> (String, String) {
    let mut subjects: Vec<&str> = Vec::new();
    for ((s, _), _) in groups {
        if !subjects.contains(&s.as_str()) {
            subjects.push(s);
        }
    }
    let subject = subjects.get(key.subject as usize - 1).copied().unwrap_or("?");
    let session = groups
        .iter()
        .filter(|((s, _), _)| s == subject)
        .nth(key.session as usize - 1)
        .map_or("?", |((_, t), _)| t.as_str());
    (subject.to_string(), session.to_string())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .from_writer(create(path)?))
}

fn finish<W: Write>(path: &Path, mut w: csv::Writer<W>) -> Result<()> {
    w.flush().map_err(|e| CliError::io(path, e))
}

fn write_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::io(path, std::io::Error::other(format!("{other:?}"))),
    }
}

/// Writes rows of string cells with a header, RFC 4180 style.
pub fn write_rows(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(header).map_err(write_err(path))?;
    for row in rows {
        w.write_record(row).map_err(write_err(path))?;
    }
    finish(path, w)
}

pub fn write_single(path: &Path, s: &TrialSeries) -> Result<()> {
    let header: Vec<String> = SINGLE_COLUMNS.iter().map(|c| c.to_string()).collect();
    let rows: Vec<Vec<String>> = (0..s.n())
        .map(|t| vec![s.z[t].to_string(), s.m[t].to_string(), s.r[t].to_string()])
        .collect();
    write_rows(path, &header, &rows)
}

pub fn write_multilevel(path: &Path, data: &MultilevelDataset) -> Result<()> {
    let header: Vec<String> = MULTI_COLUMNS.iter().map(|c| c.to_string()).collect();
    let mut rows = Vec::with_capacity(data.total_trials());
    for (key, s) in data.iter() {
        for t in 0..s.n() {
            rows.push(vec![
                key.subject.to_string(),
                key.session.to_string(),
                s.z[t].to_string(),
                s.m[t].to_string(),
                s.r[t].to_string(),
            ]);
        }
    }
    write_rows(path, &header, &rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)
        .map_err(|e| CliError::io(path, std::io::Error::other(e)))?;
    w.write_all(b"\n")
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}
