//! Dataset files: delimited text with a fixed header, one record per row.
//!
//! Columns: `subject_id, time_years, log10_vl, censored, detection_limit_log10`.
//! Numbers are written with Rust's shortest round-trip formatting, so a
//! written dataset parses back to bit-identical values.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ObservationRecord, SubjectData};

pub const DATASET_COLUMNS: [&str; 5] = [
    "subject_id",
    "time_years",
    "log10_vl",
    "censored",
    "detection_limit_log10",
];

/// What ingestion did to the raw rows.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct IngestReport {
    pub n_subjects: usize,
    pub n_records: usize,
    /// Subjects dropped for having fewer than two records.
    pub dropped_subjects: Vec<String>,
    /// 1-based line numbers of censored rows whose value was repaired to
    /// the detection limit.
    pub repaired_lines: Vec<u64>,
    pub warnings: Vec<String>,
}

pub fn write_dataset<W: Write>(subjects: &[SubjectData], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(DATASET_COLUMNS)?;
    for s in subjects {
        for r in s.records() {
            w.write_record(&[
                s.id.clone(),
                r.time.to_string(),
                r.value.to_string(),
                if r.censored { "1" } else { "0" }.to_string(),
                r.detection_limit.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset_path<P: AsRef<Path>>(subjects: &[SubjectData], path: P) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_dataset(subjects, std::io::BufWriter::new(file))
}

fn parse_f64(field: &str, name: &str, line: u64) -> Result<f64> {
    field.trim().parse::<f64>().map_err(|_| Error::Data {
        line,
        message: format!("cannot parse {name} from `{field}`"),
    })
}

fn parse_flag(field: &str, line: u64) -> Result<bool> {
    match field.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(Error::Data {
            line,
            message: format!("censored flag must be 0 or 1, got `{other}`"),
        }),
    }
}

/// Reads a dataset: groups rows by subject, sorts subjects by id and
/// records by time, repairs censored rows whose value differs from the
/// limit (with a warning), drops subjects with fewer than two records, and
/// rejects duplicate (subject, time) pairs.
pub fn read_dataset<R: Read>(reader: R) -> Result<(Vec<SubjectData>, IngestReport)> {
    let mut rd = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers = rd.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != DATASET_COLUMNS {
        return Err(Error::Data {
            line: 1,
            message: format!(
                "header must be `{}`, got `{}`",
                DATASET_COLUMNS.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut report = IngestReport::default();
    // (id, time, value, censored, limit, line)
    let mut rows: Vec<(String, f64, f64, bool, f64, u64)> = Vec::new();
    for record in rd.records() {
        let record = record?;
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(rows.len() as u64 + 2);
        if record.len() != DATASET_COLUMNS.len() {
            return Err(Error::Data {
                line,
                message: format!("expected {} fields, got {}", DATASET_COLUMNS.len(), record.len()),
            });
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(Error::Data {
                line,
                message: "empty subject_id".into(),
            });
        }
        let time = parse_f64(&record[1], "time_years", line)?;
        let mut value = parse_f64(&record[2], "log10_vl", line)?;
        let censored = parse_flag(&record[3], line)?;
        let limit = parse_f64(&record[4], "detection_limit_log10", line)?;
        if censored && value != limit {
            value = limit;
            report.repaired_lines.push(line);
            report.warnings.push(format!(
                "line {line}: censored value reset to its detection limit"
            ));
        }
        rows.push((id, time, value, censored, limit, line));
    }

    // Group by id, keeping line numbers for duplicate-time diagnostics.
    let mut by_id: std::collections::BTreeMap<String, Vec<(f64, f64, bool, f64, u64)>> =
        std::collections::BTreeMap::new();
    for (id, time, value, censored, limit, line) in rows {
        by_id
            .entry(id)
            .or_default()
            .push((time, value, censored, limit, line));
    }

    let mut subjects = Vec::new();
    for (id, mut recs) in by_id {
        recs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in recs.windows(2) {
            if w[1].0 == w[0].0 {
                return Err(Error::Data {
                    line: w[1].4,
                    message: format!("duplicate time {} for subject `{id}`", w[1].0),
                });
            }
        }
        if recs.len() < 2 {
            report.dropped_subjects.push(id);
            continue;
        }
        let first_line = recs[0].4;
        let records: Vec<ObservationRecord> = recs
            .into_iter()
            .map(|(time, value, censored, detection_limit, _)| ObservationRecord {
                time,
                value,
                censored,
                detection_limit,
            })
            .collect();
        let subject = SubjectData::new(id, records).map_err(|e| Error::Data {
            line: first_line,
            message: e.to_string(),
        })?;
        report.n_records += subject.len();
        subjects.push(subject);
    }
    report.n_subjects = subjects.len();
    if !report.dropped_subjects.is_empty() {
        report.warnings.push(format!(
            "dropped {} subject(s) with fewer than two records",
            report.dropped_subjects.len()
        ));
    }
    Ok((subjects, report))
}

pub fn ingest<P: AsRef<Path>>(path: P) -> Result<(Vec<SubjectData>, IngestReport)> {
    let file = std::fs::File::open(path)?;
    read_dataset(std::io::BufReader::new(file))
}
