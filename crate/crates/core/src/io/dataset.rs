//! Dose/observation CSV: `ID,TIME,DOSE,DUR,OUT,<covariates...>`.
//!
//! A row with `DOSE` set is a dose (`DUR` empty or 0 for a bolus); a row with
//! `OUT` set is an observation. Covariates are constant per subject; empty
//! cells are missing values.

use std::collections::BTreeMap;
use std::path::Path;

use super::{fmt_f64, write_atomic, IoError};
use crate::model::{DoseEvent, Observation, SubjectRecord};

const FIXED: [&str; 5] = ["ID", "TIME", "DOSE", "DUR", "OUT"];

fn parse_cell(cell: &str, line: u64, column: &str) -> Result<Option<f64>, IoError> {
    let cell = cell.trim();
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Some)
        .ok_or_else(|| IoError::Parse { line, message: format!("column {column}: '{cell}' is not a number") })
}

struct Pending {
    id: String,
    first_line: u64,
    last_time: f64,
    doses: Vec<DoseEvent>,
    observations: Vec<Observation>,
    covariates: BTreeMap<String, f64>,
}

impl Pending {
    fn finish(self) -> Result<SubjectRecord, IoError> {
        let line = self.first_line;
        SubjectRecord::new(self.id, self.doses, self.observations, self.covariates)
            .map_err(|e| IoError::Parse { line, message: e.to_string() })
    }
}

/// Parses dataset text. Subjects come out in order of first appearance.
pub fn parse_dataset_str(text: &str) -> Result<Vec<SubjectRecord>, IoError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader.headers().map_err(|e| IoError::Parse { line: 1, message: e.to_string() })?.clone();
    for (j, name) in FIXED.iter().enumerate() {
        if headers.get(j).map(|h| h.to_ascii_uppercase()) != Some(name.to_string()) {
            return Err(IoError::Parse {
                line: 1,
                message: format!("header must start with {}; column {} is {:?}", FIXED.join(","), j + 1, headers.get(j)),
            });
        }
    }
    let cov_names: Vec<String> = headers.iter().skip(FIXED.len()).map(|s| s.to_string()).collect();
    let mut subjects = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut current: Option<Pending> = None;
    for record in reader.records() {
        let record = record.map_err(|e| IoError::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let id = record.get(0).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(IoError::Parse { line, message: "empty ID".into() });
        }
        let time = parse_cell(&record[1], line, "TIME")?
            .ok_or_else(|| IoError::Parse { line, message: "missing TIME".into() })?;
        if time < 0.0 {
            return Err(IoError::Parse { line, message: format!("negative TIME {time}") });
        }
        let dose = parse_cell(&record[2], line, "DOSE")?;
        let dur = parse_cell(&record[3], line, "DUR")?;
        let out = parse_cell(&record[4], line, "OUT")?;

        if current.as_ref().is_none_or(|c| c.id != id) {
            if let Some(done) = current.take() {
                subjects.push(done.finish()?);
            }
            if !seen.insert(id.clone()) {
                return Err(IoError::Parse { line, message: format!("rows for ID {id} are not contiguous") });
            }
            current = Some(Pending {
                id: id.clone(),
                first_line: line,
                last_time: f64::NEG_INFINITY,
                doses: Vec::new(),
                observations: Vec::new(),
                covariates: BTreeMap::new(),
            });
        }
        let subj = current.as_mut().expect("set above");
        if time < subj.last_time {
            return Err(IoError::Parse { line, message: format!("TIME {time} is earlier than the previous row of ID {id}") });
        }
        subj.last_time = time;
        match (dose, out) {
            (Some(_), Some(_)) => {
                return Err(IoError::Parse { line, message: "row has both DOSE and OUT".into() });
            }
            (None, None) => {
                return Err(IoError::Parse { line, message: "row has neither DOSE nor OUT".into() });
            }
            (Some(amount), None) => {
                if amount < 0.0 {
                    return Err(IoError::Parse { line, message: format!("negative DOSE {amount}") });
                }
                subj.doses.push(DoseEvent { time, amount, duration: dur.unwrap_or(0.0) });
            }
            (None, Some(value)) => subj.observations.push(Observation { time, value }),
        }
        for (j, name) in cov_names.iter().enumerate() {
            let cell = record.get(FIXED.len() + j).unwrap_or("");
            if let Some(v) = parse_cell(cell, line, name)? {
                match subj.covariates.get(name) {
                    Some(prev) if *prev != v => {
                        return Err(IoError::Parse {
                            line,
                            message: format!("covariate {name} changes within ID {id} ({prev} then {v})"),
                        });
                    }
                    _ => {
                        subj.covariates.insert(name.clone(), v);
                    }
                }
            }
        }
    }
    if let Some(done) = current.take() {
        subjects.push(done.finish()?);
    }
    if subjects.is_empty() {
        return Err(IoError::Parse { line: 1, message: "no data rows".into() });
    }
    Ok(subjects)
}

pub fn parse_dataset(path: &Path) -> Result<Vec<SubjectRecord>, IoError> {
    let text = std::fs::read_to_string(path).map_err(|source| IoError::Io { path: path.to_path_buf(), source })?;
    parse_dataset_str(&text).map_err(|e| e.in_file(path))
}

/// Serializes subjects; rows are time-ordered within a subject with doses
/// first at equal times. The covariate columns are the union over subjects.
pub fn dataset_to_string(subjects: &[SubjectRecord]) -> String {
    let cov_names: Vec<String> = subjects
        .iter()
        .flat_map(|s| s.covariates().keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let mut header: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
    header.extend(cov_names.iter().cloned());
    w.write_record(&header).expect("in-memory write");
    for s in subjects {
        let covs: Vec<String> =
            cov_names.iter().map(|n| s.covariates().get(n).map(|v| fmt_f64(*v)).unwrap_or_default()).collect();
        let mut rows: Vec<(f64, u8, Vec<String>)> = Vec::new();
        for d in s.doses() {
            rows.push((d.time, 0, vec![fmt_f64(d.amount), fmt_f64(d.duration), String::new()]));
        }
        for o in s.observations() {
            rows.push((o.time, 1, vec![String::new(), String::new(), fmt_f64(o.value)]));
        }
        rows.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for (time, _, cells) in rows {
            let mut rec = vec![s.id().to_string(), fmt_f64(time)];
            rec.extend(cells);
            rec.extend(covs.iter().cloned());
            w.write_record(&rec).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 output")
}

pub fn write_dataset(path: &Path, subjects: &[SubjectRecord]) -> Result<(), IoError> {
    write_atomic(path, dataset_to_string(subjects).as_bytes())
}
