//! Minute-level actigraphy CSV to epoch series, and the simulated-series
//! table format.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use bchmm_core::{ObservationSeries, Series, SimulatedSeries};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    Sqrt,
    None,
}

impl Transform {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Self::Sqrt => x.sqrt(),
            Self::None => x,
        }
    }
}

/// One subject's epoch series.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSeries {
    pub subject_id: String,
    pub series: Series,
}

pub const MINUTE_HEADER: [&str; 3] = ["subject_id", "minute_index", "mims"];
pub const SIMULATED_HEADER: [&str; 4] = ["subject_id", "epoch_index", "value", "state"];

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| CliError::io(path, e))
}

fn parse_error(source: &str, line: u64, message: impl Into<String>) -> CliError {
    CliError::Parse {
        path: source.to_string(),
        line,
        message: message.into(),
    }
}

fn check_header(source: &str, reader: &mut csv::Reader<impl Read>, expected: &[&str]) -> Result<()> {
    let header = reader
        .headers()
        .map_err(|e| parse_error(source, 1, e.to_string()))?
        .clone();
    let got: Vec<&str> = header.iter().map(str::trim).collect();
    if got != expected {
        return Err(parse_error(
            source,
            1,
            format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

fn reader_for(input: impl Read) -> csv::Reader<impl Read> {
    csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(input)
}

/// Reads `subject_id,minute_index,mims` rows from a file; see
/// [`ingest_reader`].
pub fn ingest_csv(path: &Path, epoch_minutes: u32, transform: Transform) -> Result<Vec<SubjectSeries>> {
    ingest_reader(open(path)?, &path.display().to_string(), epoch_minutes, transform)
}

/// Aggregates minute records into epochs per subject. An epoch's value is
/// the transformed sum of its observed minutes; it is missing when none of
/// its minutes is observed. Each series spans the first to the last epoch
/// containing a record, and subjects are returned sorted by id.
pub fn ingest_reader(
    input: impl Read,
    source: &str,
    epoch_minutes: u32,
    transform: Transform,
) -> Result<Vec<SubjectSeries>> {
    if epoch_minutes == 0 || 1440 % epoch_minutes != 0 {
        return Err(CliError::Config(format!(
            "epoch length {epoch_minutes} min must divide a day"
        )));
    }
    let mut reader = reader_for(input);
    check_header(source, &mut reader, &MINUTE_HEADER)?;

    // subject -> minute -> value (None when missing)
    let mut minutes: BTreeMap<String, BTreeMap<u64, Option<f64>>> = BTreeMap::new();
    let mut last_minute: BTreeMap<String, u64> = BTreeMap::new();
    let mut reordered = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(source, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(parse_error(source, line, format!("expected 3 fields, found {}", record.len())));
        }
        let subject = record[0].to_string();
        if subject.is_empty() {
            return Err(parse_error(source, line, "empty subject_id"));
        }
        let minute: u64 = record[1]
            .parse()
            .map_err(|_| parse_error(source, line, format!("invalid minute_index `{}`", &record[1])))?;
        let value = if record[2].is_empty() {
            None
        } else {
            let v: f64 = record[2]
                .parse()
                .map_err(|_| parse_error(source, line, format!("invalid mims `{}`", &record[2])))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(parse_error(source, line, format!("mims must be finite and nonnegative, got {v}")));
            }
            Some(v)
        };
        if let Some(&prev) = last_minute.get(&subject) {
            if minute < prev && reordered.insert(subject.clone()) {
                log::warn!("{source}: minutes of subject {subject} are not in increasing order; reordering");
            }
        }
        last_minute.insert(subject.clone(), minute);
        if minutes.entry(subject.clone()).or_default().insert(minute, value).is_some() {
            return Err(CliError::Data(format!(
                "{source}: line {line}: duplicate minute {minute} for subject {subject}"
            )));
        }
    }

    let e = epoch_minutes as u64;
    Ok(minutes
        .into_iter()
        .map(|(subject_id, mins)| {
            let first = mins.keys().next().copied().unwrap_or(0) / e;
            let last = mins.keys().next_back().copied().unwrap_or(0) / e;
            let n = (last - first + 1) as usize;
            let mut sums = vec![0.0; n];
            let mut seen = vec![false; n];
            for (minute, value) in mins {
                if let Some(v) = value {
                    let k = (minute / e - first) as usize;
                    sums[k] += v;
                    seen[k] = true;
                }
            }
            let values = sums
                .iter()
                .zip(&seen)
                .map(|(&s, &ok)| if ok { transform.apply(s) } else { 0.0 })
                .collect();
            SubjectSeries {
                subject_id,
                series: ObservationSeries {
                    values,
                    missing: seen.iter().map(|s| !s).collect(),
                    epoch_minutes,
                    start_hour: (first * e) as f64 / 60.0,
                },
            }
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct SimulatedRow {
    subject_id: String,
    epoch_index: usize,
    value: f64,
    state: usize,
}

/// Writes simulated series as `subject_id,epoch_index,value,state` with
/// 1-based states.
pub fn write_simulated(mut out: impl Write, series: &[SimulatedSeries<f64>]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(&mut out);
    for s in series {
        for (k, (&value, &state)) in s.observations.values.iter().zip(&s.states).enumerate() {
            writer
                .serialize(SimulatedRow {
                    subject_id: s.subject_id.clone(),
                    epoch_index: k,
                    value,
                    state: state + 1,
                })
                .map_err(|e| CliError::Serialize(e.to_string()))?;
        }
    }
    writer.flush().map_err(|e| CliError::Serialize(e.to_string()))?;
    Ok(())
}

/// Reads the table written by [`write_simulated`]. Series start at
/// midnight and have no missing epochs.
pub fn read_simulated(input: impl Read, source: &str, epoch_minutes: u32) -> Result<Vec<SimulatedSeries<f64>>> {
    let mut reader = reader_for(input);
    check_header(source, &mut reader, &SIMULATED_HEADER)?;
    let mut table: BTreeMap<String, Vec<(usize, f64, usize)>> = BTreeMap::new();
    for row in reader.deserialize::<SimulatedRow>() {
        let row = row.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(source, line, e.to_string())
        })?;
        if row.state == 0 {
            return Err(CliError::Data(format!("{source}: states are 1-based")));
        }
        table
            .entry(row.subject_id)
            .or_default()
            .push((row.epoch_index, row.value, row.state - 1));
    }
    table
        .into_iter()
        .map(|(subject_id, mut rows)| {
            rows.sort_by_key(|r| r.0);
            if rows.iter().enumerate().any(|(k, r)| r.0 != k) {
                return Err(CliError::Data(format!(
                    "{source}: epochs of subject {subject_id} are not contiguous from 0"
                )));
            }
            Ok(SimulatedSeries {
                states: rows.iter().map(|r| r.2).collect(),
                observations: ObservationSeries::complete(rows.iter().map(|r| r.1).collect(), epoch_minutes),
                subject_id,
            })
        })
        .collect()
}

/// Loads subject series from either table format, chosen by header.
pub fn load_series(path: &Path, epoch_minutes: u32, transform: Transform) -> Result<Vec<SubjectSeries>> {
    let mut text = String::new();
    open(path)?
        .read_to_string(&mut text)
        .map_err(|e| CliError::io(path, e))?;
    let source = path.display().to_string();
    let first = text.lines().next().unwrap_or_default();
    if first.trim().starts_with("subject_id,epoch_index") {
        Ok(read_simulated(text.as_bytes(), &source, epoch_minutes)?
            .into_iter()
            .map(|s| SubjectSeries {
                subject_id: s.subject_id,
                series: s.observations,
            })
            .collect())
    } else {
        ingest_reader(text.as_bytes(), &source, epoch_minutes, transform)
    }
}
