use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use super::{Dataset, Observation, PatientTrajectory, RecordKind, Value};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IngestFormat {
    #[default]
    JsonLines,
}

#[derive(Debug, Clone)]
pub struct IngestOptions {
    /// Timestamp strings are converted to fractional days since this instant.
    pub epoch: NaiveDateTime,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            epoch: chrono::DateTime::UNIX_EPOCH.naive_utc(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawTime {
    Days(f64),
    Stamp(String),
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawValue {
    Number(f64),
    Text(String),
}

#[derive(Debug, Deserialize)]
struct RawRecord {
    patient_id: String,
    time: RawTime,
    feature: String,
    #[serde(default)]
    value: Option<RawValue>,
    #[serde(default)]
    kind: Option<String>,
}

const STAMP_FORMATS: &[&str] = &[
    "%m/%d/%Y %H:%M",
    "%m/%d/%Y, %H:%M",
    "%m/%d/%Y %I:%M %p",
    "%m/%d/%Y, %I:%M %p",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%dT%H:%M",
    "%Y-%m-%d %H:%M",
];

fn parse_stamp(s: &str, epoch: NaiveDateTime) -> Option<f64> {
    let s = s.trim();
    let parsed = STAMP_FORMATS
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
        .or_else(|| {
            chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
                .ok()
                .and_then(|d| d.and_hms_opt(0, 0, 0))
        })?;
    let delta = parsed - epoch;
    Some(delta.num_milliseconds() as f64 / 86_400_000.0)
}

/// One raw event-stream record before code assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub patient_id: String,
    pub time: f64,
    pub feature: String,
    pub value: RecordValue,
    pub kind: RecordKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RecordValue {
    Number(f64),
    Text(String),
}

impl EventRecord {
    /// One line of the JSON-Lines event-stream format, without newline.
    pub fn to_json_line(&self) -> String {
        let value = match &self.value {
            RecordValue::Number(v) => serde_json::json!(v),
            RecordValue::Text(s) => serde_json::json!(s),
        };
        serde_json::json!({
            "patient_id": self.patient_id,
            "time": self.time,
            "feature": self.feature,
            "value": value,
            "kind": self.kind.as_str(),
        })
        .to_string()
    }
}

/// Reads an event-stream file into one trajectory per patient.
///
/// String values that parse as numbers are continuous.
pub fn ingest(path: &Path, format: IngestFormat, options: &IngestOptions) -> Result<Dataset> {
    let IngestFormat::JsonLines = format;
    let reader = BufReader::new(File::open(path)?);

    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let time = match raw.time {
            RawTime::Days(d) => d,
            RawTime::Stamp(s) => match s.trim().parse::<f64>() {
                Ok(d) => d,
                Err(_) => parse_stamp(&s, options.epoch).ok_or_else(|| Error::Parse {
                    line: line_no,
                    message: format!("unrecognised timestamp {s:?}"),
                })?,
            },
        };
        if !time.is_finite() {
            return Err(Error::Parse {
                line: line_no,
                message: "non-finite time".into(),
            });
        }
        let value = match raw.value {
            Some(RawValue::Number(v)) => RecordValue::Number(v),
            Some(RawValue::Text(s)) => match s.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => RecordValue::Number(v),
                _ => RecordValue::Text(s),
            },
            None => RecordValue::Text(String::new()),
        };
        if let RecordValue::Number(v) = value {
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    message: "non-finite value".into(),
                });
            }
        }
        records.push(EventRecord {
            patient_id: raw.patient_id,
            time,
            feature: raw.feature,
            value,
            kind: RecordKind::parse(raw.kind.as_deref().unwrap_or("obs")),
        });
    }
    dataset_from_records(&records)
}

/// Groups records into trajectories. Feature ids and categorical codes are
/// assigned in sorted name order so the same records always produce the same
/// codes; patients keep first-appearance order.
pub fn dataset_from_records(records: &[EventRecord]) -> Result<Dataset> {
    let features: Vec<String> = records
        .iter()
        .map(|p| p.feature.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let categories: Vec<String> = records
        .iter()
        .filter_map(|p| match &p.value {
            RecordValue::Text(s) => Some(s.clone()),
            RecordValue::Number(_) => None,
        })
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let feature_ids: BTreeMap<&str, u32> = features
        .iter()
        .enumerate()
        .map(|(i, f)| (f.as_str(), i as u32))
        .collect();
    let category_ids: BTreeMap<&str, u32> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i as u32))
        .collect();

    let mut order: Vec<&str> = Vec::new();
    let mut grouped: BTreeMap<&str, Vec<Observation>> = BTreeMap::new();
    for p in records {
        let value = match &p.value {
            RecordValue::Number(v) => Value::Continuous(*v),
            RecordValue::Text(s) => Value::Categorical(category_ids[s.as_str()]),
        };
        let obs = Observation {
            time: p.time,
            feature_id: feature_ids[p.feature.as_str()],
            value,
            kind: p.kind.clone(),
        };
        grouped
            .entry(p.patient_id.as_str())
            .or_insert_with(|| {
                order.push(p.patient_id.as_str());
                Vec::new()
            })
            .push(obs);
    }

    let mut trajectories = Vec::with_capacity(order.len());
    for patient in order {
        let obs = grouped.remove(patient).unwrap_or_default();
        trajectories.push(PatientTrajectory::new(patient, obs)?);
    }

    Ok(Dataset {
        features,
        categories,
        trajectories,
    })
}

/// One row of the outcome file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub patient_id: String,
    pub task: String,
    pub time: f64,
    pub value: u8,
}

/// Reads the outcome JSON-Lines file, grouped by patient.
pub fn read_outcomes(path: &Path) -> Result<BTreeMap<String, Vec<OutcomeRecord>>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out: BTreeMap<String, Vec<OutcomeRecord>> = BTreeMap::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: OutcomeRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if rec.value > 1 {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("outcome value must be 0 or 1, got {}", rec.value),
            });
        }
        out.entry(rec.patient_id.clone()).or_default().push(rec);
    }
    for recs in out.values_mut() {
        recs.sort_by(|a, b| a.time.total_cmp(&b.time));
    }
    Ok(out)
}
