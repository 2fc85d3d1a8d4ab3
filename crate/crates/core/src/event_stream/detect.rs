use serde::{Deserialize, Serialize};

use super::{Dataset, EventKind, IndexEvent, PatientTrajectory, RecordKind, Value};
use crate::error::{Error, Result};

/// Which records count as index events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EventSet {
    /// Inpatient admission records.
    Admission,
    /// Every encounter record except inpatient admissions and discharges.
    NonAdmission,
    /// Outpatient encounter records only.
    Outpatient,
    /// Mean arterial pressure falling from above the threshold to below it.
    /// Several features (invasive and non-invasive MAP) form one series.
    Hypotension { features: Vec<String>, threshold: f64 },
    /// Start of mechanical ventilation: `vent_start` records, plus any
    /// record of the named feature.
    Ventilation { feature: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub events: EventSet,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            events: EventSet::Admission,
        }
    }
}

impl DetectorConfig {
    pub fn hypotension(features: &[&str]) -> Self {
        Self {
            events: EventSet::Hypotension {
                features: features.iter().map(|s| s.to_string()).collect(),
                threshold: 60.0,
            },
        }
    }
}

fn resolve(dataset: &Dataset, name: &str) -> Result<u32> {
    dataset
        .feature_id(name)
        .ok_or_else(|| Error::config(format!("detector references unknown feature {name:?}")))
}

/// Finds index events in a sorted trajectory, in time order.
pub fn detect_events(
    dataset: &Dataset,
    trajectory: &PatientTrajectory,
    detector: &DetectorConfig,
) -> Result<Vec<IndexEvent>> {
    let obs = trajectory.observations();
    let mut positions: Vec<(usize, EventKind)> = Vec::new();
    match &detector.events {
        EventSet::Admission => {
            for (i, o) in obs.iter().enumerate() {
                if o.kind == RecordKind::Admission {
                    positions.push((i, EventKind::Admission));
                }
            }
        }
        EventSet::NonAdmission => {
            for (i, o) in obs.iter().enumerate() {
                match &o.kind {
                    RecordKind::Outpatient => positions.push((i, EventKind::OutpatientVisit)),
                    RecordKind::Other(name) => positions.push((i, EventKind::Other(name.clone()))),
                    _ => {}
                }
            }
        }
        EventSet::Outpatient => {
            for (i, o) in obs.iter().enumerate() {
                if o.kind == RecordKind::Outpatient {
                    positions.push((i, EventKind::OutpatientVisit));
                }
            }
        }
        EventSet::Hypotension {
            features,
            threshold,
        } => {
            if features.is_empty() {
                return Err(Error::config("hypotension detector needs a MAP feature"));
            }
            let ids = features
                .iter()
                .map(|f| resolve(dataset, f))
                .collect::<Result<Vec<_>>>()?;
            let mut previous: Option<f64> = None;
            for (i, o) in obs.iter().enumerate() {
                if !ids.contains(&o.feature_id) {
                    continue;
                }
                let Value::Continuous(v) = o.value else {
                    continue;
                };
                if let Some(prev) = previous {
                    if prev > *threshold && v < *threshold {
                        positions.push((i, EventKind::Hypotension));
                    }
                }
                previous = Some(v);
            }
        }
        EventSet::Ventilation { feature } => {
            let id = feature.as_deref().map(|f| resolve(dataset, f)).transpose()?;
            for (i, o) in obs.iter().enumerate() {
                if o.kind == RecordKind::VentStart || Some(o.feature_id) == id {
                    positions.push((i, EventKind::VentilationStart));
                }
            }
        }
    }
    positions
        .into_iter()
        .map(|(pos, kind)| IndexEvent::at(trajectory, pos, kind))
        .collect()
}
