//! Event-stream data model: observation triples, per-patient trajectories,
//! index events, and the pre/post window pairs anchored on them.

mod detect;
mod ingest;
mod split;
mod window;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use detect::{detect_events, DetectorConfig, EventSet};
pub use ingest::{
    dataset_from_records, ingest, read_outcomes, EventRecord, IngestFormat, IngestOptions,
    OutcomeRecord, RecordValue,
};
pub use split::{split_by_patient, SplitAssignment, SplitSpec};
pub use window::{
    attach_labels, extract_window_pair, outcomes_for_event, Extraction, InputMode, Labeling,
    LeakageRule, WindowConfig, WindowPair,
};

/// Measured value of an observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Value {
    Continuous(f64),
    /// Code into [`Dataset::categories`].
    Categorical(u32),
}

impl Value {
    pub fn as_continuous(&self) -> Option<f64> {
        match *self {
            Value::Continuous(v) => Some(v),
            Value::Categorical(_) => None,
        }
    }
}

/// What kind of record produced an observation. Encounter records are kept in
/// the trajectory so index events can point at them.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RecordKind {
    Obs,
    Admission,
    Discharge,
    Outpatient,
    VentStart,
    Other(String),
}

impl RecordKind {
    pub fn parse(s: &str) -> Self {
        match s {
            "obs" => RecordKind::Obs,
            "admission" => RecordKind::Admission,
            "discharge" => RecordKind::Discharge,
            "outpatient" => RecordKind::Outpatient,
            "vent_start" => RecordKind::VentStart,
            other => RecordKind::Other(other.to_string()),
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            RecordKind::Obs => "obs",
            RecordKind::Admission => "admission",
            RecordKind::Discharge => "discharge",
            RecordKind::Outpatient => "outpatient",
            RecordKind::VentStart => "vent_start",
            RecordKind::Other(s) => s,
        }
    }

    pub fn is_encounter(&self) -> bool {
        !matches!(self, RecordKind::Obs | RecordKind::VentStart)
    }
}

/// One `(time, feature, value)` triple. Time is fractional days from the
/// dataset epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub time: f64,
    pub feature_id: u32,
    pub value: Value,
    pub kind: RecordKind,
}

impl Observation {
    pub fn new(time: f64, feature_id: u32, value: Value) -> Self {
        Self {
            time,
            feature_id,
            value,
            kind: RecordKind::Obs,
        }
    }

    pub fn with_kind(mut self, kind: RecordKind) -> Self {
        self.kind = kind;
        self
    }

    fn validate(&self) -> Result<()> {
        if !self.time.is_finite() {
            return Err(Error::invalid(format!("non-finite time {}", self.time)));
        }
        if let Value::Continuous(v) = self.value {
            if !v.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite value {v} for feature {}",
                    self.feature_id
                )));
            }
        }
        Ok(())
    }
}

/// A patient's observations in chronological order. Equal timestamps keep
/// their input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientTrajectory {
    pub patient_id: String,
    observations: Vec<Observation>,
}

impl PatientTrajectory {
    pub fn new(patient_id: impl Into<String>, mut observations: Vec<Observation>) -> Result<Self> {
        for obs in &observations {
            obs.validate()?;
        }
        // sort_by is stable
        observations.sort_by(|a, b| a.time.total_cmp(&b.time));
        Ok(Self {
            patient_id: patient_id.into(),
            observations,
        })
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Admission,
    Discharge,
    Hypotension,
    VentilationStart,
    OutpatientVisit,
    Other(String),
}

/// A clinical anchor inside a trajectory. `position` indexes the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEvent {
    pub patient_id: String,
    pub position: usize,
    pub time: f64,
    pub kind: EventKind,
}

impl IndexEvent {
    pub fn at(trajectory: &PatientTrajectory, position: usize, kind: EventKind) -> Result<Self> {
        let obs = trajectory.observations.get(position).ok_or_else(|| {
            Error::invalid(format!(
                "event position {position} outside trajectory of length {}",
                trajectory.len()
            ))
        })?;
        Ok(Self {
            patient_id: trajectory.patient_id.clone(),
            position,
            time: obs.time,
            kind,
        })
    }
}

/// A collection of trajectories plus the name tables their integer codes
/// refer to.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    /// Feature name by feature id.
    pub features: Vec<String>,
    /// Categorical value string by code.
    pub categories: Vec<String>,
    pub trajectories: Vec<PatientTrajectory>,
}

impl Dataset {
    pub fn feature_id(&self, name: &str) -> Option<u32> {
        self.features.iter().position(|f| f == name).map(|i| i as u32)
    }

    pub fn category_code(&self, name: &str) -> Option<u32> {
        self.categories.iter().position(|c| c == name).map(|i| i as u32)
    }

    pub fn n_observations(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    pub fn patient_ids(&self) -> Vec<&str> {
        self.trajectories.iter().map(|t| t.patient_id.as_str()).collect()
    }

    pub fn trajectory(&self, patient_id: &str) -> Option<&PatientTrajectory> {
        self.trajectories.iter().find(|t| t.patient_id == patient_id)
    }

    /// Same name tables, only the listed patients, in the order given.
    pub fn subset(&self, patient_ids: &[String]) -> Dataset {
        let by_id: std::collections::HashMap<&str, &PatientTrajectory> = self
            .trajectories
            .iter()
            .map(|t| (t.patient_id.as_str(), t))
            .collect();
        Dataset {
            features: self.features.clone(),
            categories: self.categories.clone(),
            trajectories: patient_ids
                .iter()
                .filter_map(|id| by_id.get(id.as_str()).map(|t| (*t).clone()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trajectory_sorts_stably() {
        let obs = vec![
            Observation::new(2.0, 0, Value::Continuous(1.0)),
            Observation::new(1.0, 1, Value::Continuous(2.0)),
            Observation::new(1.0, 2, Value::Continuous(3.0)),
        ];
        let traj = PatientTrajectory::new("p", obs).unwrap();
        let ids: Vec<u32> = traj.observations().iter().map(|o| o.feature_id).collect();
        assert_eq!(ids, vec![1, 2, 0]);
    }

    #[test]
    fn rejects_non_finite_values() {
        let obs = vec![Observation::new(0.0, 0, Value::Continuous(f64::NAN))];
        assert!(PatientTrajectory::new("p", obs).is_err());
    }

    #[test]
    fn event_must_point_inside_trajectory() {
        let traj =
            PatientTrajectory::new("p", vec![Observation::new(0.0, 0, Value::Continuous(1.0))])
                .unwrap();
        assert!(IndexEvent::at(&traj, 1, EventKind::Admission).is_err());
        let ev = IndexEvent::at(&traj, 0, EventKind::Admission).unwrap();
        assert_eq!(ev.time, 0.0);
    }
}
