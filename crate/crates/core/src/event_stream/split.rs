use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(Error::config("split fractions must be positive"));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::config("split fractions must sum to 1"));
        }
        Ok(())
    }
}

/// Patient ids per split. Serialises as the split manifest
/// `{"train": [...], "val": [...], "test": [...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn as_map(&self) -> BTreeMap<&'static str, &[String]> {
        BTreeMap::from([
            ("train", self.train.as_slice()),
            ("val", self.val.as_slice()),
            ("test", self.test.as_slice()),
        ])
    }

    pub fn split_of(&self, patient_id: &str) -> Option<&'static str> {
        self.as_map()
            .into_iter()
            .find(|(_, ids)| ids.iter().any(|p| p == patient_id))
            .map(|(name, _)| name)
    }
}

/// Partitions patients (never individual events) into train/val/test.
pub fn split_by_patient(dataset: &Dataset, spec: &SplitSpec) -> Result<SplitAssignment> {
    spec.validate()?;
    let mut ids: Vec<String> = dataset
        .trajectories
        .iter()
        .map(|t| t.patient_id.clone())
        .collect();
    ids.sort();
    ids.dedup();
    let n = ids.len();
    if n < 3 {
        return Err(Error::InsufficientData(format!(
            "{n} patients cannot fill 3 splits"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    ids.shuffle(&mut rng);

    let mut n_val = ((n as f64) * spec.val).round().max(1.0) as usize;
    let mut n_test = ((n as f64) * spec.test).round().max(1.0) as usize;
    while n_val + n_test >= n {
        if n_val >= n_test && n_val > 1 {
            n_val -= 1;
        } else if n_test > 1 {
            n_test -= 1;
        } else {
            break;
        }
    }
    let n_train = n - n_val - n_test;

    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(SplitAssignment {
        train: ids,
        val,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_stream::{Observation, PatientTrajectory, Value};
    use std::collections::BTreeSet;

    fn dataset(n: usize, events_each: usize) -> Dataset {
        Dataset {
            features: vec!["f".into()],
            categories: vec![],
            trajectories: (0..n)
                .map(|i| {
                    let obs = (0..events_each)
                        .map(|k| Observation::new(k as f64, 0, Value::Continuous(1.0)))
                        .collect();
                    PatientTrajectory::new(format!("p{i:02}"), obs).unwrap()
                })
                .collect(),
        }
    }

    #[test]
    fn ten_patients_split_8_1_1() {
        let ds = dataset(10, 1);
        let spec = SplitSpec {
            seed: 7,
            ..SplitSpec::default()
        };
        let s = split_by_patient(&ds, &spec).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let all: BTreeSet<_> = s.train.iter().chain(&s.val).chain(&s.test).collect();
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn same_seed_same_partition() {
        let ds = dataset(50, 1);
        let spec = SplitSpec {
            seed: 3,
            ..SplitSpec::default()
        };
        assert_eq!(
            split_by_patient(&ds, &spec).unwrap(),
            split_by_patient(&ds, &spec).unwrap()
        );
    }

    #[test]
    fn all_events_of_a_patient_land_together() {
        let ds = dataset(20, 5);
        let s = split_by_patient(&ds, &SplitSpec::default()).unwrap();
        for part in [&s.train, &s.val, &s.test] {
            let sub = ds.subset(part);
            for t in &sub.trajectories {
                assert_eq!(t.len(), 5);
            }
        }
    }

    #[test]
    fn too_few_patients() {
        assert!(split_by_patient(&dataset(2, 1), &SplitSpec::default()).is_err());
    }

    #[test]
    fn bad_fractions_rejected() {
        let spec = SplitSpec {
            train: 0.9,
            val: 0.1,
            test: 0.1,
            seed: 0,
        };
        assert!(split_by_patient(&dataset(10, 1), &spec).is_err());
    }
}
