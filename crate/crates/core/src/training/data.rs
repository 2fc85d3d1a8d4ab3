use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_stream::{
    attach_labels, detect_events, extract_window_pair, outcomes_for_event, split_by_patient,
    Dataset, DetectorConfig, InputMode, Labeling, LeakageRule, OutcomeRecord, PatientTrajectory,
    SplitAssignment, SplitSpec, WindowConfig, WindowPair,
};
use crate::featurizer::{
    build_vocabulary, encode_pair, BoundVocab, EncodedPair, VocabConfig, Vocabulary,
};
use crate::objectives::DuettColumns;
use crate::synthetic::{LONG_STAY_TASK, MORTALITY_TASK};

/// Everything needed to turn a dataset into model-ready splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepConfig {
    pub window: WindowConfig,
    pub detector: DetectorConfig,
    pub vocab: VocabConfig,
    pub split: SplitSpec,
    pub tasks: LeakageRule,
    /// Token cap per window.
    pub max_len: usize,
    pub duett_bins: usize,
    pub duett_top_k: usize,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            detector: DetectorConfig::default(),
            vocab: VocabConfig::default(),
            split: SplitSpec::default(),
            tasks: LeakageRule::new([
                (MORTALITY_TASK, InputMode::Both),
                (LONG_STAY_TASK, InputMode::PreOnly),
            ]),
            max_len: crate::featurizer::MAX_LEN,
            duett_bins: 32,
            duett_top_k: 128,
        }
    }
}

/// One split: raw pairs, their token encodings (aligned), and the split's
/// full trajectories for sequence objectives.
#[derive(Debug, Clone, Default)]
pub struct SplitData {
    pub pairs: Vec<WindowPair>,
    pub encoded: Vec<EncodedPair>,
    pub trajectories: Vec<PatientTrajectory>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Indices of pairs carrying a label for `task`.
    pub fn labeled(&self, task: &str) -> Vec<usize> {
        (0..self.encoded.len())
            .filter(|&i| self.encoded[i].labels.contains_key(task))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: PrepConfig,
    pub vocab: Vocabulary,
    /// Feature and category names of the source dataset; no trajectories.
    pub codes: Dataset,
    pub assignment: SplitAssignment,
    pub columns: DuettColumns,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
    /// Events dropped for short windows or short token sequences.
    pub rejected: usize,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn bound(&self) -> BoundVocab<'_> {
        self.vocab.bind(&self.codes)
    }

    pub fn input_mode(&self, task: &str) -> Result<InputMode> {
        self.config
            .tasks
            .tasks
            .get(task)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown task {task:?}")))
    }

    /// Splits patients, extracts and labels window pairs, fits the vocabulary
    /// on the training split, and tokenises every split.
    pub fn build(
        dataset: &Dataset,
        outcomes: &BTreeMap<String, Vec<OutcomeRecord>>,
        config: &PrepConfig,
    ) -> Result<Corpus> {
        config.window.validate()?;
        let assignment = split_by_patient(dataset, &config.split)?;
        let mut raw: BTreeMap<&str, Vec<WindowPair>> = BTreeMap::new();
        let mut rejected = 0usize;
        let no_outcomes = Vec::new();
        for traj in &dataset.trajectories {
            let split = assignment
                .split_of(&traj.patient_id)
                .expect("every patient is assigned");
            let records = outcomes.get(&traj.patient_id).unwrap_or(&no_outcomes);
            for event in detect_events(dataset, traj, &config.detector)? {
                let Some(pair) = extract_window_pair(traj, &event, &config.window)?.pair() else {
                    rejected += 1;
                    continue;
                };
                let found = outcomes_for_event(records, event.time);
                let found: BTreeMap<String, (f64, u8)> = found
                    .into_iter()
                    .filter(|(task, _)| config.tasks.tasks.contains_key(task))
                    .collect();
                // Unlabelled pairs still serve pretraining.
                let pair = match attach_labels(pair.clone(), &found, &config.tasks)? {
                    Labeling::Labeled(p) => p,
                    Labeling::Excluded => pair,
                };
                raw.entry(split).or_default().push(pair);
            }
        }
        let train_ids = &assignment.train;
        let train_ds = dataset.subset(train_ids);
        let train_pairs = raw.remove("train").unwrap_or_default();
        if train_pairs.is_empty() {
            return Err(Error::InsufficientData(
                "no training events produced a valid window pair".into(),
            ));
        }
        let vocab = build_vocabulary(&train_ds, &train_pairs, &config.vocab)?;
        let codes = Dataset {
            features: dataset.features.clone(),
            categories: dataset.categories.clone(),
            trajectories: Vec::new(),
        };
        let columns = DuettColumns::from_vocab(&vocab, config.duett_top_k);

        let bound = vocab.bind(&codes);
        let mut build_split = |pairs: Vec<WindowPair>, ids: &[String]| {
            let mut data = SplitData::default();
            for pair in pairs {
                match encode_pair(&pair, &bound, config.max_len, config.window.min_len) {
                    Some(e) => {
                        data.encoded.push(e);
                        data.pairs.push(pair);
                    }
                    None => rejected += 1,
                }
            }
            data.trajectories = ids
                .iter()
                .filter_map(|id| dataset.trajectory(id).cloned())
                .collect();
            data
        };
        let train = build_split(train_pairs, &assignment.train);
        let val = build_split(raw.remove("val").unwrap_or_default(), &assignment.val);
        let test = build_split(raw.remove("test").unwrap_or_default(), &assignment.test);
        drop(bound);

        Ok(Corpus {
            config: config.clone(),
            vocab,
            codes,
            assignment,
            columns,
            train,
            val,
            test,
            rejected,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, GeneratorConfig};

    fn corpus() -> Corpus {
        let cohort = generate(&GeneratorConfig {
            n_patients: 60,
            ..GeneratorConfig::default()
        })
        .unwrap();
        let mut outcomes: BTreeMap<String, Vec<OutcomeRecord>> = BTreeMap::new();
        for o in cohort.outcomes {
            outcomes.entry(o.patient_id.clone()).or_default().push(o);
        }
        let cfg = PrepConfig {
            window: WindowConfig {
                tau: 32,
                ..WindowConfig::default()
            },
            vocab: VocabConfig { min_count: Some(5) },
            ..PrepConfig::default()
        };
        Corpus::build(&cohort.dataset, &outcomes, &cfg).unwrap()
    }

    #[test]
    fn splits_are_patient_disjoint_and_labelled() {
        let c = corpus();
        assert!(c.train.len() > 30);
        for split in Split::ALL {
            let data = c.split(split);
            assert_eq!(data.pairs.len(), data.encoded.len());
            for e in &data.encoded {
                assert_eq!(c.assignment.split_of(&e.patient_id), Some(split.as_str()));
                assert!(e.pre.len() <= 32 && e.post.len() <= 32);
                assert!(e.pre.len() >= 16 && e.post.len() >= 16);
            }
        }
        assert!(!c.train.labeled(MORTALITY_TASK).is_empty());
        assert!(!c.train.labeled(LONG_STAY_TASK).is_empty());
    }

    #[test]
    fn build_is_deterministic() {
        let a = corpus();
        let b = corpus();
        assert_eq!(a.vocab, b.vocab);
        assert_eq!(a.train.encoded, b.train.encoded);
    }
}
