use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_stream::{Dataset, Value, WindowPair};

/// Reserved feature and categorical id for padding.
pub const PAD_ID: u32 = 0;
/// Reserved categorical id for rare or unseen values.
pub const UNKNOWN_ID: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Continuous,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryEntry {
    pub value: String,
    pub id: u32,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEntry {
    pub name: String,
    /// Token id, starting at 1.
    pub id: u32,
    pub kind: FeatureKind,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    /// Retained categorical values; everything else encodes as UNKNOWN.
    pub categories: Vec<CategoryEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct VocabConfig {
    /// Minimum training-split occurrences for a feature or categorical
    /// value. `None` uses `max(5, n_obs * 1e-5)`.
    pub min_count: Option<usize>,
}


impl VocabConfig {
    pub fn resolve_min_count(&self, n_observations: usize) -> usize {
        self.min_count
            .unwrap_or_else(|| (n_observations / 100_000).max(5))
    }
}

/// Feature and value codes plus normalisation statistics, all computed on
/// the training split. Serialised with explicit ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub features: Vec<FeatureEntry>,
    pub time_std: f64,
    pub min_count: usize,
    /// One past the largest categorical id.
    pub n_category_ids: u32,
}

impl Vocabulary {
    /// Number of feature token ids including PAD.
    pub fn n_feature_ids(&self) -> u32 {
        self.features.len() as u32 + 1
    }

    pub fn feature(&self, name: &str) -> Option<&FeatureEntry> {
        self.features.iter().find(|f| f.name == name)
    }

    pub fn by_token(&self, id: u32) -> Option<&FeatureEntry> {
        id.checked_sub(1)
            .and_then(|i| self.features.get(i as usize))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Resolves a dataset's integer codes against this vocabulary.
    pub fn bind<'a>(&'a self, dataset: &Dataset) -> BoundVocab<'a> {
        let by_name: HashMap<&str, usize> = self
            .features
            .iter()
            .enumerate()
            .map(|(i, f)| (f.name.as_str(), i))
            .collect();
        let features = dataset
            .features
            .iter()
            .map(|name| by_name.get(name.as_str()).copied())
            .collect();
        let mut categories = HashMap::new();
        for (fi, entry) in self.features.iter().enumerate() {
            for cat in &entry.categories {
                if let Some(code) = dataset.category_code(&cat.value) {
                    categories.insert((fi, code), cat.id);
                }
            }
        }
        BoundVocab {
            vocab: self,
            features,
            categories,
        }
    }
}

/// A vocabulary resolved against one dataset's code tables.
#[derive(Debug, Clone)]
pub struct BoundVocab<'a> {
    pub vocab: &'a Vocabulary,
    features: Vec<Option<usize>>,
    categories: HashMap<(usize, u32), u32>,
}

/// One observation in token space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Token {
    pub feature_id: u32,
    pub is_cont: bool,
    pub cont_value: f64,
    pub cat_value_id: u32,
}

impl BoundVocab<'_> {
    /// `None` when the feature was dropped from the vocabulary.
    pub fn token(&self, feature_id: u32, value: &Value) -> Option<Token> {
        let fi = (*self.features.get(feature_id as usize)?)?;
        let entry = &self.vocab.features[fi];
        Some(match (entry.kind, value) {
            (FeatureKind::Continuous, Value::Continuous(v)) => Token {
                feature_id: entry.id,
                is_cont: true,
                cont_value: (v - entry.mean) / entry.std,
                cat_value_id: PAD_ID,
            },
            (FeatureKind::Continuous, Value::Categorical(_)) => return None,
            (FeatureKind::Categorical, Value::Categorical(code)) => Token {
                feature_id: entry.id,
                is_cont: false,
                cont_value: 0.0,
                cat_value_id: self
                    .categories
                    .get(&(fi, *code))
                    .copied()
                    .unwrap_or(UNKNOWN_ID),
            },
            (FeatureKind::Categorical, Value::Continuous(_)) => Token {
                feature_id: entry.id,
                is_cont: false,
                cont_value: 0.0,
                cat_value_id: UNKNOWN_ID,
            },
        })
    }

    pub fn entry_for(&self, feature_id: u32) -> Option<&FeatureEntry> {
        let fi = (*self.features.get(feature_id as usize)?)?;
        Some(&self.vocab.features[fi])
    }
}

#[derive(Default)]
struct FeatureTally {
    n_cont: usize,
    n_cat: usize,
    sum: f64,
    sum_sq: f64,
    cats: BTreeMap<u32, usize>,
}

/// Builds the vocabulary from the training split. `train_pairs` supplies
/// the window tokens whose relative times set `time_std`.
pub fn build_vocabulary(
    train: &Dataset,
    train_pairs: &[WindowPair],
    config: &VocabConfig,
) -> Result<Vocabulary> {
    if train.trajectories.is_empty() {
        return Err(Error::InsufficientData(
            "cannot build a vocabulary from an empty split".into(),
        ));
    }
    let min_count = config.resolve_min_count(train.n_observations());

    let mut tallies: BTreeMap<u32, FeatureTally> = BTreeMap::new();
    for traj in &train.trajectories {
        for obs in traj.observations() {
            let t = tallies.entry(obs.feature_id).or_default();
            match obs.value {
                Value::Continuous(v) => {
                    t.n_cont += 1;
                    t.sum += v;
                    t.sum_sq += v * v;
                }
                Value::Categorical(c) => {
                    t.n_cat += 1;
                    *t.cats.entry(c).or_default() += 1;
                }
            }
        }
    }

    // Sorted by feature name so ids do not depend on dataset code order.
    let mut named: Vec<(&str, &FeatureTally)> = tallies
        .iter()
        .filter(|(_, t)| t.n_cont + t.n_cat >= min_count)
        .map(|(fid, t)| (train.features[*fid as usize].as_str(), t))
        .collect();
    named.sort_by(|a, b| a.0.cmp(b.0));
    if named.is_empty() {
        return Err(Error::InsufficientData(format!(
            "every feature has fewer than {min_count} training occurrences"
        )));
    }

    let mut next_cat = UNKNOWN_ID + 1;
    let mut features = Vec::with_capacity(named.len());
    for (i, (name, t)) in named.into_iter().enumerate() {
        let kind = if t.n_cat > t.n_cont {
            FeatureKind::Categorical
        } else {
            FeatureKind::Continuous
        };
        let (mean, std) = if t.n_cont > 0 {
            let n = t.n_cont as f64;
            let mean = t.sum / n;
            let var = (t.sum_sq / n - mean * mean).max(0.0);
            let std = var.sqrt();
            (mean, if std > 1e-12 { std } else { 1.0 })
        } else {
            (0.0, 1.0)
        };
        let mut categories = Vec::new();
        if kind == FeatureKind::Categorical {
            let mut kept: Vec<(&str, usize)> = t
                .cats
                .iter()
                .filter(|(_, c)| **c >= min_count)
                .map(|(code, c)| (train.categories[*code as usize].as_str(), *c))
                .collect();
            kept.sort();
            for (value, count) in kept {
                categories.push(CategoryEntry {
                    value: value.to_string(),
                    id: next_cat,
                    count,
                });
                next_cat += 1;
            }
        }
        features.push(FeatureEntry {
            name: name.to_string(),
            id: i as u32 + 1,
            kind,
            count: t.n_cont + t.n_cat,
            mean,
            std,
            categories,
        });
    }

    let rel: Vec<f64> = train_pairs
        .iter()
        .flat_map(|p| {
            p.pre
                .iter()
                .chain(&p.post)
                .map(move |o| o.time - p.event.time)
        })
        .collect();
    let time_std = if rel.len() > 1 {
        let n = rel.len() as f64;
        let mean = rel.iter().sum::<f64>() / n;
        let var = rel.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        if var.sqrt() > 1e-12 {
            var.sqrt()
        } else {
            1.0
        }
    } else {
        1.0
    };

    Ok(Vocabulary {
        features,
        time_std,
        min_count,
        n_category_ids: next_cat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_stream::{Observation, PatientTrajectory};

    /// "common" appears 1000 times, "rare" 999 times; categorical feature
    /// "site" has value "a" 1000 times and "b" 12 times.
    fn corpus() -> Dataset {
        let mut obs = Vec::new();
        for i in 0..1000 {
            obs.push(Observation::new(i as f64, 0, Value::Continuous(5.0)));
            obs.push(Observation::new(i as f64, 2, Value::Categorical(0)));
        }
        for i in 0..999 {
            obs.push(Observation::new(i as f64, 1, Value::Continuous(i as f64)));
        }
        for i in 0..12 {
            obs.push(Observation::new(i as f64, 2, Value::Categorical(1)));
        }
        Dataset {
            features: vec!["common".into(), "rare".into(), "site".into()],
            categories: vec!["a".into(), "b".into()],
            trajectories: vec![PatientTrajectory::new("p", obs).unwrap()],
        }
    }

    fn vocab() -> Vocabulary {
        build_vocabulary(&corpus(), &[], &VocabConfig { min_count: Some(1000) }).unwrap()
    }

    #[test]
    fn feature_below_threshold_dropped() {
        let v = vocab();
        assert!(v.feature("rare").is_none());
        assert!(v.feature("common").is_some());
        let ds = corpus();
        let bound = v.bind(&ds);
        assert!(bound.token(1, &Value::Continuous(3.0)).is_none());
    }

    #[test]
    fn rare_category_encodes_unknown() {
        let v = vocab();
        let ds = corpus();
        let bound = v.bind(&ds);
        let rare = bound.token(2, &Value::Categorical(1)).unwrap();
        assert_eq!(rare.cat_value_id, UNKNOWN_ID);
        let common = bound.token(2, &Value::Categorical(0)).unwrap();
        assert!(common.cat_value_id > UNKNOWN_ID);
        assert!(!common.is_cont);
    }

    #[test]
    fn constant_feature_has_unit_std() {
        let v = vocab();
        let f = v.feature("common").unwrap();
        assert_eq!(f.mean, 5.0);
        assert_eq!(f.std, 1.0);
    }

    #[test]
    fn all_dropped_is_error() {
        let err = build_vocabulary(&corpus(), &[], &VocabConfig { min_count: Some(5000) });
        assert!(err.is_err());
    }

    #[test]
    fn deterministic_and_json_round_trip() {
        let a = vocab();
        let b = vocab();
        assert_eq!(a, b);
        let back = Vocabulary::from_json(&a.to_json().unwrap()).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn scaled_default_min_count() {
        assert_eq!(VocabConfig::default().resolve_min_count(100), 5);
        assert_eq!(VocabConfig::default().resolve_min_count(10_000_000), 100);
    }
}
