//! Fixed-length aggregate features for gradient-boosted tree baselines.
//!
//! The tree learner itself lives outside this crate; [`TabularLearner`] is
//! the seam, and [`write_tabular_csv`] hands matrices to external tools.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::event_stream::{Dataset, Observation, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregate {
    Mean,
    Count,
    Min,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularConfig {
    /// Window lengths in days ending at the cutoff; `f64::INFINITY` for all
    /// history.
    pub windows: Vec<f64>,
    pub aggregates: Vec<Aggregate>,
    pub top_k: usize,
}

impl Default for TabularConfig {
    fn default() -> Self {
        Self {
            windows: vec![1.0, 7.0, 30.0, 365.0, f64::INFINITY],
            aggregates: vec![
                Aggregate::Mean,
                Aggregate::Count,
                Aggregate::Min,
                Aggregate::Max,
            ],
            top_k: 128,
        }
    }
}

impl TabularConfig {
    /// `(top_k + 1) * |aggregates| * |windows|`; the extra slot is relative
    /// observation time.
    pub fn output_len(&self) -> usize {
        (self.top_k + 1) * self.aggregates.len() * self.windows.len()
    }
}

/// The `k` most frequent features by raw count, ties broken by id.
pub fn top_features(dataset: &Dataset, k: usize) -> Vec<u32> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for t in &dataset.trajectories {
        for o in t.observations() {
            *counts.entry(o.feature_id).or_default() += 1;
        }
    }
    let mut ranked: Vec<(u32, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.into_iter().take(k).map(|(f, _)| f).collect()
}

#[derive(Clone, Copy)]
struct Cell {
    n: usize,
    sum: f64,
    min: f64,
    max: f64,
    /// Observations counted but carrying no numeric value.
    numeric: usize,
}

impl Cell {
    const EMPTY: Cell = Cell {
        n: 0,
        sum: 0.0,
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
        numeric: 0,
    };

    fn push(&mut self, v: Option<f64>) {
        self.n += 1;
        if let Some(v) = v {
            self.numeric += 1;
            self.sum += v;
            self.min = self.min.min(v);
            self.max = self.max.max(v);
        }
    }

    fn get(&self, agg: Aggregate) -> f64 {
        match agg {
            Aggregate::Count => self.n as f64,
            _ if self.numeric == 0 => f64::NAN,
            Aggregate::Mean => self.sum / self.numeric as f64,
            Aggregate::Min => self.min,
            Aggregate::Max => self.max,
        }
    }
}

/// Aggregates raw observation values into one vector. Missing cells are NaN,
/// which tree learners treat as missing. Observations at or before `cutoff`
/// count; slots of `features` beyond those present stay empty.
///
/// Layout: window-major, then aggregate, then feature (the relative-time
/// pseudo-feature last).
pub fn aggregate_tabular(
    observations: &[Observation],
    cutoff: f64,
    features: &[u32],
    config: &TabularConfig,
) -> Vec<f64> {
    let k = config.top_k;
    let slot: BTreeMap<u32, usize> = features
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, f)| (*f, i))
        .collect();
    let mut cells = vec![Cell::EMPTY; (k + 1) * config.windows.len()];
    for o in observations {
        if o.time > cutoff {
            continue;
        }
        let Some(&s) = slot.get(&o.feature_id) else {
            continue;
        };
        let age = cutoff - o.time;
        let value = match o.value {
            Value::Continuous(v) => Some(v),
            Value::Categorical(_) => None,
        };
        for (w, len) in config.windows.iter().enumerate() {
            if age <= *len {
                cells[w * (k + 1) + s].push(value);
                cells[w * (k + 1) + k].push(Some(o.time - cutoff));
            }
        }
    }
    let mut out = Vec::with_capacity(config.output_len());
    for w in 0..config.windows.len() {
        for agg in &config.aggregates {
            for s in 0..=k {
                out.push(cells[w * (k + 1) + s].get(*agg));
            }
        }
    }
    out
}

/// An external tabular classifier.
pub trait TabularLearner {
    fn fit(&mut self, features: &[Vec<f64>], labels: &[u8]) -> Result<()>;
    fn predict_proba(&self, features: &[Vec<f64>]) -> Result<Vec<f64>>;
}

/// Writes `id,label,f0,f1,...` rows; NaN cells are left empty.
pub fn write_tabular_csv<W: Write>(
    mut out: W,
    ids: &[String],
    labels: &[u8],
    rows: &[Vec<f64>],
) -> Result<()> {
    let width = rows.first().map_or(0, Vec::len);
    write!(out, "id,label")?;
    for i in 0..width {
        write!(out, ",f{i}")?;
    }
    writeln!(out)?;
    for ((id, label), row) in ids.iter().zip(labels).zip(rows) {
        write!(out, "{id},{label}")?;
        for v in row {
            if v.is_nan() {
                write!(out, ",")?;
            } else {
                write!(out, ",{v}")?;
            }
        }
        writeln!(out)?;
    }
    Ok(())
}
