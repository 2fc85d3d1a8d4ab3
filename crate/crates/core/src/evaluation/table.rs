use std::collections::BTreeMap;
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::event_stream::InputMode;
use crate::training::{Corpus, Model, Split, Window};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub patient_id: String,
    pub event_time: f64,
    pub split: Split,
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
    pub labels: BTreeMap<String, u8>,
}

impl EmbeddingRow {
    /// Event id unique within a patient.
    pub fn event_id(&self) -> String {
        format!("{}@{}", self.patient_id, self.event_time)
    }

    pub fn features(&self, mode: InputMode) -> Vec<f64> {
        match mode {
            InputMode::PreOnly => self.pre.clone(),
            InputMode::PostOnly => self.post.clone(),
            InputMode::Both => self.pre.iter().chain(&self.post).copied().collect(),
        }
    }
}

/// Frozen pre and post embeddings of every pair, tagged with split and
/// labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub checkpoint_id: String,
    pub dim: usize,
    pub rows: Vec<EmbeddingRow>,
}

/// Labelled rows of one split for one task.
#[derive(Debug, Clone)]
pub struct TaskView<'a> {
    pub rows: Vec<&'a EmbeddingRow>,
    pub labels: Vec<u8>,
}

impl TaskView<'_> {
    pub fn matrix(&self, mode: InputMode) -> Array2<f64> {
        let d = self.rows.first().map_or(0, |r| r.features(mode).len());
        let mut m = Array2::zeros((self.rows.len(), d));
        for (i, r) in self.rows.iter().enumerate() {
            for (j, v) in r.features(mode).into_iter().enumerate() {
                m[[i, j]] = v;
            }
        }
        m
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

impl EmbeddingTable {
    /// Embeds every pair of every split in inference mode.
    pub fn from_model(model: &Model, corpus: &Corpus, checkpoint_id: impl Into<String>) -> Result<Self> {
        let mut rows = Vec::new();
        for split in Split::ALL {
            let data = corpus.split(split);
            let pairs = data.all_pairs();
            let pre = model.embed_pairs(corpus, &pairs, Window::Pre)?;
            let post = model.embed_pairs(corpus, &pairs, Window::Post)?;
            for (i, e) in data.encoded.iter().enumerate() {
                rows.push(EmbeddingRow {
                    patient_id: e.patient_id.clone(),
                    event_time: e.event_time,
                    split,
                    pre: pre.row(i).to_vec(),
                    post: post.row(i).to_vec(),
                    labels: e.labels.clone(),
                });
            }
        }
        let table = Self {
            checkpoint_id: checkpoint_id.into(),
            dim: model.d_embed(),
            rows,
        };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.rows {
            if r.pre.len() != self.dim || r.post.len() != self.dim {
                return Err(Error::Shape(format!("row {} does not have dimension {}", r.event_id(), self.dim)));
            }
            if r.pre.iter().chain(&r.post).any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("row {} has non-finite values", r.event_id())));
            }
            if !seen.insert((r.patient_id.as_str(), r.event_time.to_bits())) {
                return Err(Error::invalid(format!("duplicate row {}", r.event_id())));
            }
        }
        Ok(())
    }

    pub fn task_view(&self, split: Split, task: &str) -> TaskView<'_> {
        let rows: Vec<&EmbeddingRow> = self
            .rows
            .iter()
            .filter(|r| r.split == split && r.labels.contains_key(task))
            .collect();
        let labels = rows.iter().map(|r| r.labels[task]).collect();
        TaskView { rows, labels }
    }

    pub fn split_rows(&self, split: Split) -> Vec<&EmbeddingRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let t: Self = serde_json::from_str(s)?;
        t.validate()?;
        Ok(t)
    }

    /// CSV id index: row number, patient, event time, split.
    pub fn write_index_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "row,patient_id,event_time,split")?;
        for (i, r) in self.rows.iter().enumerate() {
            writeln!(out, "{i},{},{},{}", r.patient_id, r.event_time, r.split.as_str())?;
        }
        Ok(())
    }
}

/// Where a reported standard deviation comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StdSource {
    Bootstrap,
    Seeds,
    /// A single point estimate.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    pub std_source: StdSource,
}

impl MetricSummary {
    pub fn point(v: f64) -> Self {
        Self {
            mean: v,
            std: 0.0,
            std_source: StdSource::None,
        }
    }

    /// Mean and population std across seeds.
    pub fn over_seeds(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InsufficientData("no values to summarise".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            mean,
            std: var.sqrt(),
            std_source: StdSource::Seeds,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    /// `linear_probe`, `knn` or `finetune`.
    pub method: String,
    /// Model or checkpoint label used to group rows in comparison tables.
    pub model: String,
    pub auroc: MetricSummary,
    pub auprc: MetricSummary,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        for m in [self.auroc.mean, self.auprc.mean] {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::invalid(format!("metric {m} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(s)?;
        r.validate()?;
        Ok(r)
    }
}
