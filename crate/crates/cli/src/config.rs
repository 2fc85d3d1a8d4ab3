//! The single JSON pipeline configuration. Every section falls back to its
//! library default, so `config print-defaults` shows the full effective set.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ebcl_core::encoder::EncoderConfig;
use ebcl_core::evaluation::{KnnSweep, DEFAULT_L2_GRID};
use ebcl_core::event_stream::InputMode;
use ebcl_core::objectives::{DuettConfig, Objective};
use ebcl_core::synthetic::{GeneratorConfig, MORTALITY_TASK};
use ebcl_core::training::{sha256_hex, PrepConfig, RunConfig, SearchSpec};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub task: String,
    /// Falls back to the task's leakage mode.
    pub mode: Option<InputMode>,
    pub run: RunConfig,
    /// Runs use seeds `seed, seed + 1, ...`.
    pub n_seeds: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            task: MORTALITY_TASK.into(),
            mode: None,
            run: RunConfig::finetune_defaults(),
            n_seeds: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub task: String,
    pub mode: Option<InputMode>,
    pub l2_grid: Vec<f64>,
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            task: MORTALITY_TASK.into(),
            mode: None,
            l2_grid: DEFAULT_L2_GRID.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnSection {
    pub task: String,
    pub mode: Option<InputMode>,
    pub sweep: KnnSweep,
    pub n_bootstrap: usize,
}

impl Default for KnnSection {
    fn default() -> Self {
        Self {
            task: MORTALITY_TASK.into(),
            mode: None,
            sweep: KnnSweep::default(),
            n_bootstrap: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    /// Outcome used for prevalence and survival.
    pub task: String,
    pub k_grid: Vec<usize>,
    pub n_init: usize,
    /// Skips elbow selection when set.
    pub k: Option<usize>,
    pub svg: bool,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            task: MORTALITY_TASK.into(),
            k_grid: ebcl_core::analysis::DEFAULT_K_GRID.collect(),
            n_init: ebcl_core::analysis::DEFAULT_N_INIT,
            k: None,
            svg: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Event JSON-Lines file; defaults to `<workdir>/data/events.jsonl`.
    pub data: Option<PathBuf>,
    /// Outcome JSON-Lines file; defaults to `<workdir>/data/outcomes.jsonl`.
    pub outcomes: Option<PathBuf>,
    /// Set from `--workdir` or `EBCLKIT_WORKDIR` when absent. Not hashed.
    pub workdir: Option<PathBuf>,
    /// Master seed. Every nested `seed` field is overwritten from it.
    pub seed: u64,
    pub generator: GeneratorConfig,
    pub prep: PrepConfig,
    pub objective: Objective,
    pub encoder: EncoderConfig,
    pub duett: DuettConfig,
    pub pretrain: RunConfig,
    /// When set, `pretrain` first runs successive halving over learning
    /// rate and dropout.
    pub search: Option<SearchSpec>,
    pub finetune: FinetuneSection,
    pub probe: ProbeSection,
    pub knn: KnnSection,
    pub cluster: ClusterSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: None,
            outcomes: None,
            workdir: None,
            seed: 0,
            generator: GeneratorConfig::default(),
            prep: PrepConfig::default(),
            objective: Objective::Ebcl,
            encoder: EncoderConfig::default(),
            duett: DuettConfig::default(),
            pretrain: RunConfig::default(),
            search: None,
            finetune: FinetuneSection::default(),
            probe: ProbeSection::default(),
            knn: KnnSection::default(),
            cluster: ClusterSection::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("config {}", path.display()))
    }

    /// Applies overrides, then propagates the master seed.
    pub fn resolve(mut self, seed: Option<u64>, workdir: Option<PathBuf>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(w) = workdir {
            self.workdir = Some(w);
        }
        self.generator.seed = self.seed;
        self.prep.split.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.finetune.run.seed = self.seed;
        if let Some(s) = self.search.as_mut() {
            s.seed = self.seed;
        }
        self
    }

    pub fn workdir(&self) -> Result<&Path> {
        self.workdir
            .as_deref()
            .context("workdir: not set; pass --workdir or set EBCLKIT_WORKDIR")
    }

    pub fn data_path(&self) -> Result<PathBuf> {
        Ok(match &self.data {
            Some(p) => p.clone(),
            None => self.workdir()?.join("data").join("events.jsonl"),
        })
    }

    pub fn outcomes_path(&self) -> Result<PathBuf> {
        Ok(match &self.outcomes {
            Some(p) => p.clone(),
            None => self.workdir()?.join("data").join("outcomes.jsonl"),
        })
    }

    /// SHA-256 of the canonical JSON with the workdir removed.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.workdir = None;
        let json = serde_json::to_vec(&c).expect("config serialises");
        sha256_hex(&json)
    }

    /// Semantic checks, each error prefixed by the offending field.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut check = |field: &str, r: ebcl_core::Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{field}: {e}"));
            }
        };
        check("generator", self.generator.validate());
        check("prep.window", self.prep.window.validate());
        check("encoder", self.encoder.validate());
        check("duett", self.duett.validate());
        check("pretrain", self.pretrain.validate());
        check("finetune.run", self.finetune.run.validate());
        if let Some(s) = &self.search {
            check("search", s.validate());
        }
        if self.prep.max_len > self.encoder.max_len {
            problems.push(format!(
                "prep.max_len: {} exceeds encoder.max_len {}",
                self.prep.max_len, self.encoder.max_len
            ));
        }
        let split = &self.prep.split;
        if (split.train + split.val + split.test - 1.0).abs() > 1e-9 {
            problems.push("prep.split: fractions must sum to 1".into());
        }
        for (field, task) in [
            ("finetune.task", &self.finetune.task),
            ("probe.task", &self.probe.task),
            ("knn.task", &self.knn.task),
            ("cluster.task", &self.cluster.task),
        ] {
            if !self.prep.tasks.tasks.contains_key(task) {
                problems.push(format!("{field}: task {task:?} is not listed in prep.tasks"));
            }
        }
        if self.finetune.n_seeds == 0 {
            problems.push("finetune.n_seeds: must be at least 1".into());
        }
        if self.probe.l2_grid.is_empty() || self.probe.l2_grid.iter().any(|l| l.is_nan() || *l < 0.0) {
            problems.push("probe.l2_grid: needs at least one non-negative value".into());
        }
        if self.knn.n_bootstrap == 0 {
            problems.push("knn.n_bootstrap: must be at least 1".into());
        }
        if self.cluster.n_init == 0 {
            problems.push("cluster.n_init: must be at least 1".into());
        }
        if self.cluster.k.is_none() && self.cluster.k_grid.len() < 3 {
            problems.push("cluster.k_grid: elbow selection needs at least 3 values".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            bail!("invalid config:\n  {}", problems.join("\n  "))
        }
    }
}
