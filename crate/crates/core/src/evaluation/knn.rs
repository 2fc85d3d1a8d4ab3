//! K-nearest-neighbour evaluation of frozen embeddings.

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use super::metrics::{auprc, auroc, bootstrap};
use super::table::{EmbeddingTable, EvalReport, MetricSummary, StdSource, TaskView};
use crate::error::{Error, Result};
use crate::event_stream::InputMode;
use crate::training::Split;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    /// Inverse distance; neighbours at distance zero take all the weight.
    Distance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Cosine,
    Euclidean,
    /// Euclidean after L2-normalising pre and post vectors separately.
    NormalizedEuclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnModel {
    /// One KNN on concatenated pre and post vectors.
    PrePost,
    /// Mean probability of the pre, post and concatenated KNNs.
    Ensemble,
    Pre,
    Post,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnSweep {
    pub ks: Vec<usize>,
    pub weightings: Vec<Weighting>,
    pub metrics: Vec<Metric>,
    /// Used for tasks consuming both windows; single-window tasks use the
    /// matching single-window model only.
    pub models: Vec<KnnModel>,
}

impl Default for KnnSweep {
    fn default() -> Self {
        Self {
            ks: vec![10, 30, 100, 300, 1000],
            weightings: vec![Weighting::Uniform, Weighting::Distance],
            metrics: vec![Metric::Cosine, Metric::Euclidean, Metric::NormalizedEuclidean],
            models: vec![KnnModel::PrePost, KnnModel::Ensemble],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KnnConfig {
    pub k: usize,
    pub weighting: Weighting,
    pub metric: Metric,
    pub model: KnnModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnOutcome {
    pub report: EvalReport,
    pub best: KnnConfig,
    pub val_auroc: Vec<(KnnConfig, f64)>,
    pub test_probabilities: Vec<f64>,
}

fn unit(v: ArrayView1<f64>) -> Vec<f64> {
    let n = v.dot(&v).sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Space {
    Pre,
    Post,
    Concat,
}

/// Vectors of one space, prepared so that the metric becomes Euclidean or
/// cosine on rows.
fn space_matrix(view: &TaskView, space: Space, metric: Metric) -> Array2<f64> {
    let rows: Vec<Vec<f64>> = view
        .rows
        .iter()
        .map(|r| {
            let (pre, post) = (ArrayView1::from(&r.pre), ArrayView1::from(&r.post));
            let norm = metric == Metric::NormalizedEuclidean;
            let side = |v: ArrayView1<f64>| if norm { unit(v) } else { v.to_vec() };
            match space {
                Space::Pre => side(pre),
                Space::Post => side(post),
                Space::Concat => side(pre).into_iter().chain(side(post)).collect(),
            }
        })
        .collect();
    let d = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j])
}

fn distance(metric: Metric, a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    match metric {
        Metric::Cosine => {
            let (na, nb) = (a.dot(&a).sqrt(), b.dot(&b).sqrt());
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                (1.0 - a.dot(&b) / (na * nb)).max(0.0)
            }
        }
        Metric::Euclidean | Metric::NormalizedEuclidean => {
            a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        }
    }
}

/// For each query, the `k_max` nearest training rows as `(distance, label)`,
/// ties broken by training order.
fn neighbours(
    train: &Array2<f64>,
    labels: &[u8],
    query: &Array2<f64>,
    metric: Metric,
    k_max: usize,
) -> Vec<Vec<(f64, u8)>> {
    query
        .rows()
        .into_iter()
        .map(|q| {
            let mut d: Vec<(f64, usize)> = train
                .rows()
                .into_iter()
                .enumerate()
                .map(|(i, t)| (distance(metric, q, t), i))
                .collect();
            let k = k_max.min(d.len());
            if k < d.len() {
                d.select_nth_unstable_by(k, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                d.truncate(k);
            }
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().map(|(dist, i)| (dist, labels[i])).collect()
        })
        .collect()
}

/// Positive-class probability from the first `k` sorted neighbours.
pub fn vote(sorted: &[(f64, u8)], k: usize, weighting: Weighting) -> f64 {
    let near = &sorted[..k.min(sorted.len())];
    if near.is_empty() {
        return 0.5;
    }
    match weighting {
        Weighting::Uniform => near.iter().map(|n| n.1 as f64).sum::<f64>() / near.len() as f64,
        Weighting::Distance => {
            let zeros: Vec<f64> = near.iter().filter(|n| n.0 == 0.0).map(|n| n.1 as f64).collect();
            if !zeros.is_empty() {
                return zeros.iter().sum::<f64>() / zeros.len() as f64;
            }
            let (num, den) = near
                .iter()
                .fold((0.0, 0.0), |(a, b), n| (a + n.1 as f64 / n.0, b + 1.0 / n.0));
            num / den
        }
    }
}

/// Probabilities for `query` rows from a KNN fitted on `train`.
pub fn knn_predict(
    train: &Array2<f64>,
    labels: &[u8],
    query: &Array2<f64>,
    k: usize,
    weighting: Weighting,
    metric: Metric,
) -> Result<Vec<f64>> {
    if k == 0 || k > train.nrows() {
        return Err(Error::config(format!("k = {k} needs 1..={} training rows", train.nrows())));
    }
    let nb = neighbours(train, labels, query, metric, k);
    Ok(nb.iter().map(|n| vote(n, k, weighting)).collect())
}

/// Per query row, the nearest training rows as (distance, label).
type Neighbours = Vec<Vec<(f64, u8)>>;

/// Neighbour lists per metric and space, for one query split.
struct Cache {
    lists: Vec<((Metric, Space), Neighbours)>,
}

impl Cache {
    fn build(train: &TaskView, query: &TaskView, metrics: &[Metric], spaces: &[Space], k_max: usize) -> Self {
        let mut lists = Vec::new();
        for &m in metrics {
            for &s in spaces {
                let t = space_matrix(train, s, m);
                let q = space_matrix(query, s, m);
                lists.push(((m, s), neighbours(&t, &train.labels, &q, m, k_max)));
            }
        }
        Self { lists }
    }

    fn probs(&self, cfg: &KnnConfig) -> Vec<f64> {
        let get = |s: Space| {
            &self
                .lists
                .iter()
                .find(|(key, _)| *key == (cfg.metric, s))
                .expect("cached space")
                .1
        };
        let single = |s: Space| -> Vec<f64> { get(s).iter().map(|n| vote(n, cfg.k, cfg.weighting)).collect() };
        match cfg.model {
            KnnModel::Pre => single(Space::Pre),
            KnnModel::Post => single(Space::Post),
            KnnModel::PrePost => single(Space::Concat),
            KnnModel::Ensemble => {
                let (a, b, c) = (single(Space::Pre), single(Space::Post), single(Space::Concat));
                (0..a.len()).map(|i| (a[i] + b[i] + c[i]) / 3.0).collect()
            }
        }
    }
}

fn spaces_for(models: &[KnnModel]) -> Vec<Space> {
    let mut s = Vec::new();
    for m in models {
        let need: &[Space] = match m {
            KnnModel::Pre => &[Space::Pre],
            KnnModel::Post => &[Space::Post],
            KnnModel::PrePost => &[Space::Concat],
            KnnModel::Ensemble => &[Space::Pre, Space::Post, Space::Concat],
        };
        for x in need {
            if !s.contains(x) {
                s.push(*x);
            }
        }
    }
    s
}

/// Full sweep scored by validation AUROC; the winner is re-scored on the test
/// split with bootstrap resampling.
pub fn knn_eval(
    table: &EmbeddingTable,
    task: &str,
    mode: InputMode,
    sweep: &KnnSweep,
    n_bootstrap: usize,
    seed: u64,
) -> Result<KnnOutcome> {
    if sweep.ks.is_empty() || sweep.weightings.is_empty() || sweep.metrics.is_empty() || sweep.models.is_empty() {
        return Err(Error::config("KNN sweep is empty"));
    }
    let train = table.task_view(Split::Train, task);
    let val = table.task_view(Split::Val, task);
    let test = table.task_view(Split::Test, task);
    let mut warnings = Vec::new();
    let ks: Vec<usize> = sweep
        .ks
        .iter()
        .copied()
        .filter(|&k| {
            let ok = k >= 1 && k <= train.len();
            if !ok {
                warnings.push(format!("k = {k} skipped: only {} training rows", train.len()));
            }
            ok
        })
        .collect();
    if ks.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no k in the sweep fits {} training rows",
            train.len()
        )));
    }
    let models: Vec<KnnModel> = match mode {
        InputMode::Both => sweep.models.clone(),
        InputMode::PreOnly => vec![KnnModel::Pre],
        InputMode::PostOnly => vec![KnnModel::Post],
    };
    let spaces = spaces_for(&models);
    let k_max = *ks.iter().max().expect("non-empty");
    let val_cache = Cache::build(&train, &val, &sweep.metrics, &spaces, k_max);

    let mut scored = Vec::new();
    let mut best: Option<(f64, KnnConfig)> = None;
    for &metric in &sweep.metrics {
        for &model in &models {
            for &weighting in &sweep.weightings {
                for &k in &ks {
                    let cfg = KnnConfig { k, weighting, metric, model };
                    let a = auroc(&val_cache.probs(&cfg), &val.labels)?;
                    scored.push((cfg, a));
                    if best.is_none_or(|(b, _)| a > b) {
                        best = Some((a, cfg));
                    }
                }
            }
        }
    }
    let (_, cfg) = best.expect("sweep is non-empty");
    let test_cache = Cache::build(&train, &test, &[cfg.metric], &spaces_for(&[cfg.model]), cfg.k);
    let probs = test_cache.probs(&cfg);
    let a = bootstrap(auroc, &probs, &test.labels, n_bootstrap, seed)?;
    let p = bootstrap(auprc, &probs, &test.labels, n_bootstrap, seed)?;
    let summary = |e: super::metrics::BootstrapEstimate| MetricSummary {
        mean: e.mean,
        std: e.std,
        std_source: StdSource::Bootstrap,
    };
    let report = EvalReport {
        task: task.to_string(),
        method: "knn".into(),
        model: table.checkpoint_id.clone(),
        auroc: summary(a),
        auprc: summary(p),
        config: serde_json::json!({
            "mode": mode,
            "best": cfg,
            "sweep": sweep,
            "n_bootstrap": n_bootstrap,
        }),
        seeds: vec![seed],
        warnings,
    };
    Ok(KnnOutcome {
        report,
        best: cfg,
        val_auroc: scored,
        test_probabilities: probs,
    })
}
