use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub auroc: f64,
    pub auprc: f64,
}

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("non-finite score {s}")));
    }
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InsufficientData(
            "binary metrics need both classes present".into(),
        ));
    }
    Ok((pos, neg))
}

/// Indices sorted by descending score.
fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Computed from mid-ranks.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps mid-ranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share the mid-rank (i + j + 2) / 2.
        let twice_mid = (i + j + 2) as u128;
        let n_pos = order[i..=j].iter().filter(|&&k| labels[k] != 0).count() as u128;
        twice_rank_sum += twice_mid * n_pos;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let twice_u = twice_rank_sum - p * (p + 1);
    Ok(twice_u as f64 / (2 * p * n) as f64)
}

/// Trapezoidal area under the ROC curve traced over distinct thresholds.
pub fn auroc_trapezoid(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let order = descending(scores);
    let (mut tp, mut fp) = (0u128, 0u128);
    let mut twice_area: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] != 0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        twice_area += (fp - fp0) * (tp + tp0);
    }
    Ok(twice_area as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Average precision: recall increments weighted by the precision at each
/// distinct threshold (step interpolation, no trapezoids).
pub fn auprc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = class_counts(scores, labels)?;
    let order = descending(scores);
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let tp0 = tp;
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            tp += (labels[order[i]] != 0) as usize;
            seen += 1;
            i += 1;
        }
        if tp > tp0 {
            ap += (tp - tp0) as f64 / pos as f64 * (tp as f64 / seen as f64);
        }
    }
    Ok(ap)
}

pub fn binary_metrics(scores: &[f64], labels: &[u8]) -> Result<BinaryMetrics> {
    Ok(BinaryMetrics {
        auroc: auroc(scores, labels)?,
        auprc: auprc(scores, labels)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapEstimate {
    pub mean: f64,
    /// Population standard deviation over resamples; 0 for one resample.
    pub std: f64,
    pub n: usize,
}

/// Resamples index sets with replacement `n` times. Resamples that contain a
/// single class are redrawn.
pub fn bootstrap<F>(metric: F, scores: &[f64], labels: &[u8], n: usize, seed: u64) -> Result<BootstrapEstimate>
where
    F: Fn(&[f64], &[u8]) -> Result<f64>,
{
    if n == 0 {
        return Err(Error::config("bootstrap needs at least one resample"));
    }
    class_counts(scores, labels)?;
    let m = scores.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n);
    let (mut s, mut l) = (vec![0.0; m], vec![0u8; m]);
    while values.len() < n {
        for k in 0..m {
            let i = rng.random_range(0..m);
            s[k] = scores[i];
            l[k] = labels[i];
        }
        let pos = l.iter().filter(|&&x| x != 0).count();
        if pos == 0 || pos == m {
            continue;
        }
        values.push(metric(&s, &l)?);
    }
    // Shifted by the first value so a constant metric has exactly zero spread.
    let v0 = values[0];
    let mean = v0 + values.iter().map(|v| v - v0).sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(BootstrapEstimate {
        mean,
        std: var.sqrt(),
        n,
    })
}
