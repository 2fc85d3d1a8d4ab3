use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

use super::kmeans::{pca_2d, ClusterAssignment};
use super::survival::{km_curve, SurvivalCurve};

pub const SIGNIFICANCE: f64 = 0.01;
/// Stand-in for an infinite t statistic when both groups have zero variance.
pub const T_SENTINEL: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub t: f64,
    pub dof: f64,
    pub p: f64,
    pub significant: bool,
    /// Both groups had zero variance.
    pub degenerate: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch two-sample t test with Welch-Satterthwaite degrees of freedom and a
/// two-sided p value.
pub fn cluster_contrast(a: &[f64], b: &[f64]) -> Result<Contrast> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "t test needs two samples per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("t test input contains non-finite values"));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        let (t, p) = if ma == mb { (0.0, 1.0) } else { ((ma - mb).signum() * T_SENTINEL, 0.0) };
        return Ok(Contrast {
            t,
            dof: na + nb - 2.0,
            p,
            significant: p < SIGNIFICANCE,
            degenerate: true,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| Error::invalid(format!("Student t: {e}")))?;
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    Ok(Contrast {
        t,
        dof,
        p,
        significant: p < SIGNIFICANCE,
        degenerate: false,
    })
}

/// Outcome of one task for one event: `value` 1 at `time` days after the
/// event means the outcome occurred, 0 means follow-up ended there.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventOutcome {
    pub value: u8,
    pub time_to_outcome: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub size: usize,
    pub n_labeled: usize,
    pub n_positive: usize,
    /// Null when no member carries a label.
    pub prevalence: Option<f64>,
    pub survival: Option<SurvivalCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairContrast {
    pub a: usize,
    pub b: usize,
    /// Absent when either cluster has fewer than two observed outcomes.
    pub contrast: Option<Contrast>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratificationReport {
    pub k: usize,
    pub inertia: f64,
    /// Sorted by prevalence, highest first; unlabeled clusters last.
    pub clusters: Vec<ClusterSummary>,
    /// Highest minus lowest prevalence; absent with fewer than two labeled clusters.
    pub delta_prevalence: Option<f64>,
    pub contrasts: Vec<PairContrast>,
    /// `[x, y]` per event, aligned with the assignment.
    pub pca: Vec<[f64; 2]>,
}

/// Per-cluster prevalence and survival, pairwise Welch tests on the times of
/// observed outcomes, and PCA coordinates of `vectors`.
pub fn stratification_report(
    assignment: &ClusterAssignment,
    outcomes: &[Option<EventOutcome>],
    vectors: &Array2<f64>,
) -> Result<StratificationReport> {
    let n = assignment.labels.len();
    if outcomes.len() != n || vectors.nrows() != n {
        return Err(Error::Shape(format!(
            "{n} assignments, {} outcomes, {} vectors",
            outcomes.len(),
            vectors.nrows()
        )));
    }
    if let Some(&c) = assignment.labels.iter().find(|&&c| c >= assignment.k) {
        return Err(Error::invalid(format!("cluster id {c} outside [0, {})", assignment.k)));
    }
    let mut clusters = Vec::with_capacity(assignment.k);
    let mut event_times: Vec<Vec<f64>> = vec![Vec::new(); assignment.k];
    for c in 0..assignment.k {
        let members: Vec<usize> = (0..n).filter(|&i| assignment.labels[i] == c).collect();
        let labeled: Vec<EventOutcome> = members.iter().filter_map(|&i| outcomes[i]).collect();
        let n_positive = labeled.iter().filter(|o| o.value == 1).count();
        event_times[c] = labeled.iter().filter(|o| o.value == 1).map(|o| o.time_to_outcome).collect();
        let survival = if labeled.is_empty() {
            None
        } else {
            let times: Vec<f64> = labeled.iter().map(|o| o.time_to_outcome).collect();
            let flags: Vec<bool> = labeled.iter().map(|o| o.value == 1).collect();
            Some(km_curve(&times, &flags)?)
        };
        clusters.push(ClusterSummary {
            cluster: c,
            size: members.len(),
            n_labeled: labeled.len(),
            n_positive,
            prevalence: (!labeled.is_empty()).then(|| n_positive as f64 / labeled.len() as f64),
            survival,
        });
    }
    clusters.sort_by(|x, y| match (x.prevalence, y.prevalence) {
        (Some(a), Some(b)) => b.total_cmp(&a).then(x.cluster.cmp(&y.cluster)),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => x.cluster.cmp(&y.cluster),
    });
    let labeled: Vec<&ClusterSummary> = clusters.iter().filter(|c| c.prevalence.is_some()).collect();
    let delta_prevalence = (labeled.len() >= 2)
        .then(|| labeled[0].prevalence.unwrap_or(0.0) - labeled[labeled.len() - 1].prevalence.unwrap_or(0.0));
    let mut contrasts = Vec::new();
    for (i, x) in labeled.iter().enumerate() {
        for y in &labeled[i + 1..] {
            let (ta, tb) = (&event_times[x.cluster], &event_times[y.cluster]);
            let contrast = if ta.len() >= 2 && tb.len() >= 2 {
                Some(cluster_contrast(ta, tb)?)
            } else {
                None
            };
            contrasts.push(PairContrast {
                a: x.cluster,
                b: y.cluster,
                contrast,
            });
        }
    }
    let coords = pca_2d(vectors);
    Ok(StratificationReport {
        k: assignment.k,
        inertia: assignment.inertia,
        clusters,
        delta_prevalence,
        contrasts,
        pca: coords.rows().into_iter().map(|r| [r[0], r[1]]).collect(),
    })
}
