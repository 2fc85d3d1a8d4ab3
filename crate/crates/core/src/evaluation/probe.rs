//! Logistic-regression probing of frozen embeddings.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::metrics::{auroc, binary_metrics};
use super::table::{EmbeddingTable, EvalReport, MetricSummary};
use crate::error::{Error, Result};
use crate::event_stream::InputMode;
use crate::training::Split;

pub const DEFAULT_L2_GRID: [f64; 6] = [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0];
pub const GRAD_TOLERANCE: f64 = 1e-8;
pub const MAX_ITERATIONS: usize = 20_000;

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Column means and standard deviations; zero-variance columns get std 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Array2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean = x.mean_axis(Axis(0)).map_or_else(|| vec![0.0; x.ncols()], |m| m.to_vec());
        let std = (0..x.ncols())
            .map(|j| {
                let var = x.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-24 {
                    var.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn degenerate_columns(&self) -> usize {
        self.std.iter().filter(|s| **s == 0.0).count()
    }

    pub fn transform(&self, x: &Array2<f64>) -> Array2<f64> {
        Array2::from_shape_fn(x.dim(), |(i, j)| {
            if self.std[j] == 0.0 {
                0.0
            } else {
                (x[[i, j]] - self.mean[j]) / self.std[j]
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticRegression {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub l2: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Mean log-loss plus `l2 / 2 |w|^2` (bias unpenalised), and its gradient.
fn objective(x: &Array2<f64>, y: &[f64], w: &Array1<f64>, b: f64, l2: f64) -> (f64, Array1<f64>, f64) {
    let n = x.nrows() as f64;
    let z = x.dot(w) + b;
    let mut loss = 0.0;
    let mut r = Array1::zeros(x.nrows());
    for i in 0..x.nrows() {
        loss += softplus(z[i]) - y[i] * z[i];
        r[i] = (sigmoid(z[i]) - y[i]) / n;
    }
    let gw = x.t().dot(&r) + &(w * l2);
    let gb = r.sum();
    (loss / n + 0.5 * l2 * w.dot(w), gw, gb)
}

impl LogisticRegression {
    /// Gradient descent with Barzilai-Borwein trial steps and Armijo
    /// backtracking, until the gradient norm falls below `tol`.
    pub fn fit(x: &Array2<f64>, labels: &[u8], l2: f64, tol: f64, max_iter: usize) -> Result<Self> {
        if x.nrows() != labels.len() || x.nrows() == 0 {
            return Err(Error::Shape(format!("{} rows for {} labels", x.nrows(), labels.len())));
        }
        if l2.is_nan() || l2 < 0.0 {
            return Err(Error::config(format!("l2 {l2} must be non-negative")));
        }
        let y: Vec<f64> = labels.iter().map(|&l| (l != 0) as u8 as f64).collect();
        let mut w = Array1::zeros(x.ncols());
        let mut b = 0.0;
        let (mut f, mut gw, mut gb) = objective(x, &y, &w, b, l2);
        let mut step = 1.0;
        let mut prev: Option<(Array1<f64>, f64, Array1<f64>, f64)> = None;
        for it in 0..max_iter {
            let gnorm2 = gw.dot(&gw) + gb * gb;
            if gnorm2.sqrt() <= tol {
                return Ok(Self {
                    weights: w.to_vec(),
                    bias: b,
                    l2,
                    iterations: it,
                    converged: true,
                });
            }
            if let Some((pw, pb, pgw, pgb)) = &prev {
                let sw = &w - pw;
                let yw = &gw - pgw;
                let (sb, yb) = (b - pb, gb - pgb);
                let sy = sw.dot(&yw) + sb * yb;
                let ss = sw.dot(&sw) + sb * sb;
                if sy > 0.0 {
                    step = (ss / sy).clamp(1e-10, 1e10);
                }
            }
            let mut accepted = false;
            for _ in 0..60 {
                let nw = &w - &(&gw * step);
                let nb = b - step * gb;
                let (nf, ngw, ngb) = objective(x, &y, &nw, nb, l2);
                if nf <= f - 1e-4 * step * gnorm2 {
                    prev = Some((std::mem::replace(&mut w, nw), b, std::mem::replace(&mut gw, ngw), gb));
                    b = nb;
                    gb = ngb;
                    f = nf;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                // No representable descent: at a minimum up to rounding.
                return Ok(Self {
                    weights: w.to_vec(),
                    bias: b,
                    l2,
                    iterations: it,
                    converged: gnorm2.sqrt() <= tol.sqrt(),
                });
            }
        }
        Ok(Self {
            weights: w.to_vec(),
            bias: b,
            l2,
            iterations: max_iter,
            converged: false,
        })
    }

    pub fn decision(&self, x: &Array2<f64>) -> Vec<f64> {
        let w = Array1::from(self.weights.clone());
        (x.dot(&w) + self.bias).to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub report: EvalReport,
    pub chosen_l2: f64,
    /// `(l2, validation AUROC)` per grid point.
    pub val_auroc: Vec<(f64, f64)>,
    pub test_scores: Vec<f64>,
    pub test_labels: Vec<u8>,
}

/// Fits one regression per grid point on the training split, picks the
/// point with the best validation AUROC (first on ties) and reports test
/// metrics.
pub fn linear_probe(
    table: &EmbeddingTable,
    task: &str,
    mode: InputMode,
    l2_grid: &[f64],
) -> Result<ProbeOutcome> {
    if l2_grid.is_empty() {
        return Err(Error::config("l2 grid is empty"));
    }
    let train = table.task_view(Split::Train, task);
    let val = table.task_view(Split::Val, task);
    let test = table.task_view(Split::Test, task);
    for (name, v) in [("train", &train), ("val", &val), ("test", &test)] {
        if v.is_empty() {
            return Err(Error::InsufficientData(format!("no {name} rows labelled for {task:?}")));
        }
    }
    let xs = train.matrix(mode);
    let scaler = Standardizer::fit(&xs);
    let mut warnings = Vec::new();
    let degenerate = scaler.degenerate_columns();
    if degenerate == xs.ncols() {
        warnings.push("degenerate embeddings: every dimension has zero variance on the training split".to_string());
    } else if degenerate > 0 {
        warnings.push(format!("{degenerate} embedding dimensions have zero variance"));
    }
    let (xtr, xva, xte) = (scaler.transform(&xs), scaler.transform(&val.matrix(mode)), scaler.transform(&test.matrix(mode)));

    let mut best: Option<(f64, LogisticRegression)> = None;
    let mut val_auroc = Vec::new();
    for &l2 in l2_grid {
        let model = LogisticRegression::fit(&xtr, &train.labels, l2, GRAD_TOLERANCE, MAX_ITERATIONS)?;
        if !model.converged {
            warnings.push(format!("l2 {l2}: gradient tolerance not reached in {MAX_ITERATIONS} iterations"));
        }
        let a = auroc(&model.decision(&xva), &val.labels)?;
        val_auroc.push((l2, a));
        if best.as_ref().is_none_or(|(b, _)| a > *b) {
            best = Some((a, model));
        }
    }
    let (_, model) = best.expect("grid is non-empty");
    let test_scores = model.decision(&xte);
    let m = binary_metrics(&test_scores, &test.labels)?;
    let report = EvalReport {
        task: task.to_string(),
        method: "linear_probe".into(),
        model: table.checkpoint_id.clone(),
        auroc: MetricSummary::point(m.auroc),
        auprc: MetricSummary::point(m.auprc),
        config: serde_json::json!({
            "mode": mode,
            "l2_grid": l2_grid,
            "chosen_l2": model.l2,
            "iterations": model.iterations,
        }),
        seeds: Vec::new(),
        warnings,
    };
    Ok(ProbeOutcome {
        report,
        chosen_l2: model.l2,
        val_auroc,
        test_scores,
        test_labels: test.labels,
    })
}
