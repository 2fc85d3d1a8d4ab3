//! Cross-run comparison table: one row per model and method, one column
//! pair (AUROC, AUPRC) per task.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use ebcl_core::evaluation::{EvalReport, MetricSummary, StdSource};
use serde::Serialize;

use crate::workdir::{read_stamp, Stamp};

const METHOD_DIRS: [&str; 3] = ["finetune", "probe", "knn"];

/// Every `<method>/<model>/<task>/report.json` under `root`, in path order.
pub fn collect_reports(root: &Path) -> Result<Vec<(EvalReport, Stamp)>> {
    let mut out = Vec::new();
    for method in METHOD_DIRS {
        for model in sorted_dirs(&root.join(method))? {
            for task in sorted_dirs(&model)? {
                let path = task.join("report.json");
                if !path.is_file() {
                    continue;
                }
                let text = fs::read_to_string(&path)?;
                let report =
                    EvalReport::from_json(&text).with_context(|| format!("parsing {}", path.display()))?;
                out.push((report, read_stamp(&task)?));
            }
        }
    }
    Ok(out)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut dirs: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir() && !e.file_name().to_string_lossy().starts_with('.'))
        .map(|e| e.path())
        .collect();
    dirs.sort();
    Ok(dirs)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub auroc: MetricSummary,
    pub auprc: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub model: String,
    pub method: String,
    /// Aligned with `Table::tasks`; `None` where the run is missing.
    pub cells: Vec<Option<Cell>>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub tasks: Vec<String>,
    pub rows: Vec<Row>,
}

pub fn build_table(reports: &[EvalReport]) -> Table {
    let tasks: Vec<String> = reports.iter().map(|r| r.task.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let keys: BTreeSet<(String, String)> = reports.iter().map(|r| (r.model.clone(), r.method.clone())).collect();
    let rows = keys
        .into_iter()
        .map(|(model, method)| {
            let cells = tasks
                .iter()
                .map(|t| {
                    reports
                        .iter()
                        .find(|r| r.model == model && r.method == method && &r.task == t)
                        .map(|r| Cell {
                            auroc: r.auroc,
                            auprc: r.auprc,
                        })
                })
                .collect();
            Row { model, method, cells }
        })
        .collect();
    Table { tasks, rows }
}

fn marker(s: StdSource) -> &'static str {
    match s {
        StdSource::Seeds => "s",
        StdSource::Bootstrap => "b",
        StdSource::None => "",
    }
}

fn fmt(m: &MetricSummary) -> String {
    match m.std_source {
        StdSource::None => format!("{:.3}", m.mean),
        s => format!("{:.3} ± {:.3}{}", m.mean, m.std, marker(s)),
    }
}

impl Table {
    pub fn markdown(&self) -> String {
        let mut out = String::from("| model | method |");
        for t in &self.tasks {
            out.push_str(&format!(" {t} AUROC | {t} AUPRC |"));
        }
        out.push_str("\n|---|---|");
        out.push_str(&"---|---|".repeat(self.tasks.len()));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("| {} | {} |", r.model, r.method));
            for c in &r.cells {
                match c {
                    Some(c) => out.push_str(&format!(" {} | {} |", fmt(&c.auroc), fmt(&c.auprc))),
                    None => out.push_str(" - | - |"),
                }
            }
            out.push('\n');
        }
        out.push_str("\nStd suffix: s = across fine-tuning seeds, b = bootstrap over test rows.\n");
        out
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("model,method,task,auroc,auroc_std,auprc,auprc_std,std_source\n");
        for r in &self.rows {
            for (t, c) in self.tasks.iter().zip(&r.cells) {
                if let Some(c) = c {
                    let source = serde_json::to_value(c.auroc.std_source)
                        .ok()
                        .and_then(|v| v.as_str().map(String::from))
                        .unwrap_or_default();
                    out.push_str(&format!(
                        "{},{},{},{},{},{},{},{}\n",
                        r.model, r.method, t, c.auroc.mean, c.auroc.std, c.auprc.mean, c.auprc.std, source
                    ));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(model: &str, method: &str, task: &str, auroc: f64) -> EvalReport {
        EvalReport {
            task: task.into(),
            method: method.into(),
            model: model.into(),
            auroc: MetricSummary::over_seeds(&[auroc - 0.01, auroc + 0.01]).unwrap(),
            auprc: MetricSummary::point(0.5),
            config: serde_json::Value::Null,
            seeds: vec![0, 1],
            warnings: Vec::new(),
        }
    }

    #[test]
    fn rows_group_by_model_and_method() {
        let t = build_table(&[
            report("ebcl", "finetune", "mortality", 0.8),
            report("ebcl", "finetune", "los", 0.7),
            report("random", "finetune", "mortality", 0.6),
        ]);
        assert_eq!(t.tasks, ["los", "mortality"]);
        assert_eq!(t.rows.len(), 2);
        assert!(t.rows[1].cells[0].is_none());
        let md = t.markdown();
        assert!(md.contains("0.800 ± 0.010s"), "{md}");
        assert!(md.contains("| - | - |"));
        assert_eq!(t.csv().lines().count(), 4);
    }
}
