//! One function per subcommand. Each reads its inputs, computes, and
//! commits a single stamped stage directory.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use ebcl_core::analysis::{
    elbow_sweep, kmeans, stratification_report, survival_svg, EventOutcome,
};
use ebcl_core::evaluation::{knn_eval, linear_probe, EmbeddingTable, EvalReport, MetricSummary};
use ebcl_core::event_stream::{
    ingest, outcomes_for_event, read_outcomes, Dataset, IngestFormat, IngestOptions, OutcomeRecord,
};
use ebcl_core::synthetic::{self, write_events, write_ground_truth, write_outcomes};
use ebcl_core::training::{
    finetune, hyperparameter_search, load_checkpoint, order_accuracy, retrieval_accuracy, save_checkpoint,
    sha256_hex, write_trial_csv, Corpus, FinetuneConfig, Model, ModelSpec, Provenance, RunConfig, Split,
    Trainer,
};
use serde_json::json;

use crate::config::PipelineConfig;
use crate::report::{build_table, collect_reports};
use crate::workdir::{short, Stamp, Workdir};

/// Which backbone downstream stages evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModelSource {
    /// The checkpoint written by `pretrain` for the configured objective.
    Pretrained,
    /// A freshly initialised backbone of the same architecture.
    Random,
}

pub struct Ctx {
    pub config: PipelineConfig,
    pub hash: String,
    pub workdir: Workdir,
    pub force: bool,
}

impl Ctx {
    fn stamp(&self, stage: &str) -> Stamp {
        Stamp::new(stage, &self.hash, self.config.seed)
    }
}

fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

fn require_file(field: &str, path: &Path, hint: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{field}: {} does not exist ({hint})", path.display());
    }
    Ok(())
}

pub fn generate(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.config;
    if cfg.data.is_some() || cfg.outcomes.is_some() {
        eprintln!("note: generate writes to the workdir; the configured data and outcomes paths are ignored");
    }
    let cohort = synthetic::generate(&cfg.generator)?;
    let stage = ctx.workdir.stage("data", ctx.stamp("generate"), ctx.force)?;
    write_events(BufWriter::new(File::create(stage.file("events.jsonl"))?), &cohort.records)?;
    write_outcomes(BufWriter::new(File::create(stage.file("outcomes.jsonl"))?), &cohort.outcomes)?;
    write_ground_truth(BufWriter::new(File::create(stage.file("ground_truth.jsonl"))?), &cohort.ground_truth)?;
    stage.write_json("generator.json", &cfg.generator)?;
    let dir = stage.commit()?;
    eprintln!(
        "generated {} patients, {} records, {} outcomes in {}",
        cfg.generator.n_patients,
        cohort.records.len(),
        cohort.outcomes.len(),
        dir.display()
    );
    Ok(())
}

struct Inputs {
    dataset: Dataset,
    outcomes: BTreeMap<String, Vec<OutcomeRecord>>,
    digest: String,
}

fn load_inputs(cfg: &PipelineConfig) -> Result<Inputs> {
    let data = cfg.data_path()?;
    let outcomes = cfg.outcomes_path()?;
    require_file("data", &data, "run `ebclkit generate` or set \"data\"")?;
    require_file("outcomes", &outcomes, "run `ebclkit generate` or set \"outcomes\"")?;
    let dataset = ingest(&data, IngestFormat::JsonLines, &IngestOptions::default())
        .with_context(|| format!("ingesting {}", data.display()))?;
    let records = read_outcomes(&outcomes).with_context(|| format!("reading {}", outcomes.display()))?;
    let digest = sha256_hex(format!("{}{}", file_digest(&data)?, file_digest(&outcomes)?).as_bytes());
    Ok(Inputs {
        dataset,
        outcomes: records,
        digest,
    })
}

pub fn preprocess(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.config;
    let inputs = load_inputs(cfg)?;
    let corpus = Corpus::build(&inputs.dataset, &inputs.outcomes, &cfg.prep)?;
    let stage = ctx
        .workdir
        .stage("prep", ctx.stamp("preprocess").input("data", inputs.digest.clone()), ctx.force)?;
    stage.write_json("prep.json", &cfg.prep)?;
    stage.write_text("vocab.json", &corpus.vocab.to_json()?)?;
    stage.write_json("splits.json", &corpus.assignment)?;
    let mut splits = serde_json::Map::new();
    for split in Split::ALL {
        let data = corpus.split(split);
        let mut tasks = serde_json::Map::new();
        for task in cfg.prep.tasks.tasks.keys() {
            let idx = data.labeled(task);
            let pos = idx.iter().filter(|&&i| data.encoded[i].labels[task] == 1).count();
            tasks.insert(task.clone(), json!({"labeled": idx.len(), "positive": pos}));
        }
        splits.insert(
            split.as_str().into(),
            json!({"patients": data.trajectories.len(), "events": data.len(), "tasks": tasks}),
        );
    }
    let summary = json!({
        "config_hash": ctx.hash,
        "seed": cfg.seed,
        "vocabulary_features": corpus.vocab.features.len(),
        "rejected_events": corpus.rejected,
        "splits": splits,
    });
    stage.write_json("summary.json", &summary)?;
    let dir = stage.commit()?;
    eprintln!(
        "{} train / {} val / {} test events, {} rejected; artifacts in {}",
        corpus.train.len(),
        corpus.val.len(),
        corpus.test.len(),
        corpus.rejected,
        dir.display()
    );
    Ok(())
}

/// Rebuilds the corpus and checks it against the preprocess artifacts.
fn load_corpus(ctx: &Ctx) -> Result<(Corpus, Inputs)> {
    let prep_dir = ctx.workdir.path("prep");
    if !prep_dir.join("vocab.json").is_file() {
        bail!("{} has no vocabulary; run `ebclkit preprocess` first", prep_dir.display());
    }
    let inputs = load_inputs(&ctx.config)?;
    let corpus = Corpus::build(&inputs.dataset, &inputs.outcomes, &ctx.config.prep)?;
    let saved = ebcl_core::featurizer::Vocabulary::from_json(&fs::read_to_string(prep_dir.join("vocab.json"))?)?;
    if saved != corpus.vocab {
        bail!(
            "{} no longer matches the data and prep config; rerun `ebclkit preprocess --force`",
            prep_dir.display()
        );
    }
    Ok((corpus, inputs))
}

fn model_spec(cfg: &PipelineConfig, corpus: &Corpus) -> ModelSpec {
    ModelSpec::for_corpus(cfg.objective, cfg.encoder.clone(), cfg.duett.clone(), corpus)
}

fn initial_model(spec: &ModelSpec, run: &RunConfig, corpus: &Corpus) -> Result<(Model, Option<String>)> {
    match &run.init_checkpoint {
        None => Ok((Model::init(spec, run.seed)?, None)),
        Some(path) => {
            let ck = load_checkpoint(path).with_context(|| format!("pretrain.init_checkpoint {}", path.display()))?;
            if ck.vocab != corpus.vocab {
                bail!("pretrain.init_checkpoint: vocabulary differs from the current corpus");
            }
            let id = ck.id();
            Ok((ck.bind_to(spec)?, Some(id)))
        }
    }
}

fn pretrain_dir(cfg: &PipelineConfig) -> String {
    format!("pretrain/{}", cfg.objective)
}

pub fn pretrain(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.config;
    let (corpus, inputs) = load_corpus(ctx)?;
    let spec = model_spec(cfg, &corpus);
    let mut run = cfg.pretrain.clone();
    if run.early_stop_tolerance.is_none() {
        run.early_stop_tolerance = Some(cfg.objective.default_patience());
    }
    let stage = ctx.workdir.stage(
        &pretrain_dir(cfg),
        ctx.stamp("pretrain").input("data", inputs.digest.clone()),
        ctx.force,
    )?;
    let (initial, parent) = initial_model(&spec, &run, &corpus)?;
    if let Some(search) = &cfg.search {
        let outcome = hyperparameter_search(search, |p| {
            let mut r = run.clone();
            r.learning_rate = p.learning_rate;
            r.dropout = p.dropout;
            Trainer::new(r, initial.clone(), &corpus)
        })?;
        write_trial_csv(&outcome.trials, BufWriter::new(File::create(stage.file("search_trials.csv"))?))?;
        stage.write_json("search.json", &outcome)?;
        eprintln!(
            "search chose learning rate {:.3e}, dropout {:.3}",
            outcome.best.learning_rate, outcome.best.dropout
        );
        run.learning_rate = outcome.best.learning_rate;
        run.dropout = outcome.best.dropout;
    }
    let mut trainer = Trainer::new(run.clone(), initial, &corpus)?;
    while !trainer.done() {
        let r = trainer.train_epoch()?;
        eprintln!("epoch {:>3}  train {:.4}  val {:.4}", r.epoch, r.train_loss, r.val_loss);
    }
    let result = trainer.finish();
    let provenance = Provenance {
        config_hash: ctx.hash.clone(),
        seed: cfg.seed,
        best_epoch: result.best_epoch,
        history: serde_json::to_value(&result.history)?,
        parent,
    };
    let ck_path = save_checkpoint(&stage.file("checkpoint"), &result.model, &corpus.vocab, &provenance)?;
    let checkpoint_id = load_checkpoint(&ck_path)?.id();

    let mut diagnostics = serde_json::Map::new();
    match cfg.objective {
        ebcl_core::objectives::Objective::Ebcl => {
            if let Ok(acc) = retrieval_accuracy(&result.model, &corpus, Split::Test, 32, cfg.seed) {
                diagnostics.insert("test_retrieval_top1_of_32".into(), json!(acc));
            }
        }
        ebcl_core::objectives::Objective::Ocp => {
            if let Ok(acc) = order_accuracy(&result.model, &corpus, Split::Val, run.ocp_max_len, cfg.seed) {
                diagnostics.insert("val_order_accuracy".into(), json!(acc));
            }
        }
        _ => {}
    }
    stage.write_json(
        "metrics.json",
        &json!({
            "config_hash": ctx.hash,
            "seed": cfg.seed,
            "checkpoint": checkpoint_id,
            "best_epoch": result.best_epoch,
            "history": result.history,
            "run": run,
            "diagnostics": diagnostics,
        }),
    )?;
    let table = EmbeddingTable::from_model(&result.model, &corpus, checkpoint_id.clone())?;
    stage.write_text("embeddings.json", &table.to_json()?)?;
    table.write_index_csv(BufWriter::new(File::create(stage.file("embeddings_index.csv"))?))?;
    let dir = stage.commit()?;
    eprintln!("checkpoint {checkpoint_id} (best epoch {}) in {}", result.best_epoch, dir.display());
    Ok(())
}

/// The backbone for downstream stages, its id, and its row label.
fn source_model(ctx: &Ctx, corpus: &Corpus, source: ModelSource, seed: u64) -> Result<(Model, String, String)> {
    let cfg = &ctx.config;
    match source {
        ModelSource::Pretrained => {
            let dir = ctx.workdir.path(&pretrain_dir(cfg)).join("checkpoint");
            if !dir.is_dir() {
                bail!("{} does not exist; run `ebclkit pretrain` first", dir.display());
            }
            let ck = load_checkpoint(&dir)?;
            if ck.vocab != corpus.vocab {
                bail!("checkpoint {} was trained on a different vocabulary", dir.display());
            }
            let id = ck.id();
            let mut model = ck.into_model()?;
            model.classifier = None;
            Ok((model, id, cfg.objective.to_string()))
        }
        ModelSource::Random => {
            let model = Model::init(&model_spec(cfg, corpus), seed)?;
            Ok((model, format!("random-init-seed{seed}"), "random".into()))
        }
    }
}

fn stamp_report(report: &mut EvalReport, ctx: &Ctx, checkpoint: &str) {
    let details = std::mem::take(&mut report.config);
    report.config = json!({
        "config_hash": ctx.hash,
        "seed": ctx.config.seed,
        "checkpoint": checkpoint,
        "details": details,
    });
}

pub fn finetune_stage(ctx: &Ctx, source: ModelSource) -> Result<()> {
    let cfg = &ctx.config;
    let (corpus, inputs) = load_corpus(ctx)?;
    let section = &cfg.finetune;
    let (_, _, label) = source_model(ctx, &corpus, source, cfg.seed)?;
    let rel = format!("finetune/{label}/{}", section.task);
    let stage = ctx
        .workdir
        .stage(&rel, ctx.stamp("finetune").input("data", inputs.digest.clone()), ctx.force)?;
    let (mut aurocs, mut auprcs, mut seeds) = (Vec::new(), Vec::new(), Vec::new());
    let mut parent = String::new();
    let mut mode = None;
    for i in 0..section.n_seeds {
        let seed = cfg.seed + i as u64;
        let (model, id, _) = source_model(ctx, &corpus, source, seed)?;
        parent = id;
        let run = RunConfig {
            seed,
            ..section.run.clone()
        };
        let fc = FinetuneConfig {
            task: section.task.clone(),
            mode: section.mode,
            run,
        };
        let result = finetune(&fc, model, &corpus)?;
        let metrics = result
            .test_metrics
            .with_context(|| format!("test split of task {:?} is single-class", section.task))?;
        eprintln!(
            "seed {seed}: best epoch {}, test AUROC {:.4}, AUPRC {:.4}",
            result.best_epoch, metrics.auroc, metrics.auprc
        );
        let sub = format!("seed-{seed}");
        let provenance = Provenance {
            config_hash: ctx.hash.clone(),
            seed,
            best_epoch: result.best_epoch,
            history: serde_json::to_value(&result.history)?,
            parent: Some(parent.clone()),
        };
        fs::create_dir_all(stage.file(&sub))?;
        save_checkpoint(&stage.file(&format!("{sub}/checkpoint")), &result.model, &corpus.vocab, &provenance)?;
        let mut csv = String::from("patient_id,event_time,probability,label\n");
        for p in &result.test_predictions {
            csv.push_str(&format!("{},{},{},{}\n", p.patient_id, p.event_time, p.probability, p.label));
        }
        stage.write_text(&format!("{sub}/predictions.csv"), &csv)?;
        stage.write_json(
            &format!("{sub}/metrics.json"),
            &json!({
                "config_hash": ctx.hash,
                "seed": seed,
                "best_epoch": result.best_epoch,
                "test": metrics,
                "history": result.history,
            }),
        )?;
        aurocs.push(metrics.auroc);
        auprcs.push(metrics.auprc);
        seeds.push(seed);
        mode = Some(result.mode);
    }
    let mut report = EvalReport {
        task: section.task.clone(),
        method: "finetune".into(),
        model: label,
        auroc: MetricSummary::over_seeds(&aurocs)?,
        auprc: MetricSummary::over_seeds(&auprcs)?,
        config: json!({"mode": mode, "run": section.run}),
        seeds,
        warnings: Vec::new(),
    };
    stamp_report(&mut report, ctx, &parent);
    stage.write_text("report.json", &report.to_json()?)?;
    let dir = stage.commit()?;
    eprintln!(
        "AUROC {:.4} ± {:.4} over {} seeds; report in {}",
        report.auroc.mean,
        report.auroc.std,
        report.seeds.len(),
        dir.display()
    );
    Ok(())
}

pub fn probe_stage(ctx: &Ctx, source: ModelSource) -> Result<()> {
    let cfg = &ctx.config;
    let (corpus, inputs) = load_corpus(ctx)?;
    let (model, id, label) = source_model(ctx, &corpus, source, cfg.seed)?;
    let table = EmbeddingTable::from_model(&model, &corpus, id.clone())?;
    let mode = match cfg.probe.mode {
        Some(m) => m,
        None => corpus.input_mode(&cfg.probe.task)?,
    };
    let outcome = linear_probe(&table, &cfg.probe.task, mode, &cfg.probe.l2_grid)?;
    let mut report = outcome.report.clone();
    report.model = label.clone();
    stamp_report(&mut report, ctx, &id);
    let rel = format!("probe/{label}/{}", cfg.probe.task);
    let stage = ctx.workdir.stage(
        &rel,
        ctx.stamp("probe").input("data", inputs.digest).input("checkpoint", id),
        ctx.force,
    )?;
    stage.write_text("report.json", &report.to_json()?)?;
    stage.write_json(
        "selection.json",
        &json!({"chosen_l2": outcome.chosen_l2, "val_auroc": outcome.val_auroc}),
    )?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let dir = stage.commit()?;
    eprintln!("probe AUROC {:.4}, AUPRC {:.4}; report in {}", report.auroc.mean, report.auprc.mean, dir.display());
    Ok(())
}

pub fn knn_stage(ctx: &Ctx, source: ModelSource) -> Result<()> {
    let cfg = &ctx.config;
    let (corpus, inputs) = load_corpus(ctx)?;
    let (model, id, label) = source_model(ctx, &corpus, source, cfg.seed)?;
    let table = EmbeddingTable::from_model(&model, &corpus, id.clone())?;
    let mode = match cfg.knn.mode {
        Some(m) => m,
        None => corpus.input_mode(&cfg.knn.task)?,
    };
    let outcome = knn_eval(&table, &cfg.knn.task, mode, &cfg.knn.sweep, cfg.knn.n_bootstrap, cfg.seed)?;
    let mut report = outcome.report.clone();
    report.model = label.clone();
    stamp_report(&mut report, ctx, &id);
    let rel = format!("knn/{label}/{}", cfg.knn.task);
    let stage = ctx.workdir.stage(
        &rel,
        ctx.stamp("knn").input("data", inputs.digest).input("checkpoint", id),
        ctx.force,
    )?;
    stage.write_text("report.json", &report.to_json()?)?;
    stage.write_json("selection.json", &json!({"best": outcome.best, "val_auroc": outcome.val_auroc}))?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let dir = stage.commit()?;
    eprintln!(
        "knn AUROC {:.4} ± {:.4} (bootstrap); report in {}",
        report.auroc.mean,
        report.auroc.std,
        dir.display()
    );
    Ok(())
}

pub fn cluster_stage(ctx: &Ctx, source: ModelSource) -> Result<()> {
    let cfg = &ctx.config;
    let section = &cfg.cluster;
    let (corpus, inputs) = load_corpus(ctx)?;
    let (model, id, label) = source_model(ctx, &corpus, source, cfg.seed)?;
    let table = EmbeddingTable::from_model(&model, &corpus, id.clone())?;
    let rows = &table.rows;
    let n = rows.len();
    let dim = 2 * table.dim;
    let x = ndarray::Array2::from_shape_fn((n, dim), |(i, j)| {
        if j < table.dim {
            rows[i].pre[j]
        } else {
            rows[i].post[j - table.dim]
        }
    });
    let no_records = Vec::new();
    let outcomes: Vec<Option<EventOutcome>> = rows
        .iter()
        .map(|r| {
            let value = *r.labels.get(&section.task)?;
            let records = inputs.outcomes.get(&r.patient_id).unwrap_or(&no_records);
            let (time, _) = *outcomes_for_event(records, r.event_time).get(&section.task)?;
            Some(EventOutcome {
                value,
                time_to_outcome: (time - r.event_time).max(0.0),
            })
        })
        .collect();
    let (k, elbow) = match section.k {
        Some(k) => (k, None),
        None => {
            let grid: Vec<usize> = section.k_grid.iter().copied().filter(|&k| k <= n).collect();
            let (inertias, k) = elbow_sweep(&x, &grid, cfg.seed, section.n_init)?;
            (k, Some(json!({"k_grid": grid, "inertia": inertias, "chosen": k})))
        }
    };
    let assignment = kmeans(&x, k, cfg.seed, section.n_init)?;
    let report = stratification_report(&assignment, &outcomes, &x)?;
    let rel = format!("cluster/{label}");
    let stage = ctx.workdir.stage(
        &rel,
        ctx.stamp("cluster").input("data", inputs.digest).input("checkpoint", id.clone()),
        ctx.force,
    )?;
    stage.write_json(
        "report.json",
        &json!({
            "config_hash": ctx.hash,
            "seed": cfg.seed,
            "checkpoint": id,
            "task": section.task,
            "elbow": elbow,
            "stratification": report,
        }),
    )?;
    let mut csv = String::from("event_id,split,cluster,pc1,pc2\n");
    for ((r, c), p) in rows.iter().zip(&assignment.labels).zip(&report.pca) {
        csv.push_str(&format!("{},{},{},{},{}\n", r.event_id(), r.split.as_str(), c, p[0], p[1]));
    }
    stage.write_text("assignment.csv", &csv)?;
    if section.svg {
        let curves: Vec<(String, _)> = report
            .clusters
            .iter()
            .filter_map(|c| {
                let curve = c.survival.clone()?;
                let prevalence = c.prevalence.map_or("n/a".to_string(), |p| format!("{p:.3}"));
                Some((format!("cluster {} (prevalence {prevalence})", c.cluster), curve))
            })
            .collect();
        let horizon = outcomes
            .iter()
            .flatten()
            .map(|o| o.time_to_outcome)
            .fold(0.0, f64::max);
        stage.write_text("survival.svg", &survival_svg(&curves, horizon))?;
    }
    let dir = stage.commit()?;
    eprintln!(
        "K = {k}, Δ prevalence {}; report in {}",
        report.delta_prevalence.map_or("n/a".into(), |d| format!("{d:.4}")),
        dir.display()
    );
    Ok(())
}

pub fn report_stage(ctx: &Ctx) -> Result<()> {
    let reports = collect_reports(ctx.workdir.root())?;
    if reports.is_empty() {
        bail!(
            "no evaluation reports under {}; run finetune, probe or knn first",
            ctx.workdir.root().display()
        );
    }
    let mut hashes: Vec<&str> = reports.iter().map(|(_, stamp)| stamp.config_hash.as_str()).collect();
    hashes.sort_unstable();
    hashes.dedup();
    let table = build_table(&reports.iter().map(|(r, _)| r.clone()).collect::<Vec<_>>());
    let mut stamp = ctx.stamp("report");
    for (i, (r, s)) in reports.iter().enumerate() {
        stamp = stamp.input(&format!("{i}:{}/{}/{}", r.method, r.model, r.task), short(&s.config_hash).to_string());
    }
    let stage = ctx.workdir.stage("report", stamp, ctx.force)?;
    stage.write_text("table.md", &table.markdown())?;
    stage.write_text("table.csv", &table.csv())?;
    stage.write_json("table.json", &table)?;
    let dir = stage.commit()?;
    crate::emit(&table.markdown())?;
    if hashes.len() > 1 {
        eprintln!("note: rows come from {} different config hashes", hashes.len());
    }
    eprintln!("table written to {}", dir.display());
    Ok(())
}
