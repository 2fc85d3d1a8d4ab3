use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, ParamStore, Tape, Var};
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::featurizer::MAX_LEN;
use crate::objectives::{
    duett_make_example, ebcl_batch_loss, ebcl_epoch_batches, ocp_loss, ocp_make_example,
    strats_loss, strats_make_example, ContrastiveBatch, ForecastExample, ImputationExample,
    Objective, OcpExample,
};

use super::data::{Corpus, SplitData};
use super::model::{Backbone, Model, PretrainHead};
use super::optim::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub learning_rate: f64,
    pub dropout: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// `None` uses the objective's default.
    pub early_stop_tolerance: Option<usize>,
    pub seed: u64,
    pub init_checkpoint: Option<PathBuf>,
    /// Observation cap for order-prediction sequences.
    pub ocp_max_len: usize,
    pub strats_window_days: f64,
    /// Caps batches per training epoch; `None` uses every batch.
    pub max_batches: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            dropout: 0.0,
            batch_size: 64,
            max_epochs: 300,
            early_stop_tolerance: None,
            seed: 0,
            init_checkpoint: None,
            ocp_max_len: MAX_LEN,
            strats_window_days: 6.0,
            max_batches: None,
        }
    }
}

impl RunConfig {
    pub fn finetune_defaults() -> Self {
        Self {
            batch_size: 128,
            max_epochs: 100,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(0.0..=0.6).contains(&self.dropout) {
            return Err(Error::config(format!("dropout {} outside [0, 0.6]", self.dropout)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::config("batch_size and max_epochs must be positive"));
        }
        Ok(())
    }
}

/// Tracks the best epoch of a trace where lower is better.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub tolerance: usize,
    epochs: usize,
    best: Option<(usize, f64)>,
}

impl EarlyStopping {
    pub fn new(tolerance: usize) -> Self {
        Self {
            tolerance,
            epochs: 0,
            best: None,
        }
    }

    /// Records one epoch (1-based numbering); true if it is the new best.
    pub fn observe(&mut self, value: f64) -> bool {
        self.epochs += 1;
        let better = match self.best {
            None => true,
            Some((_, b)) => value < b,
        };
        if better {
            self.best = Some((self.epochs, value));
        }
        better
    }

    pub fn should_stop(&self) -> bool {
        match self.best {
            Some((e, _)) => self.epochs - e >= self.tolerance,
            None => false,
        }
    }

    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct PretrainResult {
    /// Parameters of the best validation epoch.
    pub model: Model,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
}

/// Examples for one pass over a split, grouped into batches.
enum Examples {
    Pairs,
    Order(Vec<OcpExample>),
    Forecast(Vec<ForecastExample>),
    Imputation(Vec<ImputationExample>),
}

struct EpochPlan {
    examples: Examples,
    batches: Vec<Vec<usize>>,
}

fn chunk(mut order: Vec<usize>, n: usize, rng: Option<&mut ChaCha8Rng>) -> Vec<Vec<usize>> {
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    order.chunks(n).map(|c| c.to_vec()).collect()
}

fn plan_epoch(
    model: &Model,
    corpus: &Corpus,
    split: &SplitData,
    run: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpochPlan> {
    let bs = run.batch_size;
    let bound = corpus.bound();
    let plan = match model.spec.objective {
        Objective::Ebcl => {
            let patients: std::collections::HashSet<&str> =
                split.encoded.iter().map(|e| e.patient_id.as_str()).collect();
            let n = bs.min(patients.len());
            EpochPlan {
                examples: Examples::Pairs,
                batches: ebcl_epoch_batches(&split.encoded, n, rng)?,
            }
        }
        Objective::Ocp => {
            let ex: Vec<OcpExample> = split
                .trajectories
                .iter()
                .filter_map(|t| ocp_make_example(t.observations(), &bound, run.ocp_max_len, rng))
                .collect();
            let batches = chunk((0..ex.len()).collect(), bs, Some(rng));
            EpochPlan {
                examples: Examples::Order(ex),
                batches,
            }
        }
        Objective::Strats => {
            let ex: Vec<ForecastExample> = split
                .trajectories
                .iter()
                .filter_map(|t| {
                    strats_make_example(t.observations(), &bound, run.strats_window_days, MAX_LEN, rng)
                })
                .collect();
            let batches = chunk((0..ex.len()).collect(), bs, Some(rng));
            EpochPlan {
                examples: Examples::Forecast(ex),
                batches,
            }
        }
        Objective::Duett => {
            let ex: Vec<ImputationExample> = split
                .pairs
                .iter()
                .filter_map(|p| {
                    duett_make_example(&p.pre, &p.post, &bound, &corpus.columns, &model.spec.duett, rng)
                })
                .collect();
            let batches = chunk((0..ex.len()).collect(), bs, Some(rng));
            EpochPlan {
                examples: Examples::Imputation(ex),
                batches,
            }
        }
    };
    if plan.batches.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no {} training examples could be built",
            model.spec.objective
        )));
    }
    Ok(plan)
}

fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    split: &SplitData,
    plan: &EpochPlan,
    batch: &[usize],
    drop: &mut Option<Dropout>,
) -> Result<Var> {
    match (&model.backbone, &model.head, &plan.examples) {
        (Backbone::Transformer(enc), PretrainHead::Contrastive(heads), Examples::Pairs) => {
            let b = ContrastiveBatch::from_indices(&split.encoded, batch.to_vec());
            ebcl_batch_loss(tape, enc, heads, &b, drop)
        }
        (Backbone::Transformer(enc), PretrainHead::Order(head), Examples::Order(ex)) => {
            let rows: Vec<_> = batch.iter().map(|&i| ex[i].row.clone()).collect();
            let labels: Vec<u8> = batch.iter().map(|&i| ex[i].label).collect();
            let emb = enc.encode_rows(tape, &rows, drop)?;
            ocp_loss(tape, emb, &labels, head)
        }
        (Backbone::Transformer(enc), PretrainHead::Forecast(head), Examples::Forecast(ex)) => {
            let rows: Vec<_> = batch.iter().map(|&i| ex[i].input.clone()).collect();
            let emb = enc.encode_rows(tape, &rows, drop)?;
            let pred = head.apply(tape, emb);
            let targets: Vec<_> = batch.iter().map(|&i| &ex[i].targets).collect();
            strats_loss(tape, pred, &targets)
        }
        (Backbone::Grid(grid), PretrainHead::Imputation, Examples::Imputation(ex)) => {
            let mut total = None;
            for &i in batch {
                let l = grid.example_loss(tape, &ex[i], drop)?;
                total = Some(match total {
                    None => l,
                    Some(t) => tape.add(t, l),
                });
            }
            let total = total.ok_or_else(|| Error::invalid("empty imputation batch"))?;
            Ok(tape.scale(total, 1.0 / batch.len() as f64))
        }
        _ => Err(Error::invalid("model head does not match the objective's examples")),
    }
}

/// Mean batch loss over a fixed plan without dropout or updates.
fn evaluate(model: &Model, split: &SplitData, plan: &EpochPlan) -> Result<f64> {
    let mut total = 0.0;
    for batch in &plan.batches {
        let mut tape = Tape::new(&model.store);
        let l = batch_loss(model, &mut tape, split, plan, batch, &mut None)?;
        total += tape.scalar(l);
    }
    Ok(total / plan.batches.len() as f64)
}

/// Implemented by anything the search can advance one epoch at a time.
pub trait Runner {
    /// Trains one epoch and returns the validation loss.
    fn run_epoch(&mut self) -> Result<f64>;

    /// True once the runner will not improve further, e.g. after early
    /// stopping.
    fn finished(&self) -> bool {
        false
    }
}

/// Epoch-by-epoch pretraining state.
pub struct Trainer<'c> {
    pub run: RunConfig,
    corpus: &'c Corpus,
    model: Model,
    adam: Adam,
    rng: ChaCha8Rng,
    drop_rng: ChaCha8Rng,
    val_plan: EpochPlan,
    stopper: EarlyStopping,
    best_store: ParamStore,
    history: Vec<EpochRecord>,
}

impl<'c> Trainer<'c> {
    pub fn new(run: RunConfig, model: Model, corpus: &'c Corpus) -> Result<Self> {
        run.validate()?;
        if corpus.val.is_empty() {
            return Err(Error::InsufficientData("validation split has no pairs".into()));
        }
        // Validation examples are drawn once so the trace is comparable.
        let mut val_rng = ChaCha8Rng::seed_from_u64(run.seed);
        val_rng.set_stream(1);
        let val_plan = plan_epoch(&model, corpus, &corpus.val, &run, &mut val_rng)?;
        let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
        rng.set_stream(2);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(run.seed);
        drop_rng.set_stream(3);
        let tolerance = run
            .early_stop_tolerance
            .unwrap_or(model.spec.objective.default_patience());
        Ok(Self {
            adam: Adam::new(&model.store, run.learning_rate),
            best_store: model.store.clone(),
            corpus,
            model,
            rng,
            drop_rng,
            val_plan,
            stopper: EarlyStopping::new(tolerance),
            history: Vec::new(),
            run,
        })
    }

    pub fn epochs_run(&self) -> usize {
        self.history.len()
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// True once early stopping triggers or `max_epochs` is reached.
    pub fn done(&self) -> bool {
        self.stopper.should_stop() || self.history.len() >= self.run.max_epochs
    }

    pub fn best_val(&self) -> Option<f64> {
        self.stopper.best().map(|b| b.1)
    }

    /// One optimisation step on a batch; returns the pre-step loss.
    fn step(&mut self, plan: &EpochPlan, batch: &[usize]) -> Result<f64> {
        let epoch = self.history.len() + 1;
        let (loss, grads) = {
            let mut tape = Tape::new(&self.model.store);
            let mut drop = (self.run.dropout > 0.0).then_some(Dropout {
                rate: self.run.dropout,
                rng: &mut self.drop_rng,
            });
            let l = batch_loss(&self.model, &mut tape, &self.corpus.train, plan, batch, &mut drop)?;
            let loss = tape.scalar(l);
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            (loss, tape.backward(l))
        };
        if !grads.all_finite() {
            return Err(Error::Divergence { epoch, loss: f64::NAN });
        }
        self.adam.step(&mut self.model.store, &grads);
        if let PretrainHead::Contrastive(h) = self.model.head {
            h.clamp_temperature(&mut self.model.store);
        }
        Ok(loss)
    }

    pub fn train_epoch(&mut self) -> Result<EpochRecord> {
        let plan = plan_epoch(&self.model, self.corpus, &self.corpus.train, &self.run, &mut self.rng)?;
        let limit = self.run.max_batches.unwrap_or(usize::MAX);
        let mut total = 0.0;
        let mut n = 0;
        for batch in plan.batches.iter().take(limit) {
            total += self.step(&plan, batch)?;
            n += 1;
        }
        let epoch = self.history.len() + 1;
        let val_loss = evaluate(&self.model, &self.corpus.val, &self.val_plan)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, loss: val_loss });
        }
        if self.stopper.observe(val_loss) {
            self.best_store = self.model.store.clone();
        }
        let record = EpochRecord {
            epoch,
            train_loss: total / n as f64,
            val_loss,
        };
        self.history.push(record.clone());
        Ok(record)
    }

    /// Restores the best-validation parameters.
    pub fn finish(self) -> PretrainResult {
        let mut model = self.model;
        model.store = self.best_store;
        PretrainResult {
            model,
            best_epoch: self.stopper.best().map_or(0, |b| b.0),
            history: self.history,
        }
    }
}

impl Runner for Trainer<'_> {
    fn run_epoch(&mut self) -> Result<f64> {
        Ok(self.train_epoch()?.val_loss)
    }

    fn finished(&self) -> bool {
        self.done()
    }
}

/// Trains until early stopping or `max_epochs`, keeping the best epoch.
pub fn pretrain(run: &RunConfig, model: Model, corpus: &Corpus) -> Result<PretrainResult> {
    let mut trainer = Trainer::new(run.clone(), model, corpus)?;
    while !trainer.done() {
        trainer.train_epoch()?;
    }
    Ok(trainer.finish())
}

/// Loss of the objective on one fixed training batch, for diagnostics.
pub fn single_batch_loss(model: &Model, corpus: &Corpus, run: &RunConfig) -> Result<f64> {
    Ok(single_batch_gradients(model, corpus, run)?.0)
}

/// Loss and parameter gradients on the batch `single_batch_loss` uses. The
/// batch depends only on `run.seed`, so repeated calls see the same data.
pub fn single_batch_gradients(model: &Model, corpus: &Corpus, run: &RunConfig) -> Result<(f64, Grads)> {
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let plan = plan_epoch(model, corpus, &corpus.train, run, &mut rng)?;
    let mut tape = Tape::new(&model.store);
    let l = batch_loss(model, &mut tape, &corpus.train, &plan, &plan.batches[0], &mut None)?;
    Ok((tape.scalar(l), tape.backward(l)))
}
