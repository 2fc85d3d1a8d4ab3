use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape};
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::evaluation::{auroc, binary_metrics, BinaryMetrics};
use crate::event_stream::InputMode;
use crate::synthetic::sigmoid;

use super::data::{Corpus, SplitData};
use super::model::{ClassifierSpec, Model, PairRef};
use super::optim::Adam;
use super::pretrain::{EarlyStopping, RunConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub task: String,
    /// `None` uses the task's input mode from the preprocessing config.
    pub mode: Option<InputMode>,
    pub run: RunConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    /// AUROC when validation has both classes, else `None` and selection
    /// falls back to validation loss.
    pub val_auroc: Option<f64>,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub patient_id: String,
    pub event_time: f64,
    pub probability: f64,
    pub label: u8,
}

#[derive(Debug, Clone)]
pub struct FinetuneResult {
    pub model: Model,
    pub mode: InputMode,
    pub best_epoch: usize,
    pub history: Vec<FinetuneEpoch>,
    pub test_predictions: Vec<Prediction>,
    /// `None` when the test split lacks one class.
    pub test_metrics: Option<BinaryMetrics>,
}

struct Labelled<'a> {
    pairs: Vec<PairRef<'a>>,
    labels: Vec<u8>,
}

fn labelled<'a>(split: &'a SplitData, task: &str) -> Labelled<'a> {
    let idx = split.labeled(task);
    Labelled {
        pairs: idx.iter().map(|&i| split.pair(i)).collect(),
        labels: idx.iter().map(|&i| split.encoded[i].labels[task]).collect(),
    }
}

fn mean_bce(logits: &[f64], labels: &[u8]) -> f64 {
    let n = logits.len().max(1) as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let sp = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
            sp - y as f64 * z
        })
        .sum::<f64>()
        / n
}

/// Trains a fresh classifier head and the whole backbone with binary
/// cross-entropy, keeping the epoch with the best validation AUROC.
pub fn finetune(cfg: &FinetuneConfig, mut model: Model, corpus: &Corpus) -> Result<FinetuneResult> {
    let run = &cfg.run;
    run.validate()?;
    let mode = match cfg.mode {
        Some(m) => m,
        None => corpus.input_mode(&cfg.task)?,
    };
    let train = labelled(&corpus.train, &cfg.task);
    let val = labelled(&corpus.val, &cfg.task);
    let test = labelled(&corpus.test, &cfg.task);
    let positives = train.labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == train.labels.len() {
        return Err(Error::InsufficientData(format!(
            "task {:?} has single-class training labels ({} examples)",
            cfg.task,
            train.labels.len()
        )));
    }
    if val.labels.is_empty() {
        return Err(Error::InsufficientData(format!("no validation labels for task {:?}", cfg.task)));
    }
    model.attach_classifier(
        ClassifierSpec {
            task: cfg.task.clone(),
            mode,
        },
        run.seed,
    )?;
    let classifier = model.classifier.clone().expect("just attached");
    let val_has_both = val.labels.contains(&0) && val.labels.contains(&1);

    let mut adam = Adam::new(&model.store, run.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    rng.set_stream(4);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(run.seed);
    drop_rng.set_stream(5);
    let mut stopper = EarlyStopping::new(run.early_stop_tolerance.unwrap_or(3));
    let mut best_store: ParamStore = model.store.clone();
    let mut history = Vec::new();

    while history.len() < run.max_epochs && !stopper.should_stop() {
        let epoch = history.len() + 1;
        let mut order: Vec<usize> = (0..train.pairs.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut n_batches = 0;
        for batch in order.chunks(run.batch_size).take(run.max_batches.unwrap_or(usize::MAX)) {
            let (loss, grads) = {
                let mut tape = Tape::new(&model.store);
                let mut drop = (run.dropout > 0.0).then_some(Dropout {
                    rate: run.dropout,
                    rng: &mut drop_rng,
                });
                let inputs = batch
                    .iter()
                    .map(|&i| model.classifier_input(&mut tape, corpus, train.pairs[i], mode, &mut drop))
                    .collect::<Result<Vec<_>>>()?;
                let x = tape.concat_rows(&inputs);
                let logits = classifier.apply(&mut tape, x);
                let targets: Vec<f64> = batch.iter().map(|&i| train.labels[i] as f64).collect();
                let l = tape.bce_with_logits(logits, &targets, &vec![1.0; batch.len()]);
                let loss = tape.scalar(l);
                if !loss.is_finite() {
                    return Err(Error::Divergence { epoch, loss });
                }
                (loss, tape.backward(l))
            };
            adam.step(&mut model.store, &grads);
            total += loss;
            n_batches += 1;
        }
        let logits = model.predict_logits(corpus, &val.pairs)?;
        let val_loss = mean_bce(&logits, &val.labels);
        if !val_loss.is_finite() {
            return Err(Error::Divergence { epoch, loss: val_loss });
        }
        let val_auroc = if val_has_both {
            Some(auroc(&logits, &val.labels)?)
        } else {
            None
        };
        // Higher AUROC is better; the stopper minimises.
        if stopper.observe(val_auroc.map_or(val_loss, |a| -a)) {
            best_store = model.store.clone();
        }
        history.push(FinetuneEpoch {
            epoch,
            train_loss: total / n_batches.max(1) as f64,
            val_auroc,
            val_loss,
        });
    }
    model.store = best_store;

    let logits = model.predict_logits(corpus, &test.pairs)?;
    let test_metrics = if test.labels.contains(&0) && test.labels.contains(&1) {
        Some(binary_metrics(&logits, &test.labels)?)
    } else {
        None
    };
    let test_predictions = test
        .pairs
        .iter()
        .zip(&logits)
        .zip(&test.labels)
        .map(|((p, &z), &label)| Prediction {
            patient_id: p.encoded.patient_id.clone(),
            event_time: p.encoded.event_time,
            probability: sigmoid(z),
            label,
        })
        .collect();
    Ok(FinetuneResult {
        model,
        mode,
        best_epoch: stopper.best().map_or(0, |b| b.0),
        history,
        test_predictions,
        test_metrics,
    })
}

/// Training-split AUROC of a finetuned model, for capacity checks.
pub fn train_auroc(model: &Model, corpus: &Corpus, task: &str) -> Result<f64> {
    let train = labelled(&corpus.train, task);
    let logits = model.predict_logits(corpus, &train.pairs)?;
    auroc(&logits, &train.labels)
}
