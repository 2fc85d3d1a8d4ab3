//! Held-out checks of what a pretraining head has learned.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::featurizer::EncodedPair;
use crate::objectives::{ebcl_epoch_batches, ebcl_projections, ocp_make_example, ContrastiveBatch};

use super::data::{Corpus, Split};
use super::model::{Backbone, Model, PretrainHead};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub correct: usize,
    pub total: usize,
}

impl Accuracy {
    pub fn value(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Top-1 in-batch retrieval: each pre embedding must score its own post
/// embedding highest among `batch_size` candidates from distinct patients.
/// Incomplete batches are dropped so chance stays at `1 / batch_size`.
pub fn retrieval_accuracy(
    model: &Model,
    corpus: &Corpus,
    split: Split,
    batch_size: usize,
    seed: u64,
) -> Result<Accuracy> {
    let (Backbone::Transformer(enc), PretrainHead::Contrastive(heads)) = (&model.backbone, &model.head) else {
        return Err(Error::invalid("retrieval needs a contrastive model"));
    };
    let pairs: &[EncodedPair] = &corpus.split(split).encoded;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches = ebcl_epoch_batches(pairs, batch_size, &mut rng)?;
    let mut acc = Accuracy { correct: 0, total: 0 };
    for indices in batches.into_iter().filter(|b| b.len() == batch_size) {
        let batch = ContrastiveBatch::from_indices(pairs, indices);
        let mut tape = Tape::new(&model.store);
        let (pre, post) = ebcl_projections(&mut tape, enc, heads, &batch, &mut None)?;
        let sims: Array2<f64> = tape.value(pre).dot(&tape.value(post).t());
        for (i, row) in sims.rows().into_iter().enumerate() {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |a, (j, &s)| if s > a.1 { (j, s) } else { a })
                .0;
            acc.correct += (best == i) as usize;
            acc.total += 1;
        }
    }
    if acc.total == 0 {
        return Err(Error::InsufficientData(format!(
            "{} split has fewer than {batch_size} distinct patients",
            split.as_str()
        )));
    }
    Ok(acc)
}

/// Swap-detection accuracy of an order-prediction model on one freshly
/// drawn example per trajectory of `split`.
pub fn order_accuracy(model: &Model, corpus: &Corpus, split: Split, max_len: usize, seed: u64) -> Result<Accuracy> {
    let (Backbone::Transformer(enc), PretrainHead::Order(head)) = (&model.backbone, &model.head) else {
        return Err(Error::invalid("order accuracy needs an order-prediction model"));
    };
    let bound = corpus.bound();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Accuracy { correct: 0, total: 0 };
    for traj in &corpus.split(split).trajectories {
        let Some(ex) = ocp_make_example(traj.observations(), &bound, max_len, &mut rng) else {
            continue;
        };
        let mut tape = Tape::new(&model.store);
        let emb = enc.encode_row(&mut tape, &ex.row, &mut None)?;
        let logit = head.apply(&mut tape, emb);
        let predicted = (tape.scalar(logit) > 0.0) as u8;
        acc.correct += (predicted == ex.label) as usize;
        acc.total += 1;
    }
    if acc.total == 0 {
        return Err(Error::InsufficientData("no trajectory is long enough for an order example".into()));
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::Objective;
    use crate::training::pretrain::tests::{small_corpus, tiny_spec};

    #[test]
    fn untrained_retrieval_runs_near_chance() {
        let corpus = small_corpus(80);
        let model = Model::init(&tiny_spec(Objective::Ebcl, &corpus), 1).unwrap();
        let acc = retrieval_accuracy(&model, &corpus, Split::Train, 4, 0).unwrap();
        assert!(acc.total >= 4 && acc.total.is_multiple_of(4));
        assert!(acc.value() <= 1.0);
        assert!(retrieval_accuracy(&model, &corpus, Split::Train, 10_000, 0).is_err());
    }

    #[test]
    fn heads_are_checked() {
        let corpus = small_corpus(40);
        let ocp = Model::init(&tiny_spec(Objective::Ocp, &corpus), 1).unwrap();
        assert!(retrieval_accuracy(&ocp, &corpus, Split::Train, 4, 0).is_err());
        let ebcl = Model::init(&tiny_spec(Objective::Ebcl, &corpus), 1).unwrap();
        assert!(order_accuracy(&ebcl, &corpus, Split::Train, 64, 0).is_err());
        let acc = order_accuracy(&ocp, &corpus, Split::Train, 64, 0).unwrap();
        assert!(acc.total > 0);
    }
}
