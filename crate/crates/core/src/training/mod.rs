//! Corpus preparation, pretraining and finetuning loops, successive-halving
//! search and checkpoint persistence.

mod checkpoint;
mod data;
mod diagnostics;
mod finetune;
mod model;
mod optim;
mod pretrain;
mod search;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, sha256_hex, Checkpoint, CheckpointConfig, Manifest, Provenance,
    TensorEntry, FORMAT_VERSION,
};
pub use data::{Corpus, PrepConfig, Split, SplitData};
pub use diagnostics::{order_accuracy, retrieval_accuracy, Accuracy};
pub use finetune::{finetune, train_auroc, FinetuneConfig, FinetuneEpoch, FinetuneResult, Prediction};
pub use model::{
    Backbone, Classifier, ClassifierSpec, Model, ModelSpec, PairRef, PretrainHead, Window,
};
pub use optim::Adam;
pub use pretrain::{
    pretrain, single_batch_gradients, single_batch_loss, EarlyStopping, EpochRecord, PretrainResult, RunConfig, Runner, Trainer,
};
pub use search::{
    hyperparameter_search, sample_trials, write_trial_csv, SearchOutcome, SearchSpec, TrialParams,
    TrialRecord,
};
