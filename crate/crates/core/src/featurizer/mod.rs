//! Vocabulary construction, triplet tokenization, and tabular aggregation.

mod tabular;
mod tokenize;
mod vocab;

pub use tabular::{
    aggregate_tabular, top_features, write_tabular_csv, Aggregate, TabularConfig, TabularLearner,
};
pub use tokenize::{encode_pair, encode_window, encode_with_times, EncodedPair, TokenBatch, TokenRow, MAX_LEN};
pub use vocab::{
    build_vocabulary, BoundVocab, CategoryEntry, FeatureEntry, FeatureKind, Token, VocabConfig,
    Vocabulary, PAD_ID, UNKNOWN_ID,
};
