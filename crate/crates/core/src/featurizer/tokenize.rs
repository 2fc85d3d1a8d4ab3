use std::collections::BTreeMap;

use ndarray::Array2;

use super::vocab::{BoundVocab, Token, PAD_ID};
use crate::error::{Error, Result};
use crate::event_stream::{Observation, WindowPair};

/// Default sequence length limit.
pub const MAX_LEN: usize = 512;

/// One encoded window without padding.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRow {
    pub times: Vec<f64>,
    pub tokens: Vec<Token>,
}

impl TokenRow {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Padded batch of token rows; `mask` is true on real tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub times: Array2<f64>,
    pub feature_ids: Array2<u32>,
    pub cont_values: Array2<f64>,
    pub cat_value_ids: Array2<u32>,
    pub is_cont: Array2<bool>,
    pub mask: Array2<bool>,
}

impl TokenBatch {
    /// Right-pads every row to `width`, which must cover the longest row.
    pub fn from_rows(rows: &[TokenRow], width: usize) -> Result<Self> {
        let b = rows.len();
        if let Some(r) = rows.iter().find(|r| r.len() > width) {
            return Err(Error::Shape(format!(
                "row of {} tokens exceeds batch width {width}",
                r.len()
            )));
        }
        let mut batch = Self {
            times: Array2::zeros((b, width)),
            feature_ids: Array2::from_elem((b, width), PAD_ID),
            cont_values: Array2::zeros((b, width)),
            cat_value_ids: Array2::from_elem((b, width), PAD_ID),
            is_cont: Array2::from_elem((b, width), false),
            mask: Array2::from_elem((b, width), false),
        };
        for (i, row) in rows.iter().enumerate() {
            for (s, (t, tok)) in row.times.iter().zip(&row.tokens).enumerate() {
                batch.times[[i, s]] = *t;
                batch.feature_ids[[i, s]] = tok.feature_id;
                batch.cont_values[[i, s]] = tok.cont_value;
                batch.cat_value_ids[[i, s]] = tok.cat_value_id;
                batch.is_cont[[i, s]] = tok.is_cont;
                batch.mask[[i, s]] = true;
            }
        }
        Ok(batch)
    }

    pub fn batch_size(&self) -> usize {
        self.mask.nrows()
    }

    pub fn width(&self) -> usize {
        self.mask.ncols()
    }

    /// Unmasked tokens of one row, in sequence order.
    pub fn row(&self, i: usize) -> TokenRow {
        let mut times = Vec::new();
        let mut tokens = Vec::new();
        for s in 0..self.width() {
            if self.mask[[i, s]] {
                times.push(self.times[[i, s]]);
                tokens.push(Token {
                    feature_id: self.feature_ids[[i, s]],
                    is_cont: self.is_cont[[i, s]],
                    cont_value: self.cont_values[[i, s]],
                    cat_value_id: self.cat_value_ids[[i, s]],
                });
            }
        }
        TokenRow { times, tokens }
    }

    /// Appends `extra` padding columns.
    pub fn padded(&self, extra: usize) -> Self {
        let rows: Vec<TokenRow> = (0..self.batch_size()).map(|i| self.row(i)).collect();
        Self::from_rows(&rows, self.width() + extra).expect("widening cannot overflow")
    }
}

/// Encodes observations with caller-supplied relative times (in days).
/// Dropped features are skipped; if more than `max_len` tokens remain, the
/// ones with the smallest `|relative time|` are kept. Returns `None` when
/// fewer than `min_len` tokens survive.
pub fn encode_with_times(
    observations: &[Observation],
    relative_days: &[f64],
    vocab: &BoundVocab,
    max_len: usize,
    min_len: usize,
) -> Option<TokenRow> {
    debug_assert_eq!(observations.len(), relative_days.len());
    let mut kept: Vec<(usize, f64, Token)> = observations
        .iter()
        .zip(relative_days)
        .enumerate()
        .filter_map(|(i, (o, rel))| vocab.token(o.feature_id, &o.value).map(|t| (i, *rel, t)))
        .collect();
    if kept.len() > max_len {
        // Stable sort keeps the earlier of two equidistant observations.
        kept.sort_by(|a, b| a.1.abs().total_cmp(&b.1.abs()));
        kept.truncate(max_len);
        kept.sort_by_key(|k| k.0);
    }
    if kept.len() < min_len {
        return None;
    }
    let scale = vocab.vocab.time_std;
    Some(TokenRow {
        times: kept.iter().map(|k| k.1 / scale).collect(),
        tokens: kept.into_iter().map(|k| k.2).collect(),
    })
}

/// Encodes a window with times relative to `event_time`, scaled by the
/// vocabulary's time standard deviation.
pub fn encode_window(
    observations: &[Observation],
    event_time: f64,
    vocab: &BoundVocab,
    max_len: usize,
    min_len: usize,
) -> Option<TokenRow> {
    let rel: Vec<f64> = observations.iter().map(|o| o.time - event_time).collect();
    encode_with_times(observations, &rel, vocab, max_len, min_len)
}

/// A window pair in token space, times relative to the event.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub patient_id: String,
    pub event_time: f64,
    pub pre: TokenRow,
    pub post: TokenRow,
    pub labels: BTreeMap<String, u8>,
}

/// `None` when either side keeps fewer than `min_len` tokens.
pub fn encode_pair(
    pair: &WindowPair,
    vocab: &BoundVocab,
    max_len: usize,
    min_len: usize,
) -> Option<EncodedPair> {
    let t = pair.event.time;
    Some(EncodedPair {
        patient_id: pair.event.patient_id.clone(),
        event_time: t,
        pre: encode_window(&pair.pre, t, vocab, max_len, min_len)?,
        post: encode_window(&pair.post, t, vocab, max_len, min_len)?,
        labels: pair.labels.clone(),
    })
}
