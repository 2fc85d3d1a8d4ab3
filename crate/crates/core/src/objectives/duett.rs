//! Simplified masked-imputation pretraining over a time-binned feature grid.
//!
//! A window's observations are binned uniformly over its time span into
//! `n_bins` bins for the `top_k` most frequent vocabulary features. Each cell
//! holds the mean z-value and the observation count. Random cells are
//! hidden; the model reconstructs presence (count > 0) and value. The model
//! alternates transformer layers over the time axis and the feature axis.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::encoder::{
    maybe_dropout, Dense, Dropout, Init, Registrar, TransformerLayer,
};
use crate::error::{Error, Result};
use crate::event_stream::Observation;
use crate::featurizer::{BoundVocab, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DuettConfig {
    pub n_bins: usize,
    pub top_k: usize,
    pub mask_rate: f64,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Pairs of (time-axis, feature-axis) layers.
    pub n_layer_pairs: usize,
    pub d_embed: usize,
}

impl Default for DuettConfig {
    fn default() -> Self {
        Self {
            n_bins: 32,
            top_k: 128,
            mask_rate: 0.15,
            d_model: 32,
            n_heads: 2,
            d_ff: 128,
            n_layer_pairs: 2,
            d_embed: 32,
        }
    }
}

impl DuettConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 || self.top_k == 0 {
            return Err(Error::config("n_bins and top_k must be positive"));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate < 1.0) {
            return Err(Error::config(format!("mask_rate {} outside (0, 1)", self.mask_rate)));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config("d_model must be a positive multiple of n_heads"));
        }
        Ok(())
    }
}

/// Grid columns: vocabulary feature ids by descending training count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DuettColumns {
    pub feature_ids: Vec<u32>,
}

impl DuettColumns {
    pub fn from_vocab(vocab: &Vocabulary, top_k: usize) -> Self {
        let mut ranked: Vec<(u32, usize)> = vocab.features.iter().map(|f| (f.id, f.count)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Self {
            feature_ids: ranked.into_iter().take(top_k).map(|r| r.0).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.feature_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.feature_ids.is_empty()
    }

    fn column(&self, token_id: u32) -> Option<usize> {
        self.feature_ids.iter().position(|f| *f == token_id)
    }
}

/// Binned window. `values` is NaN where `counts` is 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    pub values: Array2<f64>,
    pub counts: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImputationExample {
    pub grid: FeatureGrid,
    /// Hidden cells.
    pub mask: Array2<bool>,
}

/// Bins observations uniformly over their time span. Categorical values
/// count towards presence with value 0. `None` if no observation lands in a
/// grid column.
pub fn bin_observations(
    observations: &[Observation],
    vocab: &BoundVocab,
    columns: &DuettColumns,
    n_bins: usize,
) -> Option<FeatureGrid> {
    let cells: Vec<(f64, usize, f64)> = observations
        .iter()
        .filter_map(|o| {
            let tok = vocab.token(o.feature_id, &o.value)?;
            let col = columns.column(tok.feature_id)?;
            Some((o.time, col, if tok.is_cont { tok.cont_value } else { 0.0 }))
        })
        .collect();
    if cells.is_empty() {
        return None;
    }
    let lo = cells.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    let hi = cells.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let mut sums = Array2::<f64>::zeros((n_bins, columns.len()));
    let mut counts = Array2::<f64>::zeros((n_bins, columns.len()));
    for (t, col, v) in cells {
        let bin = if span > 0.0 {
            (((t - lo) / span * n_bins as f64) as usize).min(n_bins - 1)
        } else {
            0
        };
        sums[[bin, col]] += v;
        counts[[bin, col]] += 1.0;
    }
    let values = ndarray::Zip::from(&sums)
        .and(&counts)
        .map_collect(|s, c| if *c > 0.0 { s / c } else { f64::NAN });
    Some(FeatureGrid { values, counts })
}

/// Bins pre and post together and hides cells at `mask_rate` (at least one).
pub fn duett_make_example(
    pre: &[Observation],
    post: &[Observation],
    vocab: &BoundVocab,
    columns: &DuettColumns,
    config: &DuettConfig,
    rng: &mut ChaCha8Rng,
) -> Option<ImputationExample> {
    let all: Vec<Observation> = pre.iter().chain(post).cloned().collect();
    let grid = bin_observations(&all, vocab, columns, config.n_bins)?;
    let mut mask = Array2::from_shape_simple_fn(grid.values.dim(), || rng.random::<f64>() < config.mask_rate);
    if !mask.iter().any(|m| *m) {
        let (r, c) = mask.dim();
        let i = rng.random_range(0..r * c);
        mask[[i / c, i % c]] = true;
    }
    Some(ImputationExample { grid, mask })
}

/// Parameter handles of the grid model.
#[derive(Debug, Clone)]
pub struct DuettModel {
    pub config: DuettConfig,
    pub n_columns: usize,
    pub input: Dense,
    pub feature_table: crate::autograd::ParamId,
    pub time_layers: Vec<TransformerLayer>,
    pub feature_layers: Vec<TransformerLayer>,
    pub value_head: Dense,
    pub presence_head: Dense,
    pub proj: Dense,
}

impl DuettModel {
    pub(crate) fn declare(reg: &mut Registrar, config: &DuettConfig, n_columns: usize) -> Self {
        let d = config.d_model;
        let layer = |reg: &mut Registrar, name: String| {
            TransformerLayer::register(reg, &name, d, config.d_ff, config.n_heads)
        };
        let mut time_layers = Vec::new();
        let mut feature_layers = Vec::new();
        for i in 0..config.n_layer_pairs {
            time_layers.push(layer(reg, format!("duett.time{i}")));
            feature_layers.push(layer(reg, format!("duett.feature{i}")));
        }
        Self {
            config: config.clone(),
            n_columns,
            input: Dense::register(reg, "duett.input", 3, d),
            feature_table: reg.take("duett.feature_table", (n_columns, d), Init::Normal),
            time_layers,
            feature_layers,
            value_head: Dense::register(reg, "duett.value_head", d, 1),
            presence_head: Dense::register(reg, "duett.presence_head", d, 1),
            proj: Dense::register(reg, "duett.proj", d, config.d_embed),
        }
    }

    pub fn init(
        store: &mut ParamStore,
        config: &DuettConfig,
        n_columns: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if n_columns == 0 {
            return Err(Error::config("feature grid has no columns"));
        }
        let mut reg = Registrar::create(store, rng);
        let m = Self::declare(&mut reg, config, n_columns);
        reg.finish()?;
        Ok(m)
    }

    pub fn bind(store: &mut ParamStore, config: &DuettConfig, n_columns: usize) -> Result<Self> {
        config.validate()?;
        let mut reg = Registrar::resolve(store);
        let m = Self::declare(&mut reg, config, n_columns);
        reg.finish()?;
        Ok(m)
    }

    /// Contextualised cell states `[n_bins * n_columns, d]`, bin-major.
    pub fn cells(
        &self,
        tape: &mut Tape,
        grid: &FeatureGrid,
        hidden: Option<&Array2<bool>>,
        drop: &mut Option<Dropout>,
    ) -> Result<Var> {
        let (nb, nf) = grid.values.dim();
        if nf != self.n_columns {
            return Err(Error::Shape(format!(
                "grid has {nf} columns, model expects {}",
                self.n_columns
            )));
        }
        let n = nb * nf;
        let input = Array2::from_shape_fn((n, 3), |(i, k)| {
            let (b, f) = (i / nf, i % nf);
            let is_hidden = hidden.is_some_and(|h| h[[b, f]]);
            match k {
                0 if is_hidden => 0.0,
                0 => {
                    let v = grid.values[[b, f]];
                    if v.is_nan() {
                        0.0
                    } else {
                        v
                    }
                }
                1 if is_hidden => 0.0,
                1 => grid.counts[[b, f]].ln_1p(),
                _ => is_hidden as u8 as f64,
            }
        });
        let x = tape.constant(input);
        let x = self.input.apply(tape, x);
        let table = tape.param(self.feature_table);
        let cols: Vec<usize> = (0..n).map(|i| i % nf).collect();
        let emb = tape.gather_rows(table, &cols);
        let mut h = tape.add(x, emb);
        let to_bin_major: Vec<usize> = (0..n).map(|i| (i % nf) * nb + i / nf).collect();
        for (tl, fl) in self.time_layers.iter().zip(&self.feature_layers) {
            let mut per_feature = Vec::with_capacity(nf);
            for f in 0..nf {
                let ids: Vec<usize> = (0..nb).map(|b| b * nf + f).collect();
                let seq = tape.gather_rows(h, &ids);
                per_feature.push(tl.apply(tape, seq, drop));
            }
            let feature_major = tape.concat_rows(&per_feature);
            h = tape.gather_rows(feature_major, &to_bin_major);
            let mut per_bin = Vec::with_capacity(nb);
            for b in 0..nb {
                let ids: Vec<usize> = (b * nf..(b + 1) * nf).collect();
                let seq = tape.gather_rows(h, &ids);
                per_bin.push(fl.apply(tape, seq, drop));
            }
            h = tape.concat_rows(&per_bin);
        }
        Ok(maybe_dropout(drop, tape, h))
    }

    /// `(presence_logits, value_pred)`, each `[n_cells, 1]`.
    pub fn heads(&self, tape: &mut Tape, cells: Var) -> (Var, Var) {
        (
            self.presence_head.apply(tape, cells),
            self.value_head.apply(tape, cells),
        )
    }

    /// Window embedding `[1, d_embed]`: projected mean over cells.
    pub fn embed(&self, tape: &mut Tape, grid: &FeatureGrid, drop: &mut Option<Dropout>) -> Result<Var> {
        let h = self.cells(tape, grid, None, drop)?;
        let pooled = tape.mean_rows(h);
        Ok(self.proj.apply(tape, pooled))
    }

    /// Reconstruction loss for one example.
    pub fn example_loss(
        &self,
        tape: &mut Tape,
        example: &ImputationExample,
        drop: &mut Option<Dropout>,
    ) -> Result<Var> {
        let h = self.cells(tape, &example.grid, Some(&example.mask), drop)?;
        let (presence, value) = self.heads(tape, h);
        duett_loss(tape, presence, value, example)
    }
}

/// BCE on presence over hidden cells plus MSE on values of hidden observed
/// cells. Predictions are `[n_bins * n_columns, 1]`, bin-major.
pub fn duett_loss(
    tape: &mut Tape,
    presence_logits: Var,
    value_pred: Var,
    example: &ImputationExample,
) -> Result<Var> {
    let (nb, nf) = example.mask.dim();
    let n = nb * nf;
    if tape.shape(presence_logits) != (n, 1) || tape.shape(value_pred) != (n, 1) {
        return Err(Error::Shape(format!("predictions must be [{n}, 1]")));
    }
    let mut targets = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut value_target = Array2::zeros((n, 1));
    let mut value_mask = Array2::zeros((n, 1));
    for i in 0..n {
        let (b, f) = (i / nf, i % nf);
        let hidden = example.mask[[b, f]];
        let observed = example.grid.counts[[b, f]] > 0.0;
        targets.push(observed as u8 as f64);
        weights.push(hidden as u8 as f64);
        if hidden && observed {
            value_target[[i, 0]] = example.grid.values[[b, f]];
            value_mask[[i, 0]] = 1.0;
        }
    }
    if weights.iter().all(|w| *w == 0.0) {
        return Err(Error::invalid("imputation example hides no cells"));
    }
    let presence = tape.bce_with_logits(presence_logits, &targets, &weights);
    if value_mask.sum() == 0.0 {
        return Ok(presence);
    }
    let values = tape.masked_squared_error(value_pred, value_target, value_mask);
    Ok(tape.add(presence, values))
}
