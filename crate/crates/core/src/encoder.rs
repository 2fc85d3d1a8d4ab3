//! Triplet transformer encoder.
//!
//! Each token is `time_emb(t) + feature_emb(f) + value_emb(v)` where the value
//! term is a small feed-forward net for continuous values and a lookup for
//! categorical ones. Tokens pass through post-norm transformer layers, are
//! pooled by fusion self-attention, and linearly projected to the embedding.
//! Padding is removed before attention, which is equivalent to masking padded
//! keys and excluding padded queries from pooling.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::featurizer::{TokenBatch, TokenRow};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_token: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub d_embed: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_token: 32,
            n_layers: 2,
            d_ff: 128,
            n_heads: 2,
            max_len: 512,
            d_embed: 32,
            dropout: 0.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_token == 0 || self.n_heads == 0 || !self.d_token.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!(
                "d_token {} must be a positive multiple of n_heads {}",
                self.d_token, self.n_heads
            )));
        }
        if !(0.0..=0.6).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 0.6]",
                self.dropout
            )));
        }
        if self.d_ff == 0 || self.d_embed == 0 || self.max_len == 0 {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        Ok(())
    }
}

/// Sizes of the lookup tables, taken from the vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSizes {
    pub n_feature_ids: usize,
    pub n_category_ids: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) enum Init {
    Normal,
    Zeros,
    Ones,
    Const(f64),
}

pub(crate) fn truncated_normal(rng: &mut ChaCha8Rng, shape: (usize, usize), std: f64) -> Mat {
    let normal = Normal::new(0.0, std).expect("positive std");
    Mat::from_shape_fn(shape, |_| loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            break x;
        }
    })
}

pub(crate) fn init_value(init: Init, shape: (usize, usize), rng: &mut ChaCha8Rng) -> Mat {
    match init {
        Init::Normal => truncated_normal(rng, shape, 0.02),
        Init::Zeros => Mat::zeros(shape),
        Init::Ones => Mat::ones(shape),
        Init::Const(c) => Mat::from_elem(shape, c),
    }
}

/// Adds freshly initialised tensors, or checks and resolves existing ones.
pub(crate) struct Registrar<'a> {
    store: &'a mut ParamStore,
    rng: Option<&'a mut ChaCha8Rng>,
    missing: Vec<String>,
    mismatched: Vec<String>,
}

impl<'a> Registrar<'a> {
    pub(crate) fn create(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng: Some(rng),
            missing: Vec::new(),
            mismatched: Vec::new(),
        }
    }

    pub(crate) fn resolve(store: &'a mut ParamStore) -> Self {
        Self {
            store,
            rng: None,
            missing: Vec::new(),
            mismatched: Vec::new(),
        }
    }

    pub(crate) fn take(&mut self, name: &str, shape: (usize, usize), init: Init) -> ParamId {
        match self.rng.as_deref_mut() {
            Some(rng) => {
                let value = init_value(init, shape, rng);
                self.store.add(name, value)
            }
            None => match self.store.id(name) {
                Some(id) => {
                    if self.store.get(id).dim() != shape {
                        let got = self.store.get(id).dim();
                        self.mismatched
                            .push(format!("{name}: expected {shape:?}, found {got:?}"));
                    }
                    id
                }
                None => {
                    self.missing.push(name.to_string());
                    ParamId::dangling()
                }
            },
        }
    }

    pub(crate) fn finish(self) -> Result<()> {
        if !self.missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "missing tensors: {}",
                self.missing.join(", ")
            )));
        }
        if !self.mismatched.is_empty() {
            return Err(Error::Checkpoint(format!(
                "shape mismatch: {}",
                self.mismatched.join("; ")
            )));
        }
        Ok(())
    }
}

/// A dense layer `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub(crate) fn register(reg: &mut Registrar, name: &str, d_in: usize, d_out: usize) -> Self {
        Self {
            w: reg.take(&format!("{name}.w"), (d_in, d_out), Init::Normal),
            b: reg.take(&format!("{name}.b"), (1, d_out), Init::Zeros),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub(crate) fn register(reg: &mut Registrar, name: &str, d: usize) -> Self {
        Self {
            gain: reg.take(&format!("{name}.gain"), (1, d), Init::Ones),
            bias: reg.take(&format!("{name}.bias"), (1, d), Init::Zeros),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let n = tape.layer_norm_rows(x, 1e-5);
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        let n = tape.mul_row(n, g);
        tape.add_row(n, b)
    }
}

/// Dropout applied while building a training graph.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut ChaCha8Rng,
}

impl Dropout<'_> {
    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let shape = tape.shape(x);
        let mask = Mat::from_shape_fn(shape, |_| {
            if self.rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        let m = tape.constant(mask);
        tape.mul(x, m)
    }
}

pub(crate) fn maybe_dropout(drop: &mut Option<Dropout>, tape: &mut Tape, x: Var) -> Var {
    match drop {
        Some(d) => d.apply(tape, x),
        None => x,
    }
}

/// One post-norm transformer encoder layer.
#[derive(Debug, Clone, Copy)]
pub struct TransformerLayer {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub out: Dense,
    pub norm1: LayerNorm,
    pub ff1: Dense,
    pub ff2: Dense,
    pub norm2: LayerNorm,
    pub n_heads: usize,
}

impl TransformerLayer {
    pub(crate) fn register(
        reg: &mut Registrar,
        name: &str,
        d: usize,
        d_ff: usize,
        n_heads: usize,
    ) -> Self {
        Self {
            q: Dense::register(reg, &format!("{name}.attn.q"), d, d),
            k: Dense::register(reg, &format!("{name}.attn.k"), d, d),
            v: Dense::register(reg, &format!("{name}.attn.v"), d, d),
            out: Dense::register(reg, &format!("{name}.attn.out"), d, d),
            norm1: LayerNorm::register(reg, &format!("{name}.norm1"), d),
            ff1: Dense::register(reg, &format!("{name}.ff1"), d, d_ff),
            ff2: Dense::register(reg, &format!("{name}.ff2"), d_ff, d),
            norm2: LayerNorm::register(reg, &format!("{name}.norm2"), d),
            n_heads,
        }
    }

    /// `x` is `[n, d]` with every row a real token.
    pub fn apply(&self, tape: &mut Tape, x: Var, drop: &mut Option<Dropout>) -> Var {
        let d = tape.shape(x).1;
        let dh = d / self.n_heads;
        let q = self.q.apply(tape, x);
        let k = self.k.apply(tape, x);
        let v = self.v.apply(tape, x);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let scores = tape.matmul_bt(qh, kh);
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores);
            heads.push(tape.matmul(attn, vh));
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        let a = self.out.apply(tape, cat);
        let a = maybe_dropout(drop, tape, a);
        let x = tape.add(x, a);
        let x = self.norm1.apply(tape, x);
        let f = self.ff1.apply(tape, x);
        let f = tape.relu(f);
        let f = self.ff2.apply(tape, f);
        let f = maybe_dropout(drop, tape, f);
        let x = tape.add(x, f);
        self.norm2.apply(tape, x)
    }
}

/// One-to-many scalar embedder: `Linear(1, d) -> tanh -> Linear(d, d)`.
#[derive(Debug, Clone, Copy)]
pub struct ScalarEmbedder {
    pub hidden: Dense,
    pub out: Dense,
}

impl ScalarEmbedder {
    fn register(reg: &mut Registrar, name: &str, d: usize) -> Self {
        Self {
            hidden: Dense::register(reg, &format!("{name}.hidden"), 1, d),
            out: Dense::register(reg, &format!("{name}.out"), d, d),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.hidden.apply(tape, x);
        let h = tape.tanh(h);
        self.out.apply(tape, h)
    }
}

/// Attention-weighted average of token outputs:
/// `alpha = softmax_s(v . tanh(W h_s + b))`.
#[derive(Debug, Clone, Copy)]
pub struct FusionPool {
    pub hidden: Dense,
    pub score: ParamId,
}

impl FusionPool {
    pub fn apply(&self, tape: &mut Tape, h: Var) -> Var {
        let a = self.hidden.apply(tape, h);
        let a = tape.tanh(a);
        let v = tape.param(self.score);
        let s = tape.matmul(a, v);
        let s = tape.transpose(s);
        let alpha = tape.softmax_rows(s);
        tape.matmul(alpha, h)
    }
}

/// Parameter handles of the shared encoder `f_theta`.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub sizes: TableSizes,
    pub time: ScalarEmbedder,
    pub value: ScalarEmbedder,
    pub feature_table: ParamId,
    pub category_table: ParamId,
    pub layers: Vec<TransformerLayer>,
    pub fusion: FusionPool,
    pub pool_proj: Dense,
}

impl Encoder {
    pub(crate) fn declare(reg: &mut Registrar, config: &EncoderConfig, sizes: TableSizes) -> Self {
        let d = config.d_token;
        let time = ScalarEmbedder::register(reg, "encoder.time", d);
        let value = ScalarEmbedder::register(reg, "encoder.value", d);
        let feature_table = reg.take("encoder.feature_table", (sizes.n_feature_ids, d), Init::Normal);
        let category_table =
            reg.take("encoder.category_table", (sizes.n_category_ids, d), Init::Normal);
        let layers = (0..config.n_layers)
            .map(|i| {
                TransformerLayer::register(
                    reg,
                    &format!("encoder.layer{i}"),
                    d,
                    config.d_ff,
                    config.n_heads,
                )
            })
            .collect();
        let fusion = FusionPool {
            hidden: Dense::register(reg, "encoder.fusion.hidden", d, d),
            score: reg.take("encoder.fusion.score", (d, 1), Init::Normal),
        };
        let pool_proj = Dense::register(reg, "encoder.pool_proj", d, config.d_embed);
        Self {
            config: config.clone(),
            sizes,
            time,
            value,
            feature_table,
            category_table,
            layers,
            fusion,
            pool_proj,
        }
    }

    /// Registers freshly initialised encoder tensors in `store`.
    pub fn init(
        store: &mut ParamStore,
        config: &EncoderConfig,
        sizes: TableSizes,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut reg = Registrar::create(store, rng);
        let enc = Self::declare(&mut reg, config, sizes);
        reg.finish()?;
        Ok(enc)
    }

    /// Resolves encoder tensors already present in `store`, checking shapes.
    pub fn bind(store: &mut ParamStore, config: &EncoderConfig, sizes: TableSizes) -> Result<Self> {
        config.validate()?;
        let mut reg = Registrar::resolve(store);
        let enc = Self::declare(&mut reg, config, sizes);
        reg.finish()?;
        Ok(enc)
    }

    /// Token embeddings `[n, d_token]` for the tokens of one row.
    pub fn embed_row(&self, tape: &mut Tape, row: &TokenRow) -> Result<Var> {
        let n = row.len();
        if n == 0 {
            return Err(Error::invalid("cannot embed an empty row"));
        }
        let mut feature_ids = Vec::with_capacity(n);
        let mut cat_ids = Vec::with_capacity(n);
        for tok in &row.tokens {
            let f = tok.feature_id as usize;
            let c = tok.cat_value_id as usize;
            if f >= self.sizes.n_feature_ids {
                return Err(Error::Shape(format!(
                    "feature id {f} outside table of {}",
                    self.sizes.n_feature_ids
                )));
            }
            if c >= self.sizes.n_category_ids {
                return Err(Error::Shape(format!(
                    "categorical id {c} outside table of {}",
                    self.sizes.n_category_ids
                )));
            }
            feature_ids.push(f);
            cat_ids.push(c);
        }
        let d = self.config.d_token;
        let times = tape.constant(Mat::from_shape_vec((n, 1), row.times.clone()).expect("n x 1"));
        let values = tape.constant(Mat::from_shape_fn((n, 1), |(i, _)| row.tokens[i].cont_value));
        let cont_mask = Mat::from_shape_fn((n, d), |(i, _)| {
            if row.tokens[i].is_cont {
                1.0
            } else {
                0.0
            }
        });
        let cat_mask = cont_mask.mapv(|m| 1.0 - m);

        let t = self.time.apply(tape, times);
        let ftab = tape.param(self.feature_table);
        let f = tape.gather_rows(ftab, &feature_ids);
        let mut tok = tape.add(t, f);
        if cont_mask.iter().any(|m| *m > 0.0) {
            let v = self.value.apply(tape, values);
            let m = tape.constant(cont_mask);
            let v = tape.mul(v, m);
            tok = tape.add(tok, v);
        }
        if cat_mask.iter().any(|m| *m > 0.0) {
            let ctab = tape.param(self.category_table);
            let c = tape.gather_rows(ctab, &cat_ids);
            let m = tape.constant(cat_mask);
            let c = tape.mul(c, m);
            tok = tape.add(tok, c);
        }
        Ok(tok)
    }

    /// Per-token transformer outputs `[n, d_token]`.
    pub fn contextualize(
        &self,
        tape: &mut Tape,
        row: &TokenRow,
        drop: &mut Option<Dropout>,
    ) -> Result<Var> {
        let mut x = self.embed_row(tape, row)?;
        for layer in &self.layers {
            x = layer.apply(tape, x, drop);
        }
        Ok(x)
    }

    /// Embedding `[1, d_embed]` of one row.
    pub fn encode_row(
        &self,
        tape: &mut Tape,
        row: &TokenRow,
        drop: &mut Option<Dropout>,
    ) -> Result<Var> {
        let h = self.contextualize(tape, row, drop)?;
        let pooled = self.fusion.apply(tape, h);
        Ok(self.pool_proj.apply(tape, pooled))
    }

    /// Embeddings `[B, d_embed]`; every row needs at least one real token.
    pub fn encode_batch(
        &self,
        tape: &mut Tape,
        batch: &TokenBatch,
        drop: &mut Option<Dropout>,
    ) -> Result<Var> {
        let rows = (0..batch.batch_size())
            .map(|i| {
                let row = batch.row(i);
                if row.is_empty() {
                    return Err(Error::invalid(format!("batch row {i} is fully masked")));
                }
                self.encode_row(tape, &row, drop)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.concat_rows(&rows))
    }

    pub fn encode_rows(
        &self,
        tape: &mut Tape,
        rows: &[TokenRow],
        drop: &mut Option<Dropout>,
    ) -> Result<Var> {
        let vars = rows
            .iter()
            .map(|r| self.encode_row(tape, r, drop))
            .collect::<Result<Vec<_>>>()?;
        Ok(tape.concat_rows(&vars))
    }
}

/// Token embeddings for a padded batch, `[B, S, d_token]`, zero at padding.
pub fn embed_triplets(encoder: &Encoder, store: &ParamStore, batch: &TokenBatch) -> Result<Array3<f64>> {
    let (b, s) = (batch.batch_size(), batch.width());
    let d = encoder.config.d_token;
    let mut out = Array3::zeros((b, s, d));
    for i in 0..b {
        let row = batch.row(i);
        if row.is_empty() {
            continue;
        }
        let mut tape = Tape::new(store);
        let v = encoder.embed_row(&mut tape, &row)?;
        let vals = tape.value(v);
        let mut k = 0;
        for j in 0..s {
            if batch.mask[[i, j]] {
                for c in 0..d {
                    out[[i, j, c]] = vals[[k, c]];
                }
                k += 1;
            }
        }
    }
    Ok(out)
}

/// Inference-mode embeddings `[B, d_embed]`.
pub fn encode(encoder: &Encoder, store: &ParamStore, batch: &TokenBatch) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((batch.batch_size(), encoder.config.d_embed));
    for i in 0..batch.batch_size() {
        let row = batch.row(i);
        if row.is_empty() {
            return Err(Error::invalid(format!("batch row {i} is fully masked")));
        }
        let mut tape = Tape::new(store);
        let v = encoder.encode_row(&mut tape, &row, &mut None)?;
        out.row_mut(i).assign(&tape.value(v).row(0));
    }
    Ok(out)
}

/// Inference-mode embeddings of unpadded rows.
pub fn encode_token_rows(encoder: &Encoder, store: &ParamStore, rows: &[TokenRow]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((rows.len(), encoder.config.d_embed));
    for (i, row) in rows.iter().enumerate() {
        let mut tape = Tape::new(store);
        let v = encoder.encode_row(&mut tape, row, &mut None)?;
        out.row_mut(i).assign(&tape.value(v).row(0));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Pre,
    Post,
}

/// Unshared linear projections into the contrastive space plus the learnable
/// log-temperature.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionHeads {
    pub pre: ParamId,
    pub post: ParamId,
    pub log_temp: ParamId,
}

/// `exp(t)` never exceeds this.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

impl ProjectionHeads {
    pub(crate) fn declare(reg: &mut Registrar, d_embed: usize) -> Self {
        Self {
            pre: reg.take("ebcl.pre_proj", (d_embed, d_embed), Init::Normal),
            post: reg.take("ebcl.post_proj", (d_embed, d_embed), Init::Normal),
            log_temp: reg.take("ebcl.log_temp", (1, 1), Init::Const((1.0f64 / 0.07).ln())),
        }
    }

    pub fn init(store: &mut ParamStore, d_embed: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut reg = Registrar::create(store, rng);
        let h = Self::declare(&mut reg, d_embed);
        reg.finish()?;
        Ok(h)
    }

    pub fn bind(store: &mut ParamStore, d_embed: usize) -> Result<Self> {
        let mut reg = Registrar::resolve(store);
        let h = Self::declare(&mut reg, d_embed);
        reg.finish()?;
        Ok(h)
    }

    pub fn matrix(&self, side: Side) -> ParamId {
        match side {
            Side::Pre => self.pre,
            Side::Post => self.post,
        }
    }

    /// Unit-norm rows of `embedding W_side`.
    pub fn project(&self, tape: &mut Tape, embedding: Var, side: Side) -> Result<Var> {
        let w = tape.param(self.matrix(side));
        let z = tape.matmul(embedding, w);
        check_nonzero_rows(tape, z)?;
        Ok(tape.l2_normalize_rows(z))
    }

    /// Keeps `exp(t)` at or below [`MAX_LOGIT_SCALE`].
    pub fn clamp_temperature(&self, store: &mut ParamStore) {
        let t = store.get_mut(self.log_temp);
        t[[0, 0]] = t[[0, 0]].min(MAX_LOGIT_SCALE.ln());
    }
}

pub(crate) fn check_nonzero_rows(tape: &Tape, v: Var) -> Result<()> {
    let val = tape.value(v);
    for (i, row) in val.rows().into_iter().enumerate() {
        let n = row.iter().map(|x| x * x).sum::<f64>();
        if n.is_nan() || n <= 0.0 || n.is_infinite() {
            return Err(Error::invalid(format!(
                "row {i} has zero or non-finite norm before normalisation"
            )));
        }
    }
    Ok(())
}

/// Projects plain embeddings without recording gradients.
pub fn project(
    heads: &ProjectionHeads,
    store: &ParamStore,
    embedding: &Array2<f64>,
    side: Side,
) -> Result<Array2<f64>> {
    let mut tape = Tape::new(store);
    let e = tape.constant(embedding.clone());
    let p = heads.project(&mut tape, e, side)?;
    Ok(tape.value(p).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurizer::Token;
    use rand::SeedableRng;

    pub(crate) fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            d_token: 8,
            n_layers: 2,
            d_ff: 16,
            n_heads: 2,
            max_len: 16,
            d_embed: 8,
            dropout: 0.0,
        }
    }

    const SIZES: TableSizes = TableSizes {
        n_feature_ids: 5,
        n_category_ids: 4,
    };

    fn setup(config: &EncoderConfig) -> (ParamStore, Encoder, ProjectionHeads) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let enc = Encoder::init(&mut store, config, SIZES, &mut rng).unwrap();
        let heads = ProjectionHeads::init(&mut store, config.d_embed, &mut rng).unwrap();
        (store, enc, heads)
    }

    fn random_row(rng: &mut ChaCha8Rng, n: usize) -> TokenRow {
        let mut times = Vec::new();
        let mut tokens = Vec::new();
        for _ in 0..n {
            times.push(rng.random_range(-2.0..0.0));
            let is_cont = rng.random::<bool>();
            tokens.push(Token {
                feature_id: rng.random_range(1..5),
                is_cont,
                cont_value: if is_cont { rng.random_range(-2.0..2.0) } else { 0.0 },
                cat_value_id: if is_cont { 0 } else { rng.random_range(1..4) },
            });
        }
        TokenRow { times, tokens }
    }

    #[test]
    fn all_padding_row_embeds_to_zero() {
        let (store, enc, _) = setup(&tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = vec![random_row(&mut rng, 3), TokenRow { times: vec![], tokens: vec![] }];
        let batch = TokenBatch::from_rows(&rows, 6).unwrap();
        let e = embed_triplets(&enc, &store, &batch).unwrap();
        assert!(e.index_axis(ndarray::Axis(0), 1).iter().all(|x| *x == 0.0));
        assert!(e.index_axis(ndarray::Axis(0), 0).iter().any(|x| *x != 0.0));
    }

    #[test]
    fn identical_triples_identical_tokens() {
        let (store, enc, _) = setup(&tiny_config());
        let tok = Token {
            feature_id: 2,
            is_cont: true,
            cont_value: 0.7,
            cat_value_id: 0,
        };
        let row = TokenRow {
            times: vec![-0.5, -0.5],
            tokens: vec![tok, tok],
        };
        let batch = TokenBatch::from_rows(&[row], 2).unwrap();
        let e = embed_triplets(&enc, &store, &batch).unwrap();
        for c in 0..8 {
            assert_eq!(e[[0, 0, c]], e[[0, 1, c]]);
        }
    }

    #[test]
    fn token_is_additive_decomposition() {
        let (store, enc, _) = setup(&tiny_config());
        let row = TokenRow {
            times: vec![0.0],
            tokens: vec![Token {
                feature_id: 3,
                is_cont: true,
                cont_value: 0.0,
                cat_value_id: 0,
            }],
        };
        let mut tape = Tape::new(&store);
        let tok = enc.embed_row(&mut tape, &row).unwrap();
        let tok = tape.value(tok).to_owned();
        let zero = tape.constant(Mat::zeros((1, 1)));
        let t = enc.time.apply(&mut tape, zero);
        let v = enc.value.apply(&mut tape, zero);
        let expected = &tape.value(t) + &tape.value(v) + store.get(enc.feature_table).row(3);
        for c in 0..8 {
            assert!((tok[[0, c]] - expected[[0, c]]).abs() < 1e-15);
        }
    }

    #[test]
    fn out_of_range_ids_error() {
        let (store, enc, _) = setup(&tiny_config());
        let row = TokenRow {
            times: vec![0.0],
            tokens: vec![Token {
                feature_id: 9,
                is_cont: true,
                cont_value: 0.0,
                cat_value_id: 0,
            }],
        };
        let mut tape = Tape::new(&store);
        assert!(matches!(enc.embed_row(&mut tape, &row), Err(Error::Shape(_))));
    }

    #[test]
    fn single_token_pools_to_its_own_output() {
        let (store, enc, _) = setup(&tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let row = random_row(&mut rng, 1);
        let mut tape = Tape::new(&store);
        let h = enc.contextualize(&mut tape, &row, &mut None).unwrap();
        let pooled = enc.fusion.apply(&mut tape, h);
        let (hv, pv) = (tape.value(h).to_owned(), tape.value(pooled).to_owned());
        for c in 0..8 {
            assert!((hv[[0, c]] - pv[[0, c]]).abs() < 1e-15);
        }
    }

    #[test]
    fn extra_padding_does_not_change_output() {
        let (store, enc, _) = setup(&tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rows: Vec<TokenRow> = (1..5).map(|n| random_row(&mut rng, n)).collect();
        let batch = TokenBatch::from_rows(&rows, 6).unwrap();
        let a = encode(&enc, &store, &batch).unwrap();
        let b = encode(&enc, &store, &batch.padded(10)).unwrap();
        let diff = (&a - &b).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(diff < 1e-5);
    }

    #[test]
    fn permuting_rows_permutes_outputs() {
        let (store, enc, _) = setup(&tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<TokenRow> = (1..4).map(|n| random_row(&mut rng, n + 2)).collect();
        let swapped = vec![rows[2].clone(), rows[1].clone(), rows[0].clone()];
        let a = encode(&enc, &store, &TokenBatch::from_rows(&rows, 6).unwrap()).unwrap();
        let b = encode(&enc, &store, &TokenBatch::from_rows(&swapped, 6).unwrap()).unwrap();
        assert_eq!(a.row(0), b.row(2));
        assert_eq!(a.row(2), b.row(0));
        assert_eq!(a.row(1), b.row(1));
    }

    #[test]
    fn fully_masked_row_is_error() {
        let (store, enc, _) = setup(&tiny_config());
        let batch = TokenBatch::from_rows(&[TokenRow { times: vec![], tokens: vec![] }], 4).unwrap();
        assert!(encode(&enc, &store, &batch).is_err());
    }

    #[test]
    fn projections_are_unit_norm_and_unshared() {
        let (store, _, heads) = setup(&tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let emb = Array2::from_shape_fn((4, 8), |_| rng.random_range(-1.0..1.0));
        let pre = project(&heads, &store, &emb, Side::Pre).unwrap();
        let post = project(&heads, &store, &emb, Side::Post).unwrap();
        for row in pre.rows().into_iter().chain(post.rows()) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert!((&pre - &post).iter().any(|x| x.abs() > 1e-3));
    }

    #[test]
    fn identity_projection_keeps_unit_rows() {
        let (mut store, _, heads) = setup(&tiny_config());
        *store.get_mut(heads.pre) = Array2::eye(8);
        let mut emb = Array2::zeros((1, 8));
        emb[[0, 3]] = 1.0;
        let out = project(&heads, &store, &emb, Side::Pre).unwrap();
        assert_eq!(out, emb);
    }

    #[test]
    fn zero_row_projection_errors() {
        let (store, _, heads) = setup(&tiny_config());
        let emb = Array2::zeros((1, 8));
        assert!(project(&heads, &store, &emb, Side::Pre).is_err());
    }

    #[test]
    fn bind_reports_shape_mismatch_and_missing() {
        let (mut store, _, _) = setup(&tiny_config());
        let wrong = EncoderConfig {
            d_token: 16,
            ..tiny_config()
        };
        let err = Encoder::bind(&mut store, &wrong, SIZES).unwrap_err();
        assert!(err.to_string().contains("encoder.time.hidden.w"), "{err}");
        let mut empty = ParamStore::new();
        let err = Encoder::bind(&mut empty, &tiny_config(), SIZES).unwrap_err();
        assert!(err.to_string().contains("missing tensors"));
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let (mut store, enc, _) = setup(&tiny_config());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let row = random_row(&mut rng, 4);
        let probe = Array2::from_shape_fn((1, 8), |_| rng.random_range(-1.0..1.0));
        let loss = |store: &ParamStore| {
            let mut tape = Tape::new(store);
            let e = enc.encode_row(&mut tape, &row, &mut None).unwrap();
            let p = tape.constant(probe.clone());
            let l = tape.mul(e, p);
            let l = tape.sum(l);
            (tape.scalar(l), tape.backward(l))
        };
        let (_, grads) = loss(&store);
        let checks = [
            enc.time.hidden.w,
            enc.value.out.w,
            enc.feature_table,
            enc.category_table,
            enc.layers[0].q.w,
            enc.layers[1].ff1.b,
            enc.layers[1].norm2.gain,
            enc.fusion.score,
            enc.pool_proj.w,
        ];
        let h = 1e-6;
        for id in checks {
            let analytic = grads.get(id).cloned().unwrap_or_else(|| Mat::zeros(store.get(id).dim()));
            let dim = store.get(id).dim();
            for r in 0..dim.0.min(3) {
                for c in 0..dim.1.min(3) {
                    let orig = store.get(id)[[r, c]];
                    store.get_mut(id)[[r, c]] = orig + h;
                    let up = loss(&store).0;
                    store.get_mut(id)[[r, c]] = orig - h;
                    let down = loss(&store).0;
                    store.get_mut(id)[[r, c]] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let a = analytic[[r, c]];
                    assert!(
                        (a - numeric).abs() <= 1e-5 + 1e-4 * numeric.abs(),
                        "{} [{r},{c}]: analytic {a} numeric {numeric}",
                        store.name(id)
                    );
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = EncoderConfig::default();
        assert!(c.validate().is_ok());
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c.n_heads = 2;
        c.dropout = 0.7;
        assert!(c.validate().is_err());
    }
}
