use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::encoder::{Dense, Dropout, Encoder, EncoderConfig, ProjectionHeads, Registrar, TableSizes};
use crate::error::{Error, Result};
use crate::event_stream::InputMode;
use crate::featurizer::EncodedPair;
use crate::objectives::{bin_observations, DuettConfig, DuettModel, Objective};

use super::data::Corpus;

/// Architecture description; enough to rebuild parameter handles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub objective: Objective,
    pub encoder: EncoderConfig,
    pub sizes: TableSizes,
    pub duett: DuettConfig,
    pub n_duett_columns: usize,
}

impl ModelSpec {
    pub fn for_corpus(objective: Objective, encoder: EncoderConfig, duett: DuettConfig, corpus: &Corpus) -> Self {
        Self {
            objective,
            sizes: TableSizes {
                n_feature_ids: corpus.vocab.n_feature_ids() as usize,
                n_category_ids: corpus.vocab.n_category_ids as usize,
            },
            encoder,
            duett,
            n_duett_columns: corpus.columns.len(),
        }
    }

    pub fn d_embed(&self) -> usize {
        match self.objective {
            Objective::Duett => self.duett.d_embed,
            _ => self.encoder.d_embed,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Backbone {
    Transformer(Encoder),
    Grid(DuettModel),
}

#[derive(Debug, Clone, Copy)]
pub enum PretrainHead {
    Contrastive(ProjectionHeads),
    /// Swap logit for order prediction.
    Order(Dense),
    /// One output per vocabulary feature id.
    Forecast(Dense),
    /// The grid model carries its own reconstruction heads.
    Imputation,
}

/// Which downstream task a classifier head was trained for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierSpec {
    pub task: String,
    pub mode: InputMode,
}

/// One hidden layer (width `d_embed`, ReLU) to a single logit.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub spec: ClassifierSpec,
    pub hidden: Dense,
    pub out: Dense,
}

impl Classifier {
    fn declare(reg: &mut Registrar, spec: ClassifierSpec, d_embed: usize) -> Self {
        let d_in = match spec.mode {
            InputMode::Both => 2 * d_embed,
            InputMode::PreOnly | InputMode::PostOnly => d_embed,
        };
        Self {
            hidden: Dense::register(reg, "finetune.hidden", d_in, d_embed),
            out: Dense::register(reg, "finetune.out", d_embed, 1),
            spec,
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.hidden.apply(tape, x);
        let h = tape.relu(h);
        self.out.apply(tape, h)
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub head: PretrainHead,
    pub classifier: Option<Classifier>,
}

/// Which window of a pair to embed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Pre,
    Post,
}

impl Model {
    fn declare(reg: &mut Registrar, spec: &ModelSpec) -> Result<(Backbone, PretrainHead)> {
        let d = spec.encoder.d_embed;
        Ok(match spec.objective {
            Objective::Duett => {
                if spec.n_duett_columns == 0 {
                    return Err(Error::config("feature grid has no columns"));
                }
                spec.duett.validate()?;
                (
                    Backbone::Grid(DuettModel::declare(reg, &spec.duett, spec.n_duett_columns)),
                    PretrainHead::Imputation,
                )
            }
            objective => {
                spec.encoder.validate()?;
                let enc = Encoder::declare(reg, &spec.encoder, spec.sizes);
                let head = match objective {
                    Objective::Ebcl => PretrainHead::Contrastive(ProjectionHeads::declare(reg, d)),
                    Objective::Ocp => PretrainHead::Order(Dense::register(reg, "ocp.head", d, 1)),
                    _ => PretrainHead::Forecast(Dense::register(
                        reg,
                        "strats.head",
                        d,
                        spec.sizes.n_feature_ids,
                    )),
                };
                (Backbone::Transformer(enc), head)
            }
        })
    }

    /// Fresh parameters from `seed`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reg = Registrar::create(&mut store, &mut rng);
        let (backbone, head) = Self::declare(&mut reg, spec)?;
        reg.finish()?;
        Ok(Self {
            spec: spec.clone(),
            store,
            backbone,
            head,
            classifier: None,
        })
    }

    /// Resolves handles into an existing store, checking names and shapes.
    pub fn bind(spec: &ModelSpec, mut store: ParamStore, classifier: Option<ClassifierSpec>) -> Result<Self> {
        let mut reg = Registrar::resolve(&mut store);
        let (backbone, head) = Self::declare(&mut reg, spec)?;
        let classifier = classifier.map(|c| Classifier::declare(&mut reg, c, spec.d_embed()));
        reg.finish()?;
        Ok(Self {
            spec: spec.clone(),
            store,
            backbone,
            head,
            classifier,
        })
    }

    /// Adds a freshly initialised classifier, replacing any existing one's
    /// parameters.
    pub fn attach_classifier(&mut self, spec: ClassifierSpec, seed: u64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut reg = Registrar::create(&mut self.store, &mut rng);
        let c = Classifier::declare(&mut reg, spec, self.spec.d_embed());
        reg.finish()?;
        self.classifier = Some(c);
        Ok(())
    }

    pub fn d_embed(&self) -> usize {
        self.spec.d_embed()
    }

    /// Embedding `[1, d_embed]` of one window of a pair.
    pub fn embed_window(
        &self,
        tape: &mut Tape,
        corpus: &Corpus,
        pair: PairRef,
        window: Window,
        drop: &mut Option<Dropout>,
    ) -> Result<Var> {
        match &self.backbone {
            Backbone::Transformer(enc) => {
                let row = match window {
                    Window::Pre => &pair.encoded.pre,
                    Window::Post => &pair.encoded.post,
                };
                enc.encode_row(tape, row, drop)
            }
            Backbone::Grid(model) => {
                let obs = match window {
                    Window::Pre => &pair.raw.pre,
                    Window::Post => &pair.raw.post,
                };
                let bound = corpus.bound();
                let grid = bin_observations(obs, &bound, &corpus.columns, self.spec.duett.n_bins)
                    .ok_or_else(|| Error::InsufficientData("window has no observation in the feature grid".into()))?;
                model.embed(tape, &grid, drop)
            }
        }
    }

    /// Classifier input for one pair under `mode`; the unused window is
    /// never encoded.
    pub fn classifier_input(
        &self,
        tape: &mut Tape,
        corpus: &Corpus,
        pair: PairRef,
        mode: InputMode,
        drop: &mut Option<Dropout>,
    ) -> Result<Var> {
        Ok(match mode {
            InputMode::PreOnly => self.embed_window(tape, corpus, pair, Window::Pre, drop)?,
            InputMode::PostOnly => self.embed_window(tape, corpus, pair, Window::Post, drop)?,
            InputMode::Both => {
                let pre = self.embed_window(tape, corpus, pair, Window::Pre, drop)?;
                let post = self.embed_window(tape, corpus, pair, Window::Post, drop)?;
                tape.concat_cols(&[pre, post])
            }
        })
    }

    /// Inference-mode embeddings `[n, d_embed]` of one window of each pair.
    pub fn embed_pairs(&self, corpus: &Corpus, pairs: &[PairRef], window: Window) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((pairs.len(), self.d_embed()));
        for (i, p) in pairs.iter().enumerate() {
            let mut tape = Tape::new(&self.store);
            let v = self.embed_window(&mut tape, corpus, *p, window, &mut None)?;
            out.row_mut(i).assign(&tape.value(v).row(0));
        }
        Ok(out)
    }

    /// Classifier logits for each pair.
    pub fn predict_logits(&self, corpus: &Corpus, pairs: &[PairRef]) -> Result<Vec<f64>> {
        let c = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no classifier head"))?;
        pairs
            .iter()
            .map(|p| {
                let mut tape = Tape::new(&self.store);
                let x = self.classifier_input(&mut tape, corpus, *p, c.spec.mode, &mut None)?;
                let logit = c.apply(&mut tape, x);
                Ok(tape.scalar(logit))
            })
            .collect()
    }
}

/// A raw window pair with its token encoding.
#[derive(Debug, Clone, Copy)]
pub struct PairRef<'a> {
    pub raw: &'a crate::event_stream::WindowPair,
    pub encoded: &'a EncodedPair,
}

impl super::data::SplitData {
    pub fn pair(&self, i: usize) -> PairRef<'_> {
        PairRef {
            raw: &self.pairs[i],
            encoded: &self.encoded[i],
        }
    }

    pub fn all_pairs(&self) -> Vec<PairRef<'_>> {
        (0..self.len()).map(|i| self.pair(i)).collect()
    }
}
