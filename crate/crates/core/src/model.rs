//! Full model: embeddings, dual-stream encoder and one set of task heads,
//! all registered in a single named [`ParamStore`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamId, ParamStore, Tape, Var};
use crate::embeddings::{layout_embedding, text_embedding, EmbeddingParams};
use crate::encoder::{concat_features, encoder_forward, register_layers, EncoderConfig, EncoderOutput, LayerParams, Mode};
use crate::error::{Error, Result};
use crate::heads::{ReHead, SerHead};
use crate::nn::{apply_dropout, Dropout};
use crate::objectives::PretrainHeads;
use crate::text::ModelInputs;

/// Which heads sit on top of the encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Pretrain,
    Ser,
    Re,
}

impl Task {
    /// Encoder mode the task trains in.
    pub fn mode(self) -> Mode {
        match self {
            Task::Pretrain => Mode::Pretrain,
            Task::Ser | Task::Re => Mode::Finetune,
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Task::Pretrain),
            "ser" => Ok(Task::Ser),
            "re" => Ok(Task::Re),
            _ => Err(Error::Config(format!("unknown task `{s}` (expected pretrain, ser or re)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub vocab_size: usize,
    pub task: Task,
    /// Key-point grid side `g` (regions = g²).
    pub grid: usize,
    /// Entity categories for SER/RE.
    pub num_categories: usize,
    pub type_dim: usize,
    pub rel_dim: usize,
}

impl ModelConfig {
    /// The encoder mode is set from the task.
    pub fn new(mut encoder: EncoderConfig, vocab_size: usize, task: Task) -> Self {
        encoder.mode = task.mode();
        Self {
            encoder,
            vocab_size,
            task,
            grid: 7,
            num_categories: 4,
            type_dim: 32,
            rel_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.vocab_size < crate::text::NUM_RESERVED as usize {
            return Err(Error::Config(format!("vocabulary size {} below 5", self.vocab_size)));
        }
        if self.grid == 0 || self.num_categories == 0 || self.type_dim == 0 || self.rel_dim == 0 {
            return Err(Error::Config("grid, categories, type_dim and rel_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.d_text + self.encoder.d_layout
    }
}

#[derive(Clone, Debug)]
pub enum Heads {
    Pretrain(PretrainHeads),
    Ser(SerHead),
    Re(ReHead),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub embeddings: EmbeddingParams,
    pub layers: Vec<LayerParams>,
    pub heads: Heads,
}

/// Parameters whose name starts with this prefix form the text stream.
pub const TEXT_STREAM_PREFIX: &str = "text.";

impl Model {
    /// Fresh model with initialization drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = &config.encoder;
        let embeddings =
            EmbeddingParams::register(&mut store, config.vocab_size, enc.max_len, enc.d_text, enc.d_layout, &mut rng)?;
        let layers = register_layers(&mut store, enc, &mut rng);
        let feat = config.feature_dim();
        let heads = match config.task {
            Task::Pretrain => Heads::Pretrain(PretrainHeads::register(
                &mut store,
                feat,
                config.vocab_size,
                config.grid,
                &mut rng,
            )),
            Task::Ser => Heads::Ser(SerHead::register(&mut store, feat, config.num_categories, &mut rng)),
            Task::Re => Heads::Re(ReHead::register(
                &mut store,
                feat,
                config.num_categories,
                config.type_dim,
                config.rel_dim,
                &mut rng,
            )),
        };
        Ok(Self {
            config,
            store,
            embeddings,
            layers,
            heads,
        })
    }

    pub fn is_text_stream(&self, id: ParamId) -> bool {
        self.store.name(id).starts_with(TEXT_STREAM_PREFIX)
    }

    /// Copies every encoder tensor (text and layout streams) from `other`.
    /// Heads are left untouched. Geometry must match.
    pub fn load_encoder_from(&mut self, other: &Model) -> Result<usize> {
        if self.config.encoder.layers != other.config.encoder.layers
            || self.config.encoder.d_text != other.config.encoder.d_text
            || self.config.encoder.d_layout != other.config.encoder.d_layout
            || self.config.vocab_size != other.config.vocab_size
        {
            return Err(Error::Config("encoder geometry differs from the source checkpoint".into()));
        }
        let mut copied = 0;
        for (_, name, value) in other.store.iter() {
            if !(name.starts_with("text.") || name.starts_with("layout.")) {
                continue;
            }
            let dst = self
                .store
                .id(name)
                .ok_or_else(|| Error::Config(format!("parameter `{name}` missing in target model")))?;
            if self.store.get(dst).dim() != value.dim() {
                return Err(Error::Config(format!("parameter `{name}` has a different shape")));
            }
            self.store.get_mut(dst).assign(value);
            copied += 1;
        }
        Ok(copied)
    }

    /// Embeds and encodes one sequence, returning the encoder outputs and the
    /// concatenated `N×(d_T+d_L)` features.
    pub fn encode<'p>(
        &'p self,
        tape: &mut Tape<'p>,
        inputs: &ModelInputs,
        mut dropout: Option<Dropout<'_>>,
    ) -> Result<(EncoderOutput, Var)> {
        let et = text_embedding(tape, &inputs.token_ids, &inputs.position_ids, &self.embeddings)?;
        let el = layout_embedding(tape, &inputs.boxes, &inputs.position_ids, &self.embeddings)?;
        let et = apply_dropout(tape, et, &mut dropout);
        let el = apply_dropout(tape, el, &mut dropout);
        let out = encoder_forward(tape, et, el, &inputs.key_mask(), &self.config.encoder, &self.layers, dropout)?;
        let features = concat_features(tape, out.text, out.layout)?;
        Ok((out, features))
    }

    /// Dropout for a training forward pass, or `None` at rate zero.
    pub fn dropout<'r>(&self, rng: &'r mut ChaCha8Rng) -> Option<Dropout<'r>> {
        (self.config.encoder.dropout > 0.0).then(|| Dropout {
            rate: self.config.encoder.dropout,
            rng,
        })
    }
}
