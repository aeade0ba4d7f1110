//! Flat run configuration shared by the command-line driver and the
//! experiment harnesses.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Task};
use crate::objectives::MaskingConfig;
use crate::optim::{AdamWConfig, SlowRatio};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Task,

    pub layers: usize,
    pub heads: usize,
    pub d_text: usize,
    pub d_layout: usize,
    pub ffn_text: usize,
    pub ffn_layout: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub num_categories: usize,
    pub type_dim: usize,
    pub rel_dim: usize,

    pub select_prob: f64,
    pub replace_frac: f64,
    pub random_frac: f64,
    pub grid: usize,

    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub slow_ratio: SlowRatio,
    /// Global-norm clip; `null` disables clipping.
    pub clip: Option<f64>,

    pub corpus: Option<PathBuf>,
    pub eval_corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub min_count: usize,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Write an intermediate checkpoint every this many steps; 0 = only at the end.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::desk();
        let mask = MaskingConfig::default();
        let opt = AdamWConfig::default();
        Self {
            mode: Task::Pretrain,
            layers: enc.layers,
            heads: enc.heads,
            d_text: enc.d_text,
            d_layout: enc.d_layout,
            ffn_text: enc.ffn_text,
            ffn_layout: enc.ffn_layout,
            max_len: enc.max_len,
            dropout: enc.dropout,
            num_categories: 4,
            type_dim: 32,
            rel_dim: 64,
            select_prob: mask.select_prob,
            replace_frac: mask.replace_frac,
            random_frac: mask.random_frac,
            grid: mask.grid,
            lr: 2e-5,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
            warmup_frac: 0.1,
            slow_ratio: SlowRatio::default(),
            clip: Some(1.0),
            corpus: None,
            eval_corpus: None,
            vocab: None,
            out: None,
            min_count: 1,
            seed: 0,
            steps: 1000,
            batch_size: 16,
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            heads: self.heads,
            d_text: self.d_text,
            d_layout: self.d_layout,
            ffn_text: self.ffn_text,
            ffn_layout: self.ffn_layout,
            max_len: self.max_len,
            mode: self.mode.mode(),
            dropout: self.dropout,
        }
    }

    pub fn model(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            grid: self.grid,
            num_categories: self.num_categories,
            type_dim: self.type_dim,
            rel_dim: self.rel_dim,
            ..ModelConfig::new(self.encoder(), vocab_size, self.mode)
        }
    }

    pub fn masking(&self) -> MaskingConfig {
        MaskingConfig {
            select_prob: self.select_prob,
            replace_frac: self.replace_frac,
            random_frac: self.random_frac,
            grid: self.grid,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_frac: self.warmup_frac,
            optimizer: AdamWConfig {
                beta1: self.beta1,
                beta2: self.beta2,
                eps: self.eps,
                weight_decay: self.weight_decay,
            },
            slow_ratio: self.slow_ratio,
            clip: self.clip,
            seed: self.seed,
            masking: self.masking(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        self.train().validate()?;
        if self.num_categories == 0 || self.type_dim == 0 || self.rel_dim == 0 {
            return Err(Error::Config("num_categories, type_dim and rel_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Field-by-field differences in encoder geometry, as `name: a != b` lines.
/// Mode and dropout are not geometry.
pub fn geometry_diff(a: &EncoderConfig, b: &EncoderConfig) -> Vec<String> {
    let fields = [
        ("layers", a.layers, b.layers),
        ("heads", a.heads, b.heads),
        ("d_text", a.d_text, b.d_text),
        ("d_layout", a.d_layout, b.d_layout),
        ("ffn_text", a.ffn_text, b.ffn_text),
        ("ffn_layout", a.ffn_layout, b.ffn_layout),
        ("max_len", a.max_len, b.max_len),
    ];
    fields
        .iter()
        .filter(|(_, x, y)| x != y)
        .map(|(n, x, y)| format!("{n}: {x} != {y}"))
        .collect()
}
