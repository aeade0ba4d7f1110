#![allow(dead_code)]

use lilt::document::NormalizedBBox;
use lilt::encoder::{EncoderConfig, Mode};
use lilt::model::{Model, ModelConfig, Task};
use lilt::synthetic::{generate, GenConfig};
use lilt::text::{build_sequence, EncodedDocument, ModelInputs, Vocabulary, CLS, NUM_RESERVED, PAD, SEP};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Small geometry used by the gradient and oracle checks.
pub fn tiny_encoder(mode: Mode) -> EncoderConfig {
    EncoderConfig {
        layers: 2,
        heads: 2,
        d_text: 16,
        d_layout: 12,
        ffn_text: 32,
        ffn_layout: 24,
        max_len: 6,
        mode,
        dropout: 0.0,
    }
}

pub const TINY_VOCAB: usize = 20;

pub fn tiny_model(task: Task, mode: Mode, seed: u64) -> Model {
    let mut cfg = ModelConfig::new(tiny_encoder(mode), TINY_VOCAB, task);
    cfg.encoder.mode = mode;
    cfg.type_dim = 4;
    cfg.rel_dim = 6;
    cfg.grid = 3;
    Model::new(cfg, seed).unwrap()
}

pub fn random_box(rng: &mut ChaCha8Rng) -> NormalizedBBox {
    let x0 = rng.random_range(0..=1000u16);
    let x1 = rng.random_range(x0..=1000);
    let y0 = rng.random_range(0..=1000u16);
    let y1 = rng.random_range(y0..=1000);
    NormalizedBBox::from_corners(x0, y0, x1, y1).unwrap()
}

/// `[CLS] content… [SEP] [PAD]…` with `content` random tokens and boxes.
pub fn random_inputs(rng: &mut ChaCha8Rng, n: usize, content: usize, vocab: usize) -> ModelInputs {
    assert!(content + 2 <= n);
    let mut token_ids = vec![CLS];
    let mut boxes = vec![NormalizedBBox::CLS];
    for _ in 0..content {
        token_ids.push(rng.random_range(NUM_RESERVED..vocab as u32));
        boxes.push(random_box(rng));
    }
    token_ids.push(SEP);
    boxes.push(NormalizedBBox::SEP);
    let active = token_ids.len();
    token_ids.resize(n, PAD);
    boxes.resize(n, NormalizedBBox::PAD);
    let mut attention_mask = vec![1u8; active];
    attention_mask.resize(n, 0);
    ModelInputs {
        token_ids,
        boxes,
        attention_mask,
        position_ids: (0..n).collect(),
    }
}

/// Like [`tiny_encoder`] but long enough for synthetic forms.
pub fn small_encoder(mode: Mode) -> EncoderConfig {
    EncoderConfig {
        max_len: 64,
        ..tiny_encoder(mode)
    }
}

/// A small synthetic corpus encoded at `n` positions, plus its vocabulary size.
pub fn small_corpus(n_docs: usize, seed: u64, n: usize) -> (Vec<EncodedDocument>, Vocabulary) {
    let docs = generate(&GenConfig {
        seed,
        n_docs,
        rows: 3,
        ..GenConfig::default()
    })
    .unwrap();
    let vocab = Vocabulary::build(&docs, 1).unwrap();
    let enc = docs.iter().map(|d| build_sequence(d, &vocab, n).unwrap()).collect();
    (enc, vocab)
}

pub fn small_model(task: Task, vocab: usize, seed: u64) -> Model {
    let mut cfg = ModelConfig::new(small_encoder(task.mode()), vocab, task);
    cfg.type_dim = 4;
    cfg.rel_dim = 6;
    Model::new(cfg, seed).unwrap()
}
