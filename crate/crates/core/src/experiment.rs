//! Pre-train → fine-tune transfer experiment on synthetic forms.
//!
//! A layout-aware encoder is pre-trained on one synthetic corpus, then
//! fine-tuned for entity recognition on a small labeled corpus and compared
//! with the same fine-tuning started from random weights.

use serde::{Deserialize, Serialize};

use crate::document::Document;
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::metrics::Prf;
use crate::model::{Model, ModelConfig, Task};
use crate::optim::SlowRatio;
use crate::synthetic::{generate, GenConfig};
use crate::text::{build_sequence, EncodedDocument, Vocabulary};
use crate::train::{evaluate_ser, optimizer_for, train, StepRecord, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    pub encoder: EncoderConfig,
    pub pretrain_docs: usize,
    pub finetune_docs: usize,
    pub test_docs: usize,
    pub corpus_seed: u64,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    /// Fine-tuning seeds; each gets its own pre-training run when
    /// `pretrain_per_seed` is set, otherwise all share one.
    pub seeds: Vec<u64>,
    pub pretrain_per_seed: bool,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            pretrain_docs: 2000,
            finetune_docs: 200,
            test_docs: 50,
            corpus_seed: 2022,
            pretrain: TrainConfig {
                steps: 2000,
                batch_size: 8,
                lr: 1e-3,
                slow_ratio: SlowRatio::new(1.0).expect("positive"),
                ..TrainConfig::default()
            },
            finetune: TrainConfig {
                steps: 500,
                batch_size: 8,
                lr: 1e-3,
                ..TrainConfig::default()
            },
            seeds: vec![1, 2, 3],
            pretrain_per_seed: false,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransferReport {
    pub pretrained: Vec<Prf>,
    pub scratch: Vec<Prf>,
    pub pretrain_traces: Vec<Vec<StepRecord>>,
    pub vocab_size: usize,
}

impl TransferReport {
    fn mean(v: &[Prf]) -> f64 {
        v.iter().map(|p| p.f1).sum::<f64>() / v.len().max(1) as f64
    }

    pub fn pretrained_mean_f1(&self) -> f64 {
        Self::mean(&self.pretrained)
    }

    pub fn scratch_mean_f1(&self) -> f64 {
        Self::mean(&self.scratch)
    }

    /// Mean F1 gain in points (×100).
    pub fn gain_points(&self) -> f64 {
        100.0 * (self.pretrained_mean_f1() - self.scratch_mean_f1())
    }
}

/// The three corpora: pre-training, fine-tuning train, fine-tuning test.
pub fn corpora(cfg: &TransferConfig) -> Result<(Vec<Document>, Vec<Document>, Vec<Document>)> {
    let gen = |offset: u64, n: usize| {
        generate(&GenConfig {
            seed: cfg.corpus_seed.wrapping_add(offset),
            n_docs: n,
            ..GenConfig::default()
        })
    };
    Ok((gen(0, cfg.pretrain_docs)?, gen(1, cfg.finetune_docs)?, gen(2, cfg.test_docs)?))
}

pub fn encode_all(docs: &[Document], vocab: &Vocabulary, n: usize) -> Result<Vec<EncodedDocument>> {
    docs.iter().map(|d| build_sequence(d, vocab, n)).collect()
}

/// Runs the experiment. `progress` receives short status lines.
pub fn run_transfer(cfg: &TransferConfig, mut progress: impl FnMut(&str)) -> Result<TransferReport> {
    let (pre_docs, ft_docs, test_docs) = corpora(cfg)?;
    let all: Vec<Document> = pre_docs.iter().chain(&ft_docs).cloned().collect();
    let vocab = Vocabulary::build(&all, 1)?;
    let n = cfg.encoder.max_len;
    let pre = encode_all(&pre_docs, &vocab, n)?;
    let ft = encode_all(&ft_docs, &vocab, n)?;
    let test = encode_all(&test_docs, &vocab, n)?;
    let v = vocab.len();

    let pretrain_once = |seed: u64, progress: &mut dyn FnMut(&str)| -> Result<(Model, Vec<StepRecord>)> {
        let mut model = Model::new(ModelConfig::new(cfg.encoder.clone(), v, Task::Pretrain), seed)?;
        let tc = TrainConfig {
            seed,
            ..cfg.pretrain.clone()
        };
        let mut opt = optimizer_for(&model, &tc);
        let every = (tc.steps / 10).max(1);
        let trace = train(&mut model, &mut opt, &pre, &tc, |r, _| {
            if r.step % every == 0 {
                progress(&format!(
                    "pretrain seed {seed} step {} mvlm {:.3} kpl {:.3} cai {:.3}",
                    r.step, r.loss_mvlm, r.loss_kpl, r.loss_cai
                ));
            }
            Ok(())
        })?;
        Ok((model, trace))
    };

    let finetune = |init: Option<&Model>, seed: u64| -> Result<Prf> {
        let mut model = Model::new(ModelConfig::new(cfg.encoder.clone(), v, Task::Ser), seed)?;
        if let Some(src) = init {
            model.load_encoder_from(src)?;
        }
        let tc = TrainConfig {
            seed,
            ..cfg.finetune.clone()
        };
        let mut opt = optimizer_for(&model, &tc);
        train(&mut model, &mut opt, &ft, &tc, |_, _| Ok(()))?;
        evaluate_ser(&model, &test)
    };

    let mut report = TransferReport {
        pretrained: Vec::new(),
        scratch: Vec::new(),
        pretrain_traces: Vec::new(),
        vocab_size: v,
    };
    let mut shared: Option<Model> = None;
    for &seed in &cfg.seeds {
        let base = if cfg.pretrain_per_seed || shared.is_none() {
            let (m, trace) = pretrain_once(seed, &mut progress)?;
            report.pretrain_traces.push(trace);
            shared = Some(m);
            shared.as_ref()
        } else {
            shared.as_ref()
        };
        let p = finetune(base, seed)?;
        let s = finetune(None, seed)?;
        progress(&format!("seed {seed}: pretrained F1 {:.4}, scratch F1 {:.4}", p.f1, s.f1));
        report.pretrained.push(p);
        report.scratch.push(s);
    }
    Ok(report)
}
