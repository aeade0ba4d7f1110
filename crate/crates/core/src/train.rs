//! Training loop for pre-training and fine-tuning, plus evaluation.
//!
//! Every random draw of a run is derived from the run seed and the step
//! and sequence index, so a trace depends only on `(seed, config, corpus)`.
//! Sequences of a batch run on separate tapes in parallel; their gradients
//! are summed in batch order.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Tape};
use crate::error::{Error, Result};
use crate::heads::{re_candidates, re_forward, re_loss, re_predict, ser_forward, ser_loss, ser_predict, ser_targets, SpanEntity};
use crate::metrics::{entity_f1, relation_f1, Prf, SpanLink};
use crate::model::{Heads, Model, Task};
use crate::objectives::{plan_cai, plan_kpl, plan_mvlm, pretrain_loss, MaskingConfig, MaskingPlan, TaskCounts};
use crate::optim::{clip_grad_norm, lr_at, make_param_groups, AdamW, AdamWConfig, SlowRatio};
use crate::seed::child_rng;
use crate::text::{EncodedDocument, ModelInputs};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub optimizer: AdamWConfig,
    pub slow_ratio: SlowRatio,
    /// Global-norm clipping threshold; `None` disables clipping.
    pub clip: Option<f64>,
    pub seed: u64,
    pub masking: MaskingConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: 2e-5,
            warmup_frac: 0.1,
            optimizer: AdamWConfig::default(),
            slow_ratio: SlowRatio::default(),
            clip: Some(1.0),
            seed: 0,
            masking: MaskingConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup fraction {} outside [0, 1]", self.warmup_frac)));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip threshold {c} must be positive")));
            }
        }
        self.masking.validate()
    }
}

/// One line of the loss trace. Fine-tuning fills only `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss_mvlm: f64,
    pub loss_kpl: f64,
    pub loss_cai: f64,
    pub total: f64,
}

const TAG_EPOCH: u64 = 1;
const TAG_MASK: u64 = 2;
const TAG_DROPOUT: u64 = 3;

/// Document indices for steps `0..steps`: a fresh shuffle each epoch,
/// fixed-size batches, the last partial batch of an epoch kept.
pub fn batch_schedule(n_docs: usize, batch_size: usize, steps: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut out = Vec::with_capacity(steps);
    let mut epoch = 0u64;
    while out.len() < steps && n_docs > 0 {
        let mut order: Vec<usize> = (0..n_docs).collect();
        order.shuffle(&mut child_rng(seed, &[TAG_EPOCH, epoch]));
        for chunk in order.chunks(batch_size) {
            if out.len() == steps {
                break;
            }
            out.push(chunk.to_vec());
        }
        epoch += 1;
    }
    out
}

struct SeqResult {
    grads: Grads,
    parts: [f64; 3],
    total: f64,
}

fn merge(results: Vec<SeqResult>, num_params: usize) -> (Grads, [f64; 3], f64) {
    let mut grads = Grads::empty(num_params);
    let mut parts = [0.0; 3];
    let mut total = 0.0;
    for r in results {
        grads.merge(r.grads);
        for k in 0..3 {
            parts[k] += r.parts[k];
        }
        total += r.total;
    }
    (grads, parts, total)
}

/// Masking plans for a batch of trimmed inputs.
pub fn plan_batch(
    inputs: &[ModelInputs],
    vocab_size: usize,
    cfg: &MaskingConfig,
    seed: u64,
    step: usize,
) -> Result<Vec<MaskingPlan>> {
    let mut rngs: Vec<ChaCha8Rng> = (0..inputs.len())
        .map(|i| child_rng(seed, &[TAG_MASK, step as u64, i as u64]))
        .collect();
    let mut plans: Vec<MaskingPlan> = inputs.iter().map(MaskingPlan::new).collect();
    for ((plan, inp), rng) in plans.iter_mut().zip(inputs).zip(rngs.iter_mut()) {
        plan_mvlm(plan, inp, vocab_size, cfg, rng);
    }
    plan_kpl(&mut plans, inputs, cfg, &mut rngs)?;
    for plan in &mut plans {
        plan_cai(plan);
    }
    Ok(plans)
}

/// Summed gradients and losses of one batch. Losses are means over the
/// batch's labeled positions.
pub fn batch_gradients(
    model: &Model,
    batch: &[&EncodedDocument],
    cfg: &TrainConfig,
    step: usize,
    train: bool,
) -> Result<(Grads, [f64; 3], f64)> {
    let inputs: Vec<ModelInputs> = batch.iter().map(|d| d.inputs.trimmed()).collect();
    let seed = cfg.seed;
    let dropout_rng = |i: usize| child_rng(seed, &[TAG_DROPOUT, step as u64, i as u64]);
    let n_params = model.store.len();
    let results: Vec<SeqResult> = match &model.heads {
        Heads::Pretrain(heads) => {
            let plans = plan_batch(&inputs, model.config.vocab_size, &cfg.masking, seed, step)?;
            let counts = plans.iter().fold(TaskCounts::default(), |a, p| a + p.counts());
            plans
                .par_iter()
                .zip(inputs.par_iter())
                .enumerate()
                .map(|(i, (plan, inp))| {
                    let masked = plan.apply(inp);
                    let mut rng = dropout_rng(i);
                    let mut tape = Tape::new(&model.store);
                    let dropout = if train { model.dropout(&mut rng) } else { None };
                    let (_, feats) = model.encode(&mut tape, &masked, dropout)?;
                    let l = pretrain_loss(&mut tape, feats, plan, heads, counts)?;
                    Ok(SeqResult {
                        grads: tape.backward(l.total),
                        parts: [tape.scalar(l.mvlm), tape.scalar(l.kpl), tape.scalar(l.cai)],
                        total: tape.scalar(l.total),
                    })
                })
                .collect::<Result<_>>()?
        }
        Heads::Ser(head) => {
            let targets: Vec<Vec<Option<usize>>> = batch.iter().map(|d| ser_targets(d)).collect();
            let count: usize = targets.iter().flatten().filter(|t| t.is_some()).count();
            let scale = if count == 0 { 0.0 } else { 1.0 / count as f64 };
            inputs
                .par_iter()
                .zip(targets.par_iter())
                .enumerate()
                .map(|(i, (inp, tg))| {
                    let mut rng = dropout_rng(i);
                    let mut tape = Tape::new(&model.store);
                    let dropout = if train { model.dropout(&mut rng) } else { None };
                    let (_, feats) = model.encode(&mut tape, inp, dropout)?;
                    let logits = ser_forward(&mut tape, feats, head);
                    let loss = ser_loss(&mut tape, logits, tg, scale)?;
                    Ok(SeqResult {
                        grads: tape.backward(loss),
                        parts: [0.0; 3],
                        total: tape.scalar(loss),
                    })
                })
                .collect::<Result<_>>()?
        }
        Heads::Re(head) => {
            let cands: Vec<_> = batch.iter().map(|d| re_candidates(d.entities.len(), &d.relations)).collect();
            let count: usize = cands.iter().map(Vec::len).sum();
            let scale = if count == 0 { 0.0 } else { 1.0 / count as f64 };
            inputs
                .par_iter()
                .zip(cands.par_iter())
                .zip(batch.par_iter())
                .enumerate()
                .map(|(i, ((inp, cand), doc))| {
                    let mut rng = dropout_rng(i);
                    let mut tape = Tape::new(&model.store);
                    let dropout = if train { model.dropout(&mut rng) } else { None };
                    let (_, feats) = model.encode(&mut tape, inp, dropout)?;
                    let scores = re_forward(&mut tape, feats, &doc.entities, cand, head)?;
                    if scores.skipped > 0 {
                        log::debug!("{}: {} candidates outside the sequence", doc.name, scores.skipped);
                    }
                    let loss = re_loss(&mut tape, &scores, cand, scale)?;
                    Ok(SeqResult {
                        grads: tape.backward(loss),
                        parts: [0.0; 3],
                        total: tape.scalar(loss),
                    })
                })
                .collect::<Result<_>>()?
        }
    };
    Ok(merge(results, n_params))
}

/// Runs `cfg.steps` optimizer steps. `on_step` sees each record and the
/// updated model (for logging or periodic checkpoints). On a non-finite
/// loss the run stops before updating, leaving `model` at the last good
/// state, and returns [`Error::Diverged`].
pub fn train(
    model: &mut Model,
    optim: &mut AdamW,
    corpus: &[EncodedDocument],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord, &Model) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("training corpus is empty".into()));
    }
    let expected = model.config.task.mode();
    if model.config.encoder.mode != expected {
        return Err(Error::Config(format!(
            "task {:?} trains in {:?} mode, model is configured for {:?}",
            model.config.task, expected, model.config.encoder.mode
        )));
    }
    let groups = make_param_groups(model, expected, cfg.slow_ratio);
    let mut trace = Vec::with_capacity(cfg.steps);
    for (step, idx) in batch_schedule(corpus.len(), cfg.batch_size, cfg.steps, cfg.seed).into_iter().enumerate() {
        let batch: Vec<&EncodedDocument> = idx.iter().map(|&i| &corpus[i]).collect();
        let (mut grads, parts, total) = batch_gradients(model, &batch, cfg, step, true)?;
        if !total.is_finite() {
            return Err(Error::Diverged { step: step + 1, loss: total });
        }
        if let Some(c) = cfg.clip {
            clip_grad_norm(&mut grads, c);
        }
        let lr = lr_at(step + 1, cfg.steps, cfg.lr, cfg.warmup_frac)?;
        optim.step(&mut model.store, &grads, &groups, lr)?;
        let rec = StepRecord {
            step: step + 1,
            lr,
            loss_mvlm: parts[0],
            loss_kpl: parts[1],
            loss_cai: parts[2],
            total,
        };
        log::debug!("step {} lr {:.3e} loss {:.5}", rec.step, rec.lr, rec.total);
        on_step(&rec, model)?;
        trace.push(rec);
    }
    Ok(trace)
}

/// Fresh optimizer sized for `model`.
pub fn optimizer_for(model: &Model, cfg: &TrainConfig) -> AdamW {
    AdamW::new(cfg.optimizer.clone(), model.store.len())
}

/// Loss trace as CSV. Pre-training writes all components, fine-tuning only
/// the total.
pub fn trace_csv(trace: &[StepRecord], task: Task) -> String {
    let mut s = String::new();
    if task == Task::Pretrain {
        s.push_str("step,lr,loss_mvlm,loss_kpl,loss_cai,total\n");
        for r in trace {
            s.push_str(&format!("{},{:e},{},{},{},{}\n", r.step, r.lr, r.loss_mvlm, r.loss_kpl, r.loss_cai, r.total));
        }
    } else {
        s.push_str("step,lr,loss\n");
        for r in trace {
            s.push_str(&format!("{},{:e},{}\n", r.step, r.lr, r.total));
        }
    }
    s
}

pub fn gold_entities(doc: &EncodedDocument) -> Vec<SpanEntity> {
    doc.entities
        .iter()
        .map(|e| SpanEntity::new(e.label.index(), e.span.clone()))
        .collect()
}

pub fn gold_links(doc: &EncodedDocument) -> Vec<SpanLink> {
    doc.relations
        .iter()
        .map(|&(h, t)| SpanLink {
            head: doc.entities[h].span.clone(),
            tail: doc.entities[t].span.clone(),
        })
        .collect()
}

/// Predicted entities of one document (no dropout).
pub fn predict_ser(model: &Model, doc: &EncodedDocument) -> Result<Vec<SpanEntity>> {
    let Heads::Ser(head) = &model.heads else {
        return Err(Error::Config("model has no SER head".into()));
    };
    let inputs = doc.inputs.trimmed();
    let mut tape = Tape::new(&model.store);
    let (_, feats) = model.encode(&mut tape, &inputs, None)?;
    let logits = ser_forward(&mut tape, feats, head);
    Ok(ser_predict(tape.value(logits), &inputs))
}

/// Predicted links of one document, scored over gold entity pairs.
pub fn predict_re(model: &Model, doc: &EncodedDocument) -> Result<Vec<SpanLink>> {
    let Heads::Re(head) = &model.heads else {
        return Err(Error::Config("model has no RE head".into()));
    };
    let inputs = doc.inputs.trimmed();
    let cands = re_candidates(doc.entities.len(), &doc.relations);
    let mut tape = Tape::new(&model.store);
    let (_, feats) = model.encode(&mut tape, &inputs, None)?;
    let scores = re_forward(&mut tape, feats, &doc.entities, &cands, head)?;
    Ok(re_predict(tape.value(scores.logits), &scores.kept, &cands)
        .into_iter()
        .map(|(h, t)| SpanLink {
            head: doc.entities[h].span.clone(),
            tail: doc.entities[t].span.clone(),
        })
        .collect())
}

/// Entity-level micro P/R/F1 over `docs`.
pub fn evaluate_ser(model: &Model, docs: &[EncodedDocument]) -> Result<Prf> {
    let pred: Vec<Vec<SpanEntity>> = docs.par_iter().map(|d| predict_ser(model, d)).collect::<Result<_>>()?;
    let gold: Vec<Vec<SpanEntity>> = docs.iter().map(gold_entities).collect();
    entity_f1(&pred, &gold)
}

/// Relation-level micro P/R/F1 over `docs`.
pub fn evaluate_re(model: &Model, docs: &[EncodedDocument]) -> Result<Prf> {
    let pred: Vec<Vec<SpanLink>> = docs.par_iter().map(|d| predict_re(model, d)).collect::<Result<_>>()?;
    let gold: Vec<Vec<SpanLink>> = docs.iter().map(gold_links).collect();
    relation_f1(&pred, &gold)
}

/// Evaluates with whichever fine-tuning head the model carries.
pub fn evaluate(model: &Model, docs: &[EncodedDocument]) -> Result<Prf> {
    match model.config.task {
        Task::Ser => evaluate_ser(model, docs),
        Task::Re => evaluate_re(model, docs),
        Task::Pretrain => Err(Error::Config("pre-training checkpoints have no evaluation head".into())),
    }
}
