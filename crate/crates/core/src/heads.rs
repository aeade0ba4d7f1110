//! Fine-tuning heads: BIO token classification for semantic entity
//! recognition and a bi-affine pair classifier for relation extraction.

use std::ops::Range;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Matrix, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{normal_matrix, Linear, INIT_STD};
use crate::text::{EncodedDocument, EntitySpan, ModelInputs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BioTag {
    Outside,
    Begin(usize),
    Inside(usize),
}

impl BioTag {
    /// `O → 0`, `B-c → 1 + 2c`, `I-c → 2 + 2c`.
    pub fn index(self) -> usize {
        match self {
            BioTag::Outside => 0,
            BioTag::Begin(c) => 1 + 2 * c,
            BioTag::Inside(c) => 2 + 2 * c,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => BioTag::Outside,
            i if i % 2 == 1 => BioTag::Begin((i - 1) / 2),
            i => BioTag::Inside((i - 2) / 2),
        }
    }
}

pub fn num_bio_tags(categories: usize) -> usize {
    2 * categories + 1
}

/// An entity as a category and a half-open token span.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpanEntity {
    pub category: usize,
    pub span: Range<usize>,
}

impl SpanEntity {
    pub fn new(category: usize, span: Range<usize>) -> Self {
        Self { category, span }
    }
}

/// Writes `B-c I-c …` over each span; everything else is `O`.
pub fn encode_bio(entities: &[SpanEntity], len: usize) -> Vec<BioTag> {
    let mut tags = vec![BioTag::Outside; len];
    for e in entities {
        for i in e.span.clone() {
            tags[i] = if i == e.span.start {
                BioTag::Begin(e.category)
            } else {
                BioTag::Inside(e.category)
            };
        }
    }
    tags
}

/// Maximal runs. An `I-c` that does not continue a run of category `c`
/// opens a new entity.
pub fn decode_bio(tags: &[BioTag]) -> Vec<SpanEntity> {
    let mut out = Vec::new();
    let mut open: Option<(usize, usize)> = None;
    for (i, &t) in tags.iter().enumerate() {
        match t {
            BioTag::Outside => {
                if let Some((c, s)) = open.take() {
                    out.push(SpanEntity::new(c, s..i));
                }
            }
            BioTag::Begin(c) => {
                if let Some((pc, s)) = open.take() {
                    out.push(SpanEntity::new(pc, s..i));
                }
                open = Some((c, i));
            }
            BioTag::Inside(c) => match open {
                Some((pc, _)) if pc == c => {}
                _ => {
                    if let Some((pc, s)) = open.take() {
                        out.push(SpanEntity::new(pc, s..i));
                    }
                    open = Some((c, i));
                }
            },
        }
    }
    if let Some((c, s)) = open {
        out.push(SpanEntity::new(c, s..tags.len()));
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct SerHead {
    pub classifier: Linear,
    pub categories: usize,
}

impl SerHead {
    pub fn register(store: &mut ParamStore, feat: usize, categories: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            classifier: Linear::register(store, "head.ser", feat, num_bio_tags(categories), rng),
            categories,
        }
    }
}

/// Per-token tag logits, `N×(2C+1)`.
pub fn ser_forward(tape: &mut Tape, features: Var, head: &SerHead) -> Var {
    head.classifier.forward(tape, features)
}

/// Gold tag index for every content position of an encoded document;
/// `None` for `[CLS]`, `[SEP]` and padding.
pub fn ser_targets(doc: &EncodedDocument) -> Vec<Option<usize>> {
    let ents: Vec<SpanEntity> = doc
        .entities
        .iter()
        .map(|e| SpanEntity::new(e.label.index(), e.span.clone()))
        .collect();
    let tags = encode_bio(&ents, doc.inputs.len());
    (0..doc.inputs.len())
        .map(|i| doc.inputs.is_content(i).then(|| tags[i].index()))
        .collect()
}

/// `scale · Σ CE` over positions with a target; pass `1/count` for a mean.
pub fn ser_loss(tape: &mut Tape, logits: Var, targets: &[Option<usize>], scale: f64) -> Result<Var> {
    let n = tape.value(logits).nrows();
    tape.cross_entropy_sum(logits, &targets[..n], scale)
}

/// Argmax tags with non-content positions forced to `O`, then decoded.
pub fn ser_predict(logits: &Matrix, inputs: &ModelInputs) -> Vec<SpanEntity> {
    let mut tags = vec![BioTag::Outside; inputs.len()];
    for (i, row) in logits.rows().into_iter().enumerate() {
        if inputs.is_content(i) {
            let best = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            tags[i] = BioTag::from_index(best.0);
        }
    }
    decode_bio(&tags)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub head: usize,
    pub tail: usize,
    pub link: bool,
}

/// Every ordered pair of distinct entities, labeled by the gold links.
pub fn re_candidates(entity_count: usize, gold: &[(usize, usize)]) -> Vec<Candidate> {
    let mut out = Vec::with_capacity(entity_count * entity_count.saturating_sub(1));
    for h in 0..entity_count {
        for t in 0..entity_count {
            if h != t {
                out.push(Candidate {
                    head: h,
                    tail: t,
                    link: gold.contains(&(h, t)),
                });
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub struct ReHead {
    pub type_embedding: ParamId,
    pub head_ffn: Linear,
    pub tail_ffn: Linear,
    pub bilinear: [ParamId; 2],
    pub linear: ParamId,
    pub bias: ParamId,
}

impl ReHead {
    pub fn register(
        store: &mut ParamStore,
        feat: usize,
        categories: usize,
        type_dim: usize,
        rel_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let input = feat + type_dim;
        Self {
            type_embedding: store.add("head.re.type_embedding", normal_matrix(categories, type_dim, INIT_STD, rng)),
            head_ffn: Linear::register(store, "head.re.head_ffn", input, rel_dim, rng),
            tail_ffn: Linear::register(store, "head.re.tail_ffn", input, rel_dim, rng),
            bilinear: [
                store.add("head.re.bilinear0", normal_matrix(rel_dim, rel_dim, INIT_STD, rng)),
                store.add("head.re.bilinear1", normal_matrix(rel_dim, rel_dim, INIT_STD, rng)),
            ],
            linear: store.add("head.re.linear", normal_matrix(2 * rel_dim, 2, INIT_STD, rng)),
            bias: store.add("head.re.bias", Matrix::zeros((1, 2))),
        }
    }
}

/// Result of [`re_forward`]: logits for the kept candidates only.
pub struct ReScores {
    pub logits: Var,
    pub kept: Vec<usize>,
    pub skipped: usize,
}

/// Entity representation `[first-token feature ; type embedding]`, projected
/// by separate head/tail FFNs (linear + ReLU), then
/// `score_c = hᵀ U_c t + V_c·[h;t] + b_c` for `c ∈ {no-link, link}`.
pub fn re_forward(
    tape: &mut Tape,
    features: Var,
    entities: &[EntitySpan],
    candidates: &[Candidate],
    head: &ReHead,
) -> Result<ReScores> {
    let n = tape.value(features).nrows();
    let inside = |e: &EntitySpan| e.span.start < e.span.end && e.span.end <= n;
    let mut kept = Vec::new();
    for (k, c) in candidates.iter().enumerate() {
        let (h, t) = (entities.get(c.head), entities.get(c.tail));
        match (h, t) {
            (Some(h), Some(t)) if inside(h) && inside(t) => kept.push(k),
            _ => {}
        }
    }
    let skipped = candidates.len() - kept.len();
    if kept.is_empty() {
        let logits = tape.constant(Matrix::zeros((0, 2)));
        return Ok(ReScores { logits, kept, skipped });
    }
    let heads: Vec<usize> = kept.iter().map(|&k| candidates[k].head).collect();
    let tails: Vec<usize> = kept.iter().map(|&k| candidates[k].tail).collect();

    let repr = |tape: &mut Tape, idx: &[usize], ffn: &Linear| -> Result<Var> {
        let first: Vec<usize> = idx.iter().map(|&e| entities[e].span.start).collect();
        let types: Vec<usize> = idx.iter().map(|&e| entities[e].label.index()).collect();
        let f = tape.select_rows(features, &first);
        let ty = tape.gather(head.type_embedding, &types)?;
        let x = tape.concat_cols(&[f, ty])?;
        let y = ffn.forward(tape, x);
        Ok(tape.relu(y))
    };
    let hv = repr(tape, &heads, &head.head_ffn)?;
    let tv = repr(tape, &tails, &head.tail_ffn)?;
    let logits = biaffine(tape, hv, tv, head)?;
    Ok(ReScores { logits, kept, skipped })
}

/// Bi-affine scores for row-aligned head/tail representations.
pub fn biaffine(tape: &mut Tape, h: Var, t: Var, head: &ReHead) -> Result<Var> {
    let mut bil = Vec::with_capacity(2);
    for &u in &head.bilinear {
        let uv = tape.param(u);
        let hu = tape.matmul(h, uv);
        let prod = tape.mul(hu, t);
        bil.push(tape.row_sum(prod));
    }
    let bil = tape.concat_cols(&bil)?;
    let ht = tape.concat_cols(&[h, t])?;
    let v = tape.param(head.linear);
    let lin = tape.matmul(ht, v);
    let s = tape.add(bil, lin);
    let b = tape.param(head.bias);
    Ok(tape.add_row(s, b))
}

/// Mean cross-entropy over the kept candidates.
pub fn re_loss(tape: &mut Tape, scores: &ReScores, candidates: &[Candidate], scale: f64) -> Result<Var> {
    let targets: Vec<Option<usize>> = scores.kept.iter().map(|&k| Some(candidates[k].link as usize)).collect();
    tape.cross_entropy_sum(scores.logits, &targets, scale)
}

/// Candidates whose link logit beats the no-link logit.
pub fn re_predict(logits: &Matrix, kept: &[usize], candidates: &[Candidate]) -> Vec<(usize, usize)> {
    kept.iter()
        .enumerate()
        .filter(|&(r, _)| logits[[r, 1]] > logits[[r, 0]])
        .map(|(_, &k)| (candidates[k].head, candidates[k].tail))
        .collect()
}

pub fn check_categories(head: &SerHead, doc: &EncodedDocument) -> Result<()> {
    if let Some(e) = doc.entities.iter().find(|e| e.label.index() >= head.categories) {
        return Err(Error::Input(format!("entity label {} outside the head's categories", e.label)));
    }
    Ok(())
}
