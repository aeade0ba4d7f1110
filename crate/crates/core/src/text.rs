//! Word-level vocabulary and fixed-length input assembly.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::document::{normalize_bbox, sort_reading_order, Document, EntityLabel, NormalizedBBox};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
pub const SEP: u32 = 3;
pub const MASK: u32 = 4;
pub const NUM_RESERVED: u32 = 5;

const RESERVED: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

/// Lowercased whitespace split.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Input(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Counts lowercased words across all segments; words seen at least
    /// `min_count` times get ids ordered by (count desc, token asc).
    pub fn build(corpus: &[Document], min_count: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Input("cannot build a vocabulary from an empty corpus".into()));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in corpus {
            for seg in &doc.segments {
                for w in tokenize(&seg.text) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= min_count.max(1) && !RESERVED.contains(&w.as_str()))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).map(|w| self.id(&w)).collect()
    }

    /// `token<TAB>id` lines in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            out.push('\t');
            out.push_str(&i.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Input(format!("vocabulary line {}: missing tab", ln + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::Input(format!("vocabulary line {}: bad id `{id}`", ln + 1)))?;
            pairs.push((id, tok.to_string()));
        }
        pairs.sort();
        for (expect, (id, _)) in pairs.iter().enumerate() {
            if *id != expect {
                return Err(Error::Input(format!("vocabulary ids are not dense at {expect}")));
            }
        }
        let tokens: Vec<String> = pairs.into_iter().map(|(_, t)| t).collect();
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Input("vocabulary does not start with the reserved tokens".into()));
        }
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// SHA-256 of the serialized form, hex encoded.
    pub fn hash(&self) -> String {
        Sha256::digest(self.to_text().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Fixed-length model input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelInputs {
    pub token_ids: Vec<u32>,
    pub boxes: Vec<NormalizedBBox>,
    pub attention_mask: Vec<u8>,
    pub position_ids: Vec<usize>,
}

impl ModelInputs {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of non-pad positions (content plus `[CLS]`/`[SEP]`).
    pub fn active_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }

    /// Content positions, i.e. everything but `[CLS]`, `[SEP]` and `[PAD]`.
    pub fn is_content(&self, i: usize) -> bool {
        self.attention_mask[i] == 1 && !matches!(self.token_ids[i], CLS | SEP | PAD)
    }

    pub fn key_mask(&self) -> Vec<bool> {
        self.attention_mask.iter().map(|&m| m == 1).collect()
    }

    /// Drops trailing pad positions. Non-pad outputs of the encoder do not
    /// depend on pad positions, so this is a pure speed-up.
    pub fn trimmed(&self) -> ModelInputs {
        let n = self.active_len().max(1);
        ModelInputs {
            token_ids: self.token_ids[..n].to_vec(),
            boxes: self.boxes[..n].to_vec(),
            attention_mask: self.attention_mask[..n].to_vec(),
            position_ids: self.position_ids[..n].to_vec(),
        }
    }

    /// Structural invariants: equal lengths, mask marks non-pad positions,
    /// pad positions carry the pad box, positions count up from zero.
    pub fn check(&self) -> Result<()> {
        let n = self.token_ids.len();
        if self.boxes.len() != n || self.attention_mask.len() != n || self.position_ids.len() != n {
            return Err(Error::Shape("model input sequences differ in length".into()));
        }
        for i in 0..n {
            let pad = self.token_ids[i] == PAD;
            if (self.attention_mask[i] == 1) == pad {
                return Err(Error::Input(format!("attention mask wrong at {i}")));
            }
            if pad && self.boxes[i] != NormalizedBBox::PAD {
                return Err(Error::Input(format!("pad position {i} carries a box")));
            }
            if self.position_ids[i] != i {
                return Err(Error::Input(format!("position id wrong at {i}")));
            }
        }
        Ok(())
    }
}

/// An entity located in the built sequence.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    /// Index into the source document's entity list.
    pub entity: usize,
    pub label: EntityLabel,
    pub span: Range<usize>,
}

/// A document turned into model input plus sequence-level supervision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedDocument {
    pub name: String,
    pub inputs: ModelInputs,
    /// Source segment for every position, `None` for special tokens.
    pub token_segment: Vec<Option<usize>>,
    /// Entities wholly inside the sequence, ordered by span start.
    pub entities: Vec<EntitySpan>,
    /// Question → answer links as indices into `entities`.
    pub relations: Vec<(usize, usize)>,
    /// Entities lost to truncation or empty tokenization.
    pub dropped_entities: usize,
}

/// Linearizes a document: reading order, `[CLS]` … `[SEP]`, head-keeping
/// truncation to `n - 2` content tokens, then padding to `n`.
pub fn build_sequence(doc: &Document, vocab: &Vocabulary, n: usize) -> Result<EncodedDocument> {
    if n < 2 {
        return Err(Error::Config(format!("sequence length must be at least 2, got {n}")));
    }
    let mut token_ids = vec![CLS];
    let mut boxes = vec![NormalizedBBox::CLS];
    let mut token_segment = vec![None];
    let mut seg_range: Vec<Option<Range<usize>>> = vec![None; doc.segments.len()];

    'outer: for si in sort_reading_order(&doc.segments) {
        let seg = &doc.segments[si];
        let bbox = normalize_bbox(&seg.bbox, doc.page_width, doc.page_height)?;
        let start = token_ids.len();
        for id in vocab.encode(&seg.text) {
            if token_ids.len() >= n - 1 {
                // Segment cut by truncation: mark it partial.
                if token_ids.len() > start {
                    seg_range[si] = Some(start..usize::MAX);
                }
                break 'outer;
            }
            token_ids.push(id);
            boxes.push(bbox);
            token_segment.push(Some(si));
        }
        if token_ids.len() > start {
            seg_range[si] = Some(start..token_ids.len());
        }
    }
    token_ids.push(SEP);
    boxes.push(NormalizedBBox::SEP);
    token_segment.push(None);
    let active = token_ids.len();
    token_ids.resize(n, PAD);
    boxes.resize(n, NormalizedBBox::PAD);
    token_segment.resize(n, None);
    let mut attention_mask = vec![1u8; active];
    attention_mask.resize(n, 0);

    let mut entities = Vec::new();
    let mut entity_pos = vec![None; doc.entities.len()];
    let mut dropped = 0;
    for (ei, e) in doc.entities.iter().enumerate() {
        let ranges: Option<Vec<Range<usize>>> =
            e.segment_ids.iter().map(|&s| seg_range[s].clone()).collect();
        match ranges {
            Some(r) if r.iter().all(|r| r.end != usize::MAX) => {
                let start = r.iter().map(|r| r.start).min().unwrap();
                let end = r.iter().map(|r| r.end).max().unwrap();
                entities.push(EntitySpan {
                    entity: ei,
                    label: e.label,
                    span: start..end,
                });
            }
            _ => dropped += 1,
        }
    }
    if dropped > 0 {
        log::debug!("{}: {dropped} entities dropped by truncation", doc.name);
    }
    entities.sort_by_key(|e| (e.span.start, e.entity));
    for (k, e) in entities.iter().enumerate() {
        entity_pos[e.entity] = Some(k);
    }
    let relations = doc
        .key_value_relations()
        .into_iter()
        .filter_map(|r| Some((entity_pos[r.head]?, entity_pos[r.tail]?)))
        .collect();

    Ok(EncodedDocument {
        name: doc.name.clone(),
        inputs: ModelInputs {
            token_ids,
            boxes,
            attention_mask,
            position_ids: (0..n).collect(),
        },
        token_segment,
        entities,
        relations,
        dropped_entities: dropped,
    })
}
