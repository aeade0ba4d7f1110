//! Deterministic generator of synthetic key-value forms.
//!
//! Each page holds an optional header, a grid of key-value pairs and a few
//! distractor segments. A key names a value kind (`date:` is followed by a
//! date, `total:` by an amount). Pages are either side-by-side (value right
//! of its key) or stacked (value below its key). Distractors reuse the value
//! vocabulary and sit in the footer or between grid rows, so telling an
//! answer from a distractor takes layout: only answers have a key directly
//! left of or above them.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::document::{Document, Entity, EntityLabel, RawBBox, Relation, Segment, Split};
use crate::error::{Error, Result};
use crate::seed::child_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Date,
    Amount,
    Code,
    Name,
}

impl ValueKind {
    pub const ALL: [ValueKind; 4] = [ValueKind::Date, ValueKind::Amount, ValueKind::Code, ValueKind::Name];

    fn keys(self) -> &'static [&'static str] {
        match self {
            ValueKind::Date => &["date:", "invoice date:", "due date:", "date of birth:", "issued:", "expiry:"],
            ValueKind::Amount => &["amount:", "total:", "balance due:", "price:", "subtotal:", "tax:"],
            ValueKind::Code => &["code:", "ref no:", "account:", "invoice no:", "order id:", "zip:"],
            ValueKind::Name => &["name:", "customer:", "contact:", "signed by:", "vendor:", "ship to:"],
        }
    }
}

const MONTHS: [&str; 12] = ["jan", "feb", "mar", "apr", "may", "jun", "jul", "aug", "sep", "oct", "nov", "dec"];
const CODE_PREFIXES: [&str; 10] = ["ax", "bq", "cz", "dk", "ev", "fn", "gt", "hw", "jr", "ks"];
const FIRST: [&str; 16] = [
    "alice", "bruno", "chen", "dana", "emil", "fatima", "george", "hana", "ivan", "julia", "kofi", "lena", "mateo",
    "nora", "omar", "priya",
];
const LAST: [&str; 16] = [
    "smith", "garcia", "kim", "novak", "okafor", "rossi", "schmidt", "tanaka", "silva", "dubois", "haddad", "larsen",
    "moreau", "patel", "weber", "young",
];
const HEADERS: [&str; 8] = [
    "invoice",
    "purchase order",
    "registration form",
    "application form",
    "account statement",
    "sales receipt",
    "shipping notice",
    "claim form",
];
const FILLER: [&str; 6] = ["page 1 of 1", "thank you", "confidential", "see reverse", "approved", "copy"];

/// A key phrase and the kind of value it asks for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyEntry {
    pub text: String,
    pub kind: ValueKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub seed: u64,
    pub n_docs: usize,
    pub rows: usize,
    pub cols: usize,
    pub key_lexicon_size: usize,
    pub value_kinds: Vec<ValueKind>,
    /// Maximum box displacement, in page units (the page is 1000×1000).
    pub jitter: f64,
    pub header_prob: f64,
    /// Probability that a page stacks values below their keys.
    pub stacked_prob: f64,
    /// Probability that a key is written without its trailing colon.
    pub bare_key_prob: f64,
    /// Distractor count is drawn from `1..=max_distractors`.
    pub max_distractors: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_docs: 100,
            rows: 4,
            cols: 2,
            key_lexicon_size: 24,
            value_kinds: ValueKind::ALL.to_vec(),
            jitter: 6.0,
            header_prob: 0.99,
            stacked_prob: 0.5,
            bare_key_prob: 0.3,
            max_distractors: 5,
        }
    }
}

const PAGE: f64 = 1000.0;
const CHAR_W: f64 = 8.0;
const LINE_H: f64 = 16.0;
const MAX_SCALE: f64 = 1.3;

/// Per-page geometry: grid extent and font scale.
struct Geometry {
    top: f64,
    bottom: f64,
    left: f64,
    right: f64,
    char_w: f64,
    line_h: f64,
}

impl Geometry {
    /// Smallest grid any page can get.
    const MIN_HEIGHT: f64 = 700.0 - 220.0;
    const MIN_WIDTH: f64 = 880.0 - 90.0;

    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let scale = rng.random_range(0.7..MAX_SCALE);
        Self {
            top: rng.random_range(110.0..220.0),
            bottom: rng.random_range(700.0..850.0),
            left: rng.random_range(20.0..90.0),
            right: rng.random_range(880.0..980.0),
            char_w: CHAR_W * scale,
            line_h: LINE_H * scale,
        }
    }

    fn text_box(&self, x0: f64, y0: f64, text: &str) -> RawBBox {
        let w = (text.chars().count() as f64 * self.char_w).min(PAGE - 1.0 - x0).max(1.0);
        RawBBox::new(x0, y0, x0 + w, y0 + self.line_h)
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::Config("grid needs at least one row and one column".into()));
        }
        if self.key_lexicon_size == 0 || self.value_kinds.is_empty() {
            return Err(Error::Config("key lexicon and value kinds must be non-empty".into()));
        }
        let cell = (Geometry::MIN_HEIGHT / self.rows as f64).min(Geometry::MIN_WIDTH / self.cols as f64);
        if !(self.jitter >= 0.0) || self.jitter * 2.0 + 3.0 * LINE_H * MAX_SCALE >= cell {
            return Err(Error::Config(format!("jitter {} too large for a {cell:.1}-unit cell", self.jitter)));
        }
        for (name, p) in [
            ("header_prob", self.header_prob),
            ("stacked_prob", self.stacked_prob),
            ("bare_key_prob", self.bare_key_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.max_distractors == 0 {
            return Err(Error::Config("max_distractors must be at least 1".into()));
        }
        Ok(())
    }

    /// Keys drawn round-robin over the configured value kinds; past the
    /// built-in phrases, numbered `field N:` keys are added.
    pub fn key_lexicon(&self) -> Vec<KeyEntry> {
        (0..self.key_lexicon_size)
            .map(|i| {
                let kind = self.value_kinds[i % self.value_kinds.len()];
                let j = i / self.value_kinds.len();
                let text = kind
                    .keys()
                    .get(j)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("field {i}:"));
                KeyEntry { text, kind }
            })
            .collect()
    }
}

pub fn value_text(kind: ValueKind, rng: &mut ChaCha8Rng) -> String {
    match kind {
        ValueKind::Date => format!(
            "{} {} {}",
            rng.random_range(1..=28),
            MONTHS.choose(rng).unwrap(),
            rng.random_range(1980..=2024)
        ),
        ValueKind::Amount => format!("$ {}.00", rng.random_range(1..=400) * 5),
        ValueKind::Code => format!("{} {}", CODE_PREFIXES.choose(rng).unwrap(), rng.random_range(100..=999)),
        ValueKind::Name => format!("{} {}", FIRST.choose(rng).unwrap(), LAST.choose(rng).unwrap()),
    }
}

struct Builder {
    doc: Document,
}

impl Builder {
    fn push(&mut self, text: String, bbox: RawBBox, label: EntityLabel) -> usize {
        let id = self.doc.segments.len();
        self.doc.segments.push(Segment { text, bbox, id: id as i64 });
        self.doc.entities.push(Entity {
            label,
            segment_ids: vec![id],
        });
        self.doc.entities.len() - 1
    }
}

fn one_document(cfg: &GenConfig, lexicon: &[KeyEntry], index: usize) -> Document {
    let mut rng = child_rng(cfg.seed, &[index as u64]);
    let mut b = Builder {
        doc: Document {
            name: format!("synth-{index:05}"),
            page_width: PAGE,
            page_height: PAGE,
            segments: Vec::new(),
            entities: Vec::new(),
            relations: Vec::new(),
            split: Split::Train,
        },
    };
    let j = |rng: &mut ChaCha8Rng| rng.random_range(-cfg.jitter..=cfg.jitter);

    let g = Geometry::draw(&mut rng);
    if rng.random_bool(cfg.header_prob) {
        let text = HEADERS.choose(&mut rng).unwrap().to_string();
        let w = text.len() as f64 * g.char_w * 1.5;
        let x = ((PAGE - w) / 2.0 + rng.random_range(-100.0..100.0)).clamp(0.0, PAGE - w);
        let y = rng.random_range(30.0..g.top - 50.0);
        b.push(text, RawBBox::new(x, y, x + w, y + g.line_h * 1.5), EntityLabel::Header);
    }

    let stacked = rng.random_bool(cfg.stacked_prob);
    let row_h = (g.bottom - g.top) / cfg.rows as f64;
    let col_w = (g.right - g.left) / cfg.cols as f64;
    for r in 0..cfg.rows {
        let row_top = g.top + r as f64 * row_h;
        for c in 0..cfg.cols {
            let key = lexicon.choose(&mut rng).unwrap();
            let key_text = if rng.random_bool(cfg.bare_key_prob) {
                key.text.trim_end_matches(':').to_string()
            } else {
                key.text.clone()
            };
            let y = row_top + row_h * if stacked { 0.25 } else { 0.4 } + j(&mut rng);
            let kx = g.left + c as f64 * col_w + cfg.jitter + j(&mut rng);
            let kbox = g.text_box(kx, y, &key_text);
            let value = value_text(key.kind, &mut rng);
            let vbox = if stacked {
                let vx = kx + rng.random_range(0.0..20.0);
                g.text_box(vx, kbox.y1 + rng.random_range(4.0..12.0), &value)
            } else {
                let vx = (kbox.x1 + rng.random_range(10.0..30.0)).min(PAGE - 2.0);
                g.text_box(vx, y + j(&mut rng) * 0.25, &value)
            };
            let k = b.push(key_text, kbox, EntityLabel::Question);
            let v = b.push(value, vbox, EntityLabel::Answer);
            b.doc.relations.push(Relation { head: k, tail: v });
        }
    }

    let n = rng.random_range(1..=cfg.max_distractors);
    for _ in 0..n {
        let text = if rng.random_bool(0.75) {
            value_text(*cfg.value_kinds.choose(&mut rng).unwrap(), &mut rng)
        } else {
            FILLER.choose(&mut rng).unwrap().to_string()
        };
        let (x, y) = if rng.random_bool(0.5) {
            // footer band
            (rng.random_range(g.left..PAGE * 0.75), rng.random_range(g.bottom + 20.0..970.0))
        } else {
            // low in a grid row, clear of the row's key and value
            let r = rng.random_range(0..cfg.rows) as f64;
            let x = rng.random_range(g.left..PAGE * 0.75);
            (x, g.top + (r + 0.8) * row_h + j(&mut rng) * 0.5)
        };
        b.push(text.clone(), g.text_box(x, y, &text), EntityLabel::Other);
    }
    b.doc
}

/// Generates `cfg.n_docs` documents. Each document depends only on the seed
/// and its index.
pub fn generate(cfg: &GenConfig) -> Result<Vec<Document>> {
    cfg.validate()?;
    let lexicon = cfg.key_lexicon();
    Ok((0..cfg.n_docs)
        .into_par_iter()
        .map(|i| one_document(cfg, &lexicon, i))
        .collect())
}
