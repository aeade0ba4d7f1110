//! Exact-match micro precision/recall/F1 for entities and relations.

use std::collections::HashSet;
use std::hash::Hash;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads::SpanEntity;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Prf {
    /// Ratios from counts; every ratio with a zero denominator is 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

/// Relation as an ordered pair of entity spans.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SpanLink {
    pub head: Range<usize>,
    pub tail: Range<usize>,
}

fn micro<T: Eq + Hash + Clone>(pred: &[Vec<T>], gold: &[Vec<T>]) -> Result<Prf> {
    if pred.len() != gold.len() {
        return Err(Error::Input(format!("{} predicted documents vs {} gold", pred.len(), gold.len())));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let p: HashSet<&T> = p.iter().collect();
        let g: HashSet<&T> = g.iter().collect();
        let hit = p.intersection(&g).count();
        tp += hit;
        fp += p.len() - hit;
        fn_ += g.len() - hit;
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

/// A prediction counts only if category and span match a gold entity.
pub fn entity_f1(pred: &[Vec<SpanEntity>], gold: &[Vec<SpanEntity>]) -> Result<Prf> {
    for (d, g) in gold.iter().enumerate() {
        let mut spans: Vec<&Range<usize>> = g.iter().map(|e| &e.span).collect();
        spans.sort_by_key(|r| (r.start, r.end));
        if spans.windows(2).any(|w| w[1].start < w[0].end) {
            return Err(Error::Input(format!("overlapping gold entities in document {d}")));
        }
    }
    micro(pred, gold)
}

/// A predicted link counts only if both spans and the direction match.
pub fn relation_f1(pred: &[Vec<SpanLink>], gold: &[Vec<SpanLink>]) -> Result<Prf> {
    micro(pred, gold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n_docs: usize,
}

impl MetricsReport {
    pub fn new(task: &str, prf: Prf, n_docs: usize) -> Self {
        Self {
            task: task.to_string(),
            precision: prf.precision,
            recall: prf.recall,
            f1: prf.f1,
            tp: prf.tp,
            fp: prf.fp,
            fn_: prf.fn_,
            n_docs,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(c: usize, r: Range<usize>) -> SpanEntity {
        SpanEntity::new(c, r)
    }

    #[test]
    fn perfect_prediction() {
        let g = vec![vec![e(0, 1..3), e(1, 4..6)]];
        let m = entity_f1(&g, &g).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_prediction() {
        let g = vec![vec![e(0, 1..3)]];
        let m = entity_f1(&[vec![]], &g).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.fn_), (0.0, 0.0, 0.0, 1));
    }

    #[test]
    fn one_of_two_spans_off_by_one() {
        let p = vec![vec![e(0, 2..5), e(1, 6..8)]];
        let g = vec![vec![e(0, 2..5), e(1, 6..9)]];
        let m = entity_f1(&p, &g).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 1));
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn overlapping_gold_is_rejected() {
        let g = vec![vec![e(0, 2..5), e(1, 4..6)]];
        assert!(entity_f1(&g.clone(), &g).is_err());
    }

    #[test]
    fn reversed_link_scores_zero() {
        let g = vec![vec![SpanLink { head: 1..2, tail: 3..4 }]];
        let p = vec![vec![SpanLink { head: 3..4, tail: 1..2 }]];
        assert_eq!(relation_f1(&p, &g).unwrap().f1, 0.0);
        assert_eq!(relation_f1(&g, &g).unwrap().f1, 1.0);
    }

    #[test]
    fn report_json_fields() {
        let r = MetricsReport::new("ser", Prf::from_counts(1, 1, 1), 2);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for k in ["task", "precision", "recall", "f1", "tp", "fp", "fn", "n_docs"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }
}
