//! Self-supervised pre-training: masking plans and the MVLM, KPL and CAI
//! losses.
//!
//! A [`MaskingPlan`] is drawn per sequence. MVLM picks content tokens and
//! replaces them by `[MASK]`, a random word or themselves; KPL does the same
//! with boxes (zero box, a box borrowed from elsewhere in the batch, or
//! unchanged) and asks for the grid regions of the original box's corners and
//! center. CAI then labels every pair touched by a replace-or-keep bucket as
//! aligned or misaligned.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{ParamStore, Tape, Var};
use crate::document::{NormalizedBBox, COORD_MAX};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::text::{ModelInputs, MASK, NUM_RESERVED, UNK};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskingConfig {
    pub select_prob: f64,
    pub replace_frac: f64,
    pub random_frac: f64,
    pub grid: usize,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            select_prob: 0.15,
            replace_frac: 0.8,
            random_frac: 0.1,
            grid: 7,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        let p = |v: f64| (0.0..=1.0).contains(&v);
        if !p(self.select_prob) || !p(self.replace_frac) || !p(self.random_frac) || self.replace_frac + self.random_frac > 1.0 {
            return Err(Error::Config("masking ratios must lie in [0, 1] and replace + random ≤ 1".into()));
        }
        if self.grid == 0 {
            return Err(Error::Config("key-point grid must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MvlmBucket {
    #[default]
    None,
    MaskToken,
    RandomToken,
    Keep,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum KplBucket {
    #[default]
    None,
    ZeroBox,
    RandomBox,
    Keep,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaiLabel {
    #[default]
    None,
    Aligned,
    Misaligned,
}

/// Region ids of a box's top-left corner, bottom-right corner and center.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeyPoints {
    pub top_left: usize,
    pub bottom_right: usize,
    pub center: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MaskingPlan {
    pub mvlm_bucket: Vec<MvlmBucket>,
    pub mvlm_label: Vec<Option<u32>>,
    /// Token written at each position (only differs under `MaskToken`/`RandomToken`).
    pub mvlm_replacement: Vec<u32>,
    pub kpl_bucket: Vec<KplBucket>,
    pub kpl_labels: Vec<Option<KeyPoints>>,
    pub kpl_replacement: Vec<NormalizedBBox>,
    pub cai_label: Vec<CaiLabel>,
}

impl MaskingPlan {
    pub fn new(inputs: &ModelInputs) -> Self {
        let n = inputs.len();
        Self {
            mvlm_bucket: vec![MvlmBucket::None; n],
            mvlm_label: vec![None; n],
            mvlm_replacement: inputs.token_ids.clone(),
            kpl_bucket: vec![KplBucket::None; n],
            kpl_labels: vec![None; n],
            kpl_replacement: inputs.boxes.clone(),
            cai_label: vec![CaiLabel::None; n],
        }
    }

    /// Inputs with the planned token and box replacements applied.
    pub fn apply(&self, inputs: &ModelInputs) -> ModelInputs {
        ModelInputs {
            token_ids: self.mvlm_replacement.clone(),
            boxes: self.kpl_replacement.clone(),
            attention_mask: inputs.attention_mask.clone(),
            position_ids: inputs.position_ids.clone(),
        }
    }

    pub fn mvlm_targets(&self) -> Vec<Option<usize>> {
        self.mvlm_label.iter().map(|l| l.map(|v| v as usize)).collect()
    }

    pub fn cai_targets(&self) -> Vec<Option<usize>> {
        self.cai_label
            .iter()
            .map(|l| match l {
                CaiLabel::None => None,
                CaiLabel::Aligned => Some(0),
                CaiLabel::Misaligned => Some(1),
            })
            .collect()
    }

    pub fn counts(&self) -> TaskCounts {
        TaskCounts {
            mvlm: self.mvlm_label.iter().filter(|l| l.is_some()).count(),
            kpl: self.kpl_labels.iter().filter(|l| l.is_some()).count(),
            cai: self.cai_label.iter().filter(|&&l| l != CaiLabel::None).count(),
        }
    }
}

/// Number of labeled positions per task; used as loss denominators.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TaskCounts {
    pub mvlm: usize,
    pub kpl: usize,
    pub cai: usize,
}

impl std::ops::Add for TaskCounts {
    type Output = TaskCounts;

    fn add(self, o: TaskCounts) -> TaskCounts {
        TaskCounts {
            mvlm: self.mvlm + o.mvlm,
            kpl: self.kpl + o.kpl,
            cai: self.cai + o.cai,
        }
    }
}

enum Pick {
    None,
    Replace,
    Random,
    Keep,
}

fn draw(cfg: &MaskingConfig, rng: &mut ChaCha8Rng) -> Pick {
    if rng.random::<f64>() >= cfg.select_prob {
        return Pick::None;
    }
    let u = rng.random::<f64>();
    if u < cfg.replace_frac {
        Pick::Replace
    } else if u < cfg.replace_frac + cfg.random_frac {
        Pick::Random
    } else {
        Pick::Keep
    }
}

/// Selects MVLM positions among content tokens. Boxes are not touched.
pub fn plan_mvlm(plan: &mut MaskingPlan, inputs: &ModelInputs, vocab_size: usize, cfg: &MaskingConfig, rng: &mut ChaCha8Rng) {
    for i in 0..inputs.len() {
        if !inputs.is_content(i) {
            continue;
        }
        let original = inputs.token_ids[i];
        let (bucket, token) = match draw(cfg, rng) {
            Pick::None => continue,
            Pick::Replace => (MvlmBucket::MaskToken, MASK),
            Pick::Random => {
                let t = if vocab_size > NUM_RESERVED as usize {
                    rng.random_range(NUM_RESERVED..vocab_size as u32)
                } else {
                    UNK
                };
                (MvlmBucket::RandomToken, t)
            }
            Pick::Keep => (MvlmBucket::Keep, original),
        };
        plan.mvlm_bucket[i] = bucket;
        plan.mvlm_label[i] = Some(original);
        plan.mvlm_replacement[i] = token;
    }
}

/// Selects KPL positions for every sequence of a batch. Random replacement
/// boxes are drawn uniformly from the other content positions of the batch;
/// with no donor available the zero box is used instead.
pub fn plan_kpl(
    plans: &mut [MaskingPlan],
    batch: &[ModelInputs],
    cfg: &MaskingConfig,
    rngs: &mut [ChaCha8Rng],
) -> Result<()> {
    if plans.len() != batch.len() || rngs.len() != batch.len() {
        return Err(Error::Shape("plans, inputs and rngs must have one entry per sequence".into()));
    }
    let pool: Vec<(usize, usize)> = batch
        .iter()
        .enumerate()
        .flat_map(|(s, inp)| (0..inp.len()).filter(|&i| inp.is_content(i)).map(move |i| (s, i)))
        .collect();
    for (s, inputs) in batch.iter().enumerate() {
        let rng = &mut rngs[s];
        let plan = &mut plans[s];
        for i in 0..inputs.len() {
            if !inputs.is_content(i) {
                continue;
            }
            let original = inputs.boxes[i];
            let (bucket, replacement) = match draw(cfg, rng) {
                Pick::None => continue,
                Pick::Replace => (KplBucket::ZeroBox, NormalizedBBox::ZERO),
                Pick::Random => {
                    if pool.len() < 2 {
                        log::warn!("no donor box in batch; falling back to the zero box");
                        (KplBucket::ZeroBox, NormalizedBBox::ZERO)
                    } else {
                        let me = pool.binary_search(&(s, i)).expect("content position is in the pool");
                        let mut k = rng.random_range(0..pool.len() - 1);
                        if k >= me {
                            k += 1;
                        }
                        let (ds, di) = pool[k];
                        (KplBucket::RandomBox, batch[ds].boxes[di])
                    }
                }
                Pick::Keep => (KplBucket::Keep, original),
            };
            plan.kpl_bucket[i] = bucket;
            plan.kpl_labels[i] = Some(key_point_regions(&original, cfg.grid)?);
            plan.kpl_replacement[i] = replacement;
        }
    }
    Ok(())
}

/// Labels token/box pairs touched by a random or keep bucket of either task.
pub fn plan_cai(plan: &mut MaskingPlan) {
    for i in 0..plan.cai_label.len() {
        let (m, k) = (plan.mvlm_bucket[i], plan.kpl_bucket[i]);
        let touched = matches!(m, MvlmBucket::RandomToken | MvlmBucket::Keep)
            || matches!(k, KplBucket::RandomBox | KplBucket::Keep);
        plan.cai_label[i] = if !touched {
            CaiLabel::None
        } else if m == MvlmBucket::RandomToken || k == KplBucket::RandomBox {
            CaiLabel::Misaligned
        } else {
            CaiLabel::Aligned
        };
    }
}

/// Grid cell of a coordinate in `[0, 1000]` for a `g`-way split.
pub fn grid_cell(v: u16, g: usize) -> usize {
    ((v as usize * g) / (COORD_MAX as usize + 1)).min(g - 1)
}

/// Regions (`cell(y)·g + cell(x)`) of the top-left, bottom-right and center
/// points of a box.
pub fn key_point_regions(b: &NormalizedBBox, g: usize) -> Result<KeyPoints> {
    if g == 0 {
        return Err(Error::Input("grid size must be at least 1".into()));
    }
    if b.fields()[..4].iter().any(|&v| v > COORD_MAX) || b.xmin > b.xmax || b.ymin > b.ymax {
        return Err(Error::Input(format!("box out of range: {b:?}")));
    }
    let region = |x: u16, y: u16| grid_cell(y, g) * g + grid_cell(x, g);
    let cx = ((b.xmin as u32 + b.xmax as u32) / 2) as u16;
    let cy = ((b.ymin as u32 + b.ymax as u32) / 2) as u16;
    Ok(KeyPoints {
        top_left: region(b.xmin, b.ymin),
        bottom_right: region(b.xmax, b.ymax),
        center: region(cx, cy),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainHeads {
    pub mvlm: Linear,
    pub kpl_top_left: Linear,
    pub kpl_bottom_right: Linear,
    pub kpl_center: Linear,
    pub cai: Linear,
}

impl PretrainHeads {
    pub fn register(store: &mut ParamStore, feat: usize, vocab_size: usize, grid: usize, rng: &mut ChaCha8Rng) -> Self {
        let regions = grid * grid;
        Self {
            mvlm: Linear::register(store, "head.mvlm", feat, vocab_size, rng),
            kpl_top_left: Linear::register(store, "head.kpl.top_left", feat, regions, rng),
            kpl_bottom_right: Linear::register(store, "head.kpl.bottom_right", feat, regions, rng),
            kpl_center: Linear::register(store, "head.kpl.center", feat, regions, rng),
            cai: Linear::register(store, "head.cai", feat, 2, rng),
        }
    }
}

/// Loss variables of one sequence; each is `1×1`.
pub struct PretrainLosses {
    pub mvlm: Var,
    pub kpl: Var,
    pub cai: Var,
    pub total: Var,
}

fn labeled_rows<T>(labels: &[Option<T>]) -> Vec<usize> {
    labels.iter().enumerate().filter(|(_, l)| l.is_some()).map(|(i, _)| i).collect()
}

fn head_ce(
    tape: &mut Tape,
    features: Var,
    head: &Linear,
    rows: &[usize],
    targets: Vec<Option<usize>>,
    scale: f64,
) -> Result<Var> {
    let x = tape.select_rows(features, rows);
    let logits = head.forward(tape, x);
    tape.cross_entropy_sum(logits, &targets, scale)
}

fn inv(count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        1.0 / count as f64
    }
}

/// Mean cross-entropy per task over labeled positions; KPL averages its three
/// heads; the total is the unweighted sum. `denominators` gives the
/// per-task label counts the means are taken over (for a batch, the batch
/// totals), so per-sequence losses sum to the batch mean.
pub fn pretrain_loss(
    tape: &mut Tape,
    features: Var,
    plan: &MaskingPlan,
    heads: &PretrainHeads,
    denominators: TaskCounts,
) -> Result<PretrainLosses> {
    let n = tape.value(features).nrows();
    if plan.mvlm_label.len() < n {
        return Err(Error::Shape(format!("plan covers {} positions, features {n}", plan.mvlm_label.len())));
    }
    let zero = || ndarray::Array2::zeros((1, 1));

    let mvlm_labels = &plan.mvlm_targets()[..n];
    let rows = labeled_rows(mvlm_labels);
    let mvlm = if rows.is_empty() {
        tape.constant(zero())
    } else {
        let t = rows.iter().map(|&r| mvlm_labels[r]).collect();
        head_ce(tape, features, &heads.mvlm, &rows, t, inv(denominators.mvlm))?
    };

    let rows = labeled_rows(&plan.kpl_labels[..n]);
    let kpl = if rows.is_empty() {
        tape.constant(zero())
    } else {
        let kp: Vec<KeyPoints> = rows.iter().map(|&r| plan.kpl_labels[r].unwrap()).collect();
        let scale = inv(denominators.kpl) / 3.0;
        let tl = head_ce(tape, features, &heads.kpl_top_left, &rows, kp.iter().map(|k| Some(k.top_left)).collect(), scale)?;
        let br = head_ce(
            tape,
            features,
            &heads.kpl_bottom_right,
            &rows,
            kp.iter().map(|k| Some(k.bottom_right)).collect(),
            scale,
        )?;
        let c = head_ce(tape, features, &heads.kpl_center, &rows, kp.iter().map(|k| Some(k.center)).collect(), scale)?;
        let s = tape.add(tl, br);
        tape.add(s, c)
    };

    let cai_labels = &plan.cai_targets()[..n];
    let rows = labeled_rows(cai_labels);
    let cai = if rows.is_empty() {
        tape.constant(zero())
    } else {
        let t = rows.iter().map(|&r| cai_labels[r]).collect();
        head_ce(tape, features, &heads.cai, &rows, t, inv(denominators.cai))?
    };

    let s = tape.add(mvlm, kpl);
    let total = tape.add(s, cai);
    Ok(PretrainLosses { mvlm, kpl, cai, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{CLS, PAD, SEP};
    use rand::SeedableRng;

    fn inputs(content: usize, n: usize) -> ModelInputs {
        let mut token_ids = vec![CLS];
        let mut boxes = vec![NormalizedBBox::CLS];
        for i in 0..content {
            token_ids.push(5 + (i % 20) as u32);
            let x = (i * 37 % 900) as u16;
            boxes.push(NormalizedBBox::from_corners(x, x / 2, x + 50, x / 2 + 20).unwrap());
        }
        token_ids.push(SEP);
        boxes.push(NormalizedBBox::SEP);
        let active = token_ids.len();
        token_ids.resize(n, PAD);
        boxes.resize(n, NormalizedBBox::PAD);
        let mut attention_mask = vec![1; active];
        attention_mask.resize(n, 0);
        ModelInputs {
            token_ids,
            boxes,
            attention_mask,
            position_ids: (0..n).collect(),
        }
    }

    #[test]
    fn origin_and_full_box_regions() {
        let kp = key_point_regions(&NormalizedBBox::ZERO, 7).unwrap();
        assert_eq!((kp.top_left, kp.bottom_right, kp.center), (0, 0, 0));
        let full = NormalizedBBox::from_corners(0, 0, 1000, 1000).unwrap();
        let kp = key_point_regions(&full, 7).unwrap();
        assert_eq!((kp.top_left, kp.bottom_right, kp.center), (0, 48, 24));
        assert!(key_point_regions(&full, 0).is_err());
    }

    #[test]
    fn seven_way_cells_match_division_by_143() {
        for v in 0..=1000u16 {
            assert_eq!(grid_cell(v, 7), v as usize / 143);
        }
    }

    #[test]
    fn specials_only_sequence_gets_no_labels() {
        let inp = inputs(0, 8);
        let mut plan = MaskingPlan::new(&inp);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = MaskingConfig {
            select_prob: 1.0,
            ..Default::default()
        };
        plan_mvlm(&mut plan, &inp, 30, &cfg, &mut rng);
        plan_kpl(std::slice::from_mut(&mut plan), &[inp.clone()], &cfg, &mut [rng]).unwrap();
        plan_cai(&mut plan);
        assert_eq!(plan.counts(), TaskCounts::default());
    }

    #[test]
    fn mvlm_plan_is_deterministic_and_leaves_boxes() {
        let inp = inputs(40, 48);
        let cfg = MaskingConfig::default();
        let run = || {
            let mut plan = MaskingPlan::new(&inp);
            plan_mvlm(&mut plan, &inp, 30, &cfg, &mut ChaCha8Rng::seed_from_u64(11));
            plan
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert_eq!(a.apply(&inp).boxes, inp.boxes);
    }

    #[test]
    fn kpl_labels_come_from_original_boxes_and_tokens_stay() {
        let batch = vec![inputs(30, 34), inputs(12, 34)];
        let cfg = MaskingConfig {
            select_prob: 0.6,
            ..Default::default()
        };
        let mut plans: Vec<_> = batch.iter().map(MaskingPlan::new).collect();
        let mut rngs = vec![ChaCha8Rng::seed_from_u64(1), ChaCha8Rng::seed_from_u64(2)];
        plan_kpl(&mut plans, &batch, &cfg, &mut rngs).unwrap();
        for (plan, inp) in plans.iter().zip(&batch) {
            let masked = plan.apply(inp);
            assert_eq!(masked.token_ids, inp.token_ids);
            for i in 0..inp.len() {
                if let Some(kp) = plan.kpl_labels[i] {
                    assert_eq!(kp, key_point_regions(&inp.boxes[i], 7).unwrap());
                } else {
                    assert_eq!(masked.boxes[i], inp.boxes[i]);
                }
                if !inp.is_content(i) {
                    assert_eq!(plan.kpl_bucket[i], KplBucket::None);
                }
            }
        }
    }

    #[test]
    fn lone_box_falls_back_to_zero() {
        let batch = vec![inputs(1, 3)];
        let cfg = MaskingConfig {
            select_prob: 1.0,
            replace_frac: 0.0,
            random_frac: 1.0,
            grid: 7,
        };
        let mut plans = vec![MaskingPlan::new(&batch[0])];
        plan_kpl(&mut plans, &batch, &cfg, &mut [ChaCha8Rng::seed_from_u64(0)]).unwrap();
        assert_eq!(plans[0].kpl_bucket[1], KplBucket::ZeroBox);
        assert_eq!(plans[0].kpl_replacement[1], NormalizedBBox::ZERO);
    }

    #[test]
    fn cai_rules() {
        let inp = inputs(6, 8);
        let mut plan = MaskingPlan::new(&inp);
        plan.mvlm_bucket[1] = MvlmBucket::Keep;
        plan.kpl_bucket[2] = KplBucket::RandomBox;
        plan.mvlm_bucket[3] = MvlmBucket::MaskToken;
        plan.mvlm_bucket[4] = MvlmBucket::RandomToken;
        plan.kpl_bucket[4] = KplBucket::Keep;
        plan.kpl_bucket[5] = KplBucket::ZeroBox;
        plan_cai(&mut plan);
        assert_eq!(plan.cai_label[1], CaiLabel::Aligned);
        assert_eq!(plan.cai_label[2], CaiLabel::Misaligned);
        assert_eq!(plan.cai_label[3], CaiLabel::None);
        assert_eq!(plan.cai_label[4], CaiLabel::Misaligned);
        assert_eq!(plan.cai_label[5], CaiLabel::None);
        assert_eq!(plan.cai_label[0], CaiLabel::None);
    }
}
