mod common;

use std::collections::HashSet;

use lilt::autograd::{Matrix, ParamId, Tape};
use lilt::document::{normalize_bbox, sort_reading_order, EntityLabel, RawBBox, Segment};
use lilt::embeddings::{layout_embedding, zero_positions};
use lilt::encoder::Mode;
use lilt::heads::{ser_loss, SpanEntity};
use lilt::metrics::entity_f1;
use lilt::model::{Model, Task};
use lilt::objectives::{KplBucket, MaskingConfig, MvlmBucket};
use lilt::optim::{make_param_groups, SlowRatio};
use lilt::synthetic::{generate, GenConfig};
use lilt::text::ModelInputs;
use lilt::train::plan_batch;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::*;

fn encode(model: &Model, inputs: &ModelInputs) -> (Matrix, Matrix) {
    let mut tape = Tape::new(&model.store);
    let (out, _) = model.encode(&mut tape, inputs, None).unwrap();
    (tape.value(out.text).clone(), tape.value(out.layout).clone())
}

fn permute(inputs: &ModelInputs, p: &[usize]) -> ModelInputs {
    ModelInputs {
        token_ids: p.iter().map(|&i| inputs.token_ids[i]).collect(),
        boxes: p.iter().map(|&i| inputs.boxes[i]).collect(),
        attention_mask: p.iter().map(|&i| inputs.attention_mask[i]).collect(),
        position_ids: inputs.position_ids.clone(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn reading_order_matches_selection_sort(cells in proptest::collection::vec((0u8..4, 0u8..4), 0..12)) {
        let segments: Vec<Segment> = cells
            .iter()
            .enumerate()
            .map(|(i, &(y, x))| Segment {
                text: "w".into(),
                bbox: RawBBox::new(x as f64 * 10.0, y as f64 * 10.0, x as f64 * 10.0 + 5.0, y as f64 * 10.0 + 5.0),
                id: i as i64,
            })
            .collect();
        let perm = sort_reading_order(&segments);
        let mut seen = perm.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..segments.len()).collect::<Vec<_>>());

        let key = |i: usize| (cells[i].0, cells[i].1, i);
        let mut left: Vec<usize> = (0..segments.len()).collect();
        let mut expect = Vec::new();
        while !left.is_empty() {
            let (k, _) = left.iter().enumerate().min_by_key(|(_, &i)| key(i)).unwrap();
            expect.push(left.remove(k));
        }
        prop_assert_eq!(perm, expect);
    }

    #[test]
    fn encoder_is_permutation_equivariant_without_positions(seed in 0u64..1000, pretrain in any::<bool>()) {
        let mode = if pretrain { Mode::Pretrain } else { Mode::Finetune };
        let mut model = tiny_model(Task::Pretrain, mode, seed);
        let emb = model.embeddings;
        zero_positions(&mut model.store, &emb);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = random_inputs(&mut rng, 6, 4, TINY_VOCAB);
        let mut p: Vec<usize> = (0..6).collect();
        for i in (1..6).rev() {
            p.swap(i, rng.random_range(0..=i));
        }
        let (t0, l0) = encode(&model, &inputs);
        let (t1, l1) = encode(&model, &permute(&inputs, &p));
        for (i, &src) in p.iter().enumerate() {
            for (a, b) in [(&t0, &t1), (&l0, &l1)] {
                let d = (&a.row(src) - &b.row(i)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
                prop_assert!(d <= 1e-10, "row {} differs by {}", i, d);
            }
        }
    }

    #[test]
    fn pad_positions_do_not_reach_other_outputs(seed in 0u64..1000, content in 1usize..4) {
        let model = tiny_model(Task::Pretrain, Mode::Pretrain, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = random_inputs(&mut rng, 6, content, TINY_VOCAB);
        let mut noisy = inputs.clone();
        for i in inputs.active_len()..6 {
            noisy.token_ids[i] = rng.random_range(0..TINY_VOCAB as u32);
            noisy.boxes[i] = random_box(&mut rng);
        }
        let (t0, l0) = encode(&model, &inputs);
        let (t1, l1) = encode(&model, &noisy);
        let active = inputs.active_len();
        for i in 0..active {
            prop_assert_eq!(t0.row(i), t1.row(i));
            prop_assert_eq!(l0.row(i), l1.row(i));
        }
    }

    #[test]
    fn plans_touch_only_content_and_their_own_modality(seed in 0u64..10_000, lens in proptest::collection::vec(0usize..10, 1..5)) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch: Vec<ModelInputs> = lens.iter().map(|&c| random_inputs(&mut rng, 12, c, 50)).collect();
        let cfg = MaskingConfig { select_prob: 0.5, ..MaskingConfig::default() };
        let plans = plan_batch(&batch, 50, &cfg, seed, 0).unwrap();
        for (plan, inp) in plans.iter().zip(&batch) {
            let applied = plan.apply(inp);
            for i in 0..inp.len() {
                if !inp.is_content(i) {
                    prop_assert_eq!(plan.mvlm_bucket[i], MvlmBucket::None);
                    prop_assert_eq!(plan.kpl_bucket[i], KplBucket::None);
                    prop_assert!(plan.mvlm_label[i].is_none() && plan.kpl_labels[i].is_none());
                }
                if applied.token_ids[i] != inp.token_ids[i] {
                    prop_assert!(matches!(plan.mvlm_bucket[i], MvlmBucket::MaskToken | MvlmBucket::RandomToken));
                }
                if applied.boxes[i] != inp.boxes[i] {
                    prop_assert!(matches!(plan.kpl_bucket[i], KplBucket::ZeroBox | KplBucket::RandomBox));
                }
            }
        }
    }

    #[test]
    fn metric_laws(
        gold in proptest::collection::vec(proptest::collection::vec((0usize..3, 0usize..20), 1..5), 1..4),
        keep in proptest::collection::vec(any::<bool>(), 20),
        extra in proptest::collection::vec((0usize..3, 0usize..20), 0..4),
    ) {
        // Disjoint unit spans per document.
        let to_entities = |v: &[(usize, usize)]| -> Vec<SpanEntity> {
            let mut seen = HashSet::new();
            v.iter()
                .filter(|(_, s)| seen.insert(*s))
                .map(|&(c, s)| SpanEntity::new(c, s..s + 1))
                .collect()
        };
        let gold: Vec<Vec<SpanEntity>> = gold.iter().map(|g| to_entities(g)).collect();
        let pred: Vec<Vec<SpanEntity>> = gold
            .iter()
            .enumerate()
            .map(|(d, g)| {
                let mut p: Vec<SpanEntity> = g.iter().enumerate().filter(|(k, _)| keep[(k + d) % 20]).map(|(_, e)| e.clone()).collect();
                if d == 0 {
                    let mut all = extra.clone();
                    all.extend(p.iter().map(|e| (e.category, e.span.start)));
                    p = to_entities(&all);
                }
                p
            })
            .collect();
        let m = entity_f1(&pred, &gold).unwrap();
        prop_assert!(m.f1 <= 1.0);
        let same = pred.iter().zip(&gold).all(|(p, g)| {
            p.iter().collect::<HashSet<_>>() == g.iter().collect::<HashSet<_>>()
        });
        prop_assert_eq!(m.f1 == 1.0, same);

        let swapped = entity_f1(&gold, &pred.iter().map(|p| to_entities(&p.iter().map(|e| (e.category, e.span.start)).collect::<Vec<_>>())).collect::<Vec<_>>());
        if let Ok(s) = swapped {
            prop_assert_eq!(s.precision, m.recall);
            prop_assert_eq!(s.recall, m.precision);
            prop_assert!((s.f1 - m.f1).abs() < 1e-15);
        }

        let per_doc: Vec<_> = pred.iter().zip(&gold).map(|(p, g)| entity_f1(&[p.clone()], &[g.clone()]).unwrap()).collect();
        prop_assert_eq!(m.tp, per_doc.iter().map(|x| x.tp).sum::<usize>());
        prop_assert_eq!(m.fp, per_doc.iter().map(|x| x.fp).sum::<usize>());
        prop_assert_eq!(m.fn_, per_doc.iter().map(|x| x.fn_).sum::<usize>());
    }

    #[test]
    fn ser_loss_ignores_pad_logits(seed in 0u64..1000, active in 2usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 8;
        let logits = Matrix::from_shape_fn((n, 9), |_| rng.random_range(-3.0..3.0));
        let targets: Vec<Option<usize>> = (0..n).map(|i| (i > 0 && i + 1 < active).then(|| rng.random_range(0..9))).collect();
        let mut noisy = logits.clone();
        for i in active..n {
            for c in 0..9 {
                noisy[[i, c]] = rng.random_range(-50.0..50.0);
            }
        }
        let store = lilt::autograd::ParamStore::new();
        let loss = |m: &Matrix| {
            let mut tape = Tape::new(&store);
            let v = tape.constant(m.clone());
            let l = ser_loss(&mut tape, v, &targets, 0.25).unwrap();
            tape.scalar(l)
        };
        prop_assert_eq!(loss(&logits).to_bits(), loss(&noisy).to_bits());
    }

    #[test]
    fn layout_embedding_absorbs_page_scale(
        x0 in 0.0f64..500.0, y0 in 0.0f64..700.0, w in 1.0f64..400.0, h in 1.0f64..200.0, k in 0u32..4,
    ) {
        let scale = f64::from(1u32 << k);
        let raw = RawBBox::new(x0, y0, x0 + w, y0 + h);
        let big = RawBBox::new(raw.x0 * scale, raw.y0 * scale, raw.x1 * scale, raw.y1 * scale);
        let a = normalize_bbox(&raw, 1000.0, 1200.0).unwrap();
        let b = normalize_bbox(&big, 1000.0 * scale, 1200.0 * scale).unwrap();
        prop_assert_eq!(a, b);
        let model = tiny_model(Task::Pretrain, Mode::Pretrain, 1);
        let emb = |bx| {
            let mut tape = Tape::new(&model.store);
            let v = layout_embedding(&mut tape, &[bx], &[0], &model.embeddings).unwrap();
            tape.value(v).clone()
        };
        prop_assert_eq!(emb(a), emb(b));
    }
}

#[test]
fn every_parameter_is_in_exactly_one_group() {
    for task in [Task::Pretrain, Task::Ser, Task::Re] {
        let model = tiny_model(task, task.mode(), 2);
        for mode in [Mode::Pretrain, Mode::Finetune] {
            for ratio in [SlowRatio::default(), SlowRatio::FREEZE] {
                let groups = make_param_groups(&model, mode, ratio);
                let mut count = vec![0usize; model.store.len()];
                for g in &groups {
                    for &ParamId(i) in &g.params {
                        count[i] += 1;
                    }
                }
                assert!(count.iter().all(|&c| c == 1), "{task:?} {mode:?}: {count:?}");
            }
        }
    }
}

#[test]
fn synthetic_labels_are_non_degenerate() {
    let docs = generate(&GenConfig {
        seed: 12,
        n_docs: 400,
        ..GenConfig::default()
    })
    .unwrap();
    for label in EntityLabel::ALL {
        let with = docs.iter().filter(|d| d.entities.iter().any(|e| e.label == label)).count();
        assert!(with as f64 >= 0.95 * docs.len() as f64, "{label}: {with}/{}", docs.len());
    }
    for d in &docs {
        assert_eq!((d.page_width, d.page_height), (1000.0, 1000.0));
        for s in &d.segments {
            let b = normalize_bbox(&s.bbox, d.page_width, d.page_height).unwrap();
            assert!(b.is_valid());
            assert!(s.bbox.x1 <= 1000.0 && s.bbox.y1 <= 1000.0 && s.bbox.x0 >= 0.0 && s.bbox.y0 >= 0.0);
        }
    }
}
