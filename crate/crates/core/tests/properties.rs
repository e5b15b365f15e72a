use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use petduet::afvpg::{PromptSource, VisualPromptEmbedding};
use petduet::data_synth::BatchSampler;
use petduet::evalproto::{coco_thresholds, compute_ap, EvalDetection, EvalGt};
use petduet::geometry::{giou, iou, normalize_box, AbsoluteBox, NormalizedBox};
use petduet::prompt_strategies::{
    dmd_aggregate, ibp_aggregate, plan_columns, BatchPromptTable, ColumnOptions, VisualCuesBank,
};

fn nbox() -> impl Strategy<Value = NormalizedBox> {
    (0.05f64..0.95, 0.05f64..0.95, 0.01f64..0.6, 0.01f64..0.6)
        .prop_map(|(cx, cy, w, h)| NormalizedBox::clamped(cx, cy, w, h))
}

fn emb(v: Vec<f32>, c: u32, ds: u32) -> VisualPromptEmbedding {
    VisualPromptEmbedding {
        vector: v,
        category_id: c,
        source: PromptSource::SelfImage,
        dataset_id: ds,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn giou_bounded_by_iou_and_symmetric(a in nbox(), b in nbox()) {
        prop_assert!(giou(&a, &b) <= iou(&a, &b) + 1e-12);
        prop_assert!((iou(&a, &b) - iou(&b, &a)).abs() < 1e-9);
        prop_assert!((giou(&a, &b) - giou(&b, &a)).abs() < 1e-9);
    }

    #[test]
    fn normalize_round_trips(x0 in 0.0f64..300.0, y0 in 0.0f64..200.0, w in 1.0f64..300.0, h in 1.0f64..200.0) {
        let (iw, ih) = (640.0, 480.0);
        let b = AbsoluteBox::new(x0, y0, x0 + w, y0 + h).unwrap();
        let back = normalize_box(&b, iw, ih).unwrap().to_absolute(iw, ih);
        for (p, q) in [(b.x0, back.x0), (b.y0, back.y0), (b.x1, back.x1), (b.y1, back.y1)] {
            prop_assert!((p - q).abs() <= 1e-6 * p.abs().max(1.0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn ibp_matches_filtered_mean(
        n in 1usize..=8,
        cells in prop::collection::vec((0usize..8, 0u32..10, prop::collection::vec(-3.0f32..3.0, 4)), 0..40),
    ) {
        let mut table = BatchPromptTable::new(n, 0);
        let mut seen = HashSet::new();
        for (s, c, v) in cells {
            let s = s % n;
            if seen.insert((s, c)) {
                table.insert(s, emb(v, c, 0)).unwrap();
            }
        }
        for c in 0..10 {
            for i in 0..n {
                let others: Vec<&[f32]> = (0..n)
                    .filter(|&j| j != i)
                    .filter_map(|j| table.get(c, j).map(|e| e.vector.as_slice()))
                    .collect();
                match ibp_aggregate(&table, c, i) {
                    None => prop_assert!(others.is_empty()),
                    Some(got) => {
                        prop_assert_eq!(got.source, PromptSource::Batch);
                        for k in 0..4 {
                            let want = others.iter().map(|v| v[k] as f64).sum::<f64>() / others.len() as f64;
                            prop_assert!((got.vector[k] as f64 - want).abs() <= 1e-6);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn bank_keeps_last_m_per_category(ops in prop::collection::vec((0u32..2, 0u32..5, -1.0f32..1.0), 1..200)) {
        let m = 4;
        let mut bank = VisualCuesBank::new(m);
        let mut shadow: BTreeMap<(u32, u32), VecDeque<f32>> = BTreeMap::new();
        for (ds, c, x) in ops {
            bank.push(&emb(vec![x, -x], c, ds));
            let q = shadow.entry((ds, c)).or_default();
            q.push_back(x);
            if q.len() > m {
                q.pop_front();
            }
        }
        for (&(ds, c), want) in &shadow {
            let got: Vec<f32> = bank.queue(ds, c).unwrap().iter().map(|v| v[0]).collect();
            prop_assert_eq!(&got, &want.iter().copied().collect::<Vec<_>>());
            let agg = dmd_aggregate(&bank, ds, c).unwrap();
            let mean = want.iter().map(|&v| v as f64).sum::<f64>() / want.len() as f64;
            prop_assert!((agg.vector[0] as f64 - mean).abs() <= 1e-6);
            prop_assert_eq!(agg.dataset_id, ds);
        }
    }

    #[test]
    fn planned_columns_are_unique_and_negatives_disjoint(
        n in 1usize..6,
        cells in prop::collection::vec((0usize..6, 0u32..8), 1..20),
        banked in prop::collection::vec(0u32..8, 0..20),
        seed in any::<u64>(),
    ) {
        let mut table = BatchPromptTable::new(n, 3);
        let mut seen = HashSet::new();
        for (s, c) in cells {
            let s = s % n;
            if seen.insert((s, c)) {
                table.insert(s, emb(vec![c as f32; 2], c, 3)).unwrap();
            }
        }
        let mut bank = VisualCuesBank::new(16);
        for c in banked {
            bank.push(&emb(vec![1.0, 2.0], c, 3));
        }
        let i = 0;
        let positives: BTreeSet<u32> = (0..8).filter(|&c| table.get(c, i).is_some()).collect();
        let opts = ColumnOptions { bank_sample: 3, ..ColumnOptions::default() };
        let a = plan_columns(&positives, &table, &bank, i, &opts, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = plan_columns(&positives, &table, &bank, i, &opts, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(&a, &b);
        let mut pairs = HashSet::new();
        for col in &a {
            prop_assert!(pairs.insert((col.category_id, col.source)));
            if col.source == PromptSource::SelfImage {
                prop_assert!(positives.contains(&col.category_id));
            }
        }
        for c in &positives {
            prop_assert!(a.iter().any(|col| col.category_id == *c && col.source == PromptSource::SelfImage));
        }
    }
}

/// Scalar greedy matcher written independently of the engine.
fn reference_ap(dets: &[EvalDetection], gts: &[EvalGt], thr: f64, cat: u32) -> f64 {
    let g: Vec<&EvalGt> = gts.iter().filter(|g| g.category == cat).collect();
    let mut d: Vec<&EvalDetection> = dets.iter().filter(|d| d.category == cat).collect();
    d.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut taken = vec![false; g.len()];
    let mut flags = Vec::new();
    for det in &d {
        let mut best: Option<usize> = None;
        let mut best_iou = thr;
        for (k, gt) in g.iter().enumerate() {
            if taken[k] || gt.image_id != det.image_id {
                continue;
            }
            let a = NormalizedBox::clamped(det.bbox[0], det.bbox[1], det.bbox[2], det.bbox[3]);
            let b = NormalizedBox::clamped(gt.bbox[0], gt.bbox[1], gt.bbox[2], gt.bbox[3]);
            let v = iou(&a, &b);
            if v >= best_iou {
                best_iou = v;
                best = Some(k);
            }
        }
        if let Some(k) = best {
            taken[k] = true;
        }
        flags.push(best.is_some());
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let rt = r as f64 / 100.0;
        let mut best_p: f64 = 0.0;
        let mut tp = 0;
        for (k, &hit) in flags.iter().enumerate() {
            if hit {
                tp += 1;
            }
            let rec = tp as f64 / g.len() as f64;
            let prec = tp as f64 / (k + 1) as f64;
            if rec >= rt {
                best_p = best_p.max(prec);
            }
        }
        total += best_p;
    }
    total / 101.0
}

fn det_set() -> impl Strategy<Value = (Vec<EvalDetection>, Vec<EvalGt>)> {
    let gt = (0u64..3, 0u32..2, nbox());
    let det = (0u64..3, 0u32..2, nbox(), 0.0f64..1.0);
    (prop::collection::vec(gt, 1..6), prop::collection::vec(det, 0..10)).prop_map(|(g, d)| {
        let gts = g
            .into_iter()
            .map(|(image_id, category, b)| EvalGt { image_id, category, bbox: b.as_array() })
            .collect();
        let dets = d
            .into_iter()
            .map(|(image_id, category, b, score)| EvalDetection { image_id, category, bbox: b.as_array(), score })
            .collect();
        (dets, gts)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn ap50_dominates_coco_ap((dets, gts) in det_set()) {
        let s = compute_ap(&dets, &gts, &coco_thresholds());
        prop_assert!(s.ap50 >= s.ap - 1e-12);
        prop_assert!((0.0..=1.0).contains(&s.ap) && (0.0..=1.0).contains(&s.ap50));
    }

    #[test]
    fn ap_agrees_with_reference((dets, gts) in det_set()) {
        let s = compute_ap(&dets, &gts, &[0.5]);
        let cats: BTreeSet<u32> = gts.iter().map(|g| g.category).collect();
        let want = cats.iter().map(|&c| reference_ap(&dets, &gts, 0.5, c)).sum::<f64>() / cats.len() as f64;
        prop_assert!((s.ap50 - want).abs() < 1e-9, "engine {} reference {}", s.ap50, want);
    }

    #[test]
    fn sampler_epoch_is_partition_without_mixing(a in 1usize..40, b in 1usize..40, bs in 1usize..9, seed in any::<u64>(), e in 0u64..5) {
        let s = BatchSampler::new(vec![a, b], bs, seed).unwrap();
        let mut seen = [vec![0u8; a], vec![0u8; b]];
        for batch in s.epoch(e) {
            prop_assert!(!batch.indices.is_empty() && batch.indices.len() <= bs);
            for &i in &batch.indices {
                seen[batch.dataset][i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|v| v.iter().all(|&k| k == 1)));
    }
}

#[test]
fn sampler_frequencies_follow_dataset_sizes() {
    let s = BatchSampler::new(vec![900, 100], 1, 7).unwrap();
    let draws: Vec<_> = s.stream().take(2000).collect();
    let first = draws.iter().filter(|b| b.dataset == 0).count() as f64 / draws.len() as f64;
    assert!((first - 0.9).abs() <= 0.05, "{first}");
}
