use std::collections::BTreeSet;

use nucleiquant::dataset::{augment_labels, AugmentOp, LabelSet};
use nucleiquant::labels::PatchLabels;
use nucleiquant::metrics::{
    evaluate, match_instances, mpq, multi_r2, pq_per_class, Aggregation, ClassTally, MetricsError,
};
use nucleiquant::synthetic::{fixture_pair, relabel_shuffled};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Per-class reference tallies from exhaustive pair enumeration.
#[derive(Debug, Default, Clone)]
struct Oracle {
    tp: BTreeSet<(u32, u32)>,
    fp: BTreeSet<u32>,
    fn_: BTreeSet<u32>,
    iou_sum: f64,
}

fn ids_of_class(p: &PatchLabels, t: u16) -> BTreeSet<u32> {
    p.instances
        .ids
        .iter()
        .zip(&p.classes.classes)
        .filter(|(&i, &c)| i != 0 && c == t)
        .map(|(&i, _)| i)
        .collect()
}

fn brute_force(gt: &PatchLabels, pred: &PatchLabels, num_classes: usize) -> Vec<Oracle> {
    (1..=num_classes as u16)
        .map(|t| {
            let gts = ids_of_class(gt, t);
            let preds = ids_of_class(pred, t);
            let mut o = Oracle::default();
            for &g in &gts {
                for &p in &preds {
                    let a: Vec<bool> = gt.instances.ids.iter().map(|&i| i == g).collect();
                    let b: Vec<bool> = pred.instances.ids.iter().map(|&i| i == p).collect();
                    let inter = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
                    let union = a.iter().zip(&b).filter(|(x, y)| **x || **y).count();
                    if 2 * inter > union {
                        o.tp.insert((g, p));
                        o.iou_sum += inter as f64 / union as f64;
                    }
                }
            }
            o.fn_ = gts.iter().filter(|g| !o.tp.iter().any(|(x, _)| x == *g)).copied().collect();
            o.fp = preds.iter().filter(|p| !o.tp.iter().any(|(_, y)| y == *p)).copied().collect();
            o
        })
        .collect()
}

fn label_set(patches: Vec<PatchLabels>, c: usize) -> LabelSet {
    LabelSet {
        num_classes: c,
        patches,
    }
}

#[test]
fn evaluate_matches_exhaustive_pair_oracle() {
    let c = 2;
    for seed in 0..200u64 {
        let (gt, pred) = fixture_pair(4, 32, 32, c, seed);
        let mut pooled = vec![Oracle::default(); c];
        let mut totals = vec![(0u64, 0u64, 0u64); c];
        for (g, p) in gt.iter().zip(&pred) {
            let m = match_instances(g, p, c).unwrap();
            for (t, o) in brute_force(g, p, c).into_iter().enumerate() {
                let cm = &m.classes[t];
                let pairs: BTreeSet<_> = cm.tp.iter().map(|x| (x.gt, x.pred)).collect();
                assert_eq!(pairs, o.tp, "seed {seed} class {}", t + 1);
                assert_eq!(cm.tp.len(), pairs.len());
                assert_eq!(cm.fp.iter().copied().collect::<BTreeSet<_>>(), o.fp);
                assert_eq!(cm.fn_.iter().copied().collect::<BTreeSet<_>>(), o.fn_);
                totals[t].0 += o.tp.len() as u64;
                totals[t].1 += o.fp.len() as u64;
                totals[t].2 += o.fn_.len() as u64;
                pooled[t].iou_sum += o.iou_sum;
            }
        }
        let report = evaluate(&label_set(gt, c), &label_set(pred, c), Aggregation::Dataset).unwrap();
        let mut pqs = Vec::new();
        for t in 0..c {
            let (tp, fp, fn_) = totals[t];
            assert_eq!((report.tp[t], report.fp[t], report.fn_[t]), (tp, fp, fn_));
            if tp + fp + fn_ == 0 {
                assert_eq!(report.pq[t], None);
                continue;
            }
            let dq = tp as f64 / (tp as f64 + 0.5 * (fp + fn_) as f64);
            let sq = if tp == 0 { 0.0 } else { pooled[t].iou_sum / tp as f64 };
            let got_sq = report.sq[t].unwrap();
            assert_eq!(report.dq[t].unwrap(), dq);
            assert!((got_sq - sq).abs() <= 1e-12, "seed {seed}: {got_sq} vs {sq}");
            assert!((got_sq * tp as f64 - pooled[t].iou_sum).abs() <= 1e-12);
            assert!((report.pq[t].unwrap() - dq * sq).abs() <= 1e-12);
            pqs.push(dq * sq);
        }
        if let Some(m) = report.mpq {
            assert!((m - pqs.iter().sum::<f64>() / pqs.len() as f64).abs() <= 1e-12);
        }
    }
}

#[test]
fn matching_is_unique() {
    for seed in 0..100u64 {
        let (gt, pred) = fixture_pair(3, 32, 32, 3, 1000 + seed);
        for (g, p) in gt.iter().zip(&pred) {
            let m = match_instances(g, p, 3).unwrap();
            let mut seen_gt = BTreeSet::new();
            let mut seen_pred = BTreeSet::new();
            for pair in m.classes.iter().flat_map(|c| &c.tp) {
                assert!(seen_gt.insert(pair.gt) && seen_pred.insert(pair.pred));
                assert!(2 * pair.intersection > pair.union);
            }
        }
    }
}

#[test]
fn worked_pq_case() {
    // gt instance 1: 5 px. pred instance 7 covers 4 of them: IoU 4/5 = 0.8.
    // gt instance 2 has no prediction (FN); pred instance 9 is spurious (FP).
    let gt = PatchLabels::new(
        2,
        8,
        vec![1, 1, 1, 1, 1, 0, 2, 2, 0, 0, 0, 0, 0, 0, 0, 0],
        vec![1, 1, 1, 1, 1, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0],
    );
    let pred = PatchLabels::new(
        2,
        8,
        vec![7, 7, 7, 7, 0, 0, 0, 0, 0, 0, 0, 0, 9, 9, 0, 0],
        vec![1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0],
    );
    let m = match_instances(&gt, &pred, 1).unwrap();
    let pq = pq_per_class(&m, 1).unwrap();
    assert_eq!(pq.dq, 0.5);
    assert_eq!(pq.sq, 0.8);
    assert!((pq.pq - 0.4).abs() < 1e-15);
    assert_eq!(mpq(&[m], 1).unwrap(), pq.pq);
}

#[test]
fn worked_r2_case_through_evaluate() {
    // Class-1 counts per patch: gt [1, 2, 3], pred [3, 2, 1].
    let blobs = |n: usize| {
        let mut ids = vec![0u32; 16];
        let mut classes = vec![0u16; 16];
        for k in 0..n {
            ids[k * 4] = k as u32 + 1;
            classes[k * 4] = 1;
        }
        PatchLabels::new(4, 4, ids, classes)
    };
    let gt = label_set(vec![blobs(1), blobs(2), blobs(3)], 1);
    let pred = label_set(vec![blobs(3), blobs(2), blobs(1)], 1);
    let report = evaluate(&gt, &pred, Aggregation::Dataset).unwrap();
    assert_eq!(report.r2[0], Some(-3.0));
    assert_eq!(report.multi_r2, Some(-3.0));
    assert_eq!(report.counts.gt_total, [6]);
}

#[test]
fn gt_against_itself_is_perfect() {
    for seed in 0..20u64 {
        let (gt, _) = fixture_pair(16, 32, 32, 3, seed);
        let set = label_set(gt, 3);
        let report = evaluate(&set, &set, Aggregation::Dataset).unwrap();
        for t in 0..3 {
            if report.counts.gt_total[t] > 0 {
                assert_eq!(report.pq[t], Some(1.0));
            }
        }
        assert_eq!(report.mpq, Some(1.0));
        assert_eq!(report.multi_r2, Some(1.0));
        let per_image = evaluate(&set, &set, Aggregation::PerImage).unwrap();
        assert_eq!(per_image.mpq, Some(1.0));
    }
}

#[test]
fn empty_prediction_scores_zero() {
    let (gt, _) = fixture_pair(6, 32, 32, 2, 5);
    let empty = gt.iter().map(|p| PatchLabels::background(p.height(), p.width())).collect();
    let report = evaluate(&label_set(gt, 2), &label_set(empty, 2), Aggregation::Dataset).unwrap();
    for t in 0..2 {
        if report.counts.gt_total[t] > 0 {
            assert_eq!(report.pq[t], Some(0.0));
            assert_eq!(report.tp[t], 0);
        }
    }
}

#[test]
fn absent_classes_are_undefined() {
    let set = label_set(vec![PatchLabels::background(4, 4); 3], 2);
    let report = evaluate(&set, &set, Aggregation::Dataset).unwrap();
    assert_eq!(report.pq, [None, None]);
    assert_eq!(report.mpq, None);
    assert_eq!(report.r2_degenerate, [true, true]);
    assert_eq!(report.multi_r2, None);
    assert_eq!(multi_r2(&report.r2), Err(MetricsError::AllDegenerate));
}

#[test]
fn mismatched_patch_counts() {
    let a = label_set(vec![PatchLabels::background(4, 4); 3], 2);
    let b = label_set(vec![PatchLabels::background(4, 4); 2], 2);
    assert!(matches!(evaluate(&a, &b, Aggregation::Dataset), Err(MetricsError::ShapeMismatch(_))));
}

#[test]
fn report_serializes_with_stable_fields() {
    let (gt, pred) = fixture_pair(4, 32, 32, 2, 9);
    let report = evaluate(&label_set(gt, 2), &label_set(pred, 2), Aggregation::Dataset).unwrap();
    let json: serde_json::Value = serde_json::from_str(&report.to_json()).unwrap();
    for key in ["pq", "dq", "sq", "tp", "fp", "fn", "mpq", "r2", "r2_degenerate", "multi_r2", "counts"] {
        assert!(json.get(key).is_some(), "missing {key}");
    }
    let csv = report.to_csv();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("class,pq,dq,sq,tp,fp,fn,r2,r2_degenerate,gt_total,pred_total\n"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn invariant_under_relabeling(seed in any::<u64>(), agg in prop_oneof![Just(Aggregation::Dataset), Just(Aggregation::PerImage)]) {
        let (gt, pred) = fixture_pair(5, 32, 32, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let gt2: Vec<_> = gt.iter().map(|p| relabel_shuffled(p, &mut rng)).collect();
        let pred2: Vec<_> = pred.iter().map(|p| relabel_shuffled(p, &mut rng)).collect();
        let a = evaluate(&label_set(gt, 3), &label_set(pred, 3), agg).unwrap();
        let b = evaluate(&label_set(gt2, 3), &label_set(pred2, 3), agg).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn invariant_under_shared_augmentation(seed in any::<u64>(), op_index in 0usize..6) {
        let op = AugmentOp::ALL[op_index];
        let (gt, pred) = fixture_pair(5, 32, 24, 3, seed);
        let gt2: Vec<_> = gt.iter().map(|p| augment_labels(p, op)).collect();
        let pred2: Vec<_> = pred.iter().map(|p| augment_labels(p, op)).collect();
        let a = evaluate(&label_set(gt, 3), &label_set(pred, 3), Aggregation::Dataset).unwrap();
        let b = evaluate(&label_set(gt2, 3), &label_set(pred2, 3), Aggregation::Dataset).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn extra_false_positive_never_raises_pq(tp in 0u64..20, fp in 0u64..20, fn_ in 0u64..20, mean_iou in 0.5001f64..1.0) {
        prop_assume!(tp + fp + fn_ > 0);
        let base = ClassTally { tp, fp, fn_, iou_sum: mean_iou * tp as f64 };
        let worse = ClassTally { fp: fp + 1, ..base };
        let (a, b) = (base.pq(1).unwrap(), worse.pq(1).unwrap());
        prop_assert!(b.pq <= a.pq);
        prop_assert_eq!(a.pq, a.dq * a.sq);
        prop_assert!((0.0..=1.0).contains(&a.pq));
    }
}
