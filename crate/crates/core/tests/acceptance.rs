//! Acceptance checks. Runs as a plain binary so every criterion prints one
//! PASS/FAIL line; exits non-zero if any criterion fails.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use nucleiquant::dataset::{augment_labels, AugmentOp, LabelSet};
use nucleiquant::labels::PatchLabels;
use nucleiquant::metrics::{evaluate, match_instances, Aggregation, MetricsReport};
use nucleiquant::mgtunet::{full_suite, images_to_tensor, targets_from_labels, train, NetConfig, Network, TrainConfig};
use nucleiquant::nn::grad_check::GradCheckConfig;
use nucleiquant::nn::mish::mish;
use nucleiquant::nn::{
    conv_output_extent, groupnorm_forward, transp_output_extent, GroupNormParams, OptimizerState, Tensor4,
};
use nucleiquant::npy::{npy_header, read_npy, write_npy, DType, NpyData};
use nucleiquant::synthetic::{fixture_pair, relabel_shuffled, synthetic_patch_set};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(start: Instant, limit: Duration) -> Result<Duration, String> {
    let t = start.elapsed();
    ensure(t < limit, format!("took {t:.1?}, limit {limit:?}"))?;
    Ok(t)
}

fn label_set(patches: Vec<PatchLabels>, c: usize) -> LabelSet {
    LabelSet {
        num_classes: c,
        patches,
    }
}

fn fixture(name: &str) -> Vec<u8> {
    std::fs::read(format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn paper_scale_statement() -> Outcome {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../README.md");
    let readme = std::fs::read_to_string(path).map_err(|e| format!("README: {e}"))?;
    for needle in ["0.6254", "0.6359", "0.8695", "not reproducible"] {
        ensure(readme.contains(needle), format!("README lacks {needle:?}"))?;
    }
    Ok("full-scale PQ/mPQ/R2 not attempted; README says so; property suites below substitute".into())
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let cfg = GradCheckConfig::default();
    ensure(cfg.h == 1e-5 && cfg.tol == 1e-5, "unexpected defaults")?;
    let reports = full_suite(&cfg);
    for op in ["conv2d", "transp_conv2d", "mish", "groupnorm", "smooth_l1", "mgtunet"] {
        let n = reports.iter().filter(|r| r.op.split(' ').next() == Some(op)).count();
        ensure(n >= 3, format!("{op}: {n} shapes"))?;
    }
    for r in &reports {
        let want = if r.op.starts_with("mgtunet") { 1e-4 } else { 1e-5 };
        ensure(r.tol == want, format!("{} tol {}", r.op, r.tol))?;
        ensure(r.passed, format!("{} max rel err {:.3e}", r.op, r.max_rel_err()))?;
    }
    let worst = reports.iter().map(|r| r.max_rel_err() / r.tol).fold(0.0, f64::max);
    let t = within(start, Duration::from_secs(60))?;
    Ok(format!("{} checks, worst err/tol {worst:.3}, {t:.1?} (< 60s)", reports.len()))
}

fn extent_table() -> Outcome {
    ensure(conv_output_extent(256, 3, 1, 1) == Some(256), "(256,3,1,1)")?;
    ensure(conv_output_extent(256, 3, 1, 2) == Some(128), "(256,3,1,2)")?;
    ensure(transp_output_extent(128, 2, 0, 2) == Some(256), "transposed 128")?;
    let mut chain = vec![256];
    let mut e = 256;
    for _ in 0..4 {
        e = conv_output_extent(e, 3, 1, 2).unwrap();
        chain.push(e);
    }
    for _ in 0..4 {
        e = transp_output_extent(e, 2, 0, 2).unwrap();
        chain.push(e);
    }
    ensure(chain == [256, 128, 64, 32, 16, 32, 64, 128, 256], format!("{chain:?}"))?;
    let net = Network::build(NetConfig {
        base_width: 8,
        group_count: 4,
        ..NetConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let y = net
        .forward(&Tensor4::zeros([1, 3, 256, 256]))
        .map_err(|e| e.to_string())?;
    ensure(y.shape() == [1, 7, 256, 256], format!("network output {:?}", y.shape()))?;
    Ok(format!("{chain:?}; network 256x256 -> {:?}", y.shape()))
}

fn class_ids(p: &PatchLabels, t: u16) -> BTreeSet<u32> {
    p.instances
        .ids
        .iter()
        .zip(&p.classes.classes)
        .filter(|(&i, &c)| i != 0 && c == t)
        .map(|(&i, _)| i)
        .collect()
}

/// Exhaustive (gt, pred) enumeration: per class (tp, fp, fn, iou_sum).
fn brute_force(gt: &PatchLabels, pred: &PatchLabels, c: usize) -> Vec<(u64, u64, u64, f64)> {
    (1..=c as u16)
        .map(|t| {
            let gts = class_ids(gt, t);
            let preds = class_ids(pred, t);
            let mut matched_gt = BTreeSet::new();
            let mut matched_pred = BTreeSet::new();
            let mut iou_sum = 0.0;
            for &g in &gts {
                for &q in &preds {
                    let (mut inter, mut union) = (0usize, 0usize);
                    for (&a, &b) in gt.instances.ids.iter().zip(&pred.instances.ids) {
                        inter += usize::from(a == g && b == q);
                        union += usize::from(a == g || b == q);
                    }
                    if 2 * inter > union {
                        matched_gt.insert(g);
                        matched_pred.insert(q);
                        iou_sum += inter as f64 / union as f64;
                    }
                }
            }
            let tp = matched_gt.len() as u64;
            (tp, (preds.len() - matched_pred.len()) as u64, (gts.len() - matched_gt.len()) as u64, iou_sum)
        })
        .collect()
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let c = 2;
    let fixtures = 200u64;
    let mut worst = 0.0f64;
    for seed in 0..fixtures {
        let (gt, pred) = fixture_pair(4, 32, 32, c, seed);
        let mut totals = vec![(0u64, 0u64, 0u64, 0.0f64); c];
        for (g, p) in gt.iter().zip(&pred) {
            let m = match_instances(g, p, c).map_err(|e| e.to_string())?;
            for (t, o) in brute_force(g, p, c).into_iter().enumerate() {
                let cm = &m.classes[t];
                ensure(
                    (cm.tp.len() as u64, cm.fp.len() as u64, cm.fn_.len() as u64) == (o.0, o.1, o.2),
                    format!("seed {seed} class {} counts", t + 1),
                )?;
                let iou: f64 = cm.tp.iter().map(|x| x.iou).sum();
                worst = worst.max((iou - o.3).abs());
                ensure((iou - o.3).abs() <= 1e-12, format!("seed {seed} iou sum"))?;
                totals[t].0 += o.0;
                totals[t].1 += o.1;
                totals[t].2 += o.2;
                totals[t].3 += o.3;
            }
        }
        let r = evaluate(&label_set(gt, c), &label_set(pred, c), Aggregation::Dataset).map_err(|e| e.to_string())?;
        for (t, &(tp, fp, fn_, iou_sum)) in totals.iter().enumerate() {
            ensure((r.tp[t], r.fp[t], r.fn_[t]) == (tp, fp, fn_), format!("seed {seed} report counts"))?;
            if tp + fp + fn_ == 0 {
                ensure(r.pq[t].is_none(), "undefined class reported")?;
                continue;
            }
            let dq = tp as f64 / (tp as f64 + 0.5 * (fp + fn_) as f64);
            ensure(r.dq[t] == Some(dq), format!("seed {seed} dq"))?;
            let sum = r.sq[t].unwrap() * tp as f64;
            worst = worst.max((sum - iou_sum).abs());
            ensure((sum - iou_sum).abs() <= 1e-12, format!("seed {seed} sq"))?;
        }
    }
    let t = within(start, Duration::from_secs(30))?;
    Ok(format!("{fixtures} fixtures exact counts, max IoU-sum diff {worst:.1e} (<= 1e-12), {t:.1?} (< 30s)"))
}

fn worked_values() -> Outcome {
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
    let r = evaluate(&label_set(vec![gt], 1), &label_set(vec![pred], 1), Aggregation::Dataset).map_err(|e| e.to_string())?;
    ensure((r.tp[0], r.fp[0], r.fn_[0]) == (1, 1, 1), "tp/fp/fn")?;
    ensure(r.sq[0] == Some(0.8) && r.dq[0] == Some(0.5), "sq/dq")?;
    let pq = r.pq[0].unwrap();
    ensure((pq - 0.4).abs() <= 1e-15, format!("pq {pq}"))?;

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
    let r = evaluate(&gt, &pred, Aggregation::Dataset).map_err(|e| e.to_string())?;
    ensure(r.r2[0] == Some(-3.0), format!("r2 {:?}", r.r2[0]))?;
    Ok(format!("PQ {pq} (1 TP IoU 0.8, 1 FP, 1 FN); R2 {} for [1,2,3] vs [3,2,1]", r.r2[0].unwrap()))
}

fn perfect_prediction() -> Outcome {
    let mut checked = 0;
    for seed in 0..20u64 {
        let (gt, _) = fixture_pair(16, 32, 32, 3, seed);
        let set = label_set(gt, 3);
        for agg in [Aggregation::Dataset, Aggregation::PerImage] {
            let r = evaluate(&set, &set, agg).map_err(|e| e.to_string())?;
            for t in 0..3 {
                let present = r.counts.gt_total[t] > 0;
                ensure(!present || r.pq[t] == Some(1.0), format!("seed {seed} class {} pq {:?}", t + 1, r.pq[t]))?;
            }
            ensure(r.mpq == Some(1.0), format!("seed {seed} mpq {:?}", r.mpq))?;
            if agg == Aggregation::Dataset && r.r2_degenerate.iter().any(|d| !d) {
                ensure(r.multi_r2 == Some(1.0), format!("seed {seed} multi r2 {:?}", r.multi_r2))?;
                checked += 1;
            }
        }
    }
    ensure(checked > 0, "no non-degenerate fixture")?;
    Ok(format!("20 fixtures x 2 aggregations: PQ_t = mPQ = 1; multi-R2 = 1 on {checked}"))
}

fn invariance() -> Outcome {
    let eval = |g: Vec<PatchLabels>, p: Vec<PatchLabels>, agg| -> Result<MetricsReport, String> {
        evaluate(&label_set(g, 3), &label_set(p, 3), agg).map_err(|e| e.to_string())
    };
    let mut cases = 0;
    for seed in 0..40u64 {
        let (gt, pred) = fixture_pair(5, 32, 24, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        for agg in [Aggregation::Dataset, Aggregation::PerImage] {
            let base = eval(gt.clone(), pred.clone(), agg)?;
            let g2 = gt.iter().map(|p| relabel_shuffled(p, &mut rng)).collect();
            let p2 = pred.iter().map(|p| relabel_shuffled(p, &mut rng)).collect();
            ensure(eval(g2, p2, agg)? == base, format!("seed {seed}: relabeling changed metrics"))?;
            for op in AugmentOp::ALL {
                let g2 = gt.iter().map(|p| augment_labels(p, op)).collect();
                let p2 = pred.iter().map(|p| augment_labels(p, op)).collect();
                ensure(eval(g2, p2, agg)? == base, format!("seed {seed}: {op:?} changed metrics"))?;
                cases += 1;
            }
        }
    }
    Ok(format!("exact equality under id permutation and {cases} shared augmentations"))
}

fn codec() -> Outcome {
    let names = [
        "u8_2x2.npy", "u16_empty.npy", "i64_3.npy", "f32_2x3.npy", "f64_scalar.npy", "f64_1x2x3.npy", "u16_v2.npy",
        "tiny_images.npy", "tiny_labels.npy",
    ];
    for name in names {
        let bytes = fixture(name);
        let arr = read_npy(&bytes).map_err(|e| format!("{name}: {e}"))?;
        let again = write_npy(&arr);
        ensure(read_npy(&again).as_ref() == Ok(&arr), format!("{name}: round trip"))?;
        // The v2 file is re-emitted as v1.0, so only v1.0 inputs compare byte-wise.
        ensure(name == "u16_v2.npy" || again == bytes, format!("{name}: bytes differ"))?;
    }
    ensure(
        read_npy(&fixture("u8_2x2.npy")).map(|a| a.data) == Ok(NpyData::U8(vec![0, 1, 2, 3])),
        "u8_2x2 contents",
    )?;
    ensure(
        npy_header(DType::U16, &[4981, 256, 256, 2], false) == fixture("lizard_labels_header.bin"),
        "labels header",
    )?;
    ensure(
        npy_header(DType::U8, &[4981, 256, 256, 3], false) == fixture("lizard_images_header.bin"),
        "images header",
    )?;
    Ok(format!("{} reference files parse and round-trip; lizard headers byte-identical", names.len()))
}

fn toy_training() -> Outcome {
    let set = synthetic_patch_set(8, 32, 32, 6, 7);
    let images: Vec<_> = (0..set.len()).map(|i| set.image(i)).collect();
    let images = images_to_tensor(&images).map_err(|e| e.to_string())?;
    let targets = targets_from_labels(&set.label_set().patches, 6).map_err(|e| e.to_string())?;
    let run = || {
        let start = Instant::now();
        let mut net = Network::build(NetConfig {
            base_width: 8,
            group_count: 4,
            input_extent: (32, 32),
            seed: 7,
            ..NetConfig::default()
        })
        .map_err(|e| e.to_string())?;
        let cfg = TrainConfig {
            steps: 50,
            batch: 8,
            seed: 7,
            ..TrainConfig::default()
        };
        let out = train(&mut net, &images, &targets, &mut OptimizerState::sgd(0.05), &cfg, |_, _| {})
            .map_err(|e| e.to_string())?;
        Ok::<_, String>((out, within(start, Duration::from_secs(120))?))
    };
    let (first, t) = run()?;
    ensure(first.steps_taken == 50, format!("stopped after {} steps", first.steps_taken))?;
    let (initial, last) = (first.losses[0], *first.losses.last().unwrap());
    let ratio = last / initial;
    ensure(ratio <= 0.5, format!("final/initial {ratio:.4}"))?;
    let (second, _) = run()?;
    let same = first.losses.iter().zip(&second.losses).all(|(a, b)| a.to_bits() == b.to_bits());
    ensure(same && first.losses.len() == second.losses.len(), "loss trace differs between runs")?;
    Ok(format!("50 steps: {initial:.6} -> {last:.6}, ratio {ratio:.4} (<= 0.5), bit-identical rerun, {t:.1?} (< 2 min)"))
}

fn groupnorm_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_mean, mut worst_var) = (0.0f64, 0.0f64);
    for groups in [1, 2, 4, 8] {
        let x = Tensor4::randn([2, 16, 8, 8], &mut rng);
        let params = GroupNormParams::new(16, groups);
        let (_, cache) = groupnorm_forward(&x, &params).map_err(|e| e.to_string())?;
        let per_group = x.len() / (2 * groups);
        for z in cache.x_hat.data().chunks(per_group) {
            let m = z.iter().sum::<f64>() / z.len() as f64;
            let v = z.iter().map(|a| (a - m).powi(2)).sum::<f64>() / z.len() as f64;
            worst_mean = worst_mean.max(m.abs());
            worst_var = worst_var.max((v - 1.0).abs());
        }
    }
    ensure(worst_mean <= 1e-10, format!("|mean| {worst_mean:.2e} > 1e-10"))?;
    ensure(worst_var <= 1e-6, format!("|var - 1| {worst_var:.2e} > 1e-6"))?;
    Ok(format!("G in {{1,2,4,8}}: max |mean| {worst_mean:.1e} (<= 1e-10), max |var-1| {worst_var:.1e} (<= 1e-6)"))
}

// tanh(ln(1 + e)) to 40 digits.
const MISH_ONE: f64 = 0.865_098_388_267_310_346_116_233_449_256_312_4;

fn mish_points() -> Outcome {
    ensure(mish(0.0) == 0.0, "f(0) != 0")?;
    let d1 = (mish(1.0) - MISH_ONE).abs();
    ensure(d1 <= 1e-9, format!("f(1) off by {d1:e}"))?;
    let d50 = (mish(50.0) - 50.0).abs();
    ensure(d50 <= 1e-9, format!("f(50)-50 = {d50:e}"))?;
    Ok(format!("f(0) = 0, |f(1) - oracle| {d1:.1e}, |f(50) - 50| {d50:.1e} (<= 1e-9)"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("paper-scale results", paper_scale_statement),
        ("gradient suite", gradient_suite),
        ("extent table", extent_table),
        ("metric oracle", metric_oracle),
        ("worked metric values", worked_values),
        ("perfect prediction", perfect_prediction),
        ("invariance", invariance),
        ("npy codec", codec),
        ("toy training", toy_training),
        ("groupnorm normalization", groupnorm_normalization),
        ("mish points", mish_points),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
