//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL line
//! per criterion and exits non-zero if any failed.
//!
//! `ACCEPTANCE_ONLY=1,2,5` restricts the run to the listed criteria.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use fsvod_cli::harness::{fewshot_seed, load_cells};
use fsvod_cli::{run_experiment, ExperimentConfig, ResultsTable, RunOptions};
use fsvod_core::adaptation::{adapt, pretrain, AdaptationConfig, PretrainConfig, Schedule};
use fsvod_core::aggregation::{aggregate_global, aggregate_memory, init_params as init_aggregation, relation_backward, relation_forward, AggregationConfig, MemoryEntry};
use fsvod_core::corpus::{generate_corpus, CorpusSpec, Source};
use fsvod_core::datasets::{build_base_dataset, is_clean, is_perfect, sample_balanced_fewshot};
use fsvod_core::detector::{backbone_backward, backbone_forward, backbone_input, init_params as init_detector, roi_features, roi_features_backward, DetectorConfig};
use fsvod_core::eval::{average_precision_50, gain, nms, Detection, GroundTruth};
use fsvod_core::head::{class_probabilities, cosine_scores, softmax, DetectionHead};
use fsvod_core::model::{memory_after, ModelConfig};
use fsvod_core::params::{Mat, ParamStore};
use fsvod_core::seed::{rng, Rng as SeedRng};
use fsvod_core::{
    AnnotatedObject, BaseMode, BoundingBox, ClassSplit, EvalReport, Frame, FrameAnnotation, Strategy, VideoModel, VideoRecord,
};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    dir
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn same_bits(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|((na, ma), (nb, mb))| {
            na == nb && ma.dim() == mb.dim() && ma.iter().zip(mb.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

fn mat_bits_eq(a: &Mat, b: &Mat) -> bool {
    a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn rand_mat(r: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| r.random_range(-1.0..1.0))
}

fn rand_box(r: &mut impl Rng, extent: f64) -> BoundingBox {
    let x1 = r.random_range(0.0..extent * 0.7);
    let y1 = r.random_range(0.0..extent * 0.7);
    let x2 = r.random_range(x1 + 2.0..extent);
    let y2 = r.random_range(y1 + 2.0..extent);
    BoundingBox::new(x1, y1, x2, y2).unwrap()
}

// ---------------------------------------------------------------- 1

fn report(strategy: &str, shot: usize, novel_pp: f64) -> EvalReport {
    EvalReport {
        strategy: strategy.into(),
        shot,
        split: "A".into(),
        seed: 0,
        per_class_ap50: BTreeMap::new(),
        gt_counts: BTreeMap::new(),
        excluded_classes: vec![],
        novel_map50: novel_pp / 100.0,
        base_map50: 0.0,
    }
}

fn criterion_1() -> Outcome {
    // weak-base novel-class mAP50 (%) of the published comparison table
    let cases = [
        ("joint", 1, 17.92, 17.02, 0.90),
        ("thaw", 1, 20.05, 17.02, 3.03),
        ("thaw", 3, 37.32, 27.72, 9.60),
    ];
    let mut got = Vec::new();
    for (strategy, shot, method, freeze, expected) in cases {
        let g = gain(&report(strategy, shot, method), &report("freeze", shot, freeze)).map_err(|e| e.to_string())?;
        let rounded = (g * 100.0).round() / 100.0;
        check(
            rounded == expected && (g - expected).abs() < 1e-9,
            format!("{strategy} {shot}-shot gain {g} != {expected}"),
        )?;
        got.push(format!("{strategy}/{shot}: {rounded:+.2}"));
    }
    Ok(got.join(", "))
}

// ---------------------------------------------------------------- 2

fn oracle_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let h = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = w * h;
    let area = |x: &BoundingBox| (x.x2 - x.x1) * (x.y2 - x.y1);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Repeatedly take the best remaining box and drop everything overlapping it.
fn oracle_nms(boxes: &[BoundingBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..boxes.len()).collect();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = alive[0];
        for &i in &alive {
            if scores[i] > scores[best] || (scores[i] == scores[best] && i < best) {
                best = i;
            }
        }
        kept.push(best);
        alive.retain(|&i| i != best && oracle_iou(&boxes[best], &boxes[i]) <= thr);
    }
    kept
}

/// Precision/recall points from scratch, AP as the sum over ranks of
/// recall increments times the best precision at any later rank.
fn oracle_ap(dets: &[Detection], gts: &[GroundTruth], class: u32) -> Option<f64> {
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class_id == class).collect();
    if gts.is_empty() {
        return None;
    }
    let mut dets: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class).collect();
    dets.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
    let mut used = vec![false; gts.len()];
    let mut tp = Vec::new();
    for d in &dets {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if g.video_id != d.video_id || g.frame_index != d.frame_index {
                continue;
            }
            let o = oracle_iou(&d.bbox, &g.bbox);
            if best.is_none_or(|(_, bo)| o > bo) {
                best = Some((j, o));
            }
        }
        let hit = matches!(best, Some((j, o)) if o >= 0.5 && !used[j]);
        if let Some((j, _)) = best.filter(|_| hit) {
            used[j] = true;
        }
        tp.push(hit);
    }
    let n = gts.len() as f64;
    let mut points = Vec::new();
    for k in 0..tp.len() {
        let hits = tp[..=k].iter().filter(|&&t| t).count() as f64;
        points.push((hits / n, hits / (k + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for k in 0..points.len() {
        let best_p = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (points[k].0 - prev) * best_p;
        prev = points[k].0;
    }
    Some(ap)
}

fn grid_box(r: &mut impl Rng) -> BoundingBox {
    let x1 = r.random_range(0..6) as f64 * 2.0;
    let y1 = r.random_range(0..6) as f64 * 2.0;
    let w = r.random_range(2..8) as f64 * 2.0;
    let h = r.random_range(2..8) as f64 * 2.0;
    BoundingBox::new(x1, y1, x1 + w, y1 + h).unwrap()
}

fn criterion_2() -> Outcome {
    let mut r = rng(2);
    let instances = 300;
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for _ in 0..instances {
        let n_gt = r.random_range(0..=5);
        let n_det = r.random_range(0..=10);
        let frames = r.random_range(1..=2);
        let gts: Vec<GroundTruth> = (0..n_gt)
            .map(|_| GroundTruth {
                video_id: "v".into(),
                frame_index: r.random_range(0..frames),
                class_id: r.random_range(0..2),
                bbox: grid_box(&mut r),
            })
            .collect();
        let dets: Vec<Detection> = (0..n_det)
            .map(|_| {
                // near a ground truth half of the time, so matches happen
                let bbox = match gts.get(r.random_range(0..2 * n_gt.max(1))) {
                    Some(g) => {
                        let mut j = || r.random_range(-2..=2) as f64;
                        let (dx, dy, dw, dh) = (j(), j(), j(), j());
                        let (x1, y1) = (g.bbox.x1 + dx, g.bbox.y1 + dy);
                        BoundingBox {
                            x1,
                            y1,
                            x2: (g.bbox.x2 + dx + dw).max(x1 + 2.0),
                            y2: (g.bbox.y2 + dy + dh).max(y1 + 2.0),
                        }
                    }
                    None => grid_box(&mut r),
                };
                Detection {
                    video_id: "v".into(),
                    frame_index: r.random_range(0..frames),
                    class_id: r.random_range(0..2),
                    bbox,
                    // coarse scores so that ties occur
                    score: r.random_range(1..6) as f64 / 6.0,
                }
            })
            .collect();
        for class in 0..2 {
            let got = average_precision_50(&dets, &gts, class);
            let want = oracle_ap(&dets, &gts, class);
            match (got, want) {
                (None, None) => {}
                (Some(a), Some(b)) => {
                    worst = worst.max((a - b).abs());
                    compared += 1;
                    check((a - b).abs() <= 1e-9, format!("AP {a} vs oracle {b}"))?;
                }
                _ => return Err(format!("AP presence differs: {got:?} vs {want:?}")),
            }
        }
    }
    check(compared >= 100, format!("only {compared} AP instances had ground truth"))?;

    let mut nms_cases = 0;
    for _ in 0..instances {
        let n = r.random_range(0..=12);
        let boxes: Vec<BoundingBox> = (0..n).map(|_| grid_box(&mut r)).collect();
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(1..8) as f64 / 8.0).collect();
        let thr = [0.3, 0.5, 0.7][r.random_range(0..3)];
        let got = nms(&boxes, &scores, thr);
        let want = oracle_nms(&boxes, &scores, thr);
        check(got == want, format!("NMS {got:?} vs oracle {want:?}"))?;
        nms_cases += 1;
    }
    Ok(format!("{compared} AP instances (max |diff| {worst:.1e}), {nms_cases} NMS instances identical"))
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let corpus = generate_corpus(&CorpusSpec {
        videos_per_class: 4,
        min_frames: 6,
        max_frames: 8,
        seed: 3,
        ..CorpusSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let split = ClassSplit::new("A", [0, 1, 2, 3, 5, 7, 9], [4, 6, 8]).map_err(|e| e.to_string())?;
    let mut model_config = ModelConfig::default();
    model_config.aggregation.global_frames = 2;
    model_config.aggregation.memory_capacity = 40;
    let base = build_base_dataset(&corpus, &split, BaseMode::Weak, 2).map_err(|e| e.to_string())?;
    let base_videos = base.resolve(&corpus).map_err(|e| e.to_string())?;
    let pre_config = PretrainConfig {
        schedule: Schedule {
            iterations: 60,
            warmup_iterations: 5,
            ..Schedule::default()
        },
        frames_per_video: 4,
    };
    let pretrained = pretrain(&base, &base_videos, &model_config, &pre_config, 3).map_err(|e| e.to_string())?.model;
    let fewshot = sample_balanced_fewshot(&corpus, &split, 1, 4).map_err(|e| e.to_string())?;
    let videos = fewshot.resolve(&corpus).map_err(|e| e.to_string())?;
    let config = AdaptationConfig {
        finetune_iterations: 40,
        thaw_extra_one_shot: 20,
        frames_per_video: 4,
        ..AdaptationConfig::default()
    };
    let seed = 99;
    let run = |strategy, config: &AdaptationConfig| adapt(&pretrained, &fewshot, &videos, strategy, config, seed).map_err(|e| e.to_string());
    let freeze = run(Strategy::Freeze, &config)?;
    let thaw = run(Strategy::Thaw, &config)?;
    let thaw0 = run(
        Strategy::Thaw,
        &AdaptationConfig {
            thaw_extra_one_shot: 0,
            ..config.clone()
        },
    )?;

    check(same_bits(&freeze.model.extractor, &pretrained.extractor), "Freeze changed the extractor")?;
    check(
        freeze.record.before.extractor == freeze.record.after.extractor,
        "Freeze run record shows an extractor change",
    )?;
    check(freeze.model.head_digest() != pretrained.head_digest(), "Freeze did not train the head")?;
    let phase1 = thaw.phase1.as_ref().ok_or("Thaw has no phase-1 checkpoint")?;
    check(
        phase1.extractor_digest() == freeze.model.extractor_digest() && phase1.head_digest() == freeze.model.head_digest(),
        "Thaw phase 1 differs from Freeze",
    )?;
    check(thaw.record.phase1.as_ref() == Some(&freeze.record.after), "Thaw phase-1 digests differ from Freeze's")?;
    check(
        thaw.model.extractor_digest() != freeze.model.extractor_digest(),
        "Thaw's second phase did not touch the extractor",
    )?;
    check(
        same_bits(&thaw0.model.extractor, &freeze.model.extractor) && same_bits(&thaw0.model.head.params, &freeze.model.head.params),
        "Thaw with zero extra iterations differs from Freeze",
    )?;
    Ok(format!("freeze/thaw/thaw0 adapted in {:.1?}", start.elapsed()))
}

// ---------------------------------------------------------------- 4

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-7)
}

/// Central differences of `loss` over every entry of every tensor whose name
/// passes `select`; returns the worst relative error against `grads`.
fn fd_params(
    params: &ParamStore,
    grads: &ParamStore,
    select: impl Fn(&str) -> bool,
    loss: impl Fn(&ParamStore) -> f64,
) -> Result<(f64, usize), String> {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).filter(|n| select(n)).collect();
    let mut p = params.clone();
    for name in names {
        let (rows, cols) = params.get(&name).dim();
        for i in 0..rows {
            for j in 0..cols {
                let orig = p.get(&name)[[i, j]];
                p.get_mut(&name)[[i, j]] = orig + h;
                let up = loss(&p);
                p.get_mut(&name)[[i, j]] = orig - h;
                let down = loss(&p);
                p.get_mut(&name)[[i, j]] = orig;
                let num = (up - down) / (2.0 * h);
                let ana = grads.try_get(&name).map_or(0.0, |g| g[[i, j]]);
                let e = rel_err(ana, num);
                if e >= 1e-4 {
                    return Err(format!("{name}[{i},{j}]: analytic {ana} vs numeric {num}"));
                }
                worst = worst.max(e);
                count += 1;
            }
        }
    }
    Ok((worst, count))
}

fn fd_input(x: &Mat, dx: &Mat, loss: impl Fn(&Mat) -> f64) -> Result<f64, String> {
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut xp = x.clone();
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            xp[[i, j]] = x[[i, j]] + h;
            let up = loss(&xp);
            xp[[i, j]] = x[[i, j]] - h;
            let down = loss(&xp);
            xp[[i, j]] = x[[i, j]];
            let num = (up - down) / (2.0 * h);
            let e = rel_err(dx[[i, j]], num);
            if e >= 1e-4 {
                return Err(format!("input[{i},{j}]: analytic {} vs numeric {num}", dx[[i, j]]));
            }
            worst = worst.max(e);
        }
    }
    Ok(worst)
}

fn dot(a: &Mat, b: &Mat) -> f64 {
    (a * b).sum()
}

fn check_cosine_head() -> Result<String, String> {
    let mut r = rng(41);
    let head = DetectionHead::new_fully_connected(6, vec![0, 1, 2], 5).to_cosine(15.0).map_err(|e| e.to_string())?;
    let mut head = head;
    for (_, m) in head.params.iter_mut() {
        let noise = rand_mat(&mut r, m.nrows(), m.ncols());
        *m += &noise;
    }
    let x = rand_mat(&mut r, 4, 6);
    let (out, cache) = head.forward(&x);
    let pl = rand_mat(&mut r, out.logits.nrows(), out.logits.ncols());
    let pd = rand_mat(&mut r, out.deltas.nrows(), out.deltas.ncols());
    let (grads, dx) = head.backward(&cache, &pl, &pd);
    let loss_with = |h: &DetectionHead, x: &Mat| {
        let (o, _) = h.forward(x);
        dot(&o.logits, &pl) + dot(&o.deltas, &pd)
    };
    let (wp, n) = fd_params(&head.params, &grads, |_| true, |p| {
        let h = DetectionHead {
            params: p.clone(),
            ..head.clone()
        };
        loss_with(&h, &x)
    })?;
    let wx = fd_input(&x, &dx, |x| loss_with(&head, x))?;
    Ok(format!("cosine head {n} params max rel {:.1e}", wp.max(wx)))
}

fn check_relation(location: bool) -> Result<String, String> {
    let mut r = rng(if location { 43 } else { 42 });
    let cfg = AggregationConfig {
        attention_dim: 3,
        geometry_hidden: 2,
        ..AggregationConfig::default()
    };
    let d = 5;
    let mut p = ParamStore::new();
    init_aggregation(&cfg, d, &mut r, &mut p);
    let variant = if location { "n2" } else { "n1" };
    let prefix = format!("agg.{variant}.0");
    let wo = rand_mat(&mut r, 3, d);
    p.get_mut(&format!("{prefix}.wo")).assign(&wo);
    let x = rand_mat(&mut r, 3, d);
    let y = rand_mat(&mut r, 4, d);
    let qb: Vec<BoundingBox> = (0..3).map(|_| rand_box(&mut r, 64.0)).collect();
    let kb: Vec<BoundingBox> = (0..4).map(|_| rand_box(&mut r, 64.0)).collect();
    let boxes = location.then_some((&qb[..], &kb[..]));
    let probe = rand_mat(&mut r, 3, d);
    let (_, cache) = relation_forward(&p, &prefix, &x, &y, boxes).map_err(|e| e.to_string())?;
    let mut grads = p.zeros_like();
    let dx = relation_backward(&p, cache.as_ref().ok_or("no cache")?, &probe, &mut grads);
    let loss = |p: &ParamStore, x: &Mat| dot(&relation_forward(p, &prefix, x, &y, boxes).unwrap().0, &probe);
    let (wp, n) = fd_params(&p, &grads, |name| name.starts_with(&prefix), |p| loss(p, &x))?;
    let wx = fd_input(&x, &dx, |x| loss(&p, x))?;
    Ok(format!("{} relation {n} params max rel {:.1e}", if location { "location-based" } else { "location-free" }, wp.max(wx)))
}

fn check_backbone_roi() -> Result<String, String> {
    let mut r = rng(44);
    let config = DetectorConfig {
        height: 32,
        width: 32,
        backbone_channels: vec![3, 4, 4],
        rpn_channels: 4,
        feature_dim: 5,
        ..DetectorConfig::default()
    };
    let mut params = init_detector(&config, &mut r);
    for name in ["backbone.conv0.b", "backbone.conv1.b", "backbone.conv2.b", "roi.fc.b"] {
        let m = params.get_mut(name);
        let noise = rand_mat(&mut r, m.nrows(), m.ncols()) * 0.1;
        *m += &noise;
    }
    let pixels: Vec<u8> = (0..32 * 32 * 3).map(|_| r.random_range(0..=255)).collect();
    let frame = Frame::from_pixels(32, 32, 3, pixels).map_err(|e| e.to_string())?;
    let input = backbone_input(&frame, &config).map_err(|e| e.to_string())?;
    let boxes: Vec<BoundingBox> = (0..3).map(|_| rand_box(&mut r, 31.0)).collect();
    let forward = |p: &ParamStore| {
        let (map, bc) = backbone_forward(p, &config, &input);
        let (feat, rc) = roi_features(p, &config, &map, &boxes);
        (feat, bc, rc)
    };
    let (feat, bc, rc) = forward(&params);
    let probe = rand_mat(&mut r, feat.nrows(), feat.ncols());
    let mut grads = params.zeros_like();
    let dmap = roi_features_backward(&params, &rc, &probe, &mut grads);
    backbone_backward(&params, &bc, &dmap, &mut grads);
    let (worst, n) = fd_params(
        &params,
        &grads,
        |name| name.starts_with("backbone.") || name.starts_with("roi."),
        |p| dot(&forward(p).0, &probe),
    )?;
    Ok(format!("backbone+ROI {n} params max rel {worst:.1e}"))
}

fn criterion_4() -> Outcome {
    let mut parts = vec![check_cosine_head()?, check_relation(false)?, check_relation(true)?, check_backbone_roi()?];

    let mut r = rng(45);
    let mut worst_sum: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.random_range(1..20);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let sigma = r.random_range(0.1..50.0);
        let p = class_probabilities(&scores, sigma);
        worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
    }
    check(worst_sum <= 1e-6, format!("probabilities sum off by {worst_sum}"))?;
    parts.push(format!("prob sums within {worst_sum:.1e}"));

    let head = DetectionHead::new_fully_connected(8, vec![0, 1, 2, 3], 6).to_cosine(15.0).map_err(|e| e.to_string())?;
    let w = head.params.get("cls.w").clone();
    let mut checked = 0;
    for _ in 0..200 {
        let x: Vec<f64> = (0..8).map(|_| r.random_range(-3.0..3.0)).collect();
        let reference = class_probabilities(&cosine_scores(&w, &x), 15.0);
        let xm = Mat::from_shape_vec((1, 8), x.clone()).unwrap();
        let head_ref = softmax(&head.forward(&xm).0.logits.row(0).to_vec());
        for k in -12i32..=12 {
            let s = 2f64.powi(k);
            let scaled: Vec<f64> = x.iter().map(|v| v * s).collect();
            let p = class_probabilities(&cosine_scores(&w, &scaled), 15.0);
            check(
                p.iter().zip(&reference).all(|(a, b)| a.to_bits() == b.to_bits()),
                format!("scale 2^{k} changed the probabilities"),
            )?;
            let hp = softmax(&head.forward(&Mat::from_shape_vec((1, 8), scaled).unwrap()).0.logits.row(0).to_vec());
            check(
                hp.iter().zip(&head_ref).all(|(a, b)| a.to_bits() == b.to_bits()),
                format!("scale 2^{k} changed the head's probabilities"),
            )?;
            checked += 1;
        }
    }
    parts.push(format!("{checked} power-of-two rescalings bit-identical"));
    Ok(parts.join("; "))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut r = rng(51);
    let cfg = AggregationConfig::default();
    let d = 8;
    let mut fresh = ParamStore::new();
    init_aggregation(&cfg, d, &mut r, &mut fresh);
    let mut trained = fresh.clone();
    for (name, m) in trained.iter_mut() {
        if name.ends_with(".wo") {
            let noise = rand_mat(&mut r, m.nrows(), m.ncols());
            m.assign(&noise);
        }
    }
    let memory_of = |r: &mut SeedRng, n: usize| -> Vec<MemoryEntry> {
        (0..n)
            .map(|i| MemoryEntry {
                feature: (0..d).map(|_| r.random_range(0.01..1.0)).collect(),
                bbox: rand_box(r, 64.0),
                frame_index: i,
            })
            .collect()
    };
    let run = |p: &ParamStore, x: &Mat, g: &Mat, boxes: &[BoundingBox], mem: &[MemoryEntry]| {
        let (xg, _) = aggregate_global(p, &cfg, x, g).unwrap();
        let refs: Vec<&MemoryEntry> = mem.iter().collect();
        let (xm, _) = aggregate_memory(p, &cfg, &xg, boxes, &refs).unwrap();
        (xg, xm)
    };
    for trial in 0..50 {
        let n = r.random_range(1..8);
        let x = Mat::from_shape_fn((n, d), |_| r.random_range(0.01..2.0));
        let boxes: Vec<BoundingBox> = (0..n).map(|_| rand_box(&mut r, 64.0)).collect();
        let empty = Mat::zeros((0, d));
        let (xg, xm) = run(&trained, &x, &empty, &boxes, &[]);
        check(mat_bits_eq(&xg, &x) && mat_bits_eq(&xm, &x), format!("trial {trial}: empty pools changed the features"))?;

        let (pool, stored) = (r.random_range(1..30), r.random_range(1..40));
        let g = rand_mat(&mut r, pool, d);
        let mem = memory_of(&mut r, stored);
        let (xg, xm) = run(&fresh, &x, &g, &boxes, &mem);
        check(mat_bits_eq(&xg, &x) && mat_bits_eq(&xm, &x), format!("trial {trial}: zero output projection is not the identity"))?;
        let (_, xm) = run(&trained, &x, &g, &boxes, &mem);
        check(!mat_bits_eq(&xm, &x), "trained projections left features unchanged")?;
    }

    // memory over a 50-frame video
    let corpus = generate_corpus(&CorpusSpec {
        num_classes: 2,
        videos_per_class: 1,
        min_frames: 50,
        max_frames: 50,
        seed: 5,
        ..CorpusSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let video = corpus.videos[0].clone();
    let capacity = 37;
    let config = ModelConfig {
        detector: DetectorConfig {
            backbone_channels: vec![4, 6, 6],
            rpn_channels: 5,
            feature_dim: 8,
            top_n: 5,
            ..DetectorConfig::default()
        },
        aggregation: AggregationConfig {
            memory_capacity: capacity,
            global_frames: 0,
            ..AggregationConfig::default()
        },
        ..ModelConfig::default()
    };
    let mut model = VideoModel::new(config, vec![0, 1], 7).map_err(|e| e.to_string())?;
    for (name, m) in model.extractor.iter_mut() {
        if name.ends_with(".wo") {
            let noise = rand_mat(&mut r, m.nrows(), m.ncols()) * 0.3;
            m.assign(&noise);
        }
    }
    // same video with every frame from 30 on replaced by frame 0
    let frames: Vec<Frame> = (0..50).map(|t| video.frames()[if t >= 30 { 0 } else { t }].clone()).collect();
    let altered = VideoRecord::new(&video.video_id, frames, video.annotations().to_vec(), Source::Synthetic).map_err(|e| e.to_string())?;

    let mut previous = memory_after(&model, &video, 0, 1).map_err(|e| e.to_string())?;
    check(previous.is_empty(), "memory not empty before the first key frame")?;
    let mut saturated_at = None;
    for k in 1..=50 {
        let mem = memory_after(&model, &video, k, 1).map_err(|e| e.to_string())?;
        check(mem.len() <= capacity, format!("memory holds {} > {capacity} after {k} frames", mem.len()))?;
        check(mem.iter().all(|e| e.frame_index < k), format!("memory after {k} frames holds a later frame"))?;
        check(
            mem.iter().zip(mem.iter().skip(1)).all(|(a, b)| a.frame_index <= b.frame_index),
            "memory out of frame order",
        )?;
        // FIFO: the old entries are an unchanged suffix of the previous memory
        let old: Vec<&MemoryEntry> = mem.iter().filter(|e| e.frame_index < k - 1).collect();
        let kept: Vec<&MemoryEntry> = previous.iter().skip(previous.len() - old.len()).collect();
        check(old == kept, format!("key frame {} did not evict oldest-first", k - 1))?;
        let proposals = model.frame_proposals(&video.frames()[k - 1], k - 1).map_err(|e| e.to_string())?.len();
        check(
            mem.len() == (previous.len() + proposals).min(capacity),
            format!("key frame {} left {} entries", k - 1, mem.len()),
        )?;
        if mem.len() == capacity && saturated_at.is_none() {
            saturated_at = Some(k);
        }
        if k <= 30 {
            let other = memory_after(&model, &altered, k, 1).map_err(|e| e.to_string())?;
            check(other == mem, format!("memory after {k} frames depends on later frames"))?;
        }
        previous = mem;
    }
    let saturated_at = saturated_at.ok_or("memory never reached capacity")?;
    Ok(format!("identities over 50 trials; memory FIFO at capacity {capacity} from frame {saturated_at}, causal over 30 frames"))
}

// ---------------------------------------------------------------- 6

fn brute_clean_perfect(video: &VideoRecord) -> (bool, bool) {
    let mut classes = BTreeSet::new();
    let mut one_per_frame = true;
    for ann in video.annotations() {
        let mut count = 0;
        for obj in &ann.objects {
            classes.insert(obj.class_id);
            count += 1;
        }
        if count != 1 {
            one_per_frame = false;
        }
    }
    let clean = classes.len() == 1;
    (clean, clean && one_per_frame)
}

fn criterion_6() -> Outcome {
    let corpus = generate_corpus(&CorpusSpec {
        videos_per_class: 8,
        seed: 6,
        ..CorpusSpec::default()
    })
    .map_err(|e| e.to_string())?;
    let splits = [
        ClassSplit::new("A", [0, 1, 2, 3, 5, 7, 9], [4, 6, 8]),
        ClassSplit::new("B", [1, 2, 4, 5, 6, 8, 9], [0, 3, 7]),
        ClassSplit::new("C", [0, 2, 3, 4, 6, 8, 9], [1, 5, 7]),
    ];
    let mut manifests = 0;
    for split in splits {
        let split = split.map_err(|e| e.to_string())?;
        let classes = split.base_classes.len() + split.novel_classes.len();
        for shot in 1..=3 {
            for seed in 0..5 {
                let m = sample_balanced_fewshot(&corpus, &split, shot, seed).map_err(|e| e.to_string())?;
                check(m.video_ids.len() == classes * shot, format!("{} videos for {shot}-shot", m.video_ids.len()))?;
                let videos = m.resolve(&corpus).map_err(|e| e.to_string())?;
                let mut per_class: BTreeMap<u32, usize> = BTreeMap::new();
                for v in &videos {
                    check(brute_clean_perfect(v).1, format!("{} is not perfect", v.video_id))?;
                    *per_class.entry(v.classes()[0]).or_default() += 1;
                }
                check(
                    per_class.len() == classes && per_class.values().all(|&n| n == shot),
                    format!("unbalanced manifest {per_class:?}"),
                )?;
                manifests += 1;
            }
        }
        let weak = build_base_dataset(&corpus, &split, BaseMode::Weak, 2).map_err(|e| e.to_string())?;
        let strong = build_base_dataset(&corpus, &split, BaseMode::Strong, 2).map_err(|e| e.to_string())?;
        let strong_ids: BTreeSet<&String> = strong.video_ids.iter().collect();
        check(weak.video_ids.iter().all(|v| strong_ids.contains(v)), "weak base set is not inside the strong one")?;
        check(weak.still_images.is_empty(), "weak base set has still images")?;
        check(strong.video_ids.len() > weak.video_ids.len(), "strong base set adds no videos")?;
    }

    let mut r = rng(61);
    let frame = Frame::from_pixels(16, 16, 3, vec![0; 16 * 16 * 3]).unwrap();
    let (mut clean, mut perfect) = (0, 0);
    for i in 0..1000 {
        let len = r.random_range(1..6);
        let annotations: Vec<FrameAnnotation> = (0..len)
            .map(|_| FrameAnnotation {
                objects: (0..[0, 1, 1, 1, 1, 2][r.random_range(0..6)])
                    .map(|_| AnnotatedObject {
                        class_id: if r.random_bool(0.85) { 0 } else { r.random_range(1..3) },
                        bbox: BoundingBox::new(1.0, 1.0, 8.0, 8.0).unwrap(),
                    })
                    .collect(),
            })
            .collect();
        let video = VideoRecord::new(format!("r{i}"), vec![frame.clone(); len], annotations, Source::Ingested).map_err(|e| e.to_string())?;
        let (c, p) = brute_clean_perfect(&video);
        check(is_clean(&video) == c && is_perfect(&video) == p, format!("predicates disagree on video {i}"))?;
        clean += c as usize;
        perfect += p as usize;
    }
    check(perfect > 0 && clean > perfect && clean < 1000, "random videos did not cover every case")?;
    Ok(format!("{manifests} few-shot manifests; predicates agree on 1000 videos ({clean} clean, {perfect} perfect)"))
}

// ---------------------------------------------------------------- 7-9

fn load_config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&workspace().join("configs").join(name)).unwrap()
}

fn run(config: &ExperimentConfig, dir: &Path) -> Result<ResultsTable, String> {
    let options = RunOptions {
        workers: workers(),
        resume: false,
    };
    run_experiment(config, dir, options).map(|s| s.table).map_err(|e| e.to_string())
}

const TREND_A: &str = "acceptance_trend_a.json";
const TREND_B: &str = "acceptance_trend_b.json";

fn criterion_7() -> Outcome {
    let config = load_config(TREND_A);
    let dir = scratch("trend_a");
    let start = Instant::now();
    let table = run(&config, &dir)?;
    let split = &config.splits[0].name;
    let mut lines = Vec::new();
    let mut ok = true;
    for &shot in &config.shots {
        let get = |s| table.row(BaseMode::Strong, split, shot, s).map(|r| r.base_map50).ok_or("missing row");
        let (freeze, joint) = (get(Strategy::Freeze)?, get(Strategy::Joint)?);
        ok &= freeze >= joint;
        lines.push(format!("{shot}-shot Freeze {freeze:.2} vs Joint {joint:.2}"));
    }
    let detail = format!("base mAP50 over {} seeds: {} ({:.0?})", config.repeats, lines.join(", "), start.elapsed());
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_8() -> Outcome {
    let config = load_config(TREND_B);
    let dir = scratch("trend_b");
    let start = Instant::now();
    let table = run(&config, &dir)?;
    let split = &config.splits[0].name;
    let mut lines = Vec::new();
    let mut per_shot = Vec::new();
    let mut ok = true;
    for &shot in &config.shots {
        let get = |s| table.row(BaseMode::Weak, split, shot, s).map(|r| r.novel_map50).ok_or("missing row");
        let (thaw, joint, freeze) = (get(Strategy::Thaw)?, get(Strategy::Joint)?, get(Strategy::Freeze)?);
        let (vs_joint, vs_freeze) = (thaw - joint, thaw - (freeze - 1.0));
        let pass = vs_joint >= 0.0 && vs_freeze >= 0.0;
        ok &= pass;
        lines.push(format!("{shot}-shot Thaw {thaw:.2} Joint {joint:.2} Freeze {freeze:.2}"));
        per_shot.push(serde_json::json!({
            "shot": shot,
            "novel_map50": {"joint": joint, "freeze": freeze, "thaw": thaw},
            "margin_vs_joint": vs_joint,
            "margin_vs_freeze_minus_1pp": vs_freeze,
            "pass": pass,
        }));
    }
    let cells = load_cells(&dir).map_err(|e| e.to_string())?;
    let seeds: Vec<serde_json::Value> = cells
        .iter()
        .map(|c| {
            serde_json::json!({
                "cell": c.key.to_string(),
                "fewshot_seed": fewshot_seed(config.seed, &c.key.split, c.key.shot, c.key.repeat),
                "adapt_seed": c.adapt_seed,
            })
        })
        .collect();
    let record = serde_json::json!({
        "criterion": "weak-base novel mAP50: Thaw >= Joint and Thaw >= Freeze - 1pp, mean over repeats, every shot",
        "master_seed": config.seed,
        "repeats": config.repeats,
        "per_shot": per_shot,
        "seeds": seeds,
        "pass": ok,
    });
    fs::write(dir.join("acceptance.json"), serde_json::to_string_pretty(&record).unwrap()).map_err(|e| e.to_string())?;
    let detail = format!(
        "novel mAP50 over {} seeds: {} ({:.0?}); recorded in {}",
        config.repeats,
        lines.join(", "),
        start.elapsed(),
        dir.join("acceptance.json").display()
    );
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_9() -> Outcome {
    let first = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance/trend_a");
    if !first.join("tables/tables.csv").exists() {
        run(&load_config(TREND_A), &scratch("trend_a"))?;
    }
    let again = scratch("trend_a_rerun");
    run(&load_config(TREND_A), &again)?;
    let mut compared = Vec::new();
    for entry in fs::read_dir(first.join("tables")).map_err(|e| e.to_string())? {
        let name = entry.map_err(|e| e.to_string())?.file_name();
        let a = fs::read(first.join("tables").join(&name)).map_err(|e| e.to_string())?;
        let b = fs::read(again.join("tables").join(&name)).map_err(|e| format!("{name:?}: {e}"))?;
        check(a == b, format!("{name:?} differs between runs"))?;
        compared.push(name.to_string_lossy().into_owned());
    }
    compared.sort();
    Ok(format!("identical: {}", compared.join(", ")))
}

fn main() {
    let criteria: [Criterion; 9] = [
        (1, "gain arithmetic fixtures", criterion_1),
        (2, "AP and NMS oracles", criterion_2),
        (3, "adaptation contracts", criterion_3),
        (4, "numerical checks", criterion_4),
        (5, "aggregation identities", criterion_5),
        (6, "dataset protocol", criterion_6),
        (7, "trend A: strong base, Freeze >= Joint on base classes", criterion_7),
        (8, "trend B: weak base, Thaw >= Joint and Freeze - 1pp on novel classes", criterion_8),
        (9, "reproducibility of trend A tables", criterion_9),
    ];
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {id} PASS  {name}: {detail}"),
            Err(detail) => {
                println!("criterion {id} FAIL  {name}: {detail}");
                failed.push(id);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
