//! Target assignment, the per-frame training step and the SGD loop shared by
//! pretraining and adaptation.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{detection_loss, head_loss, AnchorTarget, LossBreakdown, RoiTarget};
use crate::aggregation::{self, MemoryEntry};
use crate::corpus::{BoundingBox, VideoRecord};
use crate::detector::{self, FeatureMap, Proposal};
use crate::error::{Error, Result};
use crate::eval::iou;
use crate::head::BoxCoder;
use crate::model::{features_of, VideoModel};
use crate::params::{clip_factor, ParamStore, Sgd, SgdConfig};
use crate::seed::{derive_seed, rng, Rng};

pub const RPN_POSITIVE_IOU: f64 = 0.7;
pub const RPN_NEGATIVE_IOU: f64 = 0.3;
pub const RPN_BATCH: usize = 64;
pub const RPN_POSITIVE_FRACTION: f64 = 0.5;
pub const ROI_FOREGROUND_IOU: f64 = 0.5;
pub const ROI_BATCH: usize = 32;
pub const ROI_FOREGROUND_FRACTION: f64 = 0.25;

/// Label anchors against ground truth and sample a minibatch of them.
/// Positives: IoU >= 0.7, or the best anchor of some ground truth box.
/// Negatives: IoU < 0.3. Anchors in between are ignored.
pub fn assign_anchors(anchors: &[BoundingBox], gts: &[BoundingBox], rng: &mut Rng) -> Vec<AnchorTarget> {
    let valid: Vec<usize> = (0..anchors.len())
        .filter(|&i| anchors[i].width() >= 1.0 && anchors[i].height() >= 1.0)
        .collect();
    let mut best: Vec<(f64, usize)> = vec![(0.0, 0); anchors.len()];
    let mut best_for_gt = vec![0.0f64; gts.len()];
    for &i in &valid {
        for (g, gt) in gts.iter().enumerate() {
            let o = iou(&anchors[i], gt);
            if o > best[i].0 {
                best[i] = (o, g);
            }
            best_for_gt[g] = best_for_gt[g].max(o);
        }
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for &i in &valid {
        let (o, _) = best[i];
        let is_best = gts
            .iter()
            .enumerate()
            .any(|(g, gt)| best_for_gt[g] > 0.0 && iou(&anchors[i], gt) == best_for_gt[g]);
        if o >= RPN_POSITIVE_IOU || is_best {
            pos.push(i);
        } else if o < RPN_NEGATIVE_IOU {
            neg.push(i);
        }
    }
    let n_pos = pos.len().min((RPN_BATCH as f64 * RPN_POSITIVE_FRACTION) as usize);
    pos.shuffle(rng);
    pos.truncate(n_pos);
    neg.shuffle(rng);
    neg.truncate(RPN_BATCH - n_pos);
    let mut out: Vec<AnchorTarget> = pos
        .into_iter()
        .map(|i| AnchorTarget {
            anchor: i,
            positive: true,
            deltas: Some(BoxCoder::UNIT.encode(&anchors[i], &gts[best[i].1])),
        })
        .collect();
    out.extend(neg.into_iter().map(|i| AnchorTarget {
        anchor: i,
        positive: false,
        deltas: None,
    }));
    out
}

/// Sample head ROIs from proposals plus the ground-truth boxes themselves.
/// `gts` pairs each box with its classifier column.
pub fn sample_rois(proposals: &[BoundingBox], gts: &[(BoundingBox, usize)], rng: &mut Rng) -> Vec<(BoundingBox, RoiTarget)> {
    let candidates: Vec<BoundingBox> = proposals.iter().copied().chain(gts.iter().map(|g| g.0)).collect();
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for b in candidates {
        let best = gts
            .iter()
            .map(|(g, col)| (iou(&b, g), *g, *col))
            .fold(None::<(f64, BoundingBox, usize)>, |acc, x| match acc {
                Some(a) if a.0 >= x.0 => Some(a),
                _ => Some(x),
            });
        match best {
            Some((o, g, col)) if o >= ROI_FOREGROUND_IOU => fg.push((
                b,
                RoiTarget {
                    column: col,
                    deltas: Some(BoxCoder::HEAD.encode(&b, &g)),
                },
            )),
            _ => bg.push((b, RoiTarget { column: 0, deltas: None })),
        }
    }
    let n_fg = fg.len().min((ROI_BATCH as f64 * ROI_FOREGROUND_FRACTION) as usize);
    fg.shuffle(rng);
    fg.truncate(n_fg);
    bg.shuffle(rng);
    bg.truncate(ROI_BATCH - n_fg);
    fg.extend(bg);
    fg
}

/// Un-differentiated per-frame outputs reused as context (global pool,
/// training memory) and, with a frozen extractor, for the key frame.
pub struct FrameData {
    pub map: FeatureMap,
    pub proposals: Vec<Proposal>,
}

fn compute_frame(model: &VideoModel, video: &VideoRecord, t: usize) -> Result<FrameData> {
    let det = &model.config.detector;
    let map = detector::extract_backbone_features(&model.extractor, det, &video.frames()[t])?;
    let props = detector::propose(&model.extractor, det, &map);
    let boxes: Vec<BoundingBox> = props.iter().map(|p| p.0).collect();
    let (feats, _) = detector::roi_features(&model.extractor, det, &map, &boxes);
    let proposals = props
        .into_iter()
        .zip(feats.rows())
        .map(|((bbox, objectness), f)| Proposal {
            bbox,
            objectness,
            feature: f.to_vec(),
            frame_index: t,
        })
        .collect();
    Ok(FrameData { map, proposals })
}

/// Keyed by (video index, frame index).
type FrameMemo = HashMap<(usize, usize), Arc<FrameData>>;

/// Per-frame outputs, memoised while the extractor is frozen.
pub struct FrameCache {
    memo: Option<Mutex<FrameMemo>>,
}

impl FrameCache {
    pub fn new(memoise: bool) -> Self {
        FrameCache {
            memo: memoise.then(|| Mutex::new(HashMap::new())),
        }
    }

    pub fn get(&self, model: &VideoModel, vi: usize, video: &VideoRecord, t: usize) -> Result<Arc<FrameData>> {
        let Some(memo) = &self.memo else {
            return Ok(Arc::new(compute_frame(model, video, t)?));
        };
        if let Some(hit) = memo.lock().expect("frame cache poisoned").get(&(vi, t)) {
            return Ok(hit.clone());
        }
        let data = Arc::new(compute_frame(model, video, t)?);
        memo.lock().expect("frame cache poisoned").insert((vi, t), data.clone());
        Ok(data)
    }
}

pub struct StepResult {
    pub loss: LossBreakdown,
    pub head_grads: ParamStore,
    pub extractor_grads: Option<ParamStore>,
}

/// Loss and gradients for key frame `k` of `video`. With
/// `train_extractor = false` only the head is differentiated and the RPN
/// terms, which no trainable parameter influences, are left at zero.
#[allow(clippy::too_many_arguments)]
pub fn frame_step(
    model: &VideoModel,
    cache: &FrameCache,
    vi: usize,
    video: &VideoRecord,
    k: usize,
    shuffle_seed: u64,
    rng: &mut Rng,
    train_extractor: bool,
) -> Result<StepResult> {
    let det = &model.config.detector;
    let agg = &model.config.aggregation;
    let params = &model.extractor;
    let gts: Vec<(BoundingBox, usize)> = video.annotations()[k]
        .objects
        .iter()
        .filter_map(|o| model.head.column_of(o.class_id).map(|c| (o.bbox, c)))
        .collect();
    let gt_boxes: Vec<BoundingBox> = gts.iter().map(|g| g.0).collect();

    let mut loss = LossBreakdown::default();
    let mut extractor_grads = train_extractor.then(|| params.zeros_like());
    let (map, proposal_boxes, trainable) = if train_extractor {
        let input = detector::backbone_input(&video.frames()[k], det)?;
        let (map, bcache) = detector::backbone_forward(params, det, &input);
        let rpn = detector::rpn_forward(params, &map);
        let anchors = detector::generate_anchors(&map, &det.anchor_scales, &det.anchor_ratios, det.width, det.height);
        let targets = assign_anchors(&anchors.boxes, &gt_boxes, rng);
        let boxes: Vec<BoundingBox> = detector::select_proposals(&anchors, &rpn, det).into_iter().map(|p| p.0).collect();
        (map, boxes, Some((bcache, rpn, targets)))
    } else {
        let fd = cache.get(model, vi, video, k)?;
        (fd.map.clone(), fd.proposals.iter().map(|p| p.bbox).collect(), None)
    };

    let rois = sample_rois(&proposal_boxes, &gts, rng);
    let roi_boxes: Vec<BoundingBox> = rois.iter().map(|r| r.0).collect();
    let roi_targets: Vec<RoiTarget> = rois.into_iter().map(|r| r.1).collect();
    let (x, rcache) = detector::roi_features(params, det, &map, &roi_boxes);

    let (xm, n1, n2) = if agg.enabled && !roi_boxes.is_empty() {
        let perm = aggregation::shuffle_permutation(video.len(), shuffle_seed);
        let mut global = Vec::new();
        for t in aggregation::global_frames(&perm, k, agg.global_frames) {
            global.push(cache.get(model, vi, video, t)?);
        }
        let g = features_of(global.iter().flat_map(|fd| fd.proposals.iter()), det.feature_dim);
        let (xg, n1) = aggregation::aggregate_global(params, agg, &x, &g)?;
        let mut memory: Vec<MemoryEntry> = Vec::new();
        for j in k.saturating_sub(agg.train_memory_frames)..k {
            let fd = cache.get(model, vi, video, j)?;
            let feats = features_of(fd.proposals.iter(), det.feature_dim);
            let (enhanced, _) = aggregation::aggregate_global(params, agg, &feats, &g)?;
            memory.extend(fd.proposals.iter().zip(enhanced.rows()).map(|(p, f)| MemoryEntry {
                feature: f.to_vec(),
                bbox: p.bbox,
                frame_index: j,
            }));
        }
        let refs: Vec<&MemoryEntry> = memory.iter().collect();
        let (xm, n2) = aggregation::aggregate_memory(params, agg, &xg, &roi_boxes, &refs)?;
        (xm, Some(n1), Some(n2))
    } else {
        (x, None, None)
    };

    let (out, hcache) = model.head.forward(&xm);
    let (head_grads, dxm) = match &trainable {
        Some((_, rpn, anchor_targets)) => {
            let dl = detection_loss(&out.logits, &out.deltas, &roi_targets, &rpn.logits, &rpn.deltas, anchor_targets)?;
            loss = dl.breakdown;
            let (hg, dxm) = model.head.backward(&hcache, &dl.dlogits, &dl.ddeltas);
            let grads = extractor_grads.as_mut().expect("allocated when training");
            let dmap_rpn = detector::rpn_backward(params, rpn, &dl.rpn_dlogits, &dl.rpn_ddeltas, grads);
            (hg, Some((dxm, dmap_rpn)))
        }
        None => {
            let (cls, reg, dlogits, ddeltas) = head_loss(&out.logits, &out.deltas, &roi_targets);
            loss.cls = cls;
            loss.reg = reg;
            loss.check_finite()?;
            (model.head.backward(&hcache, &dlogits, &ddeltas).0, None)
        }
    };

    if let (Some((dxm, dmap_rpn)), Some((bcache, _, _))) = (dxm, &trainable) {
        let grads = extractor_grads.as_mut().expect("allocated when training");
        let mut dx = dxm;
        if let Some(n2) = &n2 {
            dx = aggregation::stack_backward(params, n2, &dx, grads);
        }
        if let Some(n1) = &n1 {
            dx = aggregation::stack_backward(params, n1, &dx, grads);
        }
        let dmap = detector::roi_features_backward(params, &rcache, &dx, grads) + dmap_rpn;
        detector::backbone_backward(params, bcache, &dmap, grads);
    }

    Ok(StepResult {
        loss,
        head_grads,
        extractor_grads,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Fraction of training after which the learning rate drops.
    pub lr_drop_fraction: Option<f64>,
    pub lr_drop_factor: f64,
    /// Linear warm-up length, in iterations.
    pub warmup_iterations: usize,
    /// Key frames per iteration.
    pub batch_size: usize,
    pub sgd: SgdConfig,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            iterations: 2000,
            learning_rate: 0.02,
            lr_drop_fraction: Some(2.0 / 3.0),
            lr_drop_factor: 0.1,
            warmup_iterations: 50,
            batch_size: 2,
            sgd: SgdConfig::default(),
        }
    }
}

impl Schedule {
    pub fn validate(&self, what: &str) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("{what}.learning_rate must be positive")));
        }
        if self.batch_size == 0 {
            return Err(Error::Config(format!("{what}.batch_size must be positive")));
        }
        if let Some(f) = self.lr_drop_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("{what}.lr_drop_fraction must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn lr_at(&self, it: usize) -> f64 {
        let mut lr = self.learning_rate;
        if it < self.warmup_iterations {
            lr *= (it + 1) as f64 / self.warmup_iterations as f64;
        }
        if let Some(f) = self.lr_drop_fraction {
            if it >= (f * self.iterations as f64).floor() as usize {
                lr *= self.lr_drop_factor;
            }
        }
        lr
    }
}

/// Which partitions an optimisation phase updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trainable {
    HeadOnly,
    All,
}

/// Loss averaged over a window of iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: usize,
    pub loss: LossBreakdown,
}

pub struct Phase<'a> {
    pub tag: &'a str,
    pub schedule: &'a Schedule,
    pub trainable: Trainable,
    pub seed: u64,
    /// Iteration offset for the learning-rate schedule and seed derivation.
    pub first_iteration: usize,
}

/// Number of iterations averaged into one loss point.
pub const LOSS_WINDOW: usize = 25;

/// Run one optimisation phase over `videos`, each already subsampled.
/// Every phase starts with fresh optimizer state.
pub fn run_phase(model: &mut VideoModel, videos: &[VideoRecord], phase: &Phase) -> Result<Vec<LossPoint>> {
    if videos.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    let train_extractor = phase.trainable == Trainable::All;
    let mut head_opt = Sgd::new(phase.schedule.sgd);
    let mut ext_opt = Sgd::new(phase.schedule.sgd);
    let cache = FrameCache::new(!train_extractor);
    let shuffle_seeds: Vec<u64> = videos
        .iter()
        .map(|v| derive_seed(phase.seed, &["shuffle", &v.video_id]))
        .collect();
    let mut curve = Vec::new();
    let mut window = LossBreakdown::default();
    let mut in_window = 0usize;
    for i in 0..phase.schedule.iterations {
        let it = phase.first_iteration + i;
        let batch = phase.schedule.batch_size;
        let samples: Vec<Result<StepResult>> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let mut r = rng(derive_seed(phase.seed, &[phase.tag, &it.to_string(), &b.to_string()]));
                let vi = r.random_range(0..videos.len());
                let video = &videos[vi];
                let k = r.random_range(0..video.len());
                frame_step(model, &cache, vi, video, k, shuffle_seeds[vi], &mut r, train_extractor)
            })
            .collect();
        let mut head_grads = model.head.params.zeros_like();
        let mut ext_grads = train_extractor.then(|| model.extractor.zeros_like());
        let mut step_loss = LossBreakdown::default();
        for s in samples {
            let s = s.map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!("{} iteration {it}: {msg}", phase.tag)),
                other => other,
            })?;
            step_loss.add(&s.loss, 1.0 / batch as f64);
            head_grads.add_scaled(&s.head_grads, 1.0);
            if let (Some(acc), Some(g)) = (ext_grads.as_mut(), s.extractor_grads.as_ref()) {
                acc.add_scaled(g, 1.0);
            }
        }
        // mean over the batch, then clip the joint norm
        let inv = 1.0 / batch as f64;
        let mut all: Vec<&ParamStore> = vec![&head_grads];
        all.extend(ext_grads.as_ref());
        let scale = inv * clip_factor(&all, phase.schedule.sgd.clip_norm / inv);
        let lr = phase.schedule.lr_at(it - phase.first_iteration);
        head_opt.step(&mut model.head.params, &head_grads, lr, scale);
        if let Some(g) = &ext_grads {
            ext_opt.step(&mut model.extractor, g, lr, scale);
        }
        if !model.head.params.all_finite() || !model.extractor.all_finite() {
            return Err(Error::Numerical(format!("{} iteration {it}: parameters became non-finite", phase.tag)));
        }
        window.add(&step_loss, 1.0);
        in_window += 1;
        if in_window == LOSS_WINDOW || i + 1 == phase.schedule.iterations {
            let mut mean = LossBreakdown::default();
            mean.add(&window, 1.0 / in_window as f64);
            curve.push(LossPoint { iteration: it + 1, loss: mean });
            window = LossBreakdown::default();
            in_window = 0;
        }
    }
    Ok(curve)
}
