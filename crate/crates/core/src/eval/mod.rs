//! Detection metrics: IoU, NMS, per-class AP50, novel/base mAP50 and gains
//! over the Freeze baseline.

mod boxes;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use boxes::{iou, nms};
pub(crate) use boxes::score_order;

use crate::corpus::{BoundingBox, ClassId, VideoRecord};
use crate::datasets::ClassSplit;
use crate::error::{Error, Result};

pub const MATCH_IOU: f64 = 0.5;
pub const NMS_IOU: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Detection {
    #[serde(rename = "video")]
    pub video_id: String,
    #[serde(rename = "frame")]
    pub frame_index: usize,
    #[serde(rename = "class")]
    pub class_id: ClassId,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub video_id: String,
    pub frame_index: usize,
    pub class_id: ClassId,
    pub bbox: BoundingBox,
}

/// Every annotated object of `videos`, in (video, frame, object) order.
pub fn ground_truths(videos: &[VideoRecord]) -> Vec<GroundTruth> {
    let mut out = Vec::new();
    for v in videos {
        for (t, ann) in v.annotations().iter().enumerate() {
            for o in &ann.objects {
                out.push(GroundTruth {
                    video_id: v.video_id.clone(),
                    frame_index: t,
                    class_id: o.class_id,
                    bbox: o.bbox,
                });
            }
        }
    }
    out
}

/// Per-class greedy NMS at `iou_threshold`; output sorted by
/// (video, frame, class, descending score).
pub fn nms_per_class(detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    let mut groups: BTreeMap<(String, usize, ClassId), Vec<Detection>> = BTreeMap::new();
    for d in detections {
        groups
            .entry((d.video_id.clone(), d.frame_index, d.class_id))
            .or_default()
            .push(d);
    }
    let mut out = Vec::new();
    for (_, group) in groups {
        let boxes: Vec<BoundingBox> = group.iter().map(|d| d.bbox).collect();
        let scores: Vec<f64> = group.iter().map(|d| d.score).collect();
        for k in nms(&boxes, &scores, iou_threshold) {
            out.push(group[k].clone());
        }
    }
    out
}

/// Ranked true/false-positive flags for one class. Each detection, in
/// descending score order, is matched to the same-frame ground truth with
/// the highest IoU; it is a true positive iff that IoU is at least
/// `MATCH_IOU` and the ground truth is still unmatched.
fn match_detections(detections: &[Detection], gts: &[GroundTruth], class_id: ClassId) -> (Vec<bool>, usize) {
    let mut by_frame: BTreeMap<(&str, usize), Vec<(usize, &BoundingBox)>> = BTreeMap::new();
    let mut n_gt = 0;
    for (i, g) in gts.iter().enumerate().filter(|(_, g)| g.class_id == class_id) {
        by_frame.entry((g.video_id.as_str(), g.frame_index)).or_default().push((i, &g.bbox));
        n_gt += 1;
    }
    let dets: Vec<&Detection> = detections.iter().filter(|d| d.class_id == class_id).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut matched = vec![false; gts.len()];
    let mut flags = Vec::with_capacity(dets.len());
    for i in score_order(&scores) {
        let d = dets[i];
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = by_frame.get(&(d.video_id.as_str(), d.frame_index)) {
            for &(g, b) in cands {
                let o = iou(&d.bbox, b);
                if best.is_none_or(|(_, bo)| o > bo) {
                    best = Some((g, o));
                }
            }
        }
        let tp = match best {
            Some((g, o)) if o >= MATCH_IOU && !matched[g] => {
                matched[g] = true;
                true
            }
            _ => false,
        };
        flags.push(tp);
    }
    (flags, n_gt)
}

/// Area under the all-point interpolated precision/recall curve.
pub fn ap_from_flags(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return f64::NAN;
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// AP at IoU 0.5 for one class. `None` when the class has no ground truth.
pub fn average_precision_50(detections: &[Detection], gts: &[GroundTruth], class_id: ClassId) -> Option<f64> {
    let (flags, n_gt) = match_detections(detections, gts, class_id);
    (n_gt > 0).then(|| ap_from_flags(&flags, n_gt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub strategy: String,
    pub shot: usize,
    pub split: String,
    pub seed: u64,
    pub per_class_ap50: BTreeMap<ClassId, f64>,
    pub gt_counts: BTreeMap<ClassId, usize>,
    /// Classes of the split with no ground truth; left out of the means.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded_classes: Vec<ClassId>,
    pub novel_map50: f64,
    pub base_map50: f64,
}

fn mean_over(ap: &BTreeMap<ClassId, f64>, classes: &BTreeSet<ClassId>) -> f64 {
    let vals: Vec<f64> = classes.iter().filter_map(|c| ap.get(c).copied()).collect();
    if vals.is_empty() {
        0.0
    } else {
        vals.iter().sum::<f64>() / vals.len() as f64
    }
}

/// Labels attached to a report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportLabels {
    pub strategy: String,
    pub shot: usize,
    pub seed: u64,
}

/// Score detections against ground truth for every class of `split`.
pub fn score_detections(
    detections: &[Detection],
    gts: &[GroundTruth],
    split: &ClassSplit,
    labels: &ReportLabels,
) -> EvalReport {
    let mut per_class = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut excluded = Vec::new();
    for c in split.all_classes() {
        let n = gts.iter().filter(|g| g.class_id == c).count();
        counts.insert(c, n);
        match average_precision_50(detections, gts, c) {
            Some(ap) => {
                per_class.insert(c, ap);
            }
            None => {
                log::warn!("class {c} has no ground truth in the evaluation set; excluded from mAP");
                excluded.push(c);
            }
        }
    }
    EvalReport {
        strategy: labels.strategy.clone(),
        shot: labels.shot,
        split: split.name.clone(),
        seed: labels.seed,
        novel_map50: mean_over(&per_class, &split.novel_classes),
        base_map50: mean_over(&per_class, &split.base_classes),
        per_class_ap50: per_class,
        gt_counts: counts,
        excluded_classes: excluded,
    }
}

/// Anything that turns a video into scored detections.
pub trait VideoDetector: Sync {
    fn detect_video(&self, video: &VideoRecord) -> Result<Vec<Detection>>;
}

/// Run `detector` over every video, apply per-class NMS at 0.5 and score.
/// Returns the report and the post-NMS detections.
pub fn evaluate<D: VideoDetector + ?Sized>(
    detector: &D,
    videos: &[VideoRecord],
    split: &ClassSplit,
    labels: &ReportLabels,
) -> Result<(EvalReport, Vec<Detection>)> {
    for v in videos {
        if let Some(c) = v.classes().into_iter().find(|c| !split.is_base(*c) && !split.is_novel(*c)) {
            return Err(Error::Contract(format!(
                "validation video {} holds class {c}, which is outside split {}",
                v.video_id, split.name
            )));
        }
    }
    let per_video: Vec<Result<Vec<Detection>>> = videos.par_iter().map(|v| detector.detect_video(v)).collect();
    let mut all = Vec::new();
    for d in per_video {
        all.extend(d?);
    }
    let dets = nms_per_class(all, NMS_IOU);
    let report = score_detections(&dets, &ground_truths(videos), split, labels);
    Ok((report, dets))
}

/// Novel-class gain over Freeze, in percentage points.
pub fn gain(method: &EvalReport, freeze: &EvalReport) -> Result<f64> {
    check_comparable(method, freeze)?;
    Ok(gain_pp(method.novel_map50 * 100.0, freeze.novel_map50 * 100.0))
}

/// Per-class gains over Freeze, in percentage points.
pub fn per_class_gain(method: &EvalReport, freeze: &EvalReport) -> Result<BTreeMap<ClassId, f64>> {
    check_comparable(method, freeze)?;
    Ok(method
        .per_class_ap50
        .iter()
        .filter_map(|(c, ap)| freeze.per_class_ap50.get(c).map(|f| (*c, gain_pp(ap * 100.0, f * 100.0))))
        .collect())
}

/// Difference of two mAP50 values given in percentage points.
pub fn gain_pp(method_pp: f64, freeze_pp: f64) -> f64 {
    method_pp - freeze_pp
}

fn check_comparable(a: &EvalReport, b: &EvalReport) -> Result<()> {
    if a.split != b.split || a.shot != b.shot || a.seed != b.seed {
        return Err(Error::Contract(format!(
            "cannot compare reports for ({}, {}-shot, seed {}) and ({}, {}-shot, seed {})",
            a.split, a.shot, a.seed, b.split, b.shot, b.seed
        )));
    }
    Ok(())
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

pub fn write_detections(path: &Path, detections: &[Detection]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for d in detections {
        let line = serde_json::to_string(d).map_err(|e| Error::json(path, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Read a JSON-lines detection dump. Blank lines are skipped.
pub fn read_detections(path: &Path) -> Result<Vec<Detection>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let d: Detection = serde_json::from_str(&line).map_err(|e| Error::Ingestion {
            path: path.to_path_buf(),
            reason: format!("line {}: {e}", n + 1),
        })?;
        if !d.score.is_finite() {
            return Err(Error::Ingestion {
                path: path.to_path_buf(),
                reason: format!("line {}: non-finite score", n + 1),
            });
        }
        out.push(d);
    }
    Ok(out)
}
