//! Toy two-stage detector: strided conv backbone, anchor-based RPN, and
//! ROI-Align followed by a fully connected projection to `d`-dim features.
//!
//! Parameter names (all in the feature-extractor partition):
//! `backbone.conv{i}.{w,b}`, `rpn.conv.{w,b}`, `rpn.obj.{w,b}`, `rpn.delta.{w,b}`,
//! `roi.fc.{w,b}`.

pub mod conv;
pub mod roi;

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::corpus::{BoundingBox, Frame};
use crate::error::{Error, Result};
use crate::eval::nms;
use crate::head::BoxCoder;
use crate::params::{gaussian, he_normal, Mat, ParamStore};
use crate::seed::Rng;

use conv::{conv_relu_backward, conv_relu_forward, relu_backward, relu_inplace, ConvShape};
pub use roi::{roi_align, roi_align_backward, RoiAlignCache};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Output channels of each stride-2 conv block.
    pub backbone_channels: Vec<usize>,
    pub rpn_channels: usize,
    pub anchor_scales: Vec<f64>,
    /// Anchor aspect ratios as height / width.
    pub anchor_ratios: Vec<f64>,
    pub top_n: usize,
    pub pre_nms_top_n: usize,
    pub rpn_nms_iou: f64,
    pub roi_grid: usize,
    pub roi_samples: usize,
    pub feature_dim: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            height: 64,
            width: 64,
            channels: 3,
            backbone_channels: vec![16, 32, 32],
            rpn_channels: 32,
            anchor_scales: vec![12.0, 18.0, 26.0, 36.0],
            anchor_ratios: vec![0.5, 1.0, 2.0],
            top_n: 50,
            pre_nms_top_n: 400,
            rpn_nms_iou: 0.7,
            roi_grid: 3,
            roi_samples: 2,
            feature_dim: 64,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::Config("detector input shape must be positive".into()));
        }
        if self.backbone_channels.is_empty() || self.backbone_channels.contains(&0) {
            return Err(Error::Config("detector.backbone_channels must be non-empty and positive".into()));
        }
        if self.anchor_scales.is_empty() || self.anchor_ratios.is_empty() {
            return Err(Error::Config("anchor scales and ratios must be non-empty".into()));
        }
        if self.anchor_scales.iter().chain(&self.anchor_ratios).any(|v| !(*v > 0.0)) {
            return Err(Error::Config("anchor scales and ratios must be positive".into()));
        }
        if self.top_n == 0 || self.roi_grid == 0 || self.roi_samples == 0 || self.feature_dim == 0 || self.rpn_channels == 0 {
            return Err(Error::Config("detector sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.rpn_nms_iou) {
            return Err(Error::Config("detector.rpn_nms_iou must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        1 << self.backbone_channels.len()
    }

    pub fn feature_channels(&self) -> usize {
        *self.backbone_channels.last().expect("validated")
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchor_scales.len() * self.anchor_ratios.len()
    }

    fn conv_shapes(&self) -> Vec<ConvShape> {
        let (mut h, mut w, mut c) = (self.height, self.width, self.channels);
        let mut out = Vec::new();
        for &oc in &self.backbone_channels {
            let s = ConvShape { in_h: h, in_w: w, in_c: c, stride: 2 };
            h = s.out_h();
            w = s.out_w();
            c = oc;
            out.push(s);
        }
        out
    }

    pub fn map_size(&self) -> (usize, usize) {
        let last = *self.conv_shapes().last().expect("validated");
        (last.out_h(), last.out_w())
    }
}

/// Backbone output: `(h*w) x c` activations and the input pixels per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub data: Mat,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.ncols()
    }
}

/// Candidate box with its objectness and pooled feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub bbox: BoundingBox,
    pub objectness: f64,
    pub feature: Vec<f64>,
    pub frame_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    /// Ordered `(cell, scale, ratio)`, cells in row-major order.
    pub boxes: Vec<BoundingBox>,
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
}

pub fn init_params(config: &DetectorConfig, rng: &mut Rng) -> ParamStore {
    let mut p = ParamStore::new();
    let mut in_c = config.channels;
    for (i, &oc) in config.backbone_channels.iter().enumerate() {
        p.insert(format!("backbone.conv{i}.w"), he_normal(9 * in_c, oc, rng));
        p.insert(format!("backbone.conv{i}.b"), Mat::zeros((1, oc)));
        in_c = oc;
    }
    let a = config.anchors_per_cell();
    p.insert("rpn.conv.w", he_normal(9 * in_c, config.rpn_channels, rng));
    p.insert("rpn.conv.b", Mat::zeros((1, config.rpn_channels)));
    p.insert("rpn.obj.w", gaussian(config.rpn_channels, a, 0.01, rng));
    p.insert("rpn.obj.b", Mat::zeros((1, a)));
    p.insert("rpn.delta.w", gaussian(config.rpn_channels, 4 * a, 0.001, rng));
    p.insert("rpn.delta.b", Mat::zeros((1, 4 * a)));
    let pooled = config.roi_grid * config.roi_grid * in_c;
    p.insert("roi.fc.w", he_normal(pooled, config.feature_dim, rng));
    p.insert("roi.fc.b", Mat::zeros((1, config.feature_dim)));
    p
}

/// Pixels as a `(h*w) x c` matrix scaled to [0, 1].
fn frame_input(frame: &Frame, config: &DetectorConfig) -> Result<Mat> {
    if (frame.height(), frame.width(), frame.channels()) != (config.height, config.width, config.channels) {
        return Err(Error::Input(format!(
            "frame is {}x{}x{}, model expects {}x{}x{}",
            frame.height(),
            frame.width(),
            frame.channels(),
            config.height,
            config.width,
            config.channels
        )));
    }
    let pixels = frame.pixels()?;
    let data = pixels.iter().map(|&v| v as f64 / 255.0).collect();
    Ok(Mat::from_shape_vec((config.height * config.width, config.channels), data).expect("shape checked"))
}

#[derive(Debug, Clone)]
pub struct BackboneCache {
    /// Per block: (patch matrix, output activation).
    layers: Vec<(Mat, Mat)>,
    shapes: Vec<ConvShape>,
}

pub fn backbone_forward(params: &ParamStore, config: &DetectorConfig, input: &Mat) -> (FeatureMap, BackboneCache) {
    let shapes = config.conv_shapes();
    let mut x = input.clone();
    let mut layers = Vec::with_capacity(shapes.len());
    for (i, shape) in shapes.iter().enumerate() {
        let (out, cols) = conv_relu_forward(
            &x,
            *shape,
            params.get(&format!("backbone.conv{i}.w")),
            params.get(&format!("backbone.conv{i}.b")),
        );
        layers.push((cols, out.clone()));
        x = out;
    }
    let last = shapes.last().expect("validated");
    let map = FeatureMap {
        h: last.out_h(),
        w: last.out_w(),
        stride: config.stride(),
        data: x,
    };
    (map, BackboneCache { layers, shapes })
}

/// Backbone features for one frame.
pub fn extract_backbone_features(params: &ParamStore, config: &DetectorConfig, frame: &Frame) -> Result<FeatureMap> {
    let input = frame_input(frame, config)?;
    Ok(backbone_forward(params, config, &input).0)
}

/// Network input for `frame`, as consumed by [`backbone_forward`].
pub fn backbone_input(frame: &Frame, config: &DetectorConfig) -> Result<Mat> {
    frame_input(frame, config)
}

/// Accumulate backbone parameter gradients for `dmap`.
pub fn backbone_backward(params: &ParamStore, cache: &BackboneCache, dmap: &Mat, grads: &mut ParamStore) {
    let mut d = dmap.clone();
    for i in (0..cache.shapes.len()).rev() {
        let (cols, act) = &cache.layers[i];
        let w = params.get(&format!("backbone.conv{i}.w"));
        let (dw, db, dinput) = conv_relu_backward(&d, act, cols, w, cache.shapes[i], i > 0);
        grads.accumulate(&format!("backbone.conv{i}.w"), &dw);
        grads.accumulate(&format!("backbone.conv{i}.b"), &db);
        if let Some(next) = dinput {
            d = next;
        }
    }
}

/// Anchors for every cell of `map`, clipped to the frame.
pub fn generate_anchors(map: &FeatureMap, scales: &[f64], ratios: &[f64], frame_w: usize, frame_h: usize) -> AnchorSet {
    let mut boxes = Vec::with_capacity(map.h * map.w * scales.len() * ratios.len());
    let s = map.stride as f64;
    for cy in 0..map.h {
        for cx in 0..map.w {
            let (x, y) = ((cx as f64 + 0.5) * s, (cy as f64 + 0.5) * s);
            for &scale in scales {
                for &ratio in ratios {
                    let w = scale / ratio.sqrt();
                    let h = scale * ratio.sqrt();
                    let b = BoundingBox {
                        x1: x - 0.5 * w,
                        y1: y - 0.5 * h,
                        x2: x + 0.5 * w,
                        y2: y + 0.5 * h,
                    };
                    boxes.push(b.clip(frame_w, frame_h));
                }
            }
        }
    }
    AnchorSet {
        boxes,
        scales: scales.to_vec(),
        ratios: ratios.to_vec(),
    }
}

#[derive(Debug, Clone)]
pub struct RpnOutput {
    /// `(h*w) x A` objectness logits; flattening row-major follows anchor order.
    pub logits: Mat,
    /// `(h*w) x 4A` anchor deltas.
    pub deltas: Mat,
    hidden: Mat,
    cols: Mat,
    shape: ConvShape,
}

impl RpnOutput {
    pub fn logit(&self, anchor: usize) -> f64 {
        let a = self.logits.ncols();
        self.logits[[anchor / a, anchor % a]]
    }

    pub fn delta(&self, anchor: usize) -> [f64; 4] {
        let a = self.logits.ncols();
        let (cell, k) = (anchor / a, anchor % a);
        std::array::from_fn(|j| self.deltas[[cell, 4 * k + j]])
    }
}

pub fn rpn_forward(params: &ParamStore, map: &FeatureMap) -> RpnOutput {
    let shape = ConvShape {
        in_h: map.h,
        in_w: map.w,
        in_c: map.channels(),
        stride: 1,
    };
    let (hidden, cols) = conv_relu_forward(&map.data, shape, params.get("rpn.conv.w"), params.get("rpn.conv.b"));
    let logits = hidden.dot(params.get("rpn.obj.w")) + params.get("rpn.obj.b");
    let deltas = hidden.dot(params.get("rpn.delta.w")) + params.get("rpn.delta.b");
    RpnOutput {
        logits,
        deltas,
        hidden,
        cols,
        shape,
    }
}

/// Accumulates RPN gradients and returns the gradient w.r.t. the feature map.
pub fn rpn_backward(params: &ParamStore, out: &RpnOutput, dlogits: &Mat, ddeltas: &Mat, grads: &mut ParamStore) -> Mat {
    grads.accumulate("rpn.obj.w", &out.hidden.t().dot(dlogits));
    grads.accumulate("rpn.obj.b", &dlogits.sum_axis(Axis(0)).insert_axis(Axis(0)));
    grads.accumulate("rpn.delta.w", &out.hidden.t().dot(ddeltas));
    grads.accumulate("rpn.delta.b", &ddeltas.sum_axis(Axis(0)).insert_axis(Axis(0)));
    let dhidden = dlogits.dot(&params.get("rpn.obj.w").t()) + ddeltas.dot(&params.get("rpn.delta.w").t());
    let (dw, db, dmap) = conv_relu_backward(&dhidden, &out.hidden, &out.cols, params.get("rpn.conv.w"), out.shape, true);
    grads.accumulate("rpn.conv.w", &dw);
    grads.accumulate("rpn.conv.b", &db);
    dmap.expect("requested")
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decode, rank by objectness, suppress at `nms_iou`, keep `top_n`.
/// Output is sorted by descending objectness.
pub fn select_proposals(
    anchors: &AnchorSet,
    rpn: &RpnOutput,
    config: &DetectorConfig,
) -> Vec<(BoundingBox, f64)> {
    let mut cand: Vec<(BoundingBox, f64)> = Vec::with_capacity(anchors.boxes.len());
    for (i, anchor) in anchors.boxes.iter().enumerate() {
        if anchor.width() <= 0.0 || anchor.height() <= 0.0 {
            continue;
        }
        let b = BoxCoder::UNIT.decode(anchor, &rpn.delta(i), config.width, config.height);
        if b.width() < 1.0 || b.height() < 1.0 {
            continue;
        }
        cand.push((b, sigmoid(rpn.logit(i))));
    }
    let scores: Vec<f64> = cand.iter().map(|c| c.1).collect();
    let mut order = crate::eval::score_order(&scores);
    order.truncate(config.pre_nms_top_n.max(config.top_n));
    let boxes: Vec<BoundingBox> = order.iter().map(|&i| cand[i].0).collect();
    let sc: Vec<f64> = order.iter().map(|&i| cand[i].1).collect();
    let mut keep = nms(&boxes, &sc, config.rpn_nms_iou);
    keep.truncate(config.top_n);
    keep.into_iter().map(|k| (boxes[k], sc[k])).collect()
}

/// Proposal boxes and objectness for one frame's feature map.
pub fn propose(params: &ParamStore, config: &DetectorConfig, map: &FeatureMap) -> Vec<(BoundingBox, f64)> {
    let rpn = rpn_forward(params, map);
    let anchors = generate_anchors(map, &config.anchor_scales, &config.anchor_ratios, config.width, config.height);
    select_proposals(&anchors, &rpn, config)
}

#[derive(Debug, Clone)]
pub struct RoiCache {
    align: RoiAlignCache,
    pooled: Mat,
    features: Mat,
    cells: usize,
}

/// One `d`-vector per box: ROI-Align, fully connected projection, ReLU.
pub fn roi_features(params: &ParamStore, config: &DetectorConfig, map: &FeatureMap, boxes: &[BoundingBox]) -> (Mat, RoiCache) {
    let (pooled, align) = roi_align(map, boxes, config.roi_grid, config.roi_samples);
    let mut features = pooled.dot(params.get("roi.fc.w")) + params.get("roi.fc.b");
    relu_inplace(&mut features);
    let cache = RoiCache {
        align,
        pooled,
        features: features.clone(),
        cells: map.h * map.w,
    };
    (features, cache)
}

/// Accumulates projection gradients and returns the feature-map gradient.
pub fn roi_features_backward(params: &ParamStore, cache: &RoiCache, dfeatures: &Mat, grads: &mut ParamStore) -> Mat {
    let dpre = relu_backward(dfeatures, &cache.features);
    grads.accumulate("roi.fc.w", &cache.pooled.t().dot(&dpre));
    grads.accumulate("roi.fc.b", &dpre.sum_axis(Axis(0)).insert_axis(Axis(0)));
    let dpooled = dpre.dot(&params.get("roi.fc.w").t());
    roi_align_backward(&cache.align, &dpooled, cache.cells)
}

/// Full single-frame inference: proposals with their `d`-dim features.
pub fn frame_proposals(params: &ParamStore, config: &DetectorConfig, frame: &Frame, frame_index: usize) -> Result<Vec<Proposal>> {
    let map = extract_backbone_features(params, config, frame)?;
    let props = propose(params, config, &map);
    let boxes: Vec<BoundingBox> = props.iter().map(|p| p.0).collect();
    let (feats, _) = roi_features(params, config, &map, &boxes);
    Ok(props
        .into_iter()
        .zip(feats.rows())
        .map(|((bbox, objectness), f)| Proposal {
            bbox,
            objectness,
            feature: f.to_vec(),
            frame_index,
        })
        .collect())
}
