//! The full video detector: extractor parameters (backbone, RPN, ROI
//! projection, aggregation) plus a detection head, with video inference and
//! checkpoint I/O.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{self, AggregationConfig, MemoryEntry, PoolState};
use crate::corpus::{BoundingBox, ClassId, Frame, VideoRecord};
use crate::detector::{self, DetectorConfig, Proposal};
use crate::error::{Error, Result};
use crate::eval::{Detection, VideoDetector};
use crate::head::{softmax, BoxCoder, DetectionHead, HeadVariant};
use crate::params::{Mat, ParamStore, TensorEntry};
use crate::seed::{derive_seed, digest_bytes, rng};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;
const HEAD_PREFIX: &str = "head.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub detector: DetectorConfig,
    pub aggregation: AggregationConfig,
    /// Minimum class probability for a detection to be emitted.
    pub score_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            detector: DetectorConfig::default(),
            aggregation: AggregationConfig::default(),
            score_threshold: 0.05,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.detector.validate()?;
        self.aggregation.validate()?;
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(Error::Config("model.score_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoModel {
    pub config: ModelConfig,
    /// Backbone, RPN, ROI projection and aggregation parameters.
    pub extractor: ParamStore,
    pub head: DetectionHead,
}

/// Features for a key frame after global and memory aggregation.
pub struct KeyFrameOutput {
    pub proposals: Vec<Proposal>,
    pub features: Mat,
}

impl VideoModel {
    /// Freshly initialised model with a fully connected head over `classes`.
    pub fn new(config: ModelConfig, classes: Vec<ClassId>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng(derive_seed(seed, &["init", "extractor"]));
        let mut extractor = detector::init_params(&config.detector, &mut r);
        aggregation::init_params(&config.aggregation, config.detector.feature_dim, &mut r, &mut extractor);
        let head = DetectionHead::new_fully_connected(
            config.detector.feature_dim,
            classes,
            derive_seed(seed, &["init", "head"]),
        );
        Ok(VideoModel {
            config,
            extractor,
            head,
        })
    }

    pub fn extractor_digest(&self) -> String {
        self.extractor.digest()
    }

    pub fn head_digest(&self) -> String {
        self.head.params.digest()
    }

    /// Proposals and their un-aggregated features for one frame.
    pub fn frame_proposals(&self, frame: &Frame, frame_index: usize) -> Result<Vec<Proposal>> {
        detector::frame_proposals(&self.extractor, &self.config.detector, frame, frame_index)
    }

    /// Aggregate the key frame's proposal features with the global pool and
    /// the memory. `all` holds every frame's proposals.
    pub fn enhance_key_frame(&self, all: &[Vec<Proposal>], k: usize, state: &PoolState) -> Result<KeyFrameOutput> {
        let cfg = &self.config.aggregation;
        let props = all[k].clone();
        let d = self.config.detector.feature_dim;
        let x = features_of(props.iter(), d);
        if !cfg.enabled || props.is_empty() {
            return Ok(KeyFrameOutput { proposals: props, features: x });
        }
        let global: Vec<&Proposal> = aggregation::global_frames(&state.shuffle, k, cfg.global_frames)
            .into_iter()
            .flat_map(|t| all[t].iter())
            .collect();
        let g = features_of(global.into_iter(), d);
        let (xg, _) = aggregation::aggregate_global(&self.extractor, cfg, &x, &g)?;
        let boxes: Vec<BoundingBox> = props.iter().map(|p| p.bbox).collect();
        let memory: Vec<&MemoryEntry> = state.memory().iter().collect();
        let (xm, _) = aggregation::aggregate_memory(&self.extractor, cfg, &xg, &boxes, &memory)?;
        Ok(KeyFrameOutput {
            proposals: props,
            features: xm,
        })
    }

    /// Detections for every frame of `video`. Memory starts empty; the
    /// global-pool order is fixed by `shuffle_seed`.
    pub fn detect(&self, video: &VideoRecord, shuffle_seed: u64) -> Result<Vec<Detection>> {
        let all: Vec<Vec<Proposal>> = video
            .frames()
            .iter()
            .enumerate()
            .map(|(t, f)| self.frame_proposals(f, t))
            .collect::<Result<_>>()?;
        let mut state = PoolState::new(video.len(), shuffle_seed, self.config.aggregation.memory_capacity);
        let mut out = Vec::new();
        for k in 0..video.len() {
            let key = self.enhance_key_frame(&all, k, &state)?;
            out.extend(self.classify(&video.video_id, k, &key));
            if self.config.aggregation.enabled && !key.proposals.is_empty() {
                let boxes: Vec<BoundingBox> = key.proposals.iter().map(|p| p.bbox).collect();
                state.commit(k, &key.features, &boxes)?;
            }
        }
        Ok(out)
    }

    fn classify(&self, video_id: &str, k: usize, key: &KeyFrameOutput) -> Vec<Detection> {
        if key.proposals.is_empty() {
            return Vec::new();
        }
        let (w, h) = (self.config.detector.width, self.config.detector.height);
        let (out, _) = self.head.forward(&key.features);
        let mut dets = Vec::new();
        for (i, p) in key.proposals.iter().enumerate() {
            let probs = softmax(&out.logits.row(i).to_vec());
            for (col, &prob) in probs.iter().enumerate().skip(1) {
                if prob < self.config.score_threshold {
                    continue;
                }
                let s = 4 * (col - 1);
                let deltas = out.deltas.row(i);
                let bbox = BoxCoder::HEAD.decode(&p.bbox, &[deltas[s], deltas[s + 1], deltas[s + 2], deltas[s + 3]], w, h);
                if !bbox.is_valid() {
                    continue;
                }
                dets.push(Detection {
                    video_id: video_id.to_string(),
                    frame_index: k,
                    class_id: self.head.classes[col - 1],
                    bbox,
                    score: prob,
                });
            }
        }
        dets
    }

    /// Structural fingerprint: configuration plus tensor names and shapes.
    pub fn architecture_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serialises"));
        for (name, t) in self.extractor.iter().chain(self.head.params.iter()) {
            h.update(name.as_bytes());
            h.update(format!("{:?}", t.shape()).as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Write `weights.bin` and `checkpoint.json` into `dir`.
    pub fn save(&self, dir: &Path, meta: &BTreeMap<String, serde_json::Value>) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut all = self.extractor.clone();
        for (name, t) in self.head.params.iter() {
            all.insert(format!("{HEAD_PREFIX}{name}"), t.clone());
        }
        let (tensors, blob) = all.to_blob();
        let weights = dir.join("weights.bin");
        fs::write(&weights, &blob).map_err(|e| Error::io(&weights, e))?;
        let sidecar = CheckpointMeta {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            architecture_hash: self.architecture_hash(),
            weights_digest: digest_bytes(&blob),
            extractor_digest: self.extractor_digest(),
            head_digest: self.head_digest(),
            config: self.config.clone(),
            head_variant: self.head.variant,
            sigma: self.head.sigma,
            classes: self.head.classes.clone(),
            tensors,
            meta: meta.clone(),
        };
        let path = dir.join("checkpoint.json");
        let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<(Self, CheckpointMeta)> {
        let path = dir.join("checkpoint.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if meta.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Version {
                path,
                reason: format!(
                    "checkpoint schema {} (expected {CHECKPOINT_SCHEMA_VERSION})",
                    meta.schema_version
                ),
            });
        }
        let weights = dir.join("weights.bin");
        let blob = fs::read(&weights).map_err(|e| Error::io(&weights, e))?;
        if digest_bytes(&blob) != meta.weights_digest {
            return Err(Error::Data(format!("{}: digest does not match checkpoint.json", weights.display())));
        }
        let all = ParamStore::from_blob(&meta.tensors, &blob)?;
        let mut extractor = ParamStore::new();
        let mut head_params = ParamStore::new();
        for (name, t) in all.iter() {
            match name.strip_prefix(HEAD_PREFIX) {
                Some(rest) => head_params.insert(rest, t.clone()),
                None => extractor.insert(name.clone(), t.clone()),
            }
        }
        let model = VideoModel {
            config: meta.config.clone(),
            extractor,
            head: DetectionHead {
                variant: meta.head_variant,
                sigma: meta.sigma,
                classes: meta.classes.clone(),
                params: head_params,
            },
        };
        if model.architecture_hash() != meta.architecture_hash {
            return Err(Error::Version {
                path,
                reason: "architecture hash does not match the stored tensors".into(),
            });
        }
        Ok((model, meta))
    }
}

/// Stack proposal features into an `n x d` matrix.
pub fn features_of<'a>(props: impl Iterator<Item = &'a Proposal>, d: usize) -> Mat {
    let mut data = Vec::new();
    let mut n = 0;
    for p in props {
        data.extend_from_slice(&p.feature);
        n += 1;
    }
    Mat::from_shape_vec((n, d), data).expect("feature dims agree")
}

/// Checkpoint sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub architecture_hash: String,
    pub weights_digest: String,
    pub extractor_digest: String,
    pub head_digest: String,
    pub config: ModelConfig,
    pub head_variant: HeadVariant,
    pub sigma: f64,
    pub classes: Vec<ClassId>,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
}

/// Inference wrapper deriving each video's shuffle seed from `seed`.
pub struct Inference<'a> {
    pub model: &'a VideoModel,
    pub seed: u64,
}

impl VideoDetector for Inference<'_> {
    fn detect_video(&self, video: &VideoRecord) -> Result<Vec<Detection>> {
        self.model.detect(video, derive_seed(self.seed, &["shuffle", &video.video_id]))
    }
}

/// Memory contents after running inference over the first `upto` key frames.
pub fn memory_after(model: &VideoModel, video: &VideoRecord, upto: usize, shuffle_seed: u64) -> Result<VecDeque<MemoryEntry>> {
    let all: Vec<Vec<Proposal>> = video
        .frames()
        .iter()
        .enumerate()
        .map(|(t, f)| model.frame_proposals(f, t))
        .collect::<Result<_>>()?;
    let mut state = PoolState::new(video.len(), shuffle_seed, model.config.aggregation.memory_capacity);
    for k in 0..upto.min(video.len()) {
        let key = model.enhance_key_frame(&all, k, &state)?;
        if !key.proposals.is_empty() {
            let boxes: Vec<BoundingBox> = key.proposals.iter().map(|p| p.bbox).collect();
            state.commit(k, &key.features, &boxes)?;
        }
    }
    Ok(state.memory().clone())
}
