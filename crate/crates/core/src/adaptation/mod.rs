//! Base pretraining and few-shot adaptation under the Joint, Freeze and
//! Thaw strategies.
//!
//! The extractor partition holds backbone, RPN, ROI projection and
//! aggregation parameters; the head partition holds the classifier and the
//! box regressor. Freeze updates only the head. Thaw runs Freeze and then
//! trains everything for a few extra iterations with fresh optimizer state.

pub mod loss;
pub mod train;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use loss::{detection_loss, LossBreakdown};
pub use train::{LossPoint, Schedule};

use crate::corpus::{ClassId, VideoRecord};
use crate::datasets::{check_balanced, subsample_frames, DatasetManifest, DatasetRole};
use crate::error::{Error, Result};
use crate::head::{expand_head, HeadVariant, DEFAULT_SIGMA};
use crate::model::{ModelConfig, VideoModel};
use crate::seed::derive_seed;
use train::{run_phase, Phase, Trainable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Joint,
    Freeze,
    Thaw,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Joint, Strategy::Freeze, Strategy::Thaw];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Joint => "joint",
            Strategy::Freeze => "freeze",
            Strategy::Thaw => "thaw",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Strategy::Joint),
            "freeze" => Ok(Strategy::Freeze),
            "thaw" => Ok(Strategy::Thaw),
            other => Err(Error::Config(format!("unknown strategy {other:?} (expected joint, freeze or thaw)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub schedule: Schedule,
    /// Frames kept per training video, evenly spaced.
    pub frames_per_video: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            schedule: Schedule::default(),
            frames_per_video: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    /// Fine-tuning iterations (Freeze/Joint, and Thaw's first phase).
    pub finetune_iterations: usize,
    pub thaw_extra_one_shot: usize,
    pub thaw_extra_multi_shot: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub warmup_iterations: usize,
    pub sgd: crate::params::SgdConfig,
    pub head_variant: HeadVariant,
    pub sigma: f64,
    pub frames_per_video: usize,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        AdaptationConfig {
            finetune_iterations: 400,
            thaw_extra_one_shot: 50,
            thaw_extra_multi_shot: 200,
            learning_rate: 0.01,
            batch_size: 2,
            warmup_iterations: 0,
            sgd: crate::params::SgdConfig::default(),
            head_variant: HeadVariant::Cosine,
            sigma: DEFAULT_SIGMA,
            frames_per_video: 15,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule(0).validate("adaptation")?;
        if !(self.sigma > 0.0) {
            return Err(Error::Config("adaptation.sigma must be positive".into()));
        }
        if self.frames_per_video < 2 {
            return Err(Error::Config("adaptation.frames_per_video must be at least 2".into()));
        }
        Ok(())
    }

    pub fn thaw_extra_iterations(&self, shot: usize) -> usize {
        if shot <= 1 {
            self.thaw_extra_one_shot
        } else {
            self.thaw_extra_multi_shot
        }
    }

    fn schedule(&self, iterations: usize) -> Schedule {
        Schedule {
            iterations,
            learning_rate: self.learning_rate,
            lr_drop_fraction: None,
            lr_drop_factor: 1.0,
            warmup_iterations: self.warmup_iterations,
            batch_size: self.batch_size,
            sgd: self.sgd,
        }
    }
}

pub struct PretrainOutcome {
    pub model: VideoModel,
    pub losses: Vec<LossPoint>,
}

fn training_videos(videos: &[VideoRecord], frames: usize) -> Result<Vec<VideoRecord>> {
    videos.iter().map(|v| subsample_frames(v, frames)).collect()
}

/// Train a detector with a fully connected head over the split's base
/// classes on a base dataset.
pub fn pretrain(
    manifest: &DatasetManifest,
    videos: &[VideoRecord],
    model_config: &ModelConfig,
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    if !matches!(manifest.role, DatasetRole::BaseWeak | DatasetRole::BaseStrong) {
        return Err(Error::Contract(format!("pretraining needs a base manifest, got {:?}", manifest.role)));
    }
    if videos.is_empty() {
        return Err(Error::Data("base dataset is empty".into()));
    }
    config.schedule.validate("pretrain.schedule")?;
    let classes: Vec<ClassId> = manifest.split.base_classes.iter().copied().collect();
    let mut model = VideoModel::new(model_config.clone(), classes, seed)?;
    let train = training_videos(videos, config.frames_per_video)?;
    let losses = run_phase(
        &mut model,
        &train,
        &Phase {
            tag: "pretrain",
            schedule: &config.schedule,
            trainable: Trainable::All,
            seed,
            first_iteration: 0,
        },
    )?;
    Ok(PretrainOutcome { model, losses })
}

/// Head surgery before adaptation: optional switch to the cosine
/// classifier, then columns for the novel classes.
pub fn prepare_head(pretrained: &VideoModel, manifest: &DatasetManifest, config: &AdaptationConfig, seed: u64) -> Result<VideoModel> {
    let base: Vec<ClassId> = manifest.split.base_classes.iter().copied().collect();
    if pretrained.head.classes != base {
        return Err(Error::Contract(format!(
            "pretrained head covers classes {:?}, split {} has base classes {:?}",
            pretrained.head.classes, manifest.split.name, base
        )));
    }
    let head = match config.head_variant {
        HeadVariant::Cosine => pretrained.head.to_cosine(config.sigma)?,
        HeadVariant::FullyConnected => pretrained.head.clone(),
    };
    let novel: Vec<ClassId> = manifest.split.novel_classes.iter().copied().collect();
    let head = expand_head(&head, &novel, derive_seed(seed, &["head", "novel"]))?;
    Ok(VideoModel {
        config: pretrained.config.clone(),
        extractor: pretrained.extractor.clone(),
        head,
    })
}

pub struct AdaptOutcome {
    pub model: VideoModel,
    /// Thaw only: the model at the end of the frozen phase.
    pub phase1: Option<VideoModel>,
    pub losses: Vec<LossPoint>,
    pub record: RunRecord,
}

/// Fine-tune `pretrained` on a balanced few-shot dataset.
pub fn adapt(
    pretrained: &VideoModel,
    manifest: &DatasetManifest,
    videos: &[VideoRecord],
    strategy: Strategy,
    config: &AdaptationConfig,
    seed: u64,
) -> Result<AdaptOutcome> {
    config.validate()?;
    if manifest.role != DatasetRole::FewshotBalanced {
        return Err(Error::Contract(format!("adaptation needs a few-shot manifest, got {:?}", manifest.role)));
    }
    check_balanced(manifest, videos)?;
    let shot = manifest.shot.unwrap_or_default();
    let mut model = prepare_head(pretrained, manifest, config, seed)?;
    let extractor_before = model.extractor_digest();
    let head_before = model.head_digest();
    let train = training_videos(videos, config.frames_per_video)?;

    let first = config.schedule(config.finetune_iterations);
    let mut losses = run_phase(
        &mut model,
        &train,
        &Phase {
            tag: "finetune",
            schedule: &first,
            trainable: match strategy {
                Strategy::Joint => Trainable::All,
                Strategy::Freeze | Strategy::Thaw => Trainable::HeadOnly,
            },
            seed,
            first_iteration: 0,
        },
    )?;
    let mut phase1 = None;
    let mut phase1_digests = None;
    let extra = if strategy == Strategy::Thaw {
        config.thaw_extra_iterations(shot)
    } else {
        0
    };
    if strategy == Strategy::Thaw {
        phase1_digests = Some(PartitionDigests {
            extractor: model.extractor_digest(),
            head: model.head_digest(),
        });
        phase1 = Some(model.clone());
        let second = config.schedule(extra);
        losses.extend(run_phase(
            &mut model,
            &train,
            &Phase {
                tag: "thaw",
                schedule: &second,
                trainable: Trainable::All,
                seed,
                first_iteration: config.finetune_iterations,
            },
        )?);
    }
    if strategy == Strategy::Freeze && model.extractor_digest() != extractor_before {
        return Err(Error::Contract("frozen extractor changed during adaptation".into()));
    }
    let record = RunRecord {
        kind: "adapt".into(),
        strategy: Some(strategy),
        split: manifest.split.name.clone(),
        shot: Some(shot),
        seed,
        config_digest: None,
        manifest_digest: manifest.digest(),
        pretrained_digest: Some(PartitionDigests {
            extractor: pretrained.extractor_digest(),
            head: pretrained.head_digest(),
        }),
        before: PartitionDigests {
            extractor: extractor_before,
            head: head_before,
        },
        after: PartitionDigests {
            extractor: model.extractor_digest(),
            head: model.head_digest(),
        },
        phase1: phase1_digests,
        iterations: config.finetune_iterations,
        extra_iterations: extra,
        thaw_optimizer_reset: strategy == Strategy::Thaw,
        shuffle_policy: SHUFFLE_POLICY.into(),
        final_loss: losses.last().map(|l| l.loss),
        extra: BTreeMap::new(),
    };
    Ok(AdaptOutcome {
        model,
        phase1,
        losses,
        record,
    })
}

/// How global-pool orders are drawn; recorded with every run.
pub const SHUFFLE_POLICY: &str = "fixed per (video, run seed)";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionDigests {
    pub extractor: String,
    pub head: String,
}

/// Contents of `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub kind: String,
    pub strategy: Option<Strategy>,
    pub split: String,
    pub shot: Option<usize>,
    pub seed: u64,
    pub config_digest: Option<String>,
    pub manifest_digest: String,
    pub pretrained_digest: Option<PartitionDigests>,
    pub before: PartitionDigests,
    pub after: PartitionDigests,
    /// Thaw only: digests at the end of the frozen phase.
    pub phase1: Option<PartitionDigests>,
    pub iterations: usize,
    pub extra_iterations: usize,
    /// Thaw's second phase starts with zeroed momentum buffers.
    pub thaw_optimizer_reset: bool,
    pub shuffle_policy: String,
    pub final_loss: Option<LossBreakdown>,
    #[serde(default)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl RunRecord {
    pub fn pretrain(manifest: &DatasetManifest, seed: u64, initial: PartitionDigests, outcome: &PretrainOutcome, iterations: usize) -> Self {
        RunRecord {
            kind: "pretrain".into(),
            strategy: None,
            split: manifest.split.name.clone(),
            shot: None,
            seed,
            config_digest: None,
            manifest_digest: manifest.digest(),
            pretrained_digest: None,
            before: initial,
            after: PartitionDigests {
                extractor: outcome.model.extractor_digest(),
                head: outcome.model.head_digest(),
            },
            phase1: None,
            iterations,
            extra_iterations: 0,
            thaw_optimizer_reset: false,
            shuffle_policy: SHUFFLE_POLICY.into(),
            final_loss: outcome.losses.last().map(|l| l.loss),
            extra: BTreeMap::new(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}
