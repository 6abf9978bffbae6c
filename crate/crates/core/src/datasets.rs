//! Dataset construction: clean/perfect predicates, base datasets, balanced
//! few-shot and validation sampling, and even frame subsampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{ClassId, Corpus, VideoRecord};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, digest_bytes, rng};

/// True iff exactly one class is annotated across the whole video.
/// A video with no annotated objects is not clean.
pub fn is_clean(video: &VideoRecord) -> bool {
    video.classes().len() == 1
}

/// Clean, and every frame holds exactly one object. An empty frame disqualifies.
pub fn is_perfect(video: &VideoRecord) -> bool {
    is_clean(video) && video.annotations().iter().all(|a| a.objects.len() == 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSplit {
    pub name: String,
    pub base_classes: BTreeSet<ClassId>,
    pub novel_classes: BTreeSet<ClassId>,
}

impl ClassSplit {
    pub fn new(
        name: impl Into<String>,
        base: impl IntoIterator<Item = ClassId>,
        novel: impl IntoIterator<Item = ClassId>,
    ) -> Result<Self> {
        let split = ClassSplit {
            name: name.into(),
            base_classes: base.into_iter().collect(),
            novel_classes: novel.into_iter().collect(),
        };
        split.validate()?;
        Ok(split)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_classes.is_empty() || self.novel_classes.is_empty() {
            return Err(Error::Config(format!(
                "split {}: base and novel class sets must be non-empty",
                self.name
            )));
        }
        if let Some(c) = self.base_classes.intersection(&self.novel_classes).next() {
            return Err(Error::Config(format!(
                "split {}: class {c} is both base and novel",
                self.name
            )));
        }
        Ok(())
    }

    /// Base then novel, each ascending. This is the head's column order.
    pub fn all_classes(&self) -> Vec<ClassId> {
        self.base_classes
            .iter()
            .chain(self.novel_classes.iter())
            .copied()
            .collect()
    }

    pub fn is_base(&self, c: ClassId) -> bool {
        self.base_classes.contains(&c)
    }

    pub fn is_novel(&self, c: ClassId) -> bool {
        self.novel_classes.contains(&c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetRole {
    BaseWeak,
    BaseStrong,
    FewshotBalanced,
    ValidationBalanced,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseMode {
    Weak,
    Strong,
}

impl BaseMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BaseMode::Weak => "weak",
            BaseMode::Strong => "strong",
        }
    }
}

/// Reference to a single frame of a corpus video used as a still image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StillRef {
    pub video_id: String,
    pub frame: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub role: DatasetRole,
    pub split: ClassSplit,
    pub video_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub still_images: Vec<StillRef>,
    pub shot: Option<usize>,
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn digest(&self) -> String {
        digest_bytes(&serde_json::to_vec(self).expect("manifest serializes"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    /// Resolve ids against `corpus`: videos first, then still images as
    /// one-frame records named `<video_id>@<frame>`.
    pub fn resolve(&self, corpus: &Corpus) -> Result<Vec<VideoRecord>> {
        let index: BTreeMap<&str, &VideoRecord> =
            corpus.videos.iter().map(|v| (v.video_id.as_str(), v)).collect();
        let lookup = |id: &str| {
            index
                .get(id)
                .copied()
                .ok_or_else(|| Error::Data(format!("manifest references missing video {id}")))
        };
        let mut out = Vec::with_capacity(self.video_ids.len() + self.still_images.len());
        for id in &self.video_ids {
            out.push(lookup(id)?.clone());
        }
        for still in &self.still_images {
            let video = lookup(&still.video_id)?;
            if still.frame >= video.len() {
                return Err(Error::Data(format!(
                    "still image {}@{} beyond video length {}",
                    still.video_id,
                    still.frame,
                    video.len()
                )));
            }
            out.push(video.select_frames(&[still.frame], format!("{}@{}", still.video_id, still.frame))?);
        }
        Ok(out)
    }
}

/// Weak: perfect base-class videos. Strong: every video whose classes are all
/// base, plus `stills_per_video` evenly spaced frames of each as still images.
pub fn build_base_dataset(
    corpus: &Corpus,
    split: &ClassSplit,
    mode: BaseMode,
    stills_per_video: usize,
) -> Result<DatasetManifest> {
    split.validate()?;
    if corpus.videos.is_empty() {
        return Err(Error::Construction("corpus is empty".into()));
    }
    let mut per_class: BTreeMap<ClassId, usize> = split.base_classes.iter().map(|&c| (c, 0)).collect();
    let mut video_ids = Vec::new();
    let mut still_images = Vec::new();
    for video in &corpus.videos {
        let classes = video.classes();
        let only_base = !classes.is_empty() && classes.iter().all(|c| split.is_base(*c));
        let take = match mode {
            BaseMode::Weak => only_base && is_perfect(video),
            BaseMode::Strong => only_base,
        };
        if !take {
            continue;
        }
        for c in &classes {
            *per_class.get_mut(c).expect("base class") += 1;
        }
        video_ids.push(video.video_id.clone());
        if mode == BaseMode::Strong && stills_per_video > 0 {
            let n = stills_per_video.min(video.len());
            let mut frames: Vec<usize> = (0..n).map(|i| (2 * i + 1) * video.len() / (2 * n)).collect();
            frames.dedup();
            still_images.extend(frames.into_iter().map(|frame| StillRef {
                video_id: video.video_id.clone(),
                frame,
            }));
        }
    }
    if let Some((c, _)) = per_class.iter().find(|(_, n)| **n == 0) {
        return Err(Error::Construction(format!(
            "base class {c} has no qualifying videos for the {} base dataset",
            mode.as_str()
        )));
    }
    Ok(DatasetManifest {
        role: match mode {
            BaseMode::Weak => DatasetRole::BaseWeak,
            BaseMode::Strong => DatasetRole::BaseStrong,
        },
        split: split.clone(),
        video_ids,
        still_images,
        shot: None,
        seed: None,
    })
}

fn sample_per_class(
    corpus: &Corpus,
    split: &ClassSplit,
    per_class: usize,
    seed: u64,
    qualifies: fn(&VideoRecord) -> bool,
    what: &str,
) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for class in split.all_classes() {
        let mut pool: Vec<&str> = corpus
            .videos
            .iter()
            .filter(|v| qualifies(v) && v.classes() == [class])
            .map(|v| v.video_id.as_str())
            .collect();
        pool.sort_unstable();
        if pool.len() < per_class {
            return Err(Error::Sampling(format!(
                "class {class} has {} {what} videos, {per_class} required",
                pool.len()
            )));
        }
        let mut r = rng(derive_seed(seed, &[what, &class.to_string()]));
        ids.extend(pool.choose_multiple(&mut r, per_class).map(|s| s.to_string()));
    }
    Ok(ids)
}

/// `K` perfect videos for every base and novel class, `(N+M)*K` in total.
pub fn sample_balanced_fewshot(corpus: &Corpus, split: &ClassSplit, shot: usize, seed: u64) -> Result<DatasetManifest> {
    split.validate()?;
    if shot == 0 {
        return Err(Error::Argument("shot count must be at least 1".into()));
    }
    let video_ids = sample_per_class(corpus, split, shot, seed, is_perfect, "perfect")?;
    Ok(DatasetManifest {
        role: DatasetRole::FewshotBalanced,
        split: split.clone(),
        video_ids,
        still_images: vec![],
        shot: Some(shot),
        seed: Some(seed),
    })
}

/// `per_class` clean videos for every class of the split.
pub fn sample_balanced_validation(
    corpus: &Corpus,
    split: &ClassSplit,
    per_class: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    split.validate()?;
    let video_ids = sample_per_class(corpus, split, per_class, seed, is_clean, "clean")?;
    Ok(DatasetManifest {
        role: DatasetRole::ValidationBalanced,
        split: split.clone(),
        video_ids,
        still_images: vec![],
        shot: Some(per_class),
        seed: Some(seed),
    })
}

/// Check the few-shot contract: every class of the split has exactly `shot`
/// perfect single-class videos.
pub fn check_balanced(manifest: &DatasetManifest, videos: &[VideoRecord]) -> Result<()> {
    let shot = manifest
        .shot
        .ok_or_else(|| Error::Contract("few-shot manifest has no shot count".into()))?;
    let mut hist: BTreeMap<ClassId, usize> = BTreeMap::new();
    for v in videos {
        if !is_perfect(v) {
            return Err(Error::Contract(format!("{} is not a perfect video", v.video_id)));
        }
        *hist.entry(v.classes()[0]).or_default() += 1;
    }
    for c in manifest.split.all_classes() {
        let n = hist.remove(&c).unwrap_or(0);
        if n != shot {
            return Err(Error::Contract(format!(
                "class {c} has {n} videos in the few-shot set, expected {shot}"
            )));
        }
    }
    if let Some(c) = hist.keys().next() {
        return Err(Error::Contract(format!("class {c} is outside the split")));
    }
    Ok(())
}

/// Indices `floor(i (T-1) / (count-1))` for `i = 0..count`, or all frames
/// when `T <= count`.
pub fn subsample_indices(len: usize, count: usize) -> Vec<usize> {
    assert!(count >= 2, "subsample count must be at least 2");
    if len <= count {
        return (0..len).collect();
    }
    let mut out: Vec<usize> = (0..count).map(|i| i * (len - 1) / (count - 1)).collect();
    out.dedup();
    out
}

pub fn subsample_frames(video: &VideoRecord, count: usize) -> Result<VideoRecord> {
    if count < 2 {
        return Err(Error::Argument("subsample count must be at least 2".into()));
    }
    if video.len() <= count {
        return Ok(video.clone());
    }
    video.select_frames(&subsample_indices(video.len(), count), video.video_id.clone())
}
