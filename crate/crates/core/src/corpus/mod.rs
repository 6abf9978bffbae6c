//! Video records and the corpora they live in.
//!
//! A corpus is either generated (moving coloured shapes, see [`generate_corpus`])
//! or ingested from a VID-style annotation tree (see [`ingest_vid_annotations`]).
//! Both produce the same [`VideoRecord`] type, which every downstream stage
//! consumes.

mod generate;
mod ingest;
mod store;

use std::borrow::Cow;
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use generate::{class_appearance, generate_corpus, Appearance, CorpusSpec, ObjectInstance, Shape, Texture};
pub use ingest::{ingest_vid_annotations, ClassLookup};
pub use store::{load_corpus, save_corpus, CorpusManifest, ManifestVideo, CORPUS_SCHEMA_VERSION};

pub type ClassId = u32;

/// Axis-aligned box in continuous pixel coordinates, `x2`/`y2` exclusive.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    /// Validating constructor: requires finite coordinates with `x1 < x2`,
    /// `y1 < y2` and a non-negative top-left corner.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BoundingBox { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(Error::Input(format!(
                "invalid box [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(b)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2]
            .iter()
            .all(|v| v.is_finite())
            && self.x1 < self.x2
            && self.y1 < self.y2
            && self.x1 >= 0.0
            && self.y1 >= 0.0
    }

    pub fn fits_in(&self, width: usize, height: usize) -> bool {
        self.x2 <= width as f64 && self.y2 <= height as f64
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Clip into `[0, width] x [0, height]`.
    pub fn clip(&self, width: usize, height: usize) -> Self {
        let (w, h) = (width as f64, height as f64);
        BoundingBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        }
    }
}

impl Serialize for BoundingBox {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_array().serialize(s)
    }
}

impl<'de> Deserialize<'de> for BoundingBox {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(d)?;
        BoundingBox::new(x1, y1, x2, y2).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotatedObject {
    #[serde(rename = "class")]
    pub class_id: ClassId,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

/// Objects annotated on one frame; may be empty.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameAnnotation {
    pub objects: Vec<AnnotatedObject>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    Ingested,
}

#[derive(Debug, Clone, PartialEq)]
enum Pixels {
    Loaded(Arc<Vec<u8>>),
    /// Pixels read on first use; `None` means no image exists and the frame is black.
    Deferred(Option<PathBuf>),
}

/// One `height x width x channels` frame with 8-bit samples. Values read
/// through [`Frame::value`] are in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    height: usize,
    width: usize,
    channels: usize,
    pixels: Pixels,
}

impl Frame {
    pub fn from_pixels(height: usize, width: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Input("frame dimensions must be positive".into()));
        }
        if data.len() != height * width * channels {
            return Err(Error::Input(format!(
                "frame buffer has {} samples, expected {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Frame {
            height,
            width,
            channels,
            pixels: Pixels::Loaded(Arc::new(data)),
        })
    }

    pub fn deferred(height: usize, width: usize, channels: usize, path: Option<PathBuf>) -> Self {
        Frame {
            height,
            width,
            channels,
            pixels: Pixels::Deferred(path),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_loaded(&self) -> bool {
        matches!(self.pixels, Pixels::Loaded(_))
    }

    /// Interleaved HWC samples, reading deferred frames from disk.
    pub fn pixels(&self) -> Result<Cow<'_, [u8]>> {
        match &self.pixels {
            Pixels::Loaded(data) => Ok(Cow::Borrowed(data.as_slice())),
            Pixels::Deferred(None) => Ok(Cow::Owned(vec![
                0;
                self.height * self.width * self.channels
            ])),
            Pixels::Deferred(Some(path)) => {
                let img = image::open(path).map_err(|source| Error::Image {
                    path: path.clone(),
                    source,
                })?;
                let data = match self.channels {
                    1 => img.to_luma8().into_raw(),
                    3 => img.to_rgb8().into_raw(),
                    c => return Err(Error::Input(format!("unsupported channel count {c}"))),
                };
                if img.width() as usize != self.width || img.height() as usize != self.height {
                    return Err(Error::Input(format!(
                        "{} is {}x{}, annotation says {}x{}",
                        path.display(),
                        img.width(),
                        img.height(),
                        self.width,
                        self.height
                    )));
                }
                Ok(Cow::Owned(data))
            }
        }
    }

    /// Returns a copy whose pixels are held in memory.
    pub fn materialize(&self) -> Result<Frame> {
        let data = self.pixels()?.into_owned();
        Frame::from_pixels(self.height, self.width, self.channels, data)
    }

    /// Sample at `(y, x, c)` scaled to `[0, 1]`. Panics on deferred frames.
    pub fn value(&self, y: usize, x: usize, c: usize) -> f64 {
        match &self.pixels {
            Pixels::Loaded(data) => {
                data[(y * self.width + x) * self.channels + c] as f64 / 255.0
            }
            Pixels::Deferred(_) => panic!("Frame::value on a deferred frame"),
        }
    }
}

/// A video: ordered frames with one annotation per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoRecord {
    pub video_id: String,
    frames: Vec<Frame>,
    annotations: Vec<FrameAnnotation>,
    pub source: Source,
}

impl VideoRecord {
    pub fn new(
        video_id: impl Into<String>,
        frames: Vec<Frame>,
        annotations: Vec<FrameAnnotation>,
        source: Source,
    ) -> Result<Self> {
        let video_id = video_id.into();
        if frames.is_empty() {
            return Err(Error::Input(format!("video {video_id} has no frames")));
        }
        if frames.len() != annotations.len() {
            return Err(Error::Input(format!(
                "video {video_id}: {} frames but {} annotations",
                frames.len(),
                annotations.len()
            )));
        }
        let (h, w, c) = (frames[0].height, frames[0].width, frames[0].channels);
        if frames
            .iter()
            .any(|f| f.height != h || f.width != w || f.channels != c)
        {
            return Err(Error::Input(format!(
                "video {video_id}: frames differ in shape"
            )));
        }
        for (t, ann) in annotations.iter().enumerate() {
            for obj in &ann.objects {
                if !obj.bbox.is_valid() || !obj.bbox.fits_in(w, h) {
                    return Err(Error::Input(format!(
                        "video {video_id} frame {t}: box {:?} outside {w}x{h}",
                        obj.bbox.to_array()
                    )));
                }
            }
        }
        Ok(VideoRecord {
            video_id,
            frames,
            annotations,
            source,
        })
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn annotations(&self) -> &[FrameAnnotation] {
        &self.annotations
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_shape(&self) -> (usize, usize, usize) {
        let f = &self.frames[0];
        (f.height, f.width, f.channels)
    }

    /// Sorted, deduplicated class ids appearing anywhere in the video.
    pub fn classes(&self) -> Vec<ClassId> {
        let mut ids: Vec<ClassId> = self
            .annotations
            .iter()
            .flat_map(|a| a.objects.iter().map(|o| o.class_id))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// New record holding the frames at `indices` (in the given order).
    pub fn select_frames(&self, indices: &[usize], video_id: impl Into<String>) -> Result<Self> {
        let frames = indices.iter().map(|&i| self.frames[i].clone()).collect();
        let annotations = indices.iter().map(|&i| self.annotations[i].clone()).collect();
        VideoRecord::new(video_id, frames, annotations, self.source)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: ClassId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub classes: Vec<ClassInfo>,
    pub videos: Vec<VideoRecord>,
}

impl Corpus {
    pub fn video(&self, video_id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.video_id == video_id)
    }

    pub fn class_ids(&self) -> Vec<ClassId> {
        self.classes.iter().map(|c| c.id).collect()
    }
}
