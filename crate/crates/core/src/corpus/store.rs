//! On-disk corpus layout:
//!
//! ```text
//! <root>/manifest.json
//! <root>/<video_id>/frame_00000.png
//! <root>/<video_id>/annotations.jsonl
//! ```
//!
//! Each annotation line is `{"frame": int, "objects": [{"class": int, "box": [x1,y1,x2,y2]}]}`.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnnotatedObject, ClassInfo, Corpus, Frame, FrameAnnotation, Source, VideoRecord};
use crate::error::{Error, Result};

pub const CORPUS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub schema_version: u32,
    pub classes: Vec<ClassInfo>,
    pub videos: Vec<ManifestVideo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestVideo {
    pub video_id: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub source: Source,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationLine {
    frame: usize,
    objects: Vec<AnnotatedObject>,
}

pub fn save_corpus(corpus: &Corpus, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut entries = Vec::with_capacity(corpus.videos.len());
    for video in &corpus.videos {
        if video.video_id.is_empty() || video.video_id.contains(['/', '\\']) || video.video_id.starts_with('.') {
            return Err(Error::Input(format!("video id {:?} is not a valid folder name", video.video_id)));
        }
        let dir = root.join(&video.video_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let (h, w, c) = video.frame_shape();
        for (t, frame) in video.frames().iter().enumerate() {
            let path = dir.join(format!("frame_{t:05}.png"));
            let data = frame.pixels()?.into_owned();
            let color = match c {
                1 => image::ExtendedColorType::L8,
                3 => image::ExtendedColorType::Rgb8,
                _ => return Err(Error::Input(format!("cannot store {c}-channel frames"))),
            };
            image::save_buffer(&path, &data, w as u32, h as u32, color)
                .map_err(|source| Error::Image { path: path.clone(), source })?;
        }
        let ann_path = dir.join("annotations.jsonl");
        let file = fs::File::create(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        let mut out = BufWriter::new(file);
        for (t, ann) in video.annotations().iter().enumerate() {
            let line = AnnotationLine {
                frame: t,
                objects: ann.objects.clone(),
            };
            serde_json::to_writer(&mut out, &line).map_err(|e| Error::json(&ann_path, e))?;
            out.write_all(b"\n").map_err(|e| Error::io(&ann_path, e))?;
        }
        out.flush().map_err(|e| Error::io(&ann_path, e))?;
        entries.push(ManifestVideo {
            video_id: video.video_id.clone(),
            frames: video.len(),
            height: h,
            width: w,
            channels: c,
            source: video.source,
        });
    }
    let manifest = CorpusManifest {
        schema_version: CORPUS_SCHEMA_VERSION,
        classes: corpus.classes.clone(),
        videos: entries,
    };
    let path = root.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn load_corpus(root: &Path) -> Result<Corpus> {
    let path = root.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::Version {
        path: path.clone(),
        reason: format!("manifest unreadable: {e}"),
    })?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
    match raw.get("schema_version").and_then(|v| v.as_u64()) {
        Some(v) if v == CORPUS_SCHEMA_VERSION as u64 => {}
        other => {
            return Err(Error::Version {
                path,
                reason: format!("expected schema_version {CORPUS_SCHEMA_VERSION}, found {other:?}"),
            })
        }
    }
    let manifest: CorpusManifest = serde_json::from_value(raw).map_err(|e| Error::json(&path, e))?;

    let mut videos = Vec::with_capacity(manifest.videos.len());
    for entry in &manifest.videos {
        let dir = root.join(&entry.video_id);
        let mut frames = Vec::with_capacity(entry.frames);
        for t in 0..entry.frames {
            let fpath = dir.join(format!("frame_{t:05}.png"));
            let img = image::open(&fpath).map_err(|source| Error::Image { path: fpath.clone(), source })?;
            let data = match entry.channels {
                1 => img.to_luma8().into_raw(),
                _ => img.to_rgb8().into_raw(),
            };
            frames.push(Frame::from_pixels(entry.height, entry.width, entry.channels, data)?);
        }
        let ann_path = dir.join("annotations.jsonl");
        let file = fs::File::open(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        let mut annotations = vec![FrameAnnotation::default(); entry.frames];
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(&ann_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: AnnotationLine = serde_json::from_str(&line).map_err(|e| Error::json(&ann_path, e))?;
            let slot = annotations.get_mut(rec.frame).ok_or_else(|| Error::Data(format!(
                "{}: frame {} beyond {} frames",
                ann_path.display(),
                rec.frame,
                entry.frames
            )))?;
            slot.objects = rec.objects;
        }
        videos.push(VideoRecord::new(entry.video_id.clone(), frames, annotations, entry.source)?);
    }
    Ok(Corpus {
        classes: manifest.classes,
        videos,
    })
}
