//! Loader for VID-style annotation trees: one folder per video holding one
//! XML file per frame (`000000.xml`, `000001.xml`, ...). Pixels are not read
//! here; frames are deferred and decoded on first use.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use super::{AnnotatedObject, BoundingBox, ClassId, Frame, FrameAnnotation, Source, VideoRecord};
use crate::error::{Error, Result};

/// Maps annotation class names (e.g. WordNet synsets) to corpus class ids.
pub type ClassLookup = HashMap<String, ClassId>;

const IMAGE_EXTENSIONS: [&str; 4] = ["JPEG", "jpeg", "jpg", "png"];

/// Read every video folder under `annotation_root`.
///
/// When `data_root` is given it must mirror the folder structure and hold the
/// frame images; images without an annotation file become frames with an
/// empty annotation.
pub fn ingest_vid_annotations(
    annotation_root: &Path,
    data_root: Option<&Path>,
    classes: &ClassLookup,
) -> Result<Vec<VideoRecord>> {
    let mut folders: Vec<PathBuf> = read_dir_sorted(annotation_root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    folders.sort();
    let mut videos = Vec::with_capacity(folders.len());
    for folder in folders {
        let name = folder
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        let images = data_root.map(|d| d.join(&name));
        if let Some(video) = ingest_video(&name, &folder, images.as_deref(), classes)? {
            videos.push(video);
        }
    }
    Ok(videos)
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn frame_index(path: &Path) -> Option<usize> {
    path.file_stem()?.to_str()?.parse().ok()
}

struct ParsedFrame {
    width: usize,
    height: usize,
    annotation: FrameAnnotation,
}

fn ingest_video(
    video_id: &str,
    folder: &Path,
    image_folder: Option<&Path>,
    classes: &ClassLookup,
) -> Result<Option<VideoRecord>> {
    let mut parsed: BTreeMap<usize, ParsedFrame> = BTreeMap::new();
    for path in read_dir_sorted(folder)? {
        if path.extension().and_then(|e| e.to_str()) != Some("xml") {
            continue;
        }
        let index = frame_index(&path).ok_or_else(|| Error::Ingestion {
            path: path.clone(),
            reason: "file name is not a frame number".into(),
        })?;
        parsed.insert(index, parse_annotation_file(&path, classes)?);
    }

    let mut images: BTreeMap<usize, PathBuf> = BTreeMap::new();
    if let Some(dir) = image_folder.filter(|d| d.is_dir()) {
        for path in read_dir_sorted(dir)? {
            let is_image = path
                .extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e));
            if let (true, Some(i)) = (is_image, frame_index(&path)) {
                images.insert(i, path);
            }
        }
    }

    let mut indices: Vec<usize> = parsed.keys().chain(images.keys()).copied().collect();
    indices.sort_unstable();
    indices.dedup();
    if indices.is_empty() {
        return Ok(None);
    }
    let Some(first) = parsed.values().next() else {
        return Err(Error::Ingestion {
            path: folder.to_path_buf(),
            reason: "images present but no annotation gives the frame size".into(),
        });
    };
    let (width, height) = (first.width, first.height);

    let mut frames = Vec::with_capacity(indices.len());
    let mut annotations = Vec::with_capacity(indices.len());
    for i in indices {
        let annotation = match parsed.remove(&i) {
            Some(p) => {
                if (p.width, p.height) != (width, height) {
                    return Err(Error::Ingestion {
                        path: folder.join(format!("{i:06}.xml")),
                        reason: format!(
                            "frame size {}x{} differs from {width}x{height}",
                            p.width, p.height
                        ),
                    });
                }
                p.annotation
            }
            None => FrameAnnotation::default(),
        };
        frames.push(Frame::deferred(height, width, 3, images.get(&i).cloned()));
        annotations.push(annotation);
    }
    VideoRecord::new(video_id, frames, annotations, Source::Ingested)
        .map(Some)
        .map_err(|e| Error::Ingestion {
            path: folder.to_path_buf(),
            reason: e.to_string(),
        })
}

fn parse_annotation_file(path: &Path, classes: &ClassLookup) -> Result<ParsedFrame> {
    let fail = |reason: String| Error::Ingestion {
        path: path.to_path_buf(),
        reason,
    };
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let doc = roxmltree::Document::parse(&text).map_err(|e| fail(format!("malformed XML: {e}")))?;
    let root = doc.root_element();

    let child_text = |node: roxmltree::Node, tag: &str| -> Result<String> {
        node.children()
            .find(|c| c.has_tag_name(tag))
            .and_then(|c| c.text())
            .map(|t| t.trim().to_string())
            .ok_or_else(|| fail(format!("missing <{tag}>")))
    };
    let number = |node: roxmltree::Node, tag: &str| -> Result<f64> {
        let raw = child_text(node, tag)?;
        raw.parse::<f64>()
            .map_err(|_| fail(format!("<{tag}> is not a number: {raw:?}")))
    };

    let size = root
        .children()
        .find(|c| c.has_tag_name("size"))
        .ok_or_else(|| fail("missing <size>".into()))?;
    let width = number(size, "width")?;
    let height = number(size, "height")?;
    if !(width >= 1.0 && height >= 1.0) {
        return Err(fail(format!("invalid frame size {width}x{height}")));
    }
    let (width, height) = (width as usize, height as usize);

    let mut annotation = FrameAnnotation::default();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        let name = child_text(obj, "name")?;
        let class_id = *classes
            .get(&name)
            .ok_or_else(|| fail(format!("unknown class {name:?} with no table entry")))?;
        let bndbox = obj
            .children()
            .find(|c| c.has_tag_name("bndbox"))
            .ok_or_else(|| fail("object without <bndbox>".into()))?;
        let (x1, y1) = (number(bndbox, "xmin")?, number(bndbox, "ymin")?);
        let (x2, y2) = (number(bndbox, "xmax")?, number(bndbox, "ymax")?);
        let bbox = BoundingBox::new(x1, y1, x2, y2).map_err(|e| fail(e.to_string()))?;
        if !bbox.fits_in(width, height) {
            return Err(fail(format!("box {:?} exceeds {width}x{height}", bbox.to_array())));
        }
        annotation.objects.push(AnnotatedObject { class_id, bbox });
    }
    Ok(ParsedFrame {
        width,
        height,
        annotation,
    })
}
