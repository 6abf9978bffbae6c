//! Synthetic corpus: moving coloured shapes on a noisy background.
//!
//! Each class is a fixed combination of shape, colour and texture. Videos come
//! in three kinds (perfect, clean but not perfect, multi-class) in proportions
//! set by [`CorpusSpec`]. Annotation boxes are the tight bounds of each
//! object's rendered mask.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AnnotatedObject, BoundingBox, ClassId, ClassInfo, Corpus, Frame, FrameAnnotation, Source, VideoRecord};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub num_classes: usize,
    pub videos_per_class: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub height: usize,
    pub width: usize,
    /// Fraction of each class's videos that are perfect.
    pub perfect_fraction: f64,
    /// Fraction that are clean but not perfect; the rest are multi-class.
    pub clean_fraction: f64,
    pub min_object_size: f64,
    pub max_object_size: f64,
    /// Maximum speed in pixels per frame along each axis.
    pub max_speed: f64,
    /// Standard deviation of per-pixel noise, in `[0, 1]` intensity units.
    pub noise: f64,
    /// Per-object colour variation: each channel of an object's class colour
    /// is scaled by a factor drawn from `[1 - j, 1 + j]`, fixed for the track.
    pub appearance_jitter: f64,
    pub id_prefix: String,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_classes: 10,
            videos_per_class: 6,
            min_frames: 8,
            max_frames: 16,
            height: 64,
            width: 64,
            perfect_fraction: 0.5,
            clean_fraction: 0.25,
            min_object_size: 14.0,
            max_object_size: 26.0,
            max_speed: 2.5,
            noise: 0.04,
            appearance_jitter: 0.0,
            id_prefix: "syn".into(),
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_classes", self.num_classes),
            ("videos_per_class", self.videos_per_class),
            ("min_frames", self.min_frames),
            ("max_frames", self.max_frames),
            ("height", self.height),
            ("width", self.width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("corpus.{name} must be positive")));
            }
        }
        if self.min_frames > self.max_frames {
            return Err(Error::Config("corpus.min_frames exceeds max_frames".into()));
        }
        let frac_ok = |f: f64| (0.0..=1.0).contains(&f);
        if !frac_ok(self.perfect_fraction)
            || !frac_ok(self.clean_fraction)
            || self.perfect_fraction + self.clean_fraction > 1.0 + 1e-12
        {
            return Err(Error::Config(
                "corpus fractions must lie in [0, 1] and sum to at most 1".into(),
            ));
        }
        if !(self.min_object_size >= 4.0 && self.min_object_size <= self.max_object_size) {
            return Err(Error::Config(
                "corpus object sizes must satisfy 4 <= min <= max".into(),
            ));
        }
        if self.max_object_size * 1.3 >= self.height.min(self.width) as f64 {
            return Err(Error::Config(
                "corpus.max_object_size too large for the frame".into(),
            ));
        }
        if !(self.max_speed >= 0.0) || !(self.noise >= 0.0) {
            return Err(Error::Config("corpus.max_speed and noise must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.appearance_jitter) {
            return Err(Error::Config("corpus.appearance_jitter must lie in [0, 1)".into()));
        }
        let (_, _, multi) = self.kind_counts();
        if multi > 0 && self.num_classes < 2 {
            return Err(Error::Config(
                "multi-class videos need at least two classes".into(),
            ));
        }
        Ok(())
    }

    /// Per-class counts of (perfect, clean-not-perfect, multi-class) videos.
    pub fn kind_counts(&self) -> (usize, usize, usize) {
        let v = self.videos_per_class;
        let perfect = ((self.perfect_fraction * v as f64).round() as usize).min(v);
        let clean = ((self.clean_fraction * v as f64).round() as usize).min(v - perfect);
        (perfect, clean, v - perfect - clean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Square,
    Disk,
    Triangle,
    Diamond,
    Cross,
    Ring,
}

impl Shape {
    const ALL: [Shape; 6] = [
        Shape::Square,
        Shape::Disk,
        Shape::Triangle,
        Shape::Diamond,
        Shape::Cross,
        Shape::Ring,
    ];

    /// Membership test in unit box coordinates.
    fn contains(self, u: f64, v: f64) -> bool {
        let (du, dv) = (u - 0.5, v - 0.5);
        let r2 = du * du + dv * dv;
        match self {
            Shape::Square => true,
            Shape::Disk => r2 <= 0.25,
            Shape::Triangle => v >= (2.0 * u - 1.0).abs(),
            Shape::Diamond => du.abs() + dv.abs() <= 0.5,
            Shape::Cross => du.abs() < 1.0 / 6.0 || dv.abs() < 1.0 / 6.0,
            Shape::Ring => (0.09..=0.25).contains(&r2),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Disk => "disk",
            Shape::Triangle => "triangle",
            Shape::Diamond => "diamond",
            Shape::Cross => "cross",
            Shape::Ring => "ring",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Solid,
    Stripes,
    Checker,
}

impl Texture {
    const ALL: [Texture; 3] = [Texture::Solid, Texture::Stripes, Texture::Checker];

    fn gain(self, px: usize, py: usize) -> f64 {
        match self {
            Texture::Solid => 1.0,
            Texture::Stripes => {
                if (px / 2).is_multiple_of(2) {
                    1.0
                } else {
                    0.55
                }
            }
            Texture::Checker => {
                if (px / 3 + py / 3).is_multiple_of(2) {
                    1.0
                } else {
                    0.5
                }
            }
        }
    }

    fn name(self) -> &'static str {
        match self {
            Texture::Solid => "solid",
            Texture::Stripes => "striped",
            Texture::Checker => "checkered",
        }
    }
}

const PALETTE: [(&str, [f64; 3]); 5] = [
    ("red", [0.92, 0.16, 0.12]),
    ("green", [0.12, 0.80, 0.22]),
    ("blue", [0.16, 0.32, 0.95]),
    ("yellow", [0.95, 0.86, 0.12]),
    ("magenta", [0.86, 0.22, 0.86]),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Appearance {
    pub shape: Shape,
    pub color: [f64; 3],
    pub texture: Texture,
}

/// Fixed appearance of a class. Shape and colour combinations are distinct
/// for the first 30 classes.
pub fn class_appearance(class_id: ClassId) -> Appearance {
    let i = class_id as usize;
    let s = Shape::ALL.len();
    let c = PALETTE.len();
    Appearance {
        shape: Shape::ALL[i % s],
        color: PALETTE[(i + i / s) % c].1,
        texture: Texture::ALL[(i / s + i / (s * c)) % Texture::ALL.len()],
    }
}

fn class_name(class_id: ClassId) -> String {
    let i = class_id as usize;
    let a = class_appearance(class_id);
    let color = PALETTE[(i + i / Shape::ALL.len()) % PALETTE.len()].0;
    let mut name = format!("{color}_{}_{}", a.texture.name(), a.shape.name());
    let cycle = Shape::ALL.len() * PALETTE.len() * Texture::ALL.len();
    if i >= cycle {
        name.push_str(&format!("_{}", i / cycle));
    }
    name
}

/// One object placed in one frame: class plus its extent `(x, y, w, h)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectInstance {
    pub class_id: ClassId,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl ObjectInstance {
    /// Pixels `(px, py)` whose centres fall inside the object's shape.
    pub fn mask(&self, width: usize, height: usize) -> Vec<(usize, usize)> {
        let shape = class_appearance(self.class_id).shape;
        let x0 = self.x.floor().max(0.0) as usize;
        let y0 = self.y.floor().max(0.0) as usize;
        let x1 = ((self.x + self.w).ceil() as usize).min(width);
        let y1 = ((self.y + self.h).ceil() as usize).min(height);
        let mut out = Vec::new();
        for py in y0..y1 {
            for px in x0..x1 {
                let u = (px as f64 + 0.5 - self.x) / self.w;
                let v = (py as f64 + 0.5 - self.y) / self.h;
                if (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v) && shape.contains(u, v) {
                    out.push((px, py));
                }
            }
        }
        out
    }

    /// Tight pixel bounds of the mask, or `None` when nothing is rendered.
    pub fn tight_box(&self, width: usize, height: usize) -> Option<BoundingBox> {
        let mask = self.mask(width, height);
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for &(px, py) in &mask {
            x1 = x1.min(px);
            y1 = y1.min(py);
            x2 = x2.max(px + 1);
            y2 = y2.max(py + 1);
        }
        if mask.is_empty() {
            None
        } else {
            Some(BoundingBox {
                x1: x1 as f64,
                y1: y1 as f64,
                x2: x2 as f64,
                y2: y2 as f64,
            })
        }
    }
}

/// A moving object's trajectory over the whole video.
struct Track {
    class_id: ClassId,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    base_w: f64,
    base_h: f64,
    phase: f64,
    tint: [f64; 3],
    /// Frames in which the object is visible, as a half-open range.
    visible: (usize, usize),
}

impl Track {
    fn random(class_id: ClassId, spec: &CorpusSpec, visible: (usize, usize), rng: &mut Rng) -> Self {
        let size = rng.random_range(spec.min_object_size..=spec.max_object_size);
        let aspect: f64 = rng.random_range(0.8..1.25);
        let base_w = size * aspect.sqrt();
        let base_h = size / aspect.sqrt();
        let max_w = base_w * 1.06;
        let max_h = base_h * 1.06;
        let speed = spec.max_speed;
        let j = spec.appearance_jitter;
        let mut track = Track {
            class_id,
            x: rng.random_range(0.0..(spec.width as f64 - max_w)),
            y: rng.random_range(0.0..(spec.height as f64 - max_h)),
            vx: if speed > 0.0 { rng.random_range(-speed..=speed) } else { 0.0 },
            vy: if speed > 0.0 { rng.random_range(-speed..=speed) } else { 0.0 },
            base_w,
            base_h,
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            tint: [1.0; 3],
            visible,
        };
        if j > 0.0 {
            for t in &mut track.tint {
                *t = rng.random_range(1.0 - j..=1.0 + j);
            }
        }
        track
    }

    fn instance(&self, t: usize) -> ObjectInstance {
        let scale = 1.0 + 0.05 * (self.phase + 0.3 * t as f64).sin();
        ObjectInstance {
            class_id: self.class_id,
            x: self.x,
            y: self.y,
            w: self.base_w * scale,
            h: self.base_h * scale,
        }
    }

    fn advance(&mut self, width: usize, height: usize) {
        let max_x = width as f64 - self.base_w * 1.06;
        let max_y = height as f64 - self.base_h * 1.06;
        self.x += self.vx;
        self.y += self.vy;
        if self.x < 0.0 || self.x > max_x {
            self.vx = -self.vx;
            self.x = self.x.clamp(0.0, max_x);
        }
        if self.y < 0.0 || self.y > max_y {
            self.vy = -self.vy;
            self.y = self.y.clamp(0.0, max_y);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum VideoKind {
    Perfect,
    Clean,
    Multi,
}

/// Generate `num_classes * videos_per_class` videos. The output is a pure
/// function of `spec`.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let (n_perfect, n_clean, _) = spec.kind_counts();
    let classes = (0..spec.num_classes as ClassId)
        .map(|id| ClassInfo {
            id,
            name: class_name(id),
        })
        .collect();
    let mut videos = Vec::with_capacity(spec.num_classes * spec.videos_per_class);
    for class_id in 0..spec.num_classes as ClassId {
        for idx in 0..spec.videos_per_class {
            let kind = if idx < n_perfect {
                VideoKind::Perfect
            } else if idx < n_perfect + n_clean {
                VideoKind::Clean
            } else {
                VideoKind::Multi
            };
            let video_id = format!("{}_c{:03}_v{:03}", spec.id_prefix, class_id, idx);
            videos.push(generate_video(spec, &video_id, class_id, kind)?);
        }
    }
    Ok(Corpus { classes, videos })
}

fn generate_video(spec: &CorpusSpec, video_id: &str, class_id: ClassId, kind: VideoKind) -> Result<VideoRecord> {
    let mut rng = rng(derive_seed(spec.seed, &["video", video_id]));
    let len = rng.random_range(spec.min_frames..=spec.max_frames);
    let mut tracks = vec![Track::random(class_id, spec, (0, len), &mut rng)];
    if kind != VideoKind::Perfect {
        let start = rng.random_range(0..len);
        let end = rng.random_range(start + 1..=len);
        let other = match kind {
            VideoKind::Clean => class_id,
            _ => {
                let pick = rng.random_range(0..spec.num_classes as ClassId - 1);
                if pick >= class_id {
                    pick + 1
                } else {
                    pick
                }
            }
        };
        tracks.push(Track::random(other, spec, (start, end), &mut rng));
    }

    let background = rng.random_range(0.05..0.2);
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("valid std");
    let (h, w) = (spec.height, spec.width);
    let mut frames = Vec::with_capacity(len);
    let mut annotations = Vec::with_capacity(len);
    for t in 0..len {
        let mut canvas = vec![background; h * w * 3];
        let mut ann = FrameAnnotation::default();
        for track in tracks.iter().filter(|tr| (tr.visible.0..tr.visible.1).contains(&t)) {
            let inst = track.instance(t);
            let look = class_appearance(inst.class_id);
            let mask = inst.mask(w, h);
            for &(px, py) in &mask {
                let g = look.texture.gain(px, py);
                for c in 0..3 {
                    canvas[(py * w + px) * 3 + c] = (look.color[c] * track.tint[c]).min(1.0) * g;
                }
            }
            let bbox = inst
                .tight_box(w, h)
                .ok_or_else(|| Error::Config(format!("object in {video_id} renders no pixels")))?;
            ann.objects.push(AnnotatedObject {
                class_id: inst.class_id,
                bbox,
            });
        }
        let data = canvas
            .into_iter()
            .map(|v| {
                let n = if spec.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                ((v + n).clamp(0.0, 1.0) * 255.0).round() as u8
            })
            .collect();
        frames.push(Frame::from_pixels(h, w, 3, data)?);
        annotations.push(ann);
        for track in &mut tracks {
            track.advance(w, h);
        }
    }
    VideoRecord::new(video_id, frames, annotations, Source::Synthetic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{is_clean, is_perfect};

    fn small(seed: u64) -> CorpusSpec {
        CorpusSpec {
            num_classes: 5,
            videos_per_class: 2,
            min_frames: 3,
            max_frames: 6,
            height: 48,
            width: 48,
            min_object_size: 10.0,
            max_object_size: 16.0,
            seed,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn count_is_classes_times_videos() {
        let corpus = generate_corpus(&small(7)).unwrap();
        assert_eq!(corpus.videos.len(), 10);
        assert_eq!(corpus.classes.len(), 5);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small(7)).unwrap();
        let b = generate_corpus(&small(7)).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&small(8)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn perfect_fraction_one_gives_only_perfect_videos() {
        let spec = CorpusSpec {
            perfect_fraction: 1.0,
            clean_fraction: 0.0,
            ..small(3)
        };
        let corpus = generate_corpus(&spec).unwrap();
        assert!(corpus.videos.iter().all(is_perfect));
    }

    #[test]
    fn kinds_follow_fractions() {
        let spec = CorpusSpec {
            videos_per_class: 4,
            perfect_fraction: 0.5,
            clean_fraction: 0.25,
            ..small(11)
        };
        let corpus = generate_corpus(&spec).unwrap();
        for class in 0..5 {
            let vids: Vec<_> = corpus
                .videos
                .iter()
                .filter(|v| v.video_id.contains(&format!("_c{class:03}_")))
                .collect();
            assert_eq!(vids.iter().filter(|v| is_perfect(v)).count(), 2);
            assert_eq!(vids.iter().filter(|v| is_clean(v) && !is_perfect(v)).count(), 1);
            assert_eq!(vids.iter().filter(|v| !is_clean(v)).count(), 1);
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            CorpusSpec { num_classes: 0, ..small(1) },
            CorpusSpec { videos_per_class: 0, ..small(1) },
            CorpusSpec { min_frames: 9, max_frames: 3, ..small(1) },
            CorpusSpec { perfect_fraction: 0.8, clean_fraction: 0.5, ..small(1) },
            CorpusSpec { num_classes: 1, perfect_fraction: 0.0, clean_fraction: 0.0, ..small(1) },
        ] {
            assert!(matches!(generate_corpus(&spec), Err(Error::Config(_))));
        }
    }

    #[test]
    fn annotation_boxes_are_tight_around_masks() {
        let inst = ObjectInstance {
            class_id: 1,
            x: 3.3,
            y: 4.7,
            w: 12.2,
            h: 9.1,
        };
        let mask = inst.mask(32, 32);
        let b = inst.tight_box(32, 32).unwrap();
        assert!(mask.iter().all(|&(px, py)| {
            px as f64 >= b.x1 && (px + 1) as f64 <= b.x2 && py as f64 >= b.y1 && (py + 1) as f64 <= b.y2
        }));
        assert!(mask.iter().any(|&(px, _)| px as f64 == b.x1));
        assert!(mask.iter().any(|&(px, _)| (px + 1) as f64 == b.x2));
        assert!(mask.iter().any(|&(_, py)| py as f64 == b.y1));
        assert!(mask.iter().any(|&(_, py)| (py + 1) as f64 == b.y2));
    }

    #[test]
    fn class_appearances_are_distinct() {
        let mut seen = std::collections::HashSet::new();
        for id in 0..30 {
            let a = class_appearance(id);
            let key = (a.shape, a.color.map(|c| (c * 100.0) as i64));
            assert!(seen.insert(key), "class {id} duplicates an appearance");
        }
    }
}
