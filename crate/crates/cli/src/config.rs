//! Experiment configuration: one JSON document with a `schema_version` key.
//! Unknown keys are rejected.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use fsvod_core::adaptation::{AdaptationConfig, PretrainConfig, Strategy};
use fsvod_core::corpus::{generate_corpus, ingest_vid_annotations, load_corpus, ClassId, ClassInfo, Corpus, CorpusSpec};
use fsvod_core::model::ModelConfig;
use fsvod_core::seed::{derive_seed, digest_bytes};
use fsvod_core::{BaseMode, ClassSplit, Error, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

/// Where a corpus comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum CorpusSource {
    /// Synthesised from a spec.
    Generate(CorpusSpec),
    /// A corpus directory written by `generate-corpus`.
    Path(PathBuf),
    /// VID-style per-frame XML annotations.
    Vid {
        annotations: PathBuf,
        #[serde(default)]
        data: Option<PathBuf>,
        classes: BTreeMap<String, ClassId>,
    },
}

impl Default for CorpusSource {
    fn default() -> Self {
        CorpusSource::Generate(CorpusSpec::default())
    }
}

impl CorpusSource {
    pub fn load(&self) -> Result<Corpus> {
        match self {
            CorpusSource::Generate(spec) => generate_corpus(spec),
            CorpusSource::Path(p) => load_corpus(p),
            CorpusSource::Vid {
                annotations,
                data,
                classes,
            } => {
                let lookup = classes.iter().map(|(k, v)| (k.clone(), *v)).collect();
                let videos = ingest_vid_annotations(annotations, data.as_deref(), &lookup)?;
                let mut infos: Vec<ClassInfo> = classes
                    .iter()
                    .map(|(name, &id)| ClassInfo { id, name: name.clone() })
                    .collect();
                infos.sort_by_key(|c| c.id);
                Ok(Corpus { classes: infos, videos })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    /// Training corpus (base, few-shot).
    #[serde(default)]
    pub corpus: CorpusSource,
    /// Validation corpus. When absent and the training corpus is generated,
    /// a second corpus is generated with prefix `val` and a derived seed.
    #[serde(default)]
    pub validation_corpus: Option<CorpusSource>,
    /// Novel/base class splits; there is no built-in default.
    pub splits: Vec<ClassSplit>,
    #[serde(default = "default_base_modes")]
    pub base_modes: Vec<BaseMode>,
    #[serde(default = "default_shots")]
    pub shots: Vec<usize>,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<Strategy>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    /// Still images per video added to the strong base dataset.
    #[serde(default = "default_stills")]
    pub stills_per_video: usize,
    #[serde(default = "default_validation_per_class")]
    pub validation_per_class: usize,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub adaptation: AdaptationConfig,
    /// Keep adapted checkpoints and detection dumps in the archive.
    #[serde(default)]
    pub keep_artifacts: bool,
}

fn default_base_modes() -> Vec<BaseMode> {
    vec![BaseMode::Weak, BaseMode::Strong]
}

fn default_shots() -> Vec<usize> {
    vec![1, 2, 3]
}

fn default_strategies() -> Vec<Strategy> {
    Strategy::ALL.to_vec()
}

fn default_repeats() -> usize {
    5
}

fn default_stills() -> usize {
    2
}

fn default_validation_per_class() -> usize {
    3
}

impl ExperimentConfig {
    /// Parse and validate a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        match value.get("schema_version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::Config(format!(
                    "schema_version: unsupported version {v} (expected {SCHEMA_VERSION})"
                )))
            }
            None => return Err(Error::Config("schema_version: missing or not an integer".into())),
        }
        let config: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::Config("repeats: must be at least 1".into()));
        }
        if self.shots.is_empty() || self.shots.contains(&0) {
            return Err(Error::Config("shots: must be a non-empty list of positive integers".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("strategies: must not be empty".into()));
        }
        if self.base_modes.is_empty() {
            return Err(Error::Config("base_modes: must not be empty".into()));
        }
        if self.splits.is_empty() {
            return Err(Error::Config("splits: at least one split is required".into()));
        }
        let mut names = BTreeSet::new();
        for s in &self.splits {
            s.validate()?;
            if s.name.is_empty() || !s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                return Err(Error::Config(format!(
                    "splits: name {:?} must be non-empty and use only letters, digits, '_' or '-'",
                    s.name
                )));
            }
            if !names.insert(&s.name) {
                return Err(Error::Config(format!("splits: duplicate split name {:?}", s.name)));
            }
        }
        for (what, list) in [("shots", dup(&self.shots)), ("strategies", dup(&self.strategies)), ("base_modes", dup(&self.base_modes))] {
            if list {
                return Err(Error::Config(format!("{what}: duplicate entries")));
            }
        }
        if let CorpusSource::Generate(spec) = &self.corpus {
            spec.validate()?;
            let n = spec.num_classes as ClassId;
            for s in &self.splits {
                if let Some(c) = s.all_classes().into_iter().find(|&c| c >= n) {
                    return Err(Error::Config(format!(
                        "splits: split {} uses class {c}, but the corpus has {n} classes",
                        s.name
                    )));
                }
            }
        }
        self.model.validate()?;
        self.pretrain.schedule.validate("pretrain.schedule")?;
        self.adaptation.validate()?;
        Ok(())
    }

    /// Digest of the normalised config.
    pub fn digest(&self) -> String {
        digest_bytes(&serde_json::to_vec(self).expect("config serialises"))
    }

    pub fn validation_source(&self) -> Result<CorpusSource> {
        match (&self.validation_corpus, &self.corpus) {
            (Some(src), _) => Ok(src.clone()),
            (None, CorpusSource::Generate(spec)) => Ok(CorpusSource::Generate(CorpusSpec {
                id_prefix: "val".into(),
                seed: derive_seed(spec.seed, &["validation"]),
                ..spec.clone()
            })),
            (None, _) => Err(Error::Config(
                "validation_corpus: required when the training corpus is not generated".into(),
            )),
        }
    }
}

fn dup<T: PartialEq>(items: &[T]) -> bool {
    items.iter().enumerate().any(|(i, a)| items[..i].contains(a))
}
