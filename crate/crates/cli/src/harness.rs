//! Experiment orchestration: pretraining per (base mode, split), then one
//! few-shot sample per (base mode, split, shot, repeat) shared by every
//! strategy.
//!
//! Archive layout under the output directory:
//!
//! ```text
//! archive.json                        schema version + config digest
//! config.json                         normalised config
//! datasets/validation_<split>.json
//! pretrain/<mode>_<split>/            base.json, checkpoint, run.json, report.json
//! cells/<mode>_<split>/shot<K>/rep<r>/
//!     fewshot.json
//!     <strategy>/run.json, report.json
//!     result.json                     written last; marks the cell complete
//! failures.json                       only when some job failed
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fsvod_core::adaptation::{adapt, pretrain, PartitionDigests, RunRecord, Strategy};
use fsvod_core::corpus::Corpus;
use fsvod_core::datasets::{build_base_dataset, sample_balanced_fewshot, sample_balanced_validation};
use fsvod_core::eval::{evaluate, write_detections, ReportLabels};
use fsvod_core::model::{Inference, VideoModel};
use fsvod_core::seed::derive_seed;
use fsvod_core::{BaseMode, ClassSplit, DatasetManifest, Error, EvalReport, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::report::{write_tables, ResultsTable};

pub const ARCHIVE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub workers: usize,
    pub resume: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { workers: 1, resume: false }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveInfo {
    pub schema_version: u32,
    pub config_digest: String,
}

/// Coordinates of one few-shot cell.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellKey {
    pub base_mode: BaseMode,
    pub split: String,
    pub shot: usize,
    pub repeat: usize,
}

impl CellKey {
    pub fn dir(&self, root: &Path) -> PathBuf {
        root.join("cells")
            .join(format!("{}_{}", self.base_mode.as_str(), self.split))
            .join(format!("shot{}", self.shot))
            .join(format!("rep{}", self.repeat))
    }
}

impl std::fmt::Display for CellKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}/shot{}/rep{}", self.base_mode.as_str(), self.split, self.shot, self.repeat)
    }
}

/// Contents of a cell's `result.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellResult {
    pub key: CellKey,
    pub fewshot_digest: String,
    pub adapt_seed: u64,
    pub reports: BTreeMap<Strategy, EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Failure {
    pub job: String,
    pub error: String,
}

pub struct ExperimentSummary {
    pub table: ResultsTable,
    pub cells_run: usize,
    pub cells_skipped: usize,
}

/// Seeds are pure functions of the master seed and the job coordinates.
pub fn pretrain_seed(master: u64, mode: BaseMode, split: &str) -> u64 {
    derive_seed(master, &["pretrain", mode.as_str(), split])
}

/// The few-shot sample does not depend on the base mode, so weak and strong
/// pretraining are compared on the same few-shot videos.
pub fn fewshot_seed(master: u64, split: &str, shot: usize, repeat: usize) -> u64 {
    derive_seed(master, &["fewshot", split, &shot.to_string(), &repeat.to_string()])
}

/// Shared by every strategy within a cell.
pub fn adapt_seed(key: &CellKey, master: u64) -> u64 {
    derive_seed(
        master,
        &["adapt", key.base_mode.as_str(), &key.split, &key.shot.to_string(), &key.repeat.to_string()],
    )
}

pub fn validation_seed(master: u64, split: &str) -> u64 {
    derive_seed(master, &["validation", split])
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let tmp = path.with_extension("json.tmp");
    fs::write(&tmp, text).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Ingestion {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub(crate) fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Claim `out` for this config. A fresh directory is initialised; an existing
/// archive is reused only with `resume` and a matching config digest.
fn open_archive(config: &ExperimentConfig, out: &Path, resume: bool) -> Result<()> {
    let info_path = out.join("archive.json");
    let digest = config.digest();
    if info_path.exists() {
        if !resume {
            return Err(Error::Contract(format!(
                "{} already holds an archive; pass --resume to continue it",
                out.display()
            )));
        }
        let info: ArchiveInfo = read_json(&info_path)?;
        if info.schema_version != ARCHIVE_SCHEMA_VERSION {
            return Err(Error::Version {
                path: info_path,
                reason: format!("archive schema {} (expected {ARCHIVE_SCHEMA_VERSION})", info.schema_version),
            });
        }
        if info.config_digest != digest {
            return Err(Error::Contract(format!(
                "{} was produced by a different config; use a new --out directory",
                out.display()
            )));
        }
        return Ok(());
    }
    create_dir(out)?;
    write_json(&out.join("config.json"), config)?;
    write_json(
        &info_path,
        &ArchiveInfo {
            schema_version: ARCHIVE_SCHEMA_VERSION,
            config_digest: digest,
        },
    )
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    out: &'a Path,
    train: Corpus,
    validation: BTreeMap<String, (DatasetManifest, Vec<fsvod_core::VideoRecord>)>,
}

pub fn pretrain_dir(out: &Path, mode: BaseMode, split: &str) -> PathBuf {
    out.join("pretrain").join(format!("{}_{split}", mode.as_str()))
}

/// Run (or finish) an experiment into `out`.
pub fn run_experiment(config: &ExperimentConfig, out: &Path, options: RunOptions) -> Result<ExperimentSummary> {
    config.validate()?;
    open_archive(config, out, options.resume)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("workers: {e}")))?;
    pool.install(|| run_jobs(config, out))
}

fn run_jobs(config: &ExperimentConfig, out: &Path) -> Result<ExperimentSummary> {
    let train = config.corpus.load()?;
    let val_corpus = config.validation_source()?.load()?;
    let datasets = out.join("datasets");
    create_dir(&datasets)?;
    let mut validation = BTreeMap::new();
    for split in &config.splits {
        let manifest = sample_balanced_validation(
            &val_corpus,
            split,
            config.validation_per_class,
            validation_seed(config.seed, &split.name),
        )?;
        manifest.save(&datasets.join(format!("validation_{}.json", split.name)))?;
        let videos = manifest.resolve(&val_corpus)?;
        validation.insert(split.name.clone(), (manifest, videos));
    }
    let ctx = Context {
        config,
        out,
        train,
        validation,
    };

    let mut failures = Vec::new();
    let pre_jobs: Vec<(BaseMode, &ClassSplit)> = config
        .base_modes
        .iter()
        .flat_map(|&m| config.splits.iter().map(move |s| (m, s)))
        .collect();
    let pretrained: Vec<(BaseMode, String, Result<VideoModel>)> = pre_jobs
        .par_iter()
        .map(|&(mode, split)| (mode, split.name.clone(), pretrain_job(&ctx, mode, split)))
        .collect();
    let mut models = BTreeMap::new();
    for (mode, split, res) in pretrained {
        match res {
            Ok(m) => {
                models.insert((mode, split), m);
            }
            Err(e) => failures.push(Failure {
                job: format!("pretrain/{}_{split}", mode.as_str()),
                error: e.to_string(),
            }),
        }
    }

    let mut cells = Vec::new();
    for &mode in &config.base_modes {
        for split in &config.splits {
            for &shot in &config.shots {
                for repeat in 0..config.repeats {
                    cells.push(CellKey {
                        base_mode: mode,
                        split: split.name.clone(),
                        shot,
                        repeat,
                    });
                }
            }
        }
    }
    let outcomes: Vec<(CellKey, Result<bool>)> = cells
        .par_iter()
        .map(|key| {
            let res = match models.get(&(key.base_mode, key.split.clone())) {
                Some(model) => cell_job(&ctx, key, model),
                None => Err(Error::Data("pretraining failed for this base mode and split".into())),
            };
            (key.clone(), res)
        })
        .collect();
    let (mut run, mut skipped) = (0, 0);
    for (key, res) in outcomes {
        match res {
            Ok(true) => run += 1,
            Ok(false) => skipped += 1,
            Err(e) => failures.push(Failure {
                job: format!("cells/{key}"),
                error: e.to_string(),
            }),
        }
    }

    let failures_path = out.join("failures.json");
    if failures.is_empty() {
        if failures_path.exists() {
            fs::remove_file(&failures_path).map_err(|e| io_err(&failures_path, e))?;
        }
    } else {
        write_json(&failures_path, &failures)?;
    }
    let table = ResultsTable::from_archive(out)?;
    write_tables(&table, &out.join("tables"))?;
    if let Some(first) = failures.first() {
        return Err(Error::Data(format!(
            "{} job(s) failed, first {}: {}; see {}",
            failures.len(),
            first.job,
            first.error,
            failures_path.display()
        )));
    }
    Ok(ExperimentSummary {
        table,
        cells_run: run,
        cells_skipped: skipped,
    })
}

fn pretrain_job(ctx: &Context, mode: BaseMode, split: &ClassSplit) -> Result<VideoModel> {
    let dir = pretrain_dir(ctx.out, mode, &split.name);
    let done = dir.join("run.json");
    if done.exists() {
        let (model, _) = VideoModel::load(&dir.join("checkpoint"))?;
        return Ok(model);
    }
    create_dir(&dir)?;
    let config = ctx.config;
    let manifest = build_base_dataset(&ctx.train, split, mode, config.stills_per_video)?;
    manifest.save(&dir.join("base.json"))?;
    let videos = manifest.resolve(&ctx.train)?;
    let seed = pretrain_seed(config.seed, mode, &split.name);
    let initial = VideoModel::new(
        config.model.clone(),
        split.base_classes.iter().copied().collect(),
        seed,
    )
    .map(|m| PartitionDigests {
        extractor: m.extractor_digest(),
        head: m.head_digest(),
    })?;
    log::info!("pretraining {} {} on {} videos", mode.as_str(), split.name, videos.len());
    let outcome = pretrain(&manifest, &videos, &config.model, &config.pretrain, seed)?;
    let mut meta = BTreeMap::new();
    meta.insert("base_mode".into(), serde_json::json!(mode));
    meta.insert("split".into(), serde_json::json!(split.name));
    outcome.model.save(&dir.join("checkpoint"), &meta)?;
    write_json(&dir.join("losses.json"), &outcome.losses)?;
    let (val_manifest, val_videos) = &ctx.validation[&split.name];
    let labels = ReportLabels {
        strategy: "pretrained".into(),
        shot: 0,
        seed,
    };
    let base_only: Vec<_> = val_videos
        .iter()
        .filter(|v| v.classes().iter().all(|c| split.is_base(*c)))
        .cloned()
        .collect();
    let base_split = ClassSplit {
        name: split.name.clone(),
        base_classes: split.base_classes.clone(),
        novel_classes: Default::default(),
    };
    let (report, _) = evaluate(&Inference { model: &outcome.model, seed }, &base_only, &base_split, &labels)?;
    write_json(&dir.join("report.json"), &report)?;
    let mut record = RunRecord::pretrain(&manifest, seed, initial, &outcome, config.pretrain.schedule.iterations);
    record.config_digest = Some(config.digest());
    record.extra.insert("validation_manifest".into(), serde_json::json!(val_manifest.digest()));
    record.save(&done)?;
    Ok(outcome.model)
}

/// Returns `Ok(false)` when the cell was already complete.
fn cell_job(ctx: &Context, key: &CellKey, pretrained: &VideoModel) -> Result<bool> {
    let dir = key.dir(ctx.out);
    let result_path = dir.join("result.json");
    if result_path.exists() {
        return Ok(false);
    }
    create_dir(&dir)?;
    let config = ctx.config;
    let split = config
        .splits
        .iter()
        .find(|s| s.name == key.split)
        .ok_or_else(|| Error::Config(format!("splits: no split named {}", key.split)))?;
    let manifest = sample_balanced_fewshot(&ctx.train, split, key.shot, fewshot_seed(config.seed, &split.name, key.shot, key.repeat))?;
    manifest.save(&dir.join("fewshot.json"))?;
    let videos = manifest.resolve(&ctx.train)?;
    let seed = adapt_seed(key, config.seed);
    let (_, val_videos) = &ctx.validation[&split.name];
    let mut reports = BTreeMap::new();
    for &strategy in &config.strategies {
        log::info!("cell {key}: {strategy}");
        let sdir = dir.join(strategy.as_str());
        create_dir(&sdir)?;
        let outcome = adapt(pretrained, &manifest, &videos, strategy, &config.adaptation, seed)?;
        let mut record = outcome.record;
        record.config_digest = Some(config.digest());
        let labels = ReportLabels {
            strategy: strategy.as_str().into(),
            shot: key.shot,
            seed,
        };
        let (report, detections) = evaluate(&Inference { model: &outcome.model, seed }, val_videos, split, &labels)?;
        if config.keep_artifacts {
            let mut meta = BTreeMap::new();
            meta.insert("strategy".into(), serde_json::json!(strategy));
            outcome.model.save(&sdir.join("checkpoint"), &meta)?;
            write_detections(&sdir.join("detections.jsonl"), &detections)?;
        }
        write_json(&sdir.join("losses.json"), &outcome.losses)?;
        write_json(&sdir.join("report.json"), &report)?;
        record.save(&sdir.join("run.json"))?;
        reports.insert(strategy, report);
    }
    write_json(
        &result_path,
        &CellResult {
            key: key.clone(),
            fewshot_digest: manifest.digest(),
            adapt_seed: seed,
            reports,
        },
    )?;
    Ok(true)
}

/// All completed cells of an archive, in key order.
pub fn load_cells(archive: &Path) -> Result<Vec<CellResult>> {
    let mut out = Vec::new();
    let root = archive.join("cells");
    if !root.is_dir() {
        return Ok(out);
    }
    let mut stack = vec![root];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| io_err(&dir, e))? {
            let path = entry.map_err(|e| io_err(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "result.json") {
                out.push(read_json::<CellResult>(&path)?);
            }
        }
    }
    out.sort_by(|a, b| a.key.cmp(&b.key));
    Ok(out)
}
