use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fsvod_cli::config::ExperimentConfig;
use fsvod_cli::harness::{fewshot_seed, pretrain_seed, run_experiment, validation_seed, RunOptions};
use fsvod_cli::report::{emit_report, ReportFormat};
use fsvod_core::adaptation::{adapt, pretrain, PartitionDigests, RunRecord, Strategy};
use fsvod_core::aggregation::AggregationConfig;
use fsvod_core::corpus::save_corpus;
use fsvod_core::datasets::{build_base_dataset, sample_balanced_fewshot, sample_balanced_validation};
use fsvod_core::eval::{evaluate, write_detections, ReportLabels};
use fsvod_core::model::{Inference, VideoModel};
use fsvod_core::{BaseMode, DatasetManifest, Error, Result};

#[derive(Parser)]
#[command(name = "fsvod", version, about = "Few-shot video object detection lab")]
struct Cli {
    /// Experiment config (JSON); required by every subcommand except `report`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory [default: out; for `report`, <archive>/tables].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Continue an existing archive instead of refusing to overwrite it.
    #[arg(long, global = true)]
    resume: bool,
    /// Disable proposal aggregation (single-frame detector).
    #[arg(long, global = true)]
    no_aggregation: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the training and validation corpora to `<out>/train` and `<out>/validation`.
    GenerateCorpus,
    /// Write base, validation and few-shot manifests to `<out>/datasets`.
    BuildDatasets,
    /// Pretrain on a base dataset.
    Pretrain(PretrainArgs),
    /// Fine-tune a pretrained checkpoint on a few-shot manifest.
    Adapt(AdaptArgs),
    /// Evaluate a checkpoint on a validation manifest.
    Evaluate(EvaluateArgs),
    /// Run the full protocol into an archive.
    Experiment,
    /// Emit tables or charts from an archive.
    Report(ReportArgs),
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long, value_parser = parse_mode)]
    mode: BaseMode,
    #[arg(long)]
    split: String,
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    strategy: Strategy,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Validation manifest; sampled from the validation corpus when omitted.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    archive: PathBuf,
    #[arg(long, value_parser = ["text", "csv", "plot"])]
    format: String,
}

fn parse_mode(s: &str) -> std::result::Result<BaseMode, String> {
    match s {
        "weak" => Ok(BaseMode::Weak),
        "strong" => Ok(BaseMode::Strong),
        other => Err(format!("unknown base mode {other:?} (expected weak or strong)")),
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this subcommand".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.no_aggregation {
        config.model.aggregation = AggregationConfig::disabled();
    }
    config.validate()?;
    Ok(config)
}

fn find_split<'a>(config: &'a ExperimentConfig, name: &str) -> Result<&'a fsvod_core::ClassSplit> {
    config
        .splits
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Argument(format!("no split named {name:?} in the config")))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: &Cli) -> Result<()> {
    if let Command::Report(args) = &cli.command {
        let format: ReportFormat = args.format.parse()?;
        let dest = cli.out.clone().unwrap_or_else(|| args.archive.join("tables"));
        let result = emit_report(&args.archive, format, &dest)?;
        for notice in &result.notices {
            eprintln!("notice: {notice}");
        }
        for file in &result.files {
            println!("{}", file.display());
        }
        return Ok(());
    }
    let config = load_config(cli)?;
    let out = &cli.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    match &cli.command {
        Command::GenerateCorpus => {
            for (name, source) in [("train", config.corpus.clone()), ("validation", config.validation_source()?)] {
                let corpus = source.load()?;
                save_corpus(&corpus, &out.join(name))?;
                println!("{name}: {} videos -> {}", corpus.videos.len(), out.join(name).display());
            }
        }
        Command::BuildDatasets => {
            let dir = out.join("datasets");
            mkdir(&dir)?;
            let train = config.corpus.load()?;
            let validation = config.validation_source()?.load()?;
            let mut written = 0;
            for split in &config.splits {
                for &mode in &config.base_modes {
                    build_base_dataset(&train, split, mode, config.stills_per_video)?
                        .save(&dir.join(format!("base_{}_{}.json", mode.as_str(), split.name)))?;
                    written += 1;
                }
                sample_balanced_validation(&validation, split, config.validation_per_class, validation_seed(config.seed, &split.name))?
                    .save(&dir.join(format!("validation_{}.json", split.name)))?;
                written += 1;
                for &shot in &config.shots {
                    for repeat in 0..config.repeats {
                        sample_balanced_fewshot(&train, split, shot, fewshot_seed(config.seed, &split.name, shot, repeat))?
                            .save(&dir.join(format!("fewshot_{}_shot{shot}_rep{repeat}.json", split.name)))?;
                        written += 1;
                    }
                }
            }
            println!("{written} manifests -> {}", dir.display());
        }
        Command::Pretrain(args) => {
            let split = find_split(&config, &args.split)?;
            let train = config.corpus.load()?;
            let manifest = build_base_dataset(&train, split, args.mode, config.stills_per_video)?;
            let videos = manifest.resolve(&train)?;
            let seed = pretrain_seed(config.seed, args.mode, &split.name);
            let initial = VideoModel::new(config.model.clone(), split.base_classes.iter().copied().collect(), seed)?;
            let initial = PartitionDigests {
                extractor: initial.extractor_digest(),
                head: initial.head_digest(),
            };
            let outcome = pretrain(&manifest, &videos, &config.model, &config.pretrain, seed)?;
            mkdir(out)?;
            manifest.save(&out.join("base.json"))?;
            let mut meta = BTreeMap::new();
            meta.insert("base_mode".into(), serde_json::json!(args.mode));
            meta.insert("split".into(), serde_json::json!(split.name));
            outcome.model.save(&out.join("checkpoint"), &meta)?;
            write_json(&out.join("losses.json"), &outcome.losses)?;
            let mut record = RunRecord::pretrain(&manifest, seed, initial, &outcome, config.pretrain.schedule.iterations);
            record.config_digest = Some(config.digest());
            record.save(&out.join("run.json"))?;
            println!("pretrained checkpoint -> {}", out.join("checkpoint").display());
        }
        Command::Adapt(args) => {
            let (pretrained, _) = VideoModel::load(&args.checkpoint)?;
            let manifest = DatasetManifest::load(&args.manifest)?;
            let train = config.corpus.load()?;
            let videos = manifest.resolve(&train)?;
            let shot = manifest.shot.unwrap_or_default();
            let seed = config.seed;
            let outcome = adapt(&pretrained, &manifest, &videos, args.strategy, &config.adaptation, seed)?;
            mkdir(out)?;
            let mut meta = BTreeMap::new();
            meta.insert("strategy".into(), serde_json::json!(args.strategy));
            meta.insert("shot".into(), serde_json::json!(shot));
            meta.insert("seed".into(), serde_json::json!(seed));
            outcome.model.save(&out.join("checkpoint"), &meta)?;
            if let Some(phase1) = &outcome.phase1 {
                phase1.save(&out.join("checkpoint_phase1"), &meta)?;
            }
            write_json(&out.join("losses.json"), &outcome.losses)?;
            let mut record = outcome.record;
            record.config_digest = Some(config.digest());
            record.save(&out.join("run.json"))?;
            println!("{} checkpoint -> {}", args.strategy, out.join("checkpoint").display());
        }
        Command::Evaluate(args) => {
            let (model, meta) = VideoModel::load(&args.checkpoint)?;
            let validation = config.validation_source()?.load()?;
            let manifest = match &args.manifest {
                Some(path) => DatasetManifest::load(path)?,
                None => {
                    let name = meta
                        .meta
                        .get("split")
                        .and_then(|v| v.as_str())
                        .map(str::to_owned)
                        .unwrap_or_else(|| config.splits[0].name.clone());
                    let split = find_split(&config, &name)?;
                    sample_balanced_validation(&validation, split, config.validation_per_class, validation_seed(config.seed, &split.name))?
                }
            };
            let videos = manifest.resolve(&validation)?;
            let labels = ReportLabels {
                strategy: meta.meta.get("strategy").and_then(|v| v.as_str()).unwrap_or("pretrained").to_owned(),
                shot: meta.meta.get("shot").and_then(|v| v.as_u64()).unwrap_or(0) as usize,
                seed: meta.meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(config.seed),
            };
            let (report, detections) = evaluate(&Inference { model: &model, seed: labels.seed }, &videos, &manifest.split, &labels)?;
            mkdir(out)?;
            report.save(&out.join("report.json"))?;
            write_detections(&out.join("detections.jsonl"), &detections)?;
            println!(
                "novel mAP50 {:.2}  base mAP50 {:.2}  ({} detections)",
                report.novel_map50 * 100.0,
                report.base_map50 * 100.0,
                detections.len()
            );
        }
        Command::Experiment => {
            let options = RunOptions {
                workers: cli.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
                resume: cli.resume,
            };
            let summary = run_experiment(&config, out, options)?;
            println!("{}", summary.table.to_text());
            println!(
                "{} cells run, {} already complete; archive at {}",
                summary.cells_run,
                summary.cells_skipped,
                out.display()
            );
        }
        Command::Report(_) => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_contract() { 2 } else { 1 })
        }
    }
}
