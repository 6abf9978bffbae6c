use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fsvod_cli::harness::{load_cells, CellResult};
use fsvod_cli::report::{emit_report, ReportFormat, ResultsTable};
use fsvod_cli::{run_experiment, ExperimentConfig, RunOptions};
use fsvod_core::adaptation::{RunRecord, Strategy};
use fsvod_core::eval::gain;
use fsvod_core::EvalReport;
use serde_json::json;
use tempfile::TempDir;

fn tiny_config(extra: serde_json::Value) -> serde_json::Value {
    let mut base = json!({
        "schema_version": 1,
        "seed": 5,
        "corpus": {"generate": {"videos_per_class": 4, "min_frames": 6, "max_frames": 8, "seed": 2}},
        "splits": [{"name": "A", "base_classes": [0, 1, 2, 3, 4, 5, 6], "novel_classes": [7, 8, 9]}],
        "base_modes": ["weak"],
        "shots": [1],
        "strategies": ["freeze"],
        "repeats": 1,
        "validation_per_class": 1,
        "model": {"aggregation": {"global_frames": 2, "memory_capacity": 20}},
        "pretrain": {"schedule": {"iterations": 6, "warmup_iterations": 2}, "frames_per_video": 4},
        "adaptation": {"finetune_iterations": 3, "thaw_extra_one_shot": 2, "thaw_extra_multi_shot": 2, "frames_per_video": 4}
    });
    for (k, v) in extra.as_object().unwrap() {
        base[k] = v.clone();
    }
    base
}

fn write_config(dir: &Path, value: &serde_json::Value) -> PathBuf {
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    path
}

fn fsvod(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsvod"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn parse(v: &serde_json::Value) -> ExperimentConfig {
    ExperimentConfig::parse(&v.to_string()).unwrap()
}

#[test]
fn unknown_config_key_exits_2_and_names_it() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(json!({"shotz": [1]})));
    let out = fsvod(&["--config", path(&cfg), "--out", path(&dir.path().join("o")), "experiment"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("shotz"));
    assert!(!dir.path().join("o").exists());
}

#[test]
fn bad_subcommand_arguments_exit_2() {
    let out = fsvod(&["report", "--archive", "/nonexistent", "--format", "pdf"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn one_cell_archive_has_one_report_per_table_cell() {
    let dir = TempDir::new().unwrap();
    let archive = dir.path().join("a");
    let config = parse(&tiny_config(json!({})));
    let summary = run_experiment(&config, &archive, RunOptions::default()).unwrap();
    assert_eq!(summary.cells_run, 1);
    let cells = load_cells(&archive).unwrap();
    assert_eq!(cells.len(), 1);
    assert_eq!(cells[0].reports.len(), 1);
    assert_eq!(summary.table.rows.len(), 1);
    let row = &summary.table.rows[0];
    assert_eq!(row.repeats, 1);
    let report = &cells[0].reports[&Strategy::Freeze];
    assert_eq!(row.novel_map50, report.novel_map50 * 100.0);
    assert_eq!(row.base_map50, report.base_map50 * 100.0);

    // plot needs a baseline plus Joint or Thaw
    let out = emit_report(&archive, ReportFormat::Plot, &dir.path().join("r")).unwrap();
    assert!(out.files.is_empty());
    assert_eq!(out.notices.len(), 1);
    assert!(!archive.join("tables/gain_weak_A.svg").exists());
}

#[test]
fn archive_is_resumable_and_guarded() {
    let dir = TempDir::new().unwrap();
    let archive = dir.path().join("a");
    let cfg = write_config(dir.path(), &tiny_config(json!({"repeats": 2})));
    let out = fsvod(&["--config", path(&cfg), "--out", path(&archive), "experiment"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(archive.join("tables/tables.csv")).unwrap();
    let stamp = fs::metadata(archive.join("cells/weak_A/shot1/rep0/freeze/run.json")).unwrap().modified().unwrap();

    let again = fsvod(&["--config", path(&cfg), "--out", path(&archive), "experiment"]);
    assert_eq!(again.status.code(), Some(2));

    let resumed = fsvod(&["--config", path(&cfg), "--out", path(&archive), "--resume", "experiment"]);
    assert_eq!(resumed.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&resumed.stdout).contains("0 cells run, 2 already complete"));
    assert_eq!(fs::read_to_string(archive.join("tables/tables.csv")).unwrap(), csv);
    let after = fs::metadata(archive.join("cells/weak_A/shot1/rep0/freeze/run.json")).unwrap().modified().unwrap();
    assert_eq!(stamp, after);

    let other = fsvod(&["--config", path(&cfg), "--seed", "99", "--out", path(&archive), "--resume", "experiment"]);
    assert_eq!(other.status.code(), Some(2));
}

#[test]
fn strategies_share_the_fewshot_manifest_and_csv_gains_recompute() {
    let dir = TempDir::new().unwrap();
    let archive = dir.path().join("a");
    let config = parse(&tiny_config(json!({"strategies": ["joint", "freeze", "thaw"], "repeats": 2})));
    run_experiment(&config, &archive, RunOptions { workers: 2, resume: false }).unwrap();
    let cells = load_cells(&archive).unwrap();
    assert_eq!(cells.len(), 2);
    for cell in &cells {
        let dir = cell.key.dir(&archive);
        let digests: Vec<String> = Strategy::ALL
            .iter()
            .map(|s| RunRecord::load(&dir.join(s.as_str()).join("run.json")).unwrap().manifest_digest)
            .collect();
        assert!(digests.iter().all(|d| d == &cell.fewshot_digest));
        let thaw = RunRecord::load(&dir.join("thaw/run.json")).unwrap();
        let freeze = RunRecord::load(&dir.join("freeze/run.json")).unwrap();
        assert_eq!(thaw.phase1.as_ref(), Some(&freeze.after));
    }

    let csv = fs::read_to_string(archive.join("tables/tables.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 1 + 3, "one row per cell and strategy");
    for line in &lines[1..] {
        let f: Vec<&str> = line.split(',').collect();
        let strategy: Strategy = f[3].parse().unwrap();
        let reports: Vec<(&EvalReport, &EvalReport)> = cells
            .iter()
            .map(|c: &CellResult| (&c.reports[&strategy], &c.reports[&Strategy::Freeze]))
            .collect();
        let expected: f64 = reports.iter().map(|(m, f)| gain(m, f).unwrap()).sum::<f64>() / reports.len() as f64;
        let got: f64 = f[7].parse().unwrap();
        assert!((got - expected).abs() < 1e-12, "{line}");
        let novel: f64 = f[5].parse().unwrap();
        let mean = reports.iter().map(|(m, _)| m.novel_map50 * 100.0).sum::<f64>() / reports.len() as f64;
        assert!((novel - mean).abs() < 1e-12);
    }
    assert_eq!(ResultsTable::from_archive(&archive).unwrap().to_csv(), csv);
    assert!(archive.join("tables/gain_weak_A.svg").exists());
    let svg = fs::read_to_string(archive.join("tables/gain_weak_A.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("joint") && svg.contains("thaw"));
}

#[test]
fn failing_cell_leaves_partial_archive_and_exits_1() {
    let dir = TempDir::new().unwrap();
    let archive = dir.path().join("a");
    // 40-shot sampling cannot be satisfied by 4 videos per class
    let cfg = write_config(dir.path(), &tiny_config(json!({"shots": [1, 40]})));
    let out = fsvod(&["--config", path(&cfg), "--out", path(&archive), "experiment"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
    let failures: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(archive.join("failures.json")).unwrap()).unwrap();
    assert_eq!(failures.as_array().unwrap().len(), 1);
    assert!(failures[0]["job"].as_str().unwrap().contains("shot40"));
    assert!(archive.join("cells/weak_A/shot1/rep0/result.json").exists());
    assert!(archive.join("tables/tables.csv").exists());
}

#[test]
fn report_on_empty_archive_exits_2() {
    let dir = TempDir::new().unwrap();
    let out = fsvod(&["report", "--archive", path(dir.path()), "--format", "text"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn single_step_commands_chain() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &tiny_config(json!({})));
    let run = |out: &Path, args: &[&str]| {
        let mut full = vec!["--config", path(&cfg), "--out", path(out)];
        full.extend_from_slice(args);
        let o = fsvod(&full);
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    };
    let corpus = dir.path().join("corpus");
    run(&corpus, &["generate-corpus"]);
    assert!(corpus.join("train/manifest.json").exists());
    assert!(corpus.join("validation/manifest.json").exists());

    let data = dir.path().join("data");
    run(&data, &["build-datasets"]);
    let fewshot = data.join("datasets/fewshot_A_shot1_rep0.json");
    assert!(fewshot.exists());
    assert!(data.join("datasets/base_weak_A.json").exists());

    let pre = dir.path().join("pre");
    run(&pre, &["pretrain", "--mode", "weak", "--split", "A"]);
    let ad = dir.path().join("adapted");
    run(
        &ad,
        &["adapt", "--checkpoint", path(&pre.join("checkpoint")), "--manifest", path(&fewshot), "--strategy", "thaw"],
    );
    assert!(ad.join("checkpoint_phase1").exists());
    let ev = dir.path().join("eval");
    run(
        &ev,
        &[
            "evaluate",
            "--checkpoint",
            path(&ad.join("checkpoint")),
            "--manifest",
            path(&data.join("datasets/validation_A.json")),
        ],
    );
    let report = EvalReport::load(&ev.join("report.json")).unwrap();
    assert_eq!(report.strategy, "thaw");
    assert_eq!(report.shot, 1);
    assert!(ev.join("detections.jsonl").exists());
}
