//! Result tables (text, CSV) and gain charts (SVG) built from an archive.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fsvod_core::adaptation::Strategy;
use fsvod_core::eval::{gain, gain_pp};
use fsvod_core::{BaseMode, Error, Result};
use serde::{Deserialize, Serialize};

use crate::harness::{io_err, load_cells, write_json, CellResult};

/// One row per (base mode, split, shot, strategy). mAP values are in
/// percent; gains are percentage points over Freeze on the same repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub base_mode: BaseMode,
    pub split: String,
    pub shot: usize,
    pub strategy: Strategy,
    pub repeats: usize,
    pub novel_map50: f64,
    pub base_map50: f64,
    pub novel_gain: Option<f64>,
    pub base_gain: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<TableRow>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

impl ResultsTable {
    pub fn from_cells(cells: &[CellResult]) -> Result<Self> {
        type Group = (BaseMode, String, usize, Strategy);
        let mut novel: BTreeMap<Group, Vec<f64>> = BTreeMap::new();
        let mut base: BTreeMap<Group, Vec<f64>> = BTreeMap::new();
        let mut novel_gain: BTreeMap<Group, Vec<f64>> = BTreeMap::new();
        let mut base_gain: BTreeMap<Group, Vec<f64>> = BTreeMap::new();
        for cell in cells {
            let freeze = cell.reports.get(&Strategy::Freeze);
            for (&strategy, report) in &cell.reports {
                let g = (cell.key.base_mode, cell.key.split.clone(), cell.key.shot, strategy);
                novel.entry(g.clone()).or_default().push(report.novel_map50 * 100.0);
                base.entry(g.clone()).or_default().push(report.base_map50 * 100.0);
                if let Some(f) = freeze {
                    novel_gain.entry(g.clone()).or_default().push(gain(report, f)?);
                    base_gain
                        .entry(g)
                        .or_default()
                        .push(gain_pp(report.base_map50 * 100.0, f.base_map50 * 100.0));
                }
            }
        }
        let rows = novel
            .into_iter()
            .map(|(g, n)| {
                let gains = |m: &BTreeMap<Group, Vec<f64>>| m.get(&g).filter(|v| v.len() == n.len()).map(|v| mean(v));
                TableRow {
                    novel_gain: gains(&novel_gain),
                    base_gain: gains(&base_gain),
                    base_map50: mean(&base[&g]),
                    novel_map50: mean(&n),
                    repeats: n.len(),
                    base_mode: g.0,
                    split: g.1,
                    shot: g.2,
                    strategy: g.3,
                }
            })
            .collect();
        Ok(ResultsTable { rows })
    }

    pub fn from_archive(archive: &Path) -> Result<Self> {
        Self::from_cells(&load_cells(archive)?)
    }

    pub fn row(&self, mode: BaseMode, split: &str, shot: usize, strategy: Strategy) -> Option<&TableRow> {
        self.rows
            .iter()
            .find(|r| r.base_mode == mode && r.split == split && r.shot == shot && r.strategy == strategy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("base_mode,split,shot,strategy,repeats,novel_map50,base_map50,novel_gain,base_gain\n");
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                r.base_mode.as_str(),
                r.split,
                r.shot,
                r.strategy,
                r.repeats,
                r.novel_map50,
                r.base_map50,
                opt(r.novel_gain),
                opt(r.base_gain)
            );
        }
        out
    }

    /// Shots as columns, one block per (split, class group).
    pub fn to_text(&self) -> String {
        let mut shots: Vec<usize> = self.rows.iter().map(|r| r.shot).collect();
        shots.sort_unstable();
        shots.dedup();
        let mut splits: Vec<&str> = self.rows.iter().map(|r| r.split.as_str()).collect();
        splits.sort_unstable();
        splits.dedup();
        let mut out = String::new();
        for split in splits {
            for (group, pick) in [("novel", true), ("base", false)] {
                let _ = writeln!(out, "split {split}, {group} classes, mAP50 (%), mean over repeats");
                let _ = write!(out, "{:<8} {:<8}", "base", "method");
                for s in &shots {
                    let _ = write!(out, " {:>16}", format!("{s}-shot"));
                }
                out.push('\n');
                let mut keys: Vec<(BaseMode, Strategy)> = self
                    .rows
                    .iter()
                    .filter(|r| r.split == split)
                    .map(|r| (r.base_mode, r.strategy))
                    .collect();
                keys.sort();
                keys.dedup();
                for (mode, strategy) in keys {
                    let _ = write!(out, "{:<8} {:<8}", mode.as_str(), strategy.as_str());
                    for &s in &shots {
                        let cell = match self.row(mode, split, s, strategy) {
                            Some(r) => {
                                let (v, g) = if pick { (r.novel_map50, r.novel_gain) } else { (r.base_map50, r.base_gain) };
                                match g {
                                    Some(g) if strategy != Strategy::Freeze => format!("{v:.2} ({g:+.2})"),
                                    _ => format!("{v:.2}"),
                                }
                            }
                            None => "-".into(),
                        };
                        let _ = write!(out, " {cell:>16}");
                    }
                    out.push('\n');
                }
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
    Plot,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "plot" => Ok(ReportFormat::Plot),
            other => Err(Error::Argument(format!("unknown report format {other:?} (expected text, csv or plot)"))),
        }
    }
}

/// Files written plus notices for outputs that were skipped.
#[derive(Debug, Default)]
pub struct ReportOutput {
    pub files: Vec<PathBuf>,
    pub notices: Vec<String>,
}

/// Write one report format for `archive` into `dest`.
pub fn emit_report(archive: &Path, format: ReportFormat, dest: &Path) -> Result<ReportOutput> {
    let table = ResultsTable::from_archive(archive)?;
    if table.rows.is_empty() {
        return Err(Error::Contract(format!("{} holds no completed cells", archive.display())));
    }
    render(&table, format, dest)
}

fn render(table: &ResultsTable, format: ReportFormat, dest: &Path) -> Result<ReportOutput> {
    fs::create_dir_all(dest).map_err(|e| io_err(dest, e))?;
    let mut out = ReportOutput::default();
    match format {
        ReportFormat::Text => {
            let path = dest.join("tables.txt");
            fs::write(&path, table.to_text()).map_err(|e| io_err(&path, e))?;
            out.files.push(path);
        }
        ReportFormat::Csv => {
            let path = dest.join("tables.csv");
            fs::write(&path, table.to_csv()).map_err(|e| io_err(&path, e))?;
            out.files.push(path);
        }
        ReportFormat::Plot => {
            let mut groups: Vec<(BaseMode, String)> =
                table.rows.iter().map(|r| (r.base_mode, r.split.clone())).collect();
            groups.dedup();
            for (mode, split) in groups {
                let name = format!("{}_{split}", mode.as_str());
                match gain_chart(table, mode, &split) {
                    Some(svg) => {
                        let path = dest.join(format!("gain_{name}.svg"));
                        fs::write(&path, svg).map_err(|e| io_err(&path, e))?;
                        out.files.push(path);
                    }
                    None => out
                        .notices
                        .push(format!("gain chart for {name} omitted: needs Freeze and Joint or Thaw results")),
                }
            }
        }
    }
    Ok(out)
}

/// All formats; used at the end of an experiment.
pub fn write_tables(table: &ResultsTable, dest: &Path) -> Result<()> {
    fs::create_dir_all(dest).map_err(|e| io_err(dest, e))?;
    write_json(&dest.join("table.json"), table)?;
    if table.rows.is_empty() {
        return Ok(());
    }
    for format in [ReportFormat::Text, ReportFormat::Csv, ReportFormat::Plot] {
        for notice in render(table, format, dest)?.notices {
            log::warn!("{notice}");
        }
    }
    Ok(())
}

const SERIES: [(Strategy, &str); 2] = [(Strategy::Joint, "#4c72b0"), (Strategy::Thaw, "#dd8452")];

/// Grouped bars of novel-class gain over Freeze, one group per shot.
pub fn gain_chart(table: &ResultsTable, mode: BaseMode, split: &str) -> Option<String> {
    let rows: Vec<&TableRow> = table
        .rows
        .iter()
        .filter(|r| r.base_mode == mode && r.split == split && r.novel_gain.is_some())
        .collect();
    let present: Vec<(Strategy, &str)> = SERIES
        .iter()
        .copied()
        .filter(|(s, _)| rows.iter().any(|r| r.strategy == *s))
        .collect();
    if present.is_empty() {
        return None;
    }
    let mut shots: Vec<usize> = rows.iter().map(|r| r.shot).collect();
    shots.sort_unstable();
    shots.dedup();
    let gains: Vec<f64> = rows
        .iter()
        .filter(|r| present.iter().any(|(s, _)| *s == r.strategy))
        .filter_map(|r| r.novel_gain)
        .collect();
    let hi = gains.iter().copied().fold(1.0_f64, f64::max);
    let lo = gains.iter().copied().fold(-1.0_f64, f64::min);
    let span = hi - lo;

    let (w, h) = (120.0 + 140.0 * shots.len() as f64, 320.0);
    let (left, right, top, bottom) = (60.0, w - 20.0, 40.0, h - 50.0);
    let y = |v: f64| top + (hi - v) / span * (bottom - top);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">Novel-class gain over Freeze ({} base, split {split})</text>"#,
        w / 2.0,
        mode.as_str()
    );
    let _ = writeln!(svg, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{bottom}" stroke="black"/>"#);
    let _ = writeln!(
        svg,
        r#"<line x1="{left}" y1="{0:.2}" x2="{right}" y2="{0:.2}" stroke="black"/>"#,
        y(0.0)
    );
    for tick in [lo, 0.0, hi] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{tick:+.1}</text>"#,
            left - 6.0,
            y(tick) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {0})" text-anchor="middle">mAP50 gain (pp)</text>"#,
        (top + bottom) / 2.0
    );
    let group_w = (right - left) / shots.len() as f64;
    let bar_w = group_w * 0.7 / present.len() as f64;
    for (i, shot) in shots.iter().enumerate() {
        let x0 = left + group_w * i as f64 + group_w * 0.15;
        for (j, (strategy, colour)) in present.iter().enumerate() {
            let Some(g) = rows
                .iter()
                .find(|r| r.shot == *shot && r.strategy == *strategy)
                .and_then(|r| r.novel_gain)
            else {
                continue;
            };
            let (ya, yb) = (y(g.max(0.0)), y(g.min(0.0)));
            let x = x0 + bar_w * j as f64;
            let _ = writeln!(
                svg,
                r#"<rect x="{x:.2}" y="{ya:.2}" width="{:.2}" height="{:.2}" fill="{colour}"><title>{strategy} {shot}-shot: {g:+.2}</title></rect>"#,
                bar_w,
                (yb - ya).max(0.5)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{shot}-shot</text>"#,
            x0 + group_w * 0.35,
            bottom + 18.0
        );
    }
    for (j, (strategy, colour)) in present.iter().enumerate() {
        let x = left + 10.0 + 90.0 * j as f64;
        let _ = writeln!(svg, r#"<rect x="{x}" y="{}" width="12" height="12" fill="{colour}"/>"#, h - 22.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{strategy}</text>"#, x + 16.0, h - 12.0);
    }
    svg.push_str("</svg>\n");
    Some(svg)
}
