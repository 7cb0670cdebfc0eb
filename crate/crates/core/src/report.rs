//! Result tables: a CSV for machines and an aligned text table for people.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::adapt::mean;
use crate::error::{CdbnError, Result};
use crate::objectives::LossSwitches;
use crate::pipeline::SweepCell;

const MEAN_TOLERANCE: f64 = 1e-9;
const SEED_SEPARATOR: char = ';';

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub setting: String,
    pub losses: LossSwitches,
    pub per_seed_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
}

impl ReportRow {
    pub fn from_cell(task: &str, cell: &SweepCell) -> Self {
        ReportRow {
            task: task.to_owned(),
            setting: format!("{}={}", cell.axis, cell.value),
            losses: cell.losses,
            per_seed_accuracy: cell.per_seed_accuracy.clone(),
            mean_accuracy: cell.mean_accuracy,
        }
    }

    /// Mean recomputed from the seeds; a stored mean that disagrees is logged
    /// and replaced.
    fn checked_mean(&self) -> f64 {
        let m = mean(&self.per_seed_accuracy);
        let agree = (m - self.mean_accuracy).abs() <= MEAN_TOLERANCE || (m.is_nan() && self.mean_accuracy.is_nan());
        if !agree {
            warn!(
                "{}/{}: stored mean {} differs from recomputed {}",
                self.task, self.setting, self.mean_accuracy, m
            );
        }
        m
    }
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    task: String,
    setting: String,
    ce: bool,
    im: bool,
    consistency: bool,
    seed_accuracies: String,
    mean_accuracy: f64,
}

pub fn emit_csv(rows: &[ReportRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(CsvRow {
            task: r.task.clone(),
            setting: r.setting.clone(),
            ce: r.losses.ce,
            im: r.losses.im,
            consistency: r.losses.consistency,
            seed_accuracies: r
                .per_seed_accuracy
                .iter()
                .map(|a| a.to_string())
                .collect::<Vec<_>>()
                .join(&SEED_SEPARATOR.to_string()),
            mean_accuracy: r.checked_mean(),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| CdbnError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize::<CsvRow>()
        .map(|row| {
            let row = row?;
            let per_seed_accuracy = if row.seed_accuracies.is_empty() {
                Vec::new()
            } else {
                row.seed_accuracies
                    .split(SEED_SEPARATOR)
                    .map(|s| s.parse::<f64>().map_err(|e| CdbnError::malformed("report.csv", e.to_string())))
                    .collect::<Result<Vec<_>>>()?
            };
            Ok(ReportRow {
                task: row.task,
                setting: row.setting,
                losses: LossSwitches {
                    ce: row.ce,
                    im: row.im,
                    consistency: row.consistency,
                },
                per_seed_accuracy,
                mean_accuracy: row.mean_accuracy,
            })
        })
        .collect()
}

pub fn write_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    std::fs::write(path, emit_csv(rows)?)?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>> {
    parse_csv(&std::fs::read_to_string(path)?)
}

fn tick(on: bool) -> &'static str {
    if on { "✓" } else { "" }
}

/// Column-aligned table; accuracies in percent with two decimals.
pub fn render_table(rows: &[ReportRow]) -> String {
    let seeds = rows.iter().map(|r| r.per_seed_accuracy.len()).max().unwrap_or(0);
    let mut header: Vec<String> = ["task", "setting", "ce", "im", "consistency"].map(String::from).to_vec();
    header.extend((1..=seeds).map(|i| format!("seed{i}")));
    header.push("mean".into());

    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut cells = vec![
                r.task.clone(),
                r.setting.clone(),
                tick(r.losses.ce).into(),
                tick(r.losses.im).into(),
                tick(r.losses.consistency).into(),
            ];
            for i in 0..seeds {
                cells.push(r.per_seed_accuracy.get(i).map_or(String::new(), |a| format!("{:.2}", 100.0 * a)));
            }
            cells.push(format!("{:.2}", 100.0 * r.checked_mean()));
            cells
        })
        .collect();

    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            std::iter::once(&header)
                .chain(&body)
                .map(|row| row[c].chars().count())
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in std::iter::once(&header).chain(&body) {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell}{}", " ".repeat(w - cell.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
    out
}
