//! Run summaries: a per-step table recomputed from the JSONL loss logs and
//! evaluation reports, plus loss-curve and metric-trend plots.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::plot::{line_chart, Series};
use crate::backend::{read_manifest, CheckpointStatus};
use crate::error::{Error, Result};
use crate::evaluation::EvaluationReport;
use crate::removal::{IterationLoss, RunLayout};

/// Iterations averaged for the "final" loss columns.
pub const TAIL: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub step: usize,
    pub checkpoint: String,
    pub concept: String,
    pub iterations: usize,
    /// Mean over the last [`TAIL`] logged iterations.
    pub final_loss_rm: Option<f64>,
    pub final_loss_reg: Option<f64>,
    pub final_loss_total: Option<f64>,
    /// `<concept>/<metric>` to value.
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    /// Union of metric column names over all rows.
    pub metric_columns: Vec<String>,
}

/// Mean of the last `TAIL` values (all of them if fewer).
pub fn tail_mean(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let tail = &values[values.len().saturating_sub(TAIL)..];
    Some(tail.iter().sum::<f64>() / tail.len() as f64)
}

pub fn read_loss_log(path: &Path) -> Result<Vec<IterationLoss>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: path.to_path_buf(),
                line: n + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Ok(Vec::new());
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == ext))
        .collect();
    out.sort();
    Ok(out)
}

/// Step index parsed from a `step-<i>-<slug>` id; the teacher is step 0.
fn step_of(id: &str) -> Option<usize> {
    if id == "teacher" {
        return Some(0);
    }
    id.strip_prefix("step-")?.split('-').next()?.parse().ok()
}

/// Every evaluation report under `<run>/reports/<checkpoint>/*.json`.
pub fn read_reports(run_dir: &Path) -> Result<Vec<EvaluationReport>> {
    let reports = RunLayout::new(run_dir).reports();
    let mut out = Vec::new();
    if !reports.is_dir() {
        return Ok(out);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(&reports)
        .map_err(|e| Error::io(&reports, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for d in dirs {
        for f in sorted_files(&d, "json")? {
            out.push(EvaluationReport::read(&f)?);
        }
    }
    Ok(out)
}

/// Builds the per-step table. Rows come from complete checkpoints' loss logs
/// and from evaluated checkpoints (the teacher appears as step 0 when evaluated).
pub fn summarize(run_dir: &Path) -> Result<Summary> {
    let layout = RunLayout::new(run_dir);
    let mut rows: BTreeMap<usize, SummaryRow> = BTreeMap::new();
    for log in sorted_files(&layout.logs(), "jsonl")? {
        let id = log.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let Some(step) = step_of(&id) else { continue };
        let losses = read_loss_log(&log)?;
        let concept = match read_manifest(run_dir, &id) {
            Ok(m) if m.status == CheckpointStatus::Complete => m.removed_concepts.last().cloned().unwrap_or_default(),
            _ => continue,
        };
        let col = |f: fn(&IterationLoss) -> f64| tail_mean(&losses.iter().map(f).collect::<Vec<_>>());
        rows.insert(
            step,
            SummaryRow {
                step,
                checkpoint: id,
                concept,
                iterations: losses.len(),
                final_loss_rm: col(|l| l.loss_rm),
                final_loss_reg: col(|l| l.loss_reg),
                final_loss_total: col(|l| l.loss_total),
                metrics: BTreeMap::new(),
            },
        );
    }
    for r in read_reports(run_dir)? {
        let Some(step) = step_of(&r.checkpoint) else { continue };
        let row = rows.entry(step).or_insert_with(|| SummaryRow {
            step,
            checkpoint: r.checkpoint.clone(),
            concept: if step == 0 { "-".into() } else { String::new() },
            iterations: 0,
            final_loss_rm: None,
            final_loss_reg: None,
            final_loss_total: None,
            metrics: BTreeMap::new(),
        });
        for m in &r.metrics {
            row.metrics.insert(format!("{}/{}", r.concept, m.name), m.value);
        }
    }
    if rows.is_empty() {
        return Err(Error::config(
            "out",
            format!("{} holds no loss logs or evaluation reports", run_dir.display()),
        ));
    }
    let mut metric_columns: Vec<String> = rows.values().flat_map(|r| r.metrics.keys().cloned()).collect();
    metric_columns.sort();
    metric_columns.dedup();
    Ok(Summary {
        rows: rows.into_values().collect(),
        metric_columns,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

impl Summary {
    /// Markdown table; metric columns appear only when some row has metrics.
    pub fn to_markdown(&self) -> String {
        let mut head = vec!["step", "checkpoint", "concept", "iters", "L_rm", "L_reg", "L_total"]
            .into_iter()
            .map(String::from)
            .collect::<Vec<_>>();
        head.extend(self.metric_columns.iter().cloned());
        let mut out = format!("| {} |\n|{}\n", head.join(" | "), "---|".repeat(head.len()));
        for r in &self.rows {
            let mut cells = vec![
                r.step.to_string(),
                r.checkpoint.clone(),
                r.concept.clone(),
                r.iterations.to_string(),
                cell(r.final_loss_rm),
                cell(r.final_loss_reg),
                cell(r.final_loss_total),
            ];
            cells.extend(self.metric_columns.iter().map(|c| cell(r.metrics.get(c).copied())));
            out.push_str(&format!("| {} |\n", cells.join(" | ")));
        }
        out
    }
}

/// Writes `reports/summary.{md,json}`, one loss plot per step with logged
/// iterations, and a metric-trend plot when any metric exists. Returns the
/// files written.
pub fn write_report(run_dir: &Path) -> Result<(Summary, Vec<PathBuf>)> {
    let summary = summarize(run_dir)?;
    let layout = RunLayout::new(run_dir);
    let reports = layout.reports();
    let plots = reports.join("plots");
    fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let mut written = Vec::new();

    let md = reports.join("summary.md");
    fs::write(&md, summary.to_markdown()).map_err(|e| Error::io(&md, e))?;
    written.push(md);
    let json = reports.join("summary.json");
    fs::write(&json, serde_json::to_string_pretty(&summary)? + "\n").map_err(|e| Error::io(&json, e))?;
    written.push(json);

    for row in summary.rows.iter().filter(|r| r.iterations > 0) {
        let losses = read_loss_log(&layout.log_file(&row.checkpoint))?;
        let series = |name: &str, f: fn(&IterationLoss) -> f64| Series {
            name: name.into(),
            points: losses.iter().map(|l| (l.iter as f64, f(l))).collect(),
        };
        let svg = line_chart(
            &format!("step {} ({}) losses", row.step, row.concept),
            "iteration",
            &[
                series("L_rm", |l| l.loss_rm),
                series("L_reg", |l| l.loss_reg),
                series("L_total", |l| l.loss_total),
            ],
        );
        let path = plots.join(format!("{}-loss.svg", row.checkpoint));
        fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }

    if !summary.metric_columns.is_empty() {
        let series: Vec<Series> = summary
            .metric_columns
            .iter()
            .map(|c| Series {
                name: c.clone(),
                points: summary
                    .rows
                    .iter()
                    .filter_map(|r| r.metrics.get(c).map(|v| (r.step as f64, *v)))
                    .collect(),
            })
            .collect();
        let path = plots.join("metrics.svg");
        fs::write(&path, line_chart("metrics by step", "step", &series)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok((summary, written))
}
