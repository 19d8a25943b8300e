//! Result files and their tabular summaries.
//!
//! Everything here is arithmetic over recorded values; nothing is re-run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::FitReport;
use crate::error::{Error, Result};
use crate::eval::EvalDistribution;
use crate::manifest::{manifest_path_for, RunManifest};
use crate::nas::EpisodeRecord;

/// Written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub model: String,
    pub dataset: String,
    pub test_examples: usize,
    pub distribution: EvalDistribution,
}

/// Written by `analyze`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisFile {
    pub model: String,
    pub report: FitReport,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ResultFile {
    Eval(EvalFile),
    Analysis(AnalysisFile),
    History(Vec<EpisodeRecord>),
}

pub fn load_result(path: &Path) -> Result<ResultFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::format(path, msg);
    if let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) {
        if value.get("distribution").is_some() {
            return serde_json::from_value(value)
                .map(ResultFile::Eval)
                .map_err(|e| bad(e.to_string()));
        }
        if value.get("report").is_some() {
            return serde_json::from_value(value)
                .map(ResultFile::Analysis)
                .map_err(|e| bad(e.to_string()));
        }
        if value.get("episode").is_none() {
            return Err(bad("not an eval, analysis or history file".into()));
        }
    }
    let records = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| bad(format!("history line {}: {e}", i + 1))))
        .collect::<Result<Vec<EpisodeRecord>>>()?;
    if records.is_empty() {
        return Err(bad("empty history".into()));
    }
    Ok(ResultFile::History(records))
}

/// Wall time from the manifest written alongside `path`, if there is one.
pub fn recorded_wall_time(path: &Path) -> Option<f64> {
    let beside = manifest_path_for(path);
    let in_dir = path.parent().map(|d| d.join("manifest.json"));
    [Some(beside), in_dir]
        .into_iter()
        .flatten()
        .find_map(|m| RunManifest::load(&m).ok())
        .map(|m| m.wall_time_s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub label: String,
    pub k: usize,
    pub clean_accuracy: f64,
    pub mean: f64,
    pub p95min: f64,
    pub max: f64,
    pub wall_time_s: Option<f64>,
}

impl EvalRow {
    pub fn new(label: &str, file: &EvalFile, wall_time_s: Option<f64>) -> Self {
        let d = &file.distribution;
        EvalRow {
            label: label.to_string(),
            k: d.k,
            clean_accuracy: d.clean_accuracy,
            mean: d.mean,
            p95min: d.p95min,
            max: d.max,
            wall_time_s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub label: String,
    pub episodes: usize,
    pub failed: usize,
    pub mean_reward: f64,
    pub best_reward: f64,
    pub best_episode: usize,
    /// Evaluation of the best child (absent if it failed).
    pub best_clean_accuracy: Option<f64>,
    pub best_mean: Option<f64>,
    pub best_p95min: Option<f64>,
    pub train_batches: u64,
    pub wall_time_s: Option<f64>,
}

impl HistoryRow {
    pub fn new(label: &str, history: &[EpisodeRecord], wall_time_s: Option<f64>) -> Result<Self> {
        if history.is_empty() {
            return Err(Error::InvalidArgument(format!("{label}: empty history")));
        }
        let best = crate::nas::best_episode(history);
        let d = best.distribution.as_ref();
        Ok(HistoryRow {
            label: label.to_string(),
            episodes: history.len(),
            failed: history.iter().filter(|r| r.failure.is_some()).count(),
            mean_reward: history.iter().map(|r| r.reward).sum::<f64>() / history.len() as f64,
            best_reward: best.reward,
            best_episode: best.episode,
            best_clean_accuracy: d.map(|d| d.clean_accuracy),
            best_mean: d.map(|d| d.mean),
            best_p95min: d.map(|d| d.p95min),
            train_batches: history.iter().map(|r| r.train_batches).sum(),
            wall_time_s,
        })
    }
}

/// Gaussian-fit quality of one model, averaged over every file given for it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub model: String,
    pub files: usize,
    pub mean_chi_square: Option<f64>,
    pub mean_mse: Option<f64>,
    pub worst_chi_square: Option<f64>,
    pub worst_mse: Option<f64>,
    pub degenerate_elements: usize,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn max_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    values.flatten().reduce(f64::max)
}

pub fn fit_rows(files: &[AnalysisFile]) -> Vec<FitRow> {
    let mut groups: BTreeMap<&str, Vec<&FitReport>> = BTreeMap::new();
    for f in files {
        groups.entry(f.model.as_str()).or_default().push(&f.report);
    }
    groups
        .into_iter()
        .map(|(model, reports)| FitRow {
            model: model.to_string(),
            files: reports.len(),
            mean_chi_square: mean_of(reports.iter().map(|r| r.mean_chi_square)),
            mean_mse: mean_of(reports.iter().map(|r| r.mean_mse)),
            worst_chi_square: max_of(reports.iter().flat_map(|r| r.elements.iter().map(|e| e.chi_square))),
            worst_mse: max_of(reports.iter().flat_map(|r| r.elements.iter().map(|e| e.mse))),
            degenerate_elements: reports.iter().map(|r| r.degenerate_elements).sum(),
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub evals: Vec<EvalRow>,
    /// Sorted by mean reward, highest first.
    pub histories: Vec<HistoryRow>,
    pub fits: Vec<FitRow>,
}

impl Summary {
    pub fn from_files(paths: &[&Path]) -> Result<Self> {
        let mut s = Summary::default();
        let mut analyses = Vec::new();
        for &p in paths {
            let label = p.display().to_string();
            match load_result(p)? {
                ResultFile::Eval(e) => s.evals.push(EvalRow::new(&label, &e, recorded_wall_time(p))),
                ResultFile::History(h) => s.histories.push(HistoryRow::new(&label, &h, recorded_wall_time(p))?),
                ResultFile::Analysis(a) => analyses.push(a),
            }
        }
        s.histories.sort_by(|a, b| b.mean_reward.total_cmp(&a.mean_reward));
        s.fits = fit_rows(&analyses);
        Ok(s)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        let opt = |v: Option<f64>, digits: usize| v.map_or("-".to_string(), |v| format!("{v:.digits$}"));
        let sci = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.3e}"));
        if !self.evals.is_empty() {
            let _ = writeln!(
                out,
                "{:<40} {:>6} {:>8} {:>8} {:>8} {:>8} {:>10}",
                "model", "K", "clean", "mean", "p95min", "max", "wall_s"
            );
            for r in &self.evals {
                let _ = writeln!(
                    out,
                    "{:<40} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>10}",
                    r.label,
                    r.k,
                    r.clean_accuracy,
                    r.mean,
                    r.p95min,
                    r.max,
                    opt(r.wall_time_s, 1)
                );
            }
            out.push('\n');
        }
        if !self.histories.is_empty() {
            let _ = writeln!(
                out,
                "{:<40} {:>8} {:>8} {:>8} {:>6} {:>8} {:>8} {:>8} {:>10} {:>10}",
                "history", "episodes", "mean_r", "best_r", "at", "clean", "mean", "p95min", "batches", "wall_s"
            );
            for r in &self.histories {
                let _ = writeln!(
                    out,
                    "{:<40} {:>8} {:>8.4} {:>8.4} {:>6} {:>8} {:>8} {:>8} {:>10} {:>10}",
                    r.label,
                    r.episodes,
                    r.mean_reward,
                    r.best_reward,
                    r.best_episode,
                    opt(r.best_clean_accuracy, 4),
                    opt(r.best_mean, 4),
                    opt(r.best_p95min, 4),
                    r.train_batches,
                    opt(r.wall_time_s, 1)
                );
            }
            out.push('\n');
        }
        if !self.fits.is_empty() {
            let _ = writeln!(
                out,
                "{:<24} {:>5} {:>11} {:>11} {:>11} {:>11} {:>5}",
                "model", "files", "chi2", "mse", "worst_chi2", "worst_mse", "degen"
            );
            for r in &self.fits {
                let _ = writeln!(
                    out,
                    "{:<24} {:>5} {:>11} {:>11} {:>11} {:>11} {:>5}",
                    r.model,
                    r.files,
                    sci(r.mean_chi_square),
                    sci(r.mean_mse),
                    sci(r.worst_chi_square),
                    sci(r.worst_mse),
                    r.degenerate_elements
                );
            }
        }
        out
    }
}
