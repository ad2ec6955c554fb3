use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use fedmoco_core::experiment::EvalRecord;
use serde::Serialize;

use crate::fsutil::{read_jsonl, write_atomic};

/// Mean and unbiased standard deviation; one value gives std 0 and sets
/// `single_seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub single_seed: bool,
}

pub fn mean_std(values: &[f64]) -> Option<MeanStd> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std =
        if n > 1 { (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    Some(MeanStd { mean, std, n, single_seed: n == 1 })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub nodes: usize,
    pub metric: String,
    pub model: String,
    pub accuracy: MeanStd,
    pub best_accuracy: MeanStd,
    pub seeds: Vec<u64>,
}

fn find_eval_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            find_eval_files(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "eval.jsonl") {
            out.push(path);
        }
    }
    Ok(())
}

fn scenario_name(r: &EvalRecord) -> String {
    serde_json::to_value(r.scenario)
        .ok()
        .map(|v| match v {
            serde_json::Value::Object(m) => m
                .iter()
                .map(|(k, v)| if k == "kind" { v.as_str().unwrap_or("").to_string() } else { format!("{k}={v}") })
                .collect::<Vec<_>>()
                .join(" "),
            other => other.to_string(),
        })
        .unwrap_or_default()
}

pub fn summarize(records: &[EvalRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, usize, String, String), Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((scenario_name(r), r.nodes, r.metric.clone(), r.model.clone())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((scenario, nodes, metric, model), rs)| {
            let acc: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
            let best: Vec<f64> = rs.iter().map(|r| r.best_accuracy).collect();
            SummaryRow {
                scenario,
                nodes,
                metric,
                model,
                accuracy: mean_std(&acc).expect("group is non-empty"),
                best_accuracy: mean_std(&best).expect("group is non-empty"),
                seeds: rs.iter().map(|r| r.seed).collect(),
            }
        })
        .collect()
}

pub fn render(rows: &[SummaryRow]) -> String {
    let mut s = String::from(
        "| scenario | K | metric | model | seeds | final accuracy | best-epoch accuracy |\n|---|---|---|---|---|---|---|\n",
    );
    for r in rows {
        let flag = if r.accuracy.single_seed { " (single seed)" } else { "" };
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} | {:.4} ± {:.4}{flag} | {:.4} ± {:.4} |",
            r.scenario,
            r.nodes,
            r.metric,
            r.model,
            r.accuracy.n,
            r.accuracy.mean,
            r.accuracy.std,
            r.best_accuracy.mean,
            r.best_accuracy.std
        );
    }
    s
}

/// Aggregates every `eval.jsonl` under `dir` into `summary.md` and
/// `summary.json`, returning the rendered table.
pub fn report(dir: &Path) -> Result<String> {
    if !dir.is_dir() {
        bail!("{} is not a directory", dir.display());
    }
    let mut files = Vec::new();
    find_eval_files(dir, &mut files)?;
    if files.is_empty() {
        bail!("no eval.jsonl found under {}", dir.display());
    }
    let mut records: Vec<EvalRecord> = Vec::new();
    for f in &files {
        records.extend(read_jsonl::<EvalRecord>(f)?);
    }
    if records.is_empty() {
        bail!("eval files under {} hold no records", dir.display());
    }
    let rows = summarize(&records);
    let table = render(&rows);
    write_atomic(&dir.join("summary.md"), table.as_bytes())?;
    write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&rows)?.as_bytes())?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_seed_hand_values() {
        let m = mean_std(&[0.90, 0.92, 0.94]).unwrap();
        assert!((m.mean - 0.92).abs() < 1e-12);
        // deviations ±0.02: (0.0004 + 0.0004) / 2 = 0.0004
        assert!((m.std - 0.02).abs() < 1e-12);
        assert!(!m.single_seed);
    }

    #[test]
    fn single_seed_flagged() {
        let m = mean_std(&[0.7]).unwrap();
        assert_eq!((m.mean, m.std, m.single_seed), (0.7, 0.0, true));
        assert!(mean_std(&[]).is_none());
    }
}
