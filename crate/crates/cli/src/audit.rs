use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use fedmoco_core::federation::{audit_privacy, expected_message_counts, read_records, AuditReport};

use crate::settings::load_config;

#[derive(Debug, Clone)]
pub struct AuditOutcome {
    pub log: PathBuf,
    pub report: AuditReport,
    /// Whether per-kind counts equal the protocol formula for the run's
    /// config; `None` when no `config.toml` sits beside the log.
    pub counts_match: Option<bool>,
}

impl AuditOutcome {
    pub fn passed(&self) -> bool {
        self.report.passed && self.counts_match != Some(false)
    }
}

fn find_logs(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<_> = std::fs::read_dir(path)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_logs(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == "messages.jsonl") {
            out.push(p);
        }
    }
    Ok(())
}

/// Audits a message log, or every `messages.jsonl` under a run directory.
pub fn audit_path(path: &Path) -> Result<Vec<AuditOutcome>> {
    let mut logs = Vec::new();
    find_logs(path, &mut logs)?;
    if logs.is_empty() {
        bail!("no messages.jsonl found under {}", path.display());
    }
    let mut out = Vec::new();
    for log in logs {
        let records = read_records(&log)?;
        let report = audit_privacy(&records);
        let cfg_path = log.with_file_name("config.toml");
        let counts_match = if cfg_path.is_file() {
            let cfg = load_config(&fedmoco_core::ExperimentConfig::default(), &cfg_path)?;
            let nodes = if cfg.data.pool_nodes { 1 } else { cfg.federation.nodes };
            let expected = expected_message_counts(
                nodes,
                cfg.federation.rounds,
                cfg.federation.warmup_rounds,
                cfg.metadata.enabled,
            );
            Some(expected == report.counts)
        } else {
            None
        };
        out.push(AuditOutcome { log, report, counts_match });
    }
    Ok(out)
}
