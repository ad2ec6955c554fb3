//! `fedmoco` command-line runner.
//!
//! Run directory layout:
//!
//! ```text
//! <out>/plan.toml                      base config of the invocation
//! <out>/results.jsonl                  every evaluation record
//! <out>/digests.jsonl                  final θ₀ digest per run
//! <out>/summary.md, summary.json       written by `report`
//! <out>/<setting>/<model>/seed-<s>/
//!     config.toml                      resolved config of this run
//!     metrics.jsonl                    one record per node per round, one per server round
//!     messages.jsonl                   message log for `audit`
//!     timings.json                     wall seconds per round
//!     theta0.ckpt                      final global encoder
//!     eval.jsonl                       evaluation records
//! ```

pub mod audit;
pub mod fsutil;
pub mod presets;
pub mod report;
pub mod run;
pub mod settings;

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use fedmoco_core::{Arm, ExperimentConfig};

use crate::presets::{preset, single, Plan};

pub const OUT_ENV: &str = "FEDMOCO_OUT";

#[derive(Debug, Parser)]
#[command(name = "fedmoco", version, about = "Federated momentum-contrast simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train and evaluate the arms of a preset or config file.
    Run(RunArgs),
    /// Aggregate the evaluations of a run directory into mean ± std rows.
    Report { run_dir: PathBuf },
    /// Check message logs for privacy violations and protocol message counts.
    Audit { path: PathBuf },
    /// Write the synthetic node shards and downstream split as flat binaries.
    ExportData(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML config; overlays the preset when both are given.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    /// Repeatable; defaults to the config seed.
    #[arg(long = "seed")]
    pub seeds: Vec<u64>,
    /// Output directory; defaults to `$FEDMOCO_OUT/<preset or config name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated arm names, e.g. `FedAvg,FedMoCo`.
    #[arg(long, value_delimiter = ',')]
    pub arms: Vec<String>,
    /// Root for default output directories.
    #[arg(long, env = OUT_ENV, default_value = "runs")]
    pub out_root: PathBuf,
}

impl RunArgs {
    pub fn plan(&self) -> Result<Plan> {
        let mut plan = match (&self.preset, &self.config) {
            (Some(name), None) => preset(name)?,
            (Some(name), Some(path)) => {
                let mut p = preset(name)?;
                p.base = settings::load_config(&p.base, path)?;
                p
            }
            (None, Some(path)) => single(settings::load_config(&ExperimentConfig::default(), path)?),
            (None, None) => bail!("either --preset or --config is required"),
        };
        if !self.arms.is_empty() {
            plan.arms = self.arms.iter().map(|a| a.parse::<Arm>()).collect::<fedmoco_core::Result<_>>()?;
        }
        Ok(plan)
    }

    pub fn seeds(&self, plan: &Plan) -> Vec<u64> {
        let mut seeds = Vec::new();
        for &s in &self.seeds {
            if !seeds.contains(&s) {
                seeds.push(s);
            }
        }
        if seeds.is_empty() {
            seeds.push(plan.base.seed);
        }
        seeds
    }

    pub fn out_dir(&self) -> PathBuf {
        if let Some(out) = &self.out {
            return out.clone();
        }
        let name = match (&self.preset, &self.config) {
            (Some(p), _) => p.clone(),
            (None, Some(c)) => c.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into()),
            (None, None) => "run".into(),
        };
        self.out_root.join(name)
    }
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let plan = args.plan()?;
            let seeds = args.seeds(&plan);
            let out = args.out_dir();
            let digests = run::run_plan(&plan, &seeds, &out, |line| println!("{line}"))?;
            for d in &digests {
                println!("digest {} {} seed {} {}", d.setting, d.model, d.seed, d.theta0);
            }
            print!("{}", report::report(&out)?);
            println!("outputs in {}", out.display());
        }
        Command::Report { run_dir } => print!("{}", report::report(&run_dir)?),
        Command::Audit { path } => {
            let outcomes = audit::audit_path(&path)?;
            let mut failed = 0;
            for o in &outcomes {
                let counts = match o.counts_match {
                    Some(true) => "counts match",
                    Some(false) => "COUNTS MISMATCH",
                    None => "counts unchecked",
                };
                let status = if o.passed() { "PASS" } else { "FAIL" };
                println!("{status} {} ({counts}, {} violations)", o.log.display(), o.report.violations.len());
                for v in &o.report.violations {
                    println!("  message {}: {}", v.index, v.reason);
                }
                failed += usize::from(!o.passed());
            }
            if failed > 0 {
                bail!("{failed} of {} logs failed the audit", outcomes.len());
            }
        }
        Command::ExportData(args) => {
            let plan = args.plan()?;
            let out = args.out_dir();
            for seed in args.seeds(&plan) {
                for s in &plan.settings {
                    let mut cfg = plan.base.clone();
                    cfg.seed = seed;
                    cfg.data.scenario = s.scenario;
                    cfg.federation.nodes = s.nodes;
                    let dir = out.join(&s.label).join(format!("seed-{seed}"));
                    for p in run::export_data(&cfg, &dir)? {
                        println!("{}", p.display());
                    }
                }
            }
        }
    }
    Ok(())
}
