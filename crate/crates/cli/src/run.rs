use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fedmoco_core::experiment::{evaluate_encoder, evaluate_random_init, EvalRecord};
use fedmoco_core::federation::{save_checkpoint, Federation};
use fedmoco_core::{Arm, ExperimentConfig};
use serde::Serialize;

use crate::fsutil::{write_atomic, write_jsonl};
use crate::presets::{Plan, Setting};
use crate::settings::to_toml;

pub const RANDOM_INIT: &str = "RandomInit";

#[derive(Debug, Clone, Serialize)]
pub struct RunDigest {
    pub setting: String,
    pub model: String,
    pub seed: u64,
    pub theta0: String,
}

fn setting_config(base: &ExperimentConfig, setting: &Setting, seed: u64) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.seed = seed;
    cfg.data.scenario = setting.scenario;
    cfg.federation.nodes = setting.nodes;
    cfg
}

pub fn run_dir(out: &Path, setting: &str, model: &str, seed: u64) -> PathBuf {
    out.join(setting).join(model).join(format!("seed-{seed}"))
}

fn train_and_evaluate(cfg: &ExperimentConfig, arm: Arm, dir: &Path) -> Result<(String, Vec<EvalRecord>)> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("config.toml"), to_toml(cfg)?.as_bytes())?;
    let metrics_path = dir.join("metrics.jsonl");
    let _ = fs::remove_file(&metrics_path);
    let mut metrics = OpenOptions::new().create(true).append(true).open(&metrics_path)?;

    let mut fed = Federation::from_config(cfg)?;
    for t in 1..=cfg.federation.rounds {
        let m = fed.run_round(t).with_context(|| format!("round {t}"))?;
        for r in m.records() {
            serde_json::to_writer(&mut metrics, &r)?;
            metrics.write_all(b"\n")?;
        }
        metrics.flush()?;
    }
    let output = fed.run()?;
    write_jsonl(&dir.join("messages.jsonl"), output.log.records())?;
    write_atomic(&dir.join("timings.json"), serde_json::to_string(&output.round_seconds)?.as_bytes())?;
    let ckpt = dir.join("theta0.ckpt");
    save_checkpoint(&output.theta0, &ckpt)?;
    let records = evaluate_encoder(arm.name(), &output.theta0, cfg)?;
    write_jsonl(&dir.join("eval.jsonl"), &records)?;
    Ok((output.theta0.digest(), records))
}

/// Executes every (setting, arm, seed) of `plan`, writing one directory per
/// run plus `results.jsonl` and `digests.jsonl` at the top level.
pub fn run_plan(plan: &Plan, seeds: &[u64], out: &Path, mut progress: impl FnMut(&str)) -> Result<Vec<RunDigest>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_atomic(&out.join("plan.toml"), to_toml(&plan.base)?.as_bytes())?;
    let mut results = Vec::new();
    let mut digests = Vec::new();
    for setting in &plan.settings {
        for &seed in seeds {
            let cfg = setting_config(&plan.base, setting, seed);
            if plan.random_init {
                let records = evaluate_random_init(&cfg)?;
                write_jsonl(&run_dir(out, &setting.label, RANDOM_INIT, seed).join("eval.jsonl"), &records)?;
                results.extend(records);
            }
            for &arm in &plan.arms {
                let arm_cfg = arm.configure(&cfg);
                let dir = run_dir(out, &setting.label, arm.name(), seed);
                let (digest, records) = train_and_evaluate(&arm_cfg, arm, &dir)
                    .with_context(|| format!("run {} failed; partial logs in {}", arm.name(), dir.display()))?;
                for r in &records {
                    progress(&format!(
                        "{} {} seed {} {}: {:.4} (best {:.4})",
                        setting.label, r.model, seed, r.metric, r.accuracy, r.best_accuracy
                    ));
                }
                results.extend(records);
                digests.push(RunDigest {
                    setting: setting.label.clone(),
                    model: arm.name().into(),
                    seed,
                    theta0: digest,
                });
                write_jsonl(&out.join("results.jsonl"), &results)?;
                write_jsonl(&out.join("digests.jsonl"), &digests)?;
            }
        }
    }
    write_jsonl(&out.join("results.jsonl"), &results)?;
    write_jsonl(&out.join("digests.jsonl"), &digests)?;
    Ok(digests)
}

/// Writes node shards and the downstream split of `cfg` in the flat binary
/// format.
pub fn export_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    use fedmoco_core::datagen::{export_dataset, generate_node_dataset, make_eval_split};
    fs::create_dir_all(out)?;
    let spec = cfg.scenario_spec();
    let mut written = Vec::new();
    let mut emit = |name: &str, images: &[fedmoco_core::ImageSample]| -> Result<()> {
        let data = out.join(format!("{name}.f64"));
        let labels = out.join(format!("{name}.labels"));
        export_dataset(images, &data, &labels)?;
        written.push(data);
        written.push(labels);
        Ok(())
    };
    for k in 0..spec.nodes {
        emit(&format!("node-{k}"), &generate_node_dataset(&spec, k, cfg.seed)?)?;
    }
    let (train, test) = make_eval_split(&spec, cfg.seed)?;
    emit("eval-train", &train)?;
    emit("eval-test", &test)?;
    Ok(written)
}
