//! End-to-end runs: federated pre-training followed by evaluation on the
//! held-out downstream task.

use serde::{Deserialize, Serialize};

use crate::config::{Arm, ExperimentConfig};
use crate::datagen::{make_eval_split, ScenarioKind};
use crate::error::Result;
use crate::eval::{fine_tune, linear_probe, EvalOutcome};
use crate::federation::{run_training, RunOutput};
use crate::nn::{init_params, EncoderParams};

/// One evaluation line of a results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    pub scenario: ScenarioKind,
    pub nodes: usize,
    pub seed: u64,
    /// `linear_probe` or `finetune`.
    pub metric: String,
    pub accuracy: f64,
    pub best_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    pub classes: Vec<u32>,
    pub train_size: usize,
}

impl EvalRecord {
    fn new(model: &str, cfg: &ExperimentConfig, metric: &str, outcome: &EvalOutcome) -> Self {
        Self {
            model: model.to_string(),
            scenario: cfg.data.scenario,
            nodes: cfg.federation.nodes,
            seed: cfg.seed,
            metric: metric.to_string(),
            accuracy: outcome.accuracy,
            best_accuracy: outcome.best_accuracy,
            per_class_accuracy: outcome.per_class_accuracy.clone(),
            classes: outcome.classes.clone(),
            train_size: outcome.train_size,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArmOutput {
    pub arm: Arm,
    pub config: ExperimentConfig,
    pub run: RunOutput,
    pub records: Vec<EvalRecord>,
}

/// Evaluates an encoder with the configured protocols.
pub fn evaluate_encoder(model: &str, encoder: &EncoderParams, cfg: &ExperimentConfig) -> Result<Vec<EvalRecord>> {
    let (train, test) = make_eval_split(&cfg.scenario_spec(), cfg.seed)?;
    let mut out = vec![EvalRecord::new(
        model,
        cfg,
        "linear_probe",
        &linear_probe(encoder, &train, &test, &cfg.eval.probe, cfg.seed)?,
    )];
    if cfg.eval.run_finetune {
        let ft = &cfg.eval.finetune;
        out.push(EvalRecord::new(
            model,
            cfg,
            "finetune",
            &fine_tune(encoder, ft.fraction, &train, &test, ft, cfg.seed)?,
        ));
    }
    Ok(out)
}

/// Pre-trains `arm` on `base` and evaluates the resulting `θ₀`.
pub fn run_arm(base: &ExperimentConfig, arm: Arm) -> Result<ArmOutput> {
    let config = arm.configure(base);
    config.validate()?;
    let run = run_training(&config)?;
    let records = evaluate_encoder(arm.name(), &run.theta0, &config)?;
    Ok(ArmOutput { arm, config, run, records })
}

/// Evaluation of the untrained initialization `θ₀⁰`.
pub fn evaluate_random_init(cfg: &ExperimentConfig) -> Result<Vec<EvalRecord>> {
    let theta = init_params(&cfg.encoder_shapes(), cfg.seed)?;
    evaluate_encoder("RandomInit", &theta, cfg)
}
