//! Experiment configuration.
//!
//! [`ExperimentConfig::default`] carries the full-scale hyperparameters
//! (batch 64, dictionary 1024, key momentum 0.999, temperature 0.2,
//! Box-Cox λ 0.5, η 0.05, lr 0.03 decayed ×0.1/×0.01 at rounds 120/160).
//! [`ExperimentConfig::desk`] shrinks it to something that trains in
//! minutes on one CPU core.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::contrastive::{AugmentConfig, LocalHyperparams};
use crate::datagen::{ScenarioKind, ScenarioSpec};
use crate::error::{Error, Result};
use crate::eval::{FineTuneConfig, ProbeConfig};
use crate::metadata::DEFAULT_JITTER;
use crate::nn::{mlp_shapes, LayerShape};
use crate::rng::{derive_seed, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// `a_k ∝ 1 − r_k` from RSA scores.
    SelfAdaptive,
    /// `a_k ∝ n_k`.
    Fedavg,
}

/// When a node extracts the features it summarizes into metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetadataExtraction {
    /// Right after synchronization, with the server model.
    BeforeUpdate,
    /// After the local epoch, with the updated query encoder.
    AfterUpdate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrMilestone {
    /// The factor applies to every round strictly after this one.
    pub round: usize,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    pub nodes: usize,
    pub rounds: usize,
    pub warmup_rounds: usize,
    pub local_epochs: usize,
    pub aggregation: AggregationMode,
    /// Images per node used for the RSA score.
    pub probe_size: usize,
    /// Advance nodes on a worker pool. Results are identical either way.
    pub parallel: bool,
    /// Explicit per-node seeds; derived from the global seed when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub node_seeds: Option<Vec<u64>>,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            nodes: 3,
            rounds: 200,
            warmup_rounds: 50,
            local_epochs: 1,
            aggregation: AggregationMode::SelfAdaptive,
            probe_size: 100,
            parallel: false,
            node_seeds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveConfig {
    pub queue_size: usize,
    pub batch_size: usize,
    pub key_momentum: f64,
    pub temperature: f64,
    pub lr: f64,
    pub lr_milestones: Vec<LrMilestone>,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub augment: AugmentConfig,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            queue_size: 1024,
            batch_size: 64,
            key_momentum: 0.999,
            temperature: 0.2,
            lr: 0.03,
            lr_milestones: vec![LrMilestone { round: 120, factor: 0.1 }, LrMilestone { round: 160, factor: 0.01 }],
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetadataConfig {
    pub enabled: bool,
    pub eta: f64,
    pub lambda: f64,
    pub jitter: f64,
    pub extraction: MetadataExtraction,
}

impl Default for MetadataConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            eta: 0.05,
            lambda: 0.5,
            jitter: DEFAULT_JITTER,
            extraction: MetadataExtraction::BeforeUpdate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { hidden: vec![64], feature_dim: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub scenario: ScenarioKind,
    /// Images per acquisition domain before skew.
    pub samples_per_domain: usize,
    pub image_size: usize,
    pub eval_size: usize,
    /// Merge all shards into one node (centralized baseline).
    pub pool_nodes: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::Equal,
            samples_per_domain: 10_000,
            image_size: 16,
            eval_size: 3886,
            pool_nodes: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub probe: ProbeConfig,
    pub finetune: FineTuneConfig,
    /// Run the small-label fine-tuning evaluation after pre-training.
    pub run_finetune: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub federation: FederationConfig,
    pub contrastive: ContrastiveConfig,
    pub metadata: MetadataConfig,
    pub encoder: EncoderConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

fn field_error(field: &str, msg: impl fmt::Display) -> Error {
    Error::Config(format!("{field}: {msg}"))
}

impl ExperimentConfig {
    /// Single-core scale: 40 rounds, 10 warm-up rounds, dictionary 256,
    /// batch 32, 2000 images per domain, milestones at 60% and 80% of T.
    /// Evaluation keeps the full-size held-out split.
    pub fn desk() -> Self {
        let mut cfg = Self::default();
        cfg.federation.rounds = 40;
        cfg.federation.warmup_rounds = 10;
        cfg.contrastive.queue_size = 256;
        cfg.contrastive.batch_size = 32;
        cfg.contrastive.key_momentum = 0.99;
        cfg.contrastive.lr_milestones =
            vec![LrMilestone { round: 24, factor: 0.1 }, LrMilestone { round: 32, factor: 0.01 }];
        cfg.data.samples_per_domain = 2000;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let f = &self.federation;
        if f.nodes == 0 {
            return Err(field_error("federation.nodes", "must be at least 1"));
        }
        if f.warmup_rounds > f.rounds {
            return Err(field_error(
                "federation.warmup_rounds",
                format!("{} exceeds federation.rounds = {}", f.warmup_rounds, f.rounds),
            ));
        }
        if f.local_epochs == 0 {
            return Err(field_error("federation.local_epochs", "must be at least 1"));
        }
        if f.probe_size < 3 {
            return Err(field_error("federation.probe_size", "must be at least 3"));
        }
        if let Some(seeds) = &f.node_seeds {
            if seeds.len() != f.nodes {
                return Err(field_error(
                    "federation.node_seeds",
                    format!("{} seeds for {} nodes", seeds.len(), f.nodes),
                ));
            }
        }
        let c = &self.contrastive;
        if c.batch_size == 0 {
            return Err(field_error("contrastive.batch_size", "must be positive"));
        }
        if !(0.0..1.0).contains(&c.key_momentum) {
            return Err(field_error("contrastive.key_momentum", "must lie in [0, 1)"));
        }
        if !(c.temperature > 0.0) {
            return Err(field_error("contrastive.temperature", "must be positive"));
        }
        if !(c.lr >= 0.0) {
            return Err(field_error("contrastive.lr", "must be non-negative"));
        }
        let m = &self.metadata;
        if !(m.eta >= 0.0) {
            return Err(field_error("metadata.eta", "must be non-negative"));
        }
        if !(m.jitter >= 0.0) {
            return Err(field_error("metadata.jitter", "must be non-negative"));
        }
        if !m.lambda.is_finite() {
            return Err(field_error("metadata.lambda", "must be finite"));
        }
        if m.lambda == 0.0 && m.enabled {
            // Post-ReLU features contain exact zeros, which log Box-Cox rejects.
            return Err(field_error("metadata.lambda", "0 is undefined on zero feature entries"));
        }
        if self.encoder.feature_dim < 2 {
            return Err(field_error("encoder.feature_dim", "must be at least 2"));
        }
        if self.encoder.hidden.contains(&0) {
            return Err(field_error("encoder.hidden", "layer widths must be positive"));
        }
        self.eval.probe.validate().map_err(|e| field_error("eval.probe", e))?;
        self.eval.finetune.validate().map_err(|e| field_error("eval.finetune", e))?;
        let spec = self.scenario_spec();
        spec.validate().map_err(|e| field_error("data", e))?;
        let min = spec.node_counts().into_iter().min().unwrap_or(0);
        if min < 3 {
            return Err(field_error("data.samples_per_domain", "every node needs at least 3 images"));
        }
        Ok(())
    }

    pub fn scenario_spec(&self) -> ScenarioSpec {
        ScenarioSpec {
            kind: self.data.scenario,
            nodes: self.federation.nodes,
            base_size: self.data.samples_per_domain,
            image_size: self.data.image_size,
            eval_size: self.data.eval_size,
        }
    }

    pub fn encoder_shapes(&self) -> Vec<LayerShape> {
        let input = self.data.image_size * self.data.image_size;
        mlp_shapes(input, &self.encoder.hidden, self.encoder.feature_dim)
    }

    /// Learning rate in (1-based) round `t`.
    pub fn lr_at(&self, round: usize) -> f64 {
        let factor = self
            .contrastive
            .lr_milestones
            .iter()
            .filter(|m| round > m.round)
            .max_by_key(|m| m.round)
            .map_or(1.0, |m| m.factor);
        self.contrastive.lr * factor
    }

    pub fn local_hyperparams(&self, round: usize) -> LocalHyperparams {
        let c = &self.contrastive;
        LocalHyperparams {
            batch_size: c.batch_size,
            temperature: c.temperature,
            key_momentum: c.key_momentum,
            lr: self.lr_at(round),
            sgd_momentum: c.sgd_momentum,
            weight_decay: c.weight_decay,
        }
    }

    pub fn node_seed(&self, node: usize) -> u64 {
        match &self.federation.node_seeds {
            Some(seeds) => seeds[node],
            None => derive_seed(self.seed, Stream::NodeTraining, node as u64, u64::MAX),
        }
    }
}

/// Named module combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    /// MoCo nodes, sample-count weights, no metadata.
    FedAvg,
    /// Metadata transfer only.
    FedMocoM,
    /// Self-adaptive aggregation only.
    FedMocoS,
    /// Both modules.
    FedMoco,
    /// All shards pooled on one node.
    Oracle,
}

impl Arm {
    pub const ALL: [Arm; 5] = [Arm::FedAvg, Arm::FedMocoM, Arm::FedMocoS, Arm::FedMoco, Arm::Oracle];

    pub fn name(self) -> &'static str {
        match self {
            Arm::FedAvg => "FedAvg",
            Arm::FedMocoM => "FedMoCo-M",
            Arm::FedMocoS => "FedMoCo-S",
            Arm::FedMoco => "FedMoCo",
            Arm::Oracle => "Oracle",
        }
    }

    pub fn configure(self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        let (metadata, aggregation) = match self {
            Arm::FedAvg => (false, AggregationMode::Fedavg),
            Arm::FedMocoM => (true, AggregationMode::Fedavg),
            Arm::FedMocoS => (false, AggregationMode::SelfAdaptive),
            Arm::FedMoco => (true, AggregationMode::SelfAdaptive),
            Arm::Oracle => (false, AggregationMode::Fedavg),
        };
        cfg.metadata.enabled = metadata;
        cfg.federation.aggregation = aggregation;
        cfg.data.pool_nodes = self == Arm::Oracle;
        cfg
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace(['-', '_'], "");
        match key.as_str() {
            "fedavg" => Ok(Arm::FedAvg),
            "fedmocom" => Ok(Arm::FedMocoM),
            "fedmocos" => Ok(Arm::FedMocoS),
            "fedmoco" => Ok(Arm::FedMoco),
            "oracle" => Ok(Arm::Oracle),
            _ => Err(Error::Config(format!("unknown arm {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
        ExperimentConfig::desk().validate().unwrap();
    }

    #[test]
    fn lr_schedule_steps() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.lr_at(1), 0.03);
        assert_eq!(cfg.lr_at(120), 0.03);
        assert_eq!(cfg.lr_at(121), 0.03 * 0.1);
        assert_eq!(cfg.lr_at(161), 0.03 * 0.01);
    }

    #[test]
    fn warmup_beyond_rounds_rejected() {
        let mut cfg = ExperimentConfig::desk();
        cfg.federation.warmup_rounds = 41;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("federation.warmup_rounds"), "{err}");
    }

    #[test]
    fn arms_toggle_modules() {
        let base = ExperimentConfig::desk();
        let m = Arm::FedMocoM.configure(&base);
        assert!(m.metadata.enabled);
        assert_eq!(m.federation.aggregation, AggregationMode::Fedavg);
        let s = Arm::FedMocoS.configure(&base);
        assert!(!s.metadata.enabled);
        assert_eq!(s.federation.aggregation, AggregationMode::SelfAdaptive);
        assert!(Arm::Oracle.configure(&base).data.pool_nodes);
        for arm in Arm::ALL {
            assert_eq!(arm.name().parse::<Arm>().unwrap(), arm);
        }
    }
}
