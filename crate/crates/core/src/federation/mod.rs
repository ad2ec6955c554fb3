//! Round orchestration between the parameter server and the data nodes.
//!
//! Each round `t`:
//!
//! 1. `ParamsDown`: every node receives `θ₀^{t−1}` and resets both encoders,
//!    its dictionary and its optimizer to it.
//! 2. After warm-up, with metadata enabled: `MetadataDown` hands node `k`
//!    the stored statistics of every other node; the node extracts its own
//!    statistics and trains with synthetic negatives.
//! 3. Local epoch(s) of MoCo on every node.
//! 4. `MetadataUp` (when active) and `ParamsUp` with the node's RSA score.
//! 5. The server weights and averages the uploads into `θ₀^t`.
//!
//! Nodes share nothing within a round, so sequential and parallel execution
//! give identical results. The log is ordered by (round, phase, node).

mod checkpoint;
mod message;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use message::{
    audit_privacy, expected_message_counts, read_records, write_records, AuditReport, AuditViolation, Message,
    MessageKind, MessageLog, MessageRecord, Party, Payload, PayloadKind,
};

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{AggregationMode, ExperimentConfig, MetadataExtraction};
use crate::contrastive::{local_update_with, LocalUpdateStats, NodeTrainState, SyntheticNegatives};
use crate::datagen::generate_node_dataset;
use crate::error::{Error, Result};
use crate::metadata::{compute_metadata, synthetic_quota, GaussianSampler, NodeMetadata};
use crate::nn::{forward, init_params, EncoderParams, ImageSample};
use crate::rng::{stream_rng, Stream};
use crate::rsa::{aggregate, fedavg_weights, rsa_score, sample_probe, self_adaptive_weights, AggregationWeights};

/// Parameter-server state.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub theta0: EncoderParams,
    /// Last completed round; 0 before training.
    pub round: usize,
    /// Latest metadata upload per node.
    pub metadata_store: BTreeMap<usize, NodeMetadata>,
    pub weight_history: Vec<AggregationWeights>,
}

/// A data node: private shard plus MoCo state.
#[derive(Debug, Clone)]
pub struct Node {
    pub id: usize,
    data: Vec<ImageSample>,
    pub state: NodeTrainState,
}

impl Node {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Per-round record; all fields are deterministic functions of the config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub metadata_active: bool,
    /// Synthetic negatives drawn per other node per minibatch.
    pub synthetic_per_source: usize,
    /// Number of other nodes whose statistics each node sampled from.
    pub synthetic_sources: Vec<usize>,
    pub node_samples: Vec<usize>,
    pub losses: Vec<f64>,
    pub rsa_scores: Option<Vec<f64>>,
    pub weights: Vec<f64>,
    pub node_digests: Vec<String>,
    pub theta0_digest: String,
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MetricsRecord {
    Node {
        round: usize,
        node: usize,
        samples: usize,
        loss: f64,
        rsa_score: Option<f64>,
        weight: f64,
        synthetic_negatives: usize,
        metadata_active: bool,
        params_digest: String,
    },
    Server {
        round: usize,
        theta0_digest: String,
    },
}

impl RoundMetrics {
    pub fn records(&self) -> Vec<MetricsRecord> {
        let mut out: Vec<MetricsRecord> = (0..self.losses.len())
            .map(|k| MetricsRecord::Node {
                round: self.round,
                node: k,
                samples: self.node_samples[k],
                loss: self.losses[k],
                rsa_score: self.rsa_scores.as_ref().map(|r| r[k]),
                weight: self.weights[k],
                synthetic_negatives: self.synthetic_per_source * self.synthetic_sources[k],
                metadata_active: self.metadata_active,
                params_digest: self.node_digests[k].clone(),
            })
            .collect();
        out.push(MetricsRecord::Server { round: self.round, theta0_digest: self.theta0_digest.clone() });
        out
    }
}

/// Output of a complete run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub theta0: EncoderParams,
    pub metrics: Vec<RoundMetrics>,
    pub log: MessageLog,
    /// Wall time per round in seconds; kept apart from the deterministic
    /// metrics.
    pub round_seconds: Vec<f64>,
}

impl RunOutput {
    pub fn metrics_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        for r in self.metrics.iter().flat_map(RoundMetrics::records) {
            s.push_str(&serde_json::to_string(&r)?);
            s.push('\n');
        }
        Ok(s)
    }
}

struct NodeRoundOutput {
    stats: LocalUpdateStats,
    metadata: Option<NodeMetadata>,
    rsa: Option<f64>,
}

fn node_metadata(params: &EncoderParams, data: &[ImageSample], cfg: &ExperimentConfig) -> Result<NodeMetadata> {
    let features = data.iter().map(|x| forward(params, x)).collect::<Result<Vec<_>>>()?;
    compute_metadata(&features, cfg.metadata.lambda, cfg.metadata.jitter)
}

fn advance_node(
    node: &mut Node,
    cfg: &ExperimentConfig,
    round: usize,
    theta_prev: &EncoderParams,
    synthetic: &SyntheticNegatives,
    metadata_active: bool,
) -> Result<NodeRoundOutput> {
    let mut metadata = None;
    if metadata_active && cfg.metadata.extraction == MetadataExtraction::BeforeUpdate {
        metadata = Some(node_metadata(&node.state.theta_q, &node.data, cfg)?);
    }
    let hp = cfg.local_hyperparams(round);
    let mut stats = LocalUpdateStats::default();
    for _ in 0..cfg.federation.local_epochs {
        let epoch = local_update_with(&mut node.state, &node.data, synthetic, &hp, &cfg.contrastive.augment)?;
        stats.losses.extend(epoch.losses);
    }
    if metadata_active && cfg.metadata.extraction == MetadataExtraction::AfterUpdate {
        metadata = Some(node_metadata(&node.state.theta_q, &node.data, cfg)?);
    }
    let rsa = match cfg.federation.aggregation {
        AggregationMode::SelfAdaptive => {
            let mut rng = stream_rng(cfg.node_seed(node.id), Stream::RsaProbe, round as u64, 0);
            let probe: Vec<ImageSample> = sample_probe(node.data.len(), cfg.federation.probe_size, &mut rng)
                .into_iter()
                .map(|i| node.data[i].clone())
                .collect();
            Some(rsa_score(theta_prev, &node.state.theta_q, &probe)?)
        }
        AggregationMode::Fedavg => None,
    };
    Ok(NodeRoundOutput { stats, metadata: metadata.map(|m| m.tagged(node.id, round)), rsa })
}

/// Labels-stripped node shards for `cfg`; a single pooled shard when
/// `data.pool_nodes` is set.
pub fn node_datasets(cfg: &ExperimentConfig) -> Result<Vec<Vec<ImageSample>>> {
    let spec = cfg.scenario_spec();
    let shards = (0..spec.nodes)
        .map(|k| {
            generate_node_dataset(&spec, k, cfg.seed)
                .map(|d| d.into_iter().map(ImageSample::without_label).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    if cfg.data.pool_nodes {
        Ok(vec![shards.into_iter().flatten().collect()])
    } else {
        Ok(shards)
    }
}

/// Server, nodes and channel of one simulated federation.
#[derive(Debug, Clone)]
pub struct Federation {
    config: ExperimentConfig,
    server: ServerState,
    nodes: Vec<Node>,
    log: MessageLog,
    metrics: Vec<RoundMetrics>,
    round_seconds: Vec<f64>,
}

impl Federation {
    /// Builds a federation over explicit shards. `config.federation.nodes`
    /// is overridden by the number of shards.
    pub fn new(config: &ExperimentConfig, shards: Vec<Vec<ImageSample>>) -> Result<Self> {
        let mut config = config.clone();
        config.federation.nodes = shards.len();
        if shards.is_empty() {
            return Err(Error::Config("federation needs at least one node".into()));
        }
        if let Some(seeds) = &config.federation.node_seeds {
            if seeds.len() != shards.len() {
                return Err(Error::Config(format!("{} node seeds for {} shards", seeds.len(), shards.len())));
            }
        }
        let shapes = config.encoder_shapes();
        let theta0 = init_params(&shapes, config.seed)?;
        let mut nodes = Vec::with_capacity(shards.len());
        for (id, data) in shards.into_iter().enumerate() {
            if data.len() < 3 {
                return Err(Error::Config(format!("node {id} holds {} images; at least 3 required", data.len())));
            }
            if let Some(bad) = data.iter().find(|x| x.pixels.len() != theta0.input_dim()) {
                return Err(Error::Shape(format!(
                    "node {id} image has {} pixels, encoder expects {}",
                    bad.pixels.len(),
                    theta0.input_dim()
                )));
            }
            let seed = config.node_seed(id);
            let state = NodeTrainState::new(
                theta0.clone(),
                config.contrastive.queue_size,
                stream_rng(seed, Stream::NodeTraining, 0, 0),
                stream_rng(seed, Stream::Synthetic, 0, 0),
            );
            nodes.push(Node { id, data, state });
        }
        Ok(Self {
            config,
            server: ServerState { theta0, round: 0, metadata_store: BTreeMap::new(), weight_history: Vec::new() },
            nodes,
            log: MessageLog::new(),
            metrics: Vec::new(),
            round_seconds: Vec::new(),
        })
    }

    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        Self::new(config, node_datasets(config)?)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn log(&self) -> &MessageLog {
        &self.log
    }

    pub fn metrics(&self) -> &[RoundMetrics] {
        &self.metrics
    }

    /// Executes round `t`, which must be the next round.
    pub fn run_round(&mut self, t: usize) -> Result<&RoundMetrics> {
        if t != self.server.round + 1 {
            return Err(Error::Argument(format!("round {t} requested after round {}", self.server.round)));
        }
        let started = Instant::now();
        let cfg = &self.config;
        let k_total = self.nodes.len();
        let theta_prev = self.server.theta0.clone();

        for node in &mut self.nodes {
            let payload = self.log.deliver(Message {
                kind: MessageKind::ParamsDown,
                sender: Party::Server,
                receiver: Party::Node(node.id),
                round: t,
                payload: Payload::Params { params: theta_prev.clone(), rsa_score: None },
            })?;
            let Payload::Params { params, .. } = payload else {
                return Err(Error::Protocol("parameter download without parameters".into()));
            };
            let seed = cfg.node_seed(node.id);
            node.state.synchronize(
                &params,
                stream_rng(seed, Stream::NodeTraining, t as u64, 0),
                stream_rng(seed, Stream::Synthetic, t as u64, 0),
            );
        }

        let metadata_active = cfg.metadata.enabled && t > cfg.federation.warmup_rounds;
        let quota = synthetic_quota(cfg.contrastive.queue_size, cfg.metadata.eta, k_total);
        let mut synthetic = Vec::with_capacity(k_total);
        for node in &self.nodes {
            if !metadata_active {
                synthetic.push(SyntheticNegatives::None);
                continue;
            }
            let bundle: Vec<NodeMetadata> =
                self.server.metadata_store.values().filter(|m| m.node_id != node.id).cloned().collect();
            let payload = self.log.deliver(Message {
                kind: MessageKind::MetadataDown,
                sender: Party::Server,
                receiver: Party::Node(node.id),
                round: t,
                payload: Payload::MetadataBundle(bundle),
            })?;
            let Payload::MetadataBundle(bundle) = payload else {
                return Err(Error::Protocol("metadata download without metadata".into()));
            };
            if quota.per_node == 0 || bundle.is_empty() {
                synthetic.push(SyntheticNegatives::None);
            } else {
                let sources =
                    bundle.iter().map(|m| GaussianSampler::new(m, cfg.metadata.lambda)).collect::<Result<Vec<_>>>()?;
                synthetic.push(SyntheticNegatives::Resampled { sources, per_source: quota.per_node });
            }
        }
        let synthetic_sources: Vec<usize> = synthetic
            .iter()
            .map(|s| match s {
                SyntheticNegatives::Resampled { sources, .. } => sources.len(),
                _ => 0,
            })
            .collect();

        let outputs: Vec<NodeRoundOutput> = if cfg.federation.parallel {
            self.nodes
                .par_iter_mut()
                .zip(synthetic.par_iter())
                .map(|(node, syn)| advance_node(node, cfg, t, &theta_prev, syn, metadata_active))
                .collect::<Result<_>>()?
        } else {
            self.nodes
                .iter_mut()
                .zip(&synthetic)
                .map(|(node, syn)| advance_node(node, cfg, t, &theta_prev, syn, metadata_active))
                .collect::<Result<_>>()?
        };

        if metadata_active {
            for (node, out) in self.nodes.iter().zip(&outputs) {
                let meta = out.metadata.clone().ok_or_else(|| Error::Protocol("node produced no metadata".into()))?;
                let payload = self.log.deliver(Message {
                    kind: MessageKind::MetadataUp,
                    sender: Party::Node(node.id),
                    receiver: Party::Server,
                    round: t,
                    payload: Payload::Metadata(meta),
                })?;
                if let Payload::Metadata(m) = payload {
                    self.server.metadata_store.insert(node.id, m);
                }
            }
        }

        let mut uploads = Vec::with_capacity(k_total);
        let mut scores = Vec::with_capacity(k_total);
        for (node, out) in self.nodes.iter().zip(&outputs) {
            let payload = self.log.deliver(Message {
                kind: MessageKind::ParamsUp,
                sender: Party::Node(node.id),
                receiver: Party::Server,
                round: t,
                payload: Payload::Params { params: node.state.theta_q.clone(), rsa_score: out.rsa },
            })?;
            let Payload::Params { params, rsa_score } = payload else {
                return Err(Error::Protocol("parameter upload without parameters".into()));
            };
            uploads.push(params);
            scores.push(rsa_score);
        }

        let weights = match cfg.federation.aggregation {
            AggregationMode::Fedavg => fedavg_weights(&self.nodes.iter().map(Node::len).collect::<Vec<_>>())?,
            AggregationMode::SelfAdaptive => {
                let r = scores
                    .iter()
                    .map(|s| s.ok_or_else(|| Error::Protocol("upload without RSA score".into())))
                    .collect::<Result<Vec<_>>>()?;
                self_adaptive_weights(&r)?
            }
        };
        self.server.theta0 = aggregate(&uploads, &weights)?;
        self.server.round = t;
        self.server.weight_history.push(weights.clone());

        let rsa_scores = match cfg.federation.aggregation {
            AggregationMode::SelfAdaptive => Some(scores.iter().map(|s| s.unwrap_or(f64::NAN)).collect()),
            AggregationMode::Fedavg => None,
        };
        self.metrics.push(RoundMetrics {
            round: t,
            metadata_active,
            synthetic_per_source: if metadata_active { quota.per_node } else { 0 },
            synthetic_sources,
            node_samples: self.nodes.iter().map(Node::len).collect(),
            losses: outputs.iter().map(|o| o.stats.mean_loss()).collect(),
            rsa_scores,
            weights: weights.as_slice().to_vec(),
            node_digests: uploads.iter().map(EncoderParams::digest).collect(),
            theta0_digest: self.server.theta0.digest(),
        });
        self.round_seconds.push(started.elapsed().as_secs_f64());
        Ok(self.metrics.last().expect("just pushed"))
    }

    /// Runs all remaining rounds.
    pub fn run(mut self) -> Result<RunOutput> {
        for t in self.server.round + 1..=self.config.federation.rounds {
            self.run_round(t)?;
        }
        Ok(RunOutput {
            theta0: self.server.theta0,
            metrics: self.metrics,
            log: self.log,
            round_seconds: self.round_seconds,
        })
    }
}

/// Generates the shards for `config` and trains for `federation.rounds`.
pub fn run_training(config: &ExperimentConfig) -> Result<RunOutput> {
    Federation::from_config(config)?.run()
}
