//! The server↔node channel and its privacy audit.
//!
//! In-process messages carry typed payloads that cannot hold images or
//! per-sample features. The log keeps one [`MessageRecord`] per message
//! (kind, endpoints, round, payload type and digest) and is what
//! [`audit_privacy`] inspects. Records read back from disk may describe
//! payload types the simulator never emits; the audit flags those.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::metadata::NodeMetadata;
use crate::nn::EncoderParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    ParamsDown,
    ParamsUp,
    MetadataUp,
    MetadataDown,
    Control,
}

impl MessageKind {
    pub const ALL: [MessageKind; 5] = [
        MessageKind::ParamsDown,
        MessageKind::ParamsUp,
        MessageKind::MetadataUp,
        MessageKind::MetadataDown,
        MessageKind::Control,
    ];

    fn expected_payload(self) -> PayloadKind {
        match self {
            MessageKind::ParamsDown | MessageKind::ParamsUp => PayloadKind::Params,
            MessageKind::MetadataUp => PayloadKind::Metadata,
            MessageKind::MetadataDown => PayloadKind::MetadataBundle,
            MessageKind::Control => PayloadKind::Control,
        }
    }

    fn downstream(self) -> Option<bool> {
        match self {
            MessageKind::ParamsDown | MessageKind::MetadataDown => Some(true),
            MessageKind::ParamsUp | MessageKind::MetadataUp => Some(false),
            MessageKind::Control => None,
        }
    }
}

/// Endpoint of a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Party {
    Server,
    Node(usize),
}

impl fmt::Display for Party {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Party::Server => f.write_str("server"),
            Party::Node(k) => write!(f, "node:{k}"),
        }
    }
}

impl FromStr for Party {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "server" {
            return Ok(Party::Server);
        }
        s.strip_prefix("node:")
            .and_then(|k| k.parse().ok())
            .map(Party::Node)
            .ok_or_else(|| Error::Protocol(format!("unknown party {s:?}")))
    }
}

impl From<Party> for String {
    fn from(p: Party) -> Self {
        p.to_string()
    }
}

impl TryFrom<String> for Party {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Payload type tag as it appears in a log record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Params,
    Metadata,
    MetadataBundle,
    Control,
    /// Raw images. Never produced by the simulator.
    Image,
    /// Per-sample feature vectors. Never produced by the simulator.
    FeatureVectors,
}

/// What a message may carry.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Model parameters; uploads also report the node's RSA score.
    Params {
        params: EncoderParams,
        rsa_score: Option<f64>,
    },
    Metadata(NodeMetadata),
    MetadataBundle(Vec<NodeMetadata>),
    Control(String),
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Params { .. } => PayloadKind::Params,
            Payload::Metadata(_) => PayloadKind::Metadata,
            Payload::MetadataBundle(_) => PayloadKind::MetadataBundle,
            Payload::Control(_) => PayloadKind::Control,
        }
    }

    /// Number of real values (or bytes, for control tokens) transferred.
    pub fn elements(&self) -> usize {
        match self {
            Payload::Params { params, rsa_score } => params.len() + usize::from(rsa_score.is_some()),
            Payload::Metadata(m) => m.mu.len() + m.sigma.len(),
            Payload::MetadataBundle(ms) => ms.iter().map(|m| m.mu.len() + m.sigma.len()).sum(),
            Payload::Control(s) => s.len(),
        }
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut reals = |vals: &[f64]| {
            for v in vals {
                h.update(v.to_le_bytes());
            }
        };
        match self {
            Payload::Params { params, rsa_score } => {
                reals(params.values());
                if let Some(r) = rsa_score {
                    reals(&[*r]);
                }
            }
            Payload::Metadata(m) => {
                reals(&m.mu);
                reals(&m.sigma);
            }
            Payload::MetadataBundle(ms) => {
                for m in ms {
                    reals(&m.mu);
                    reals(&m.sigma);
                }
            }
            Payload::Control(s) => h.update(s.as_bytes()),
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub sender: Party,
    pub receiver: Party,
    pub round: usize,
    pub payload: Payload,
}

impl Message {
    /// Checks that the payload matches the kind and the direction matches
    /// the endpoints.
    pub fn validate(&self) -> Result<()> {
        if self.payload.kind() != self.kind.expected_payload() {
            return Err(Error::Protocol(format!("{:?} message carrying {:?} payload", self.kind, self.payload.kind())));
        }
        let ok = match self.kind.downstream() {
            Some(true) => self.sender == Party::Server && matches!(self.receiver, Party::Node(_)),
            Some(false) => matches!(self.sender, Party::Node(_)) && self.receiver == Party::Server,
            None => self.sender != self.receiver,
        };
        if !ok {
            return Err(Error::Protocol(format!("{:?} message from {} to {}", self.kind, self.sender, self.receiver)));
        }
        Ok(())
    }
}

/// One line of the message log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub index: usize,
    pub round: usize,
    pub kind: MessageKind,
    pub sender: Party,
    pub receiver: Party,
    pub payload: PayloadKind,
    pub digest: String,
    pub elements: usize,
}

/// Append-only channel log.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MessageLog {
    records: Vec<MessageRecord>,
}

impl MessageLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Validates and records `msg`, handing its payload to the receiver.
    pub fn deliver(&mut self, msg: Message) -> Result<Payload> {
        msg.validate()?;
        self.records.push(MessageRecord {
            index: self.records.len(),
            round: msg.round,
            kind: msg.kind,
            sender: msg.sender,
            receiver: msg.receiver,
            payload: msg.payload.kind(),
            digest: msg.payload.digest(),
            elements: msg.payload.elements(),
        });
        Ok(msg.payload)
    }

    pub fn records(&self) -> &[MessageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_records(&self.records, path)
    }
}

pub fn write_records(records: &[MessageRecord], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<MessageRecord>> {
    let mut records = Vec::new();
    for (i, line) in BufReader::new(std::fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Protocol(format!("line {}: {e}", i + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditViolation {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub passed: bool,
    pub counts: BTreeMap<MessageKind, usize>,
    pub violations: Vec<AuditViolation>,
}

/// Fails on any record carrying images or per-sample features, or whose
/// payload type does not match its kind.
pub fn audit_privacy(records: &[MessageRecord]) -> AuditReport {
    let mut counts: BTreeMap<MessageKind, usize> = MessageKind::ALL.iter().map(|k| (*k, 0)).collect();
    let mut violations = Vec::new();
    for (pos, r) in records.iter().enumerate() {
        *counts.entry(r.kind).or_default() += 1;
        let reason = match r.payload {
            PayloadKind::Image => Some("carries image data".to_string()),
            PayloadKind::FeatureVectors => Some("carries per-sample feature vectors".to_string()),
            p if p != r.kind.expected_payload() => Some(format!("{:?} message with {:?} payload", r.kind, p)),
            _ => None,
        };
        if let Some(reason) = reason {
            violations.push(AuditViolation { index: pos, reason });
        }
    }
    AuditReport { passed: violations.is_empty(), counts, violations }
}

/// Message counts of a complete run: `K` parameter downloads and uploads per
/// round, plus `K` metadata downloads and uploads per post-warm-up round.
pub fn expected_message_counts(
    nodes: usize,
    rounds: usize,
    warmup_rounds: usize,
    metadata_enabled: bool,
) -> BTreeMap<MessageKind, usize> {
    let meta = if metadata_enabled { nodes * rounds.saturating_sub(warmup_rounds) } else { 0 };
    BTreeMap::from([
        (MessageKind::ParamsDown, nodes * rounds),
        (MessageKind::ParamsUp, nodes * rounds),
        (MessageKind::MetadataUp, meta),
        (MessageKind::MetadataDown, meta),
        (MessageKind::Control, 0),
    ])
}
