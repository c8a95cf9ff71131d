//! Checkpoint persistence.
//!
//! Checkpoints are JSON documents. Every floating-point value is written as
//! the 16-digit hexadecimal image of its IEEE-754 bits, so a save/load round
//! trip is exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffnet::{AdamState, NetSpec, ParamVector};
use crate::{Error, Result};

pub const FORMAT_NAME: &str = "flowrl-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Which training stage produced a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageTag {
    /// Flow-matching pretrained policy; the KL anchor for later stages.
    Reference,
    Grpo,
    Dpo,
    Sft,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ParamVector,
    pub optimizer: Option<AdamState>,
    pub stage: StageTag,
    pub config_fingerprint: Option<String>,
    pub tool_version: String,
}

impl Checkpoint {
    pub fn new(params: ParamVector, optimizer: Option<AdamState>, stage: StageTag) -> Self {
        Checkpoint {
            params,
            optimizer,
            stage,
            config_fingerprint: None,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn spec(&self) -> &NetSpec {
        self.params.spec()
    }

    pub fn with_fingerprint(mut self, fingerprint: impl Into<String>) -> Self {
        self.config_fingerprint = Some(fingerprint.into());
        self
    }
}

mod hex_f64 {
    use serde::{de::Error as _, Deserialize, Deserializer, Serializer};

    pub fn encode(v: f64) -> String {
        format!("{:016x}", v.to_bits())
    }

    pub fn decode(s: &str) -> Result<f64, String> {
        if s.len() != 16 {
            return Err(format!("float image {s:?} must have 16 hex digits"));
        }
        u64::from_str_radix(s, 16)
            .map(f64::from_bits)
            .map_err(|e| format!("bad float image {s:?}: {e}"))
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&encode(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        decode(&String::deserialize(d)?).map_err(D::Error::custom)
    }

    pub mod vec {
        use super::*;
        use serde::ser::SerializeSeq;

        pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
            let mut seq = s.serialize_seq(Some(v.len()))?;
            for x in v {
                seq.serialize_element(&encode(*x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
            Vec::<String>::deserialize(d)?
                .iter()
                .map(|s| decode(s).map_err(D::Error::custom))
                .collect()
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamDocument {
    #[serde(with = "hex_f64::vec")]
    first_moment: Vec<f64>,
    #[serde(with = "hex_f64::vec")]
    second_moment: Vec<f64>,
    step_count: u64,
    #[serde(with = "hex_f64")]
    lr: f64,
    #[serde(with = "hex_f64")]
    beta1: f64,
    #[serde(with = "hex_f64")]
    beta2: f64,
    #[serde(with = "hex_f64")]
    eps: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointDocument {
    format: String,
    version: u32,
    stage: StageTag,
    tool_version: String,
    config_fingerprint: Option<String>,
    spec: NetSpec,
    #[serde(with = "hex_f64::vec")]
    params: Vec<f64>,
    optimizer: Option<AdamDocument>,
}

/// Serializes a checkpoint to its JSON text form.
pub fn to_string(checkpoint: &Checkpoint) -> Result<String> {
    let doc = CheckpointDocument {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        stage: checkpoint.stage,
        tool_version: checkpoint.tool_version.clone(),
        config_fingerprint: checkpoint.config_fingerprint.clone(),
        spec: checkpoint.spec().clone(),
        params: checkpoint.params.values().to_vec(),
        optimizer: checkpoint.optimizer.as_ref().map(|a| AdamDocument {
            first_moment: a.first_moment.clone(),
            second_moment: a.second_moment.clone(),
            step_count: a.step_count,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
        }),
    };
    serde_json::to_string_pretty(&doc).map_err(|e| Error::Parse(e.to_string()))
}

/// Parses the JSON text form of a checkpoint.
pub fn from_str(text: &str) -> Result<Checkpoint> {
    let doc: CheckpointDocument =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))?;
    if doc.format != FORMAT_NAME || doc.version != FORMAT_VERSION {
        return Err(Error::Compatibility(format!(
            "checkpoint format {} v{} is not {FORMAT_NAME} v{FORMAT_VERSION}",
            doc.format, doc.version
        )));
    }
    let params = ParamVector::from_values(doc.spec, doc.params)
        .map_err(|e| Error::Compatibility(format!("checkpoint parameters: {e}")))?;
    let optimizer = match doc.optimizer {
        Some(a) => {
            let state = AdamState {
                first_moment: a.first_moment,
                second_moment: a.second_moment,
                step_count: a.step_count,
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
            };
            state.validate()?;
            if state.first_moment.len() != params.len() {
                return Err(Error::Compatibility(
                    "optimizer state length differs from parameters".into(),
                ));
            }
            Some(state)
        }
        None => None,
    };
    Ok(Checkpoint {
        params,
        optimizer,
        stage: doc.stage,
        config_fingerprint: doc.config_fingerprint,
        tool_version: doc.tool_version,
    })
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, to_string(checkpoint)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    from_str(&fs::read_to_string(path)?)
}

/// Loads a checkpoint and requires its architecture to equal `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &NetSpec) -> Result<Checkpoint> {
    let checkpoint = load_checkpoint(path)?;
    ensure_spec(&checkpoint, expected)?;
    Ok(checkpoint)
}

pub fn ensure_spec(checkpoint: &Checkpoint, expected: &NetSpec) -> Result<()> {
    if checkpoint.spec() != expected {
        return Err(Error::Compatibility(format!(
            "checkpoint network {:?} does not match configured network {:?}",
            checkpoint.spec(),
            expected
        )));
    }
    Ok(())
}
