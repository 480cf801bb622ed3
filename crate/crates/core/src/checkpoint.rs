//! Search checkpoints: `AUGCKPT1` magic, u32 version, u64 payload length,
//! JSON payload with floats stored as bit patterns, and a trailing CRC32 of
//! everything before it. All integers are little-endian.

use crate::adam::Adam;
use crate::critic::{CriticConfig, CriticNet};
use crate::objective::LossReport;
use crate::policy::Policy;
use crate::search::{SearchConfig, SearchState};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const MAGIC: &[u8; 8] = b"AUGCKPT1";
pub const VERSION: u32 = 1;
const HEADER: usize = 8 + 4 + 8;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0} (expected {VERSION})")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{0} trailing bytes after checkpoint")]
    TrailingBytes(usize),
    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint payload: {0}")]
    Payload(#[from] serde_json::Error),
    #[error("checkpoint payload: {0}")]
    Inconsistent(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Payload {
    config: SearchConfig,
    policy: Policy,
    critic_config: CriticConfig,
    #[serde(with = "crate::bits::vec_f32")]
    critic: Vec<f32>,
    policy_opt: Adam,
    critic_opt: Adam,
    step: u64,
    nonfinite_streak: u32,
    /// `[step, wasserstein, penalty, cls, policy, critic]` with the losses as
    /// f64 bit patterns.
    history: Vec<[u64; 6]>,
}

fn encode_report(r: &LossReport) -> [u64; 6] {
    [
        r.step,
        r.wasserstein_estimate.to_bits(),
        r.gradient_penalty.to_bits(),
        r.cls_loss.to_bits(),
        r.policy_loss.to_bits(),
        r.critic_loss.to_bits(),
    ]
}

fn decode_report(v: &[u64; 6]) -> LossReport {
    LossReport {
        step: v[0],
        wasserstein_estimate: f64::from_bits(v[1]),
        gradient_penalty: f64::from_bits(v[2]),
        cls_loss: f64::from_bits(v[3]),
        policy_loss: f64::from_bits(v[4]),
        critic_loss: f64::from_bits(v[5]),
    }
}

pub fn to_bytes(state: &SearchState) -> Vec<u8> {
    let payload = Payload {
        config: state.config.clone(),
        policy: state.policy.clone(),
        critic_config: state.critic.config.clone(),
        critic: state.critic.flat(),
        policy_opt: state.policy_opt.clone(),
        critic_opt: state.critic_opt.clone(),
        step: state.step,
        nonfinite_streak: state.nonfinite_streak,
        history: state.history.iter().map(encode_report).collect(),
    };
    let json = serde_json::to_vec(&payload).expect("payload serializes");
    let mut out = Vec::with_capacity(HEADER + json.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<SearchState, CheckpointError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < HEADER {
        return Err(CheckpointError::Truncated {
            expected: HEADER,
            found: bytes.len(),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let expected = usize::try_from(len)
        .ok()
        .and_then(|l| l.checked_add(HEADER + 4))
        .unwrap_or(usize::MAX);
    if bytes.len() < expected {
        return Err(CheckpointError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(CheckpointError::TrailingBytes(bytes.len() - expected));
    }
    let body = &bytes[..expected - 4];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let p: Payload = serde_json::from_slice(&body[HEADER..])?;
    let want: usize = p.critic_config.shapes().iter().map(|s| s.iter().product::<usize>()).sum();
    if p.critic.len() != want {
        return Err(CheckpointError::Inconsistent(format!(
            "critic has {} parameters, configuration needs {want}",
            p.critic.len()
        )));
    }
    if p.critic_opt.len() != want || p.policy_opt.len() != p.policy.flat().len() {
        return Err(CheckpointError::Inconsistent("optimizer state size does not match parameters".into()));
    }
    Ok(SearchState {
        config: p.config,
        policy: p.policy,
        critic: CriticNet::from_flat(p.critic_config, &p.critic),
        policy_opt: p.policy_opt,
        critic_opt: p.critic_opt,
        step: p.step,
        nonfinite_streak: p.nonfinite_streak,
        history: p.history.iter().map(decode_report).collect(),
    })
}

pub fn save(state: &SearchState, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(state)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<SearchState, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    from_bytes(&bytes)
}
