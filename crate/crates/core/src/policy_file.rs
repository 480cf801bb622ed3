//! Policy JSON: the op table, structure, temperatures, and effective
//! probabilities and magnitudes of every stage.

use crate::ops::{MagnitudeClass, OpKind, UnknownOp};
use crate::policy::{Mode, ParamMap, Policy, Stage, SubPolicy};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const POLICY_FILE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpEntry {
    pub name: String,
    pub magnitude_class: MagnitudeClass,
    pub unit: String,
    pub offset: f64,
    pub scale: f64,
    /// Lower clamp of the physical value; absent when unbounded.
    pub lo: Option<f64>,
    pub hi: Option<f64>,
    pub round: bool,
}

impl OpEntry {
    pub fn for_op(op: OpKind) -> Self {
        let m = op.magnitude_map();
        OpEntry {
            name: op.name().to_string(),
            magnitude_class: op.magnitude_class(),
            unit: m.unit.to_string(),
            offset: m.offset,
            scale: m.scale,
            lo: Some(m.lo).filter(|v| v.is_finite()),
            hi: Some(m.hi).filter(|v| v.is_finite()),
            round: m.round,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageEntry {
    pub weights: Vec<f32>,
    pub probability: Vec<f32>,
    pub magnitude: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    pub version: u32,
    pub op_table: Vec<OpEntry>,
    #[serde(rename = "L")]
    pub l: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub lambda: f32,
    pub eta: f32,
    /// `sub_policies[l][k]`.
    pub sub_policies: Vec<Vec<StageEntry>>,
}

#[derive(Debug, thiserror::Error)]
pub enum PolicyFileError {
    #[error("policy JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported policy file version {0} (expected {POLICY_FILE_VERSION})")]
    UnsupportedVersion(u32),
    #[error(transparent)]
    UnknownOp(#[from] UnknownOp),
    #[error("op table entry for {0} does not match this build's magnitude mapping")]
    OpTableMismatch(String),
    #[error("op table lists {0} twice")]
    DuplicateOp(String),
    #[error("policy structure: {0}")]
    Structure(String),
    #[error("{field} at sub-policy {sub_policy}, stage {stage}, op {op} is {value}; must lie in [0, 1]")]
    OutOfRange {
        field: &'static str,
        sub_policy: usize,
        stage: usize,
        op: usize,
        value: f32,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl PolicyFile {
    pub fn from_policy(policy: &Policy) -> Self {
        let sub_policies = (0..policy.l())
            .map(|si| {
                (0..policy.k())
                    .map(|ki| {
                        let m = policy.ops.len();
                        StageEntry {
                            weights: policy.sub_policies[si].stages[ki].weights.clone(),
                            probability: (0..m).map(|o| policy.prob(si, ki, o)).collect(),
                            magnitude: (0..m).map(|o| policy.magnitude(si, ki, o)).collect(),
                        }
                    })
                    .collect()
            })
            .collect();
        PolicyFile {
            version: POLICY_FILE_VERSION,
            op_table: policy.ops.iter().map(|&op| OpEntry::for_op(op)).collect(),
            l: policy.l(),
            k: policy.k(),
            lambda: policy.lambda,
            eta: policy.eta,
            sub_policies,
        }
    }

    /// Checks structure and ranges, returning the op list.
    pub fn validate(&self) -> Result<Vec<OpKind>, PolicyFileError> {
        if self.version != POLICY_FILE_VERSION {
            return Err(PolicyFileError::UnsupportedVersion(self.version));
        }
        let mut ops = Vec::with_capacity(self.op_table.len());
        for entry in &self.op_table {
            let op: OpKind = entry.name.parse()?;
            if ops.contains(&op) {
                return Err(PolicyFileError::DuplicateOp(entry.name.clone()));
            }
            if *entry != OpEntry::for_op(op) {
                return Err(PolicyFileError::OpTableMismatch(entry.name.clone()));
            }
            ops.push(op);
        }
        let structure = |msg: String| Err(PolicyFileError::Structure(msg));
        if ops.is_empty() {
            return structure("op table is empty".into());
        }
        if self.l == 0 || self.k == 0 {
            return structure(format!("L and K must be positive (L={}, K={})", self.l, self.k));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite() && self.eta > 0.0 && self.eta.is_finite()) {
            return structure(format!("temperatures must be positive (lambda={}, eta={})", self.lambda, self.eta));
        }
        if self.sub_policies.len() != self.l {
            return structure(format!("L={} but {} sub-policies listed", self.l, self.sub_policies.len()));
        }
        for (si, sp) in self.sub_policies.iter().enumerate() {
            if sp.len() != self.k {
                return structure(format!("K={} but sub-policy {si} has {} stages", self.k, sp.len()));
            }
            for (ki, st) in sp.iter().enumerate() {
                for (field, v) in [("weights", &st.weights), ("probability", &st.probability), ("magnitude", &st.magnitude)] {
                    if v.len() != ops.len() {
                        return structure(format!(
                            "sub-policy {si}, stage {ki}: {field} has {} entries, op table has {}",
                            v.len(),
                            ops.len()
                        ));
                    }
                }
                if let Some(o) = st.weights.iter().position(|w| !w.is_finite()) {
                    return structure(format!("sub-policy {si}, stage {ki}: weight {o} is not finite"));
                }
                for (field, v) in [("probability", &st.probability), ("magnitude", &st.magnitude)] {
                    if let Some(o) = v.iter().position(|x| !(0.0..=1.0).contains(x)) {
                        return Err(PolicyFileError::OutOfRange {
                            field,
                            sub_policy: si,
                            stage: ki,
                            op: o,
                            value: v[o],
                        });
                    }
                }
            }
        }
        Ok(ops)
    }

    /// Inference-mode policy holding the stored effective values directly.
    pub fn to_policy(&self) -> Result<Policy, PolicyFileError> {
        let ops = self.validate()?;
        let sub_policies = self
            .sub_policies
            .iter()
            .map(|sp| SubPolicy {
                stages: sp
                    .iter()
                    .map(|st| Stage {
                        weights: st.weights.clone(),
                        prob: st.probability.clone(),
                        mag: st.magnitude.clone(),
                    })
                    .collect(),
            })
            .collect();
        Ok(Policy {
            ops,
            sub_policies,
            lambda: self.lambda,
            eta: self.eta,
            param_map: ParamMap::Direct,
            mode: Mode::Inference,
        })
    }

    /// Canonical form: pretty-printed with a trailing newline.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("policy file serializes");
        s.push('\n');
        s
    }

    pub fn from_json(s: &str) -> Result<Self, PolicyFileError> {
        let file: PolicyFile = serde_json::from_str(s)?;
        file.validate()?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyFileError> {
        std::fs::write(path, self.to_json()).map_err(|source| PolicyFileError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, PolicyFileError> {
        let s = std::fs::read_to_string(path).map_err(|source| PolicyFileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&s)
    }
}
