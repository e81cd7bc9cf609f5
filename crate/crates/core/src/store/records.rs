use serde::{Deserialize, Serialize};

use super::StoreError;
use crate::graph::Timestamp;

/// Schema version stamped on every persisted record.
pub const RECORD_VERSION: u32 = 1;

/// One verified final reasoning with its start and end instants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DTempRecord {
    pub version: u32,
    pub run_id: String,
    pub problem_id: String,
    pub input_digest: String,
    pub query: String,
    pub r_f: String,
    pub a_f: String,
    pub t_0: Timestamp,
    pub t_f: Timestamp,
    /// Store-relative path of the serialized graph.
    pub graph_ref: String,
    #[serde(default)]
    pub period: String,
}

impl DTempRecord {
    pub fn validate(&self) -> Result<(), StoreError> {
        if self.t_f.wall_ms < self.t_0.wall_ms || self.t_f.tick < self.t_0.tick {
            return Err(StoreError::InvariantViolation(format!(
                "run {}: t_f {:?} precedes t_0 {:?}",
                self.run_id, self.t_f, self.t_0
            )));
        }
        if self.run_id.is_empty() || self.graph_ref.is_empty() {
            return Err(StoreError::InvariantViolation("temporal record without run reference".into()));
        }
        Ok(())
    }
}

/// Fine-tuning material: inputs, query, final reason and answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DSftRecord {
    pub version: u32,
    pub run_id: String,
    pub input_digest: String,
    pub query: String,
    pub r_f: String,
    pub a_f: String,
}

impl DSftRecord {
    pub fn validate(&self) -> Result<(), StoreError> {
        for (name, v) in [
            ("run_id", &self.run_id),
            ("input_digest", &self.input_digest),
            ("query", &self.query),
            ("r_f", &self.r_f),
            ("a_f", &self.a_f),
        ] {
            if v.trim().is_empty() {
                return Err(StoreError::InvariantViolation(format!("sft record field {name} is empty")));
            }
        }
        Ok(())
    }
}

/// Per-run summary row, the input to every report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: u32,
    pub run_id: String,
    pub problem_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub case_id: Option<String>,
    pub status: crate::engine::RunStatus,
    pub answer: String,
    pub final_reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    /// Verifier result on the reported answer, when a ground truth exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
    pub t_0: Timestamp,
    pub t_f: Timestamp,
    pub latency_ms: u64,
    pub volume: usize,
    pub calls_used: usize,
    pub node_count: usize,
    /// Mean of the defined per-step efficiencies along the lineage (1/s).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_efficiency: Option<f64>,
    #[serde(default)]
    pub period: String,
    #[serde(default)]
    pub dataset_tag: String,
    #[serde(default)]
    pub focus: String,
    #[serde(default)]
    pub modality: String,
    /// Agents that worked on the case this run belongs to.
    #[serde(default = "one")]
    pub agents: usize,
    pub graph_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

fn one() -> usize {
    1
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dtemp(t0: u64, tf: u64) -> DTempRecord {
        DTempRecord {
            version: RECORD_VERSION,
            run_id: "p1-s0".into(),
            problem_id: "p1".into(),
            input_digest: "d".into(),
            query: "q".into(),
            r_f: "r".into(),
            a_f: "a".into(),
            t_0: Timestamp::new(0, t0),
            t_f: Timestamp::new(1, tf),
            graph_ref: "graphs/p1-s0.json".into(),
            period: String::new(),
        }
    }

    #[test]
    fn reversed_times_are_rejected() {
        assert!(dtemp(0, 1000).validate().is_ok());
        assert!(matches!(dtemp(2000, 1000).validate(), Err(StoreError::InvariantViolation(_))));
    }

    #[test]
    fn sft_requires_all_fields() {
        let mut r = DSftRecord {
            version: RECORD_VERSION,
            run_id: "x".into(),
            input_digest: "d".into(),
            query: "q".into(),
            r_f: "r".into(),
            a_f: "a".into(),
        };
        assert!(r.validate().is_ok());
        r.a_f.clear();
        assert!(r.validate().is_err());
    }
}
