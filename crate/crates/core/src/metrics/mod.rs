//! Run metrics: latency, dataset accuracy, per-step efficiency and volume,
//! plus grouped benchmark reports, chart series and period comparison.
//!
//! Latencies are milliseconds internally and seconds in reports.

mod diff;
mod render;
mod report;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::verify;
use crate::engine::RunOutcome;
use crate::graph::{NodeId, Timestamp};
use crate::store::{Problem, RunRecord, RunStore, RECORD_VERSION};

pub use diff::{compare_periods, reason_diff_summary, CaseDiff, PeriodDiff};
pub use render::{render_csv, render_jsonl, render_svg, render_table, ChartKind};
pub use report::{
    build_report, AgentPoint, BenchReport, BenchRow, ChartSeries, GroupField, ModalityBar, TaskPoint,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("accuracy over an empty set is undefined")]
    EmptySet,
    #[error("{outcomes} outcomes but {truths} ground truths")]
    LengthMismatch { outcomes: usize, truths: usize },
    #[error("the selection contains no runs")]
    EmptySelection,
    #[error("unknown grouping field {0:?}")]
    UnknownGroup(String),
}

/// Wall time from the first to the final node of the reported lineage.
pub fn latency(outcome: &RunOutcome) -> u64 {
    outcome.t_f.wall_ms.saturating_sub(outcome.t_0.wall_ms)
}

/// Fraction of final answers that verify against their ground truth. An
/// empty ground truth counts as a miss.
pub fn dataset_accuracy<S: AsRef<str>>(answers: &[S], ground_truths: &[S]) -> Result<f64, MetricsError> {
    if answers.len() != ground_truths.len() {
        return Err(MetricsError::LengthMismatch {
            outcomes: answers.len(),
            truths: ground_truths.len(),
        });
    }
    if answers.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    let hits = answers
        .iter()
        .zip(ground_truths)
        .filter(|(a, g)| verify(a.as_ref(), g.as_ref()).unwrap_or(false))
        .count();
    Ok(hits as f64 / answers.len() as f64)
}

/// Accuracy over graded run records (those with a ground truth).
pub fn record_accuracy<'r>(records: impl IntoIterator<Item = &'r RunRecord>) -> Option<f64> {
    let (mut n, mut k) = (0usize, 0usize);
    for r in records {
        if let Some(c) = r.correct {
            n += 1;
            k += usize::from(c);
        }
    }
    (n > 0).then(|| k as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonTiming {
    pub node: NodeId,
    pub t_start: Timestamp,
    pub t_end: Timestamp,
    pub delta_ms: u64,
}

/// Step timings along the reported lineage. Each step ends where the next
/// begins; the last one ends at `t_f`, which for the final node is its own
/// creation.
pub fn timings(outcome: &RunOutcome) -> Vec<ReasonTiming> {
    let g = &outcome.graph;
    let starts: Vec<(NodeId, Timestamp)> = outcome
        .path
        .iter()
        .filter_map(|id| g.node(*id).map(|n| (*id, n.created_at)))
        .collect();
    starts
        .iter()
        .enumerate()
        .map(|(i, &(node, t_start))| {
            let t_end = starts.get(i + 1).map_or(outcome.t_f, |s| s.1);
            ReasonTiming {
                node,
                t_start,
                t_end,
                delta_ms: t_end.wall_ms.saturating_sub(t_start.wall_ms),
            }
        })
        .collect()
}

/// Accuracy per second of step time. Zero-length steps are undefined.
pub fn reason_efficiency(timing: &ReasonTiming, node_accuracy: u8) -> Option<f64> {
    (timing.delta_ms > 0).then(|| f64::from(node_accuracy) / (timing.delta_ms as f64 / 1000.0))
}

/// Last verifier verdict recorded for a node (refined nodes are re-checked).
pub fn node_accuracy(outcome: &RunOutcome, node: NodeId) -> u8 {
    outcome
        .per_node_verifier
        .iter()
        .rev()
        .find(|(id, _)| *id == node)
        .map_or(0, |(_, ok)| u8::from(*ok))
}

/// Mean of the defined step efficiencies on the lineage.
pub fn mean_efficiency(outcome: &RunOutcome) -> Option<f64> {
    let values: Vec<f64> = timings(outcome)
        .iter()
        .filter_map(|t| reason_efficiency(t, node_accuracy(outcome, t.node)))
        .collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Flattens an outcome into the persisted run record.
pub fn run_record(outcome: &RunOutcome, problem: &Problem, agents: usize, case_id: Option<&str>) -> RunRecord {
    let answer = outcome.answer().to_string();
    let ground_truth = problem.gate().map(str::to_string);
    let correct = ground_truth.as_deref().map(|g| verify(&answer, g).unwrap_or(false));
    let volume = outcome
        .reported_node()
        .and_then(|n| outcome.graph.volume(n).ok())
        .unwrap_or(0);
    RunRecord {
        version: RECORD_VERSION,
        run_id: outcome.run_id.clone(),
        problem_id: outcome.problem_id.clone(),
        case_id: case_id.map(str::to_string),
        status: outcome.status,
        final_reason: outcome.reason().to_string(),
        answer,
        ground_truth,
        correct,
        t_0: outcome.t_0,
        t_f: outcome.t_f,
        latency_ms: latency(outcome),
        volume,
        calls_used: outcome.calls_used,
        node_count: outcome.graph.len(),
        mean_efficiency: mean_efficiency(outcome),
        period: problem.period.clone(),
        dataset_tag: problem.dataset_tag.clone(),
        focus: problem.focus.clone(),
        modality: problem.modality_type(),
        agents: agents.max(1),
        graph_ref: RunStore::graph_ref(&outcome.run_id),
        diagnostic: outcome.diagnostic.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TemporalGraph;

    fn timing(delta_ms: u64) -> ReasonTiming {
        ReasonTiming {
            node: NodeId(0),
            t_start: Timestamp::new(0, 0),
            t_end: Timestamp::new(1, delta_ms),
            delta_ms,
        }
    }

    #[test]
    fn efficiency_examples() {
        assert_eq!(reason_efficiency(&timing(4000), 1), Some(0.25));
        assert_eq!(reason_efficiency(&timing(4000), 0), Some(0.0));
        assert_eq!(reason_efficiency(&timing(0), 1), None);
    }

    #[test]
    fn accuracy_is_exact_fraction() {
        let answers: Vec<String> = (0..10).map(|i| if i < 9 { "B".into() } else { "C".into() }).collect();
        let truth = vec!["B".to_string(); 10];
        assert_eq!(dataset_accuracy(&answers, &truth), Ok(0.9));
        let none: Vec<String> = vec![];
        assert_eq!(dataset_accuracy(&none, &none), Err(MetricsError::EmptySet));
        assert!(matches!(
            dataset_accuracy(&answers[..2], &truth[..1]),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn empty_graph_has_no_timings() {
        let outcome: RunOutcome = serde_json::from_value(serde_json::json!({
            "run_id": "r", "problem_id": "p", "status": "error",
            "graph": TemporalGraph::new(),
            "r_f": "", "a_f": "",
            "t_0": {"tick": 0, "wall_ms": 0}, "t_f": {"tick": 0, "wall_ms": 0},
            "end_wall_ms": 0, "calls_used": 0, "per_node_verifier": [], "path": [],
            "diagnostic": null, "dtemp": null, "dsft": null
        }))
        .unwrap();
        assert!(timings(&outcome).is_empty());
        assert_eq!(latency(&outcome), 0);
        assert_eq!(mean_efficiency(&outcome), None);
    }
}
