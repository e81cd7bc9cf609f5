//! Strategy selection.
//!
//! `staged` (default) applies, in priority order:
//!
//! 1. merge the two most recent failing branch tips at the second-to-last iteration
//! 2. fan out at the configured iteration
//! 3. backtrack after `stall_patience` consecutive failures
//! 4. refine when the last two answers agree
//! 5. otherwise explore
//!
//! `guided` honors the backend's proposal when it is applicable to the
//! current graph, falling back to `staged`. `scripted` replays a fixed
//! sequence, then falls back to `staged`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::backends::{answers_agree, normalize};
use crate::graph::{NodeId, StrategyKind, TemporalGraph, Verification};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    #[default]
    Staged,
    Guided,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub mode: PolicyMode,
    pub stall_patience: usize,
    /// Iteration index at which to fan out, if any.
    pub fanout_at: Option<usize>,
    pub fanout: usize,
    /// Sequence used by `scripted` mode.
    pub sequence: Vec<StrategyKind>,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            mode: PolicyMode::Staged,
            stall_patience: 3,
            fanout_at: None,
            fanout: 2,
            sequence: Vec::new(),
        }
    }
}

/// Per-run policy memory.
#[derive(Debug, Clone)]
pub struct Policy {
    config: PolicyConfig,
    answers: Vec<String>,
    consecutive_failures: usize,
    decisions: usize,
    proposal: Option<StrategyKind>,
}

impl Policy {
    pub fn new(config: PolicyConfig) -> Self {
        Self {
            config,
            answers: Vec::new(),
            consecutive_failures: 0,
            decisions: 0,
            proposal: None,
        }
    }

    /// Forgets answer history and the failure streak (between retries).
    pub fn reset(&mut self) {
        self.answers.clear();
        self.consecutive_failures = 0;
        self.proposal = None;
    }

    /// Records one generation result.
    pub fn observe(&mut self, answer: &str, verified: bool, proposal: Option<StrategyKind>) {
        self.answers.push(normalize(answer));
        if verified {
            self.consecutive_failures = 0;
        } else {
            self.consecutive_failures += 1;
        }
        if proposal.is_some() {
            self.proposal = proposal;
        }
    }

    /// Picks the strategy for iteration `i` of `n`.
    pub fn choose(&mut self, graph: &TemporalGraph, i: usize, n: usize) -> StrategyKind {
        if i == 0 || graph.root().is_none() {
            return StrategyKind::InitialReason;
        }
        let decision = self.decisions;
        self.decisions += 1;
        match self.config.mode {
            PolicyMode::Scripted => {
                if let Some(s) = self.config.sequence.get(decision).cloned() {
                    if applicable(graph, &s) {
                        return s;
                    }
                }
            }
            PolicyMode::Guided => {
                if let Some(s) = self.proposal.take() {
                    if applicable(graph, &s) {
                        return s;
                    }
                }
            }
            PolicyMode::Staged => {}
        }
        self.staged(graph, i, n)
    }

    fn staged(&mut self, graph: &TemporalGraph, i: usize, n: usize) -> StrategyKind {
        let failing_tips: Vec<NodeId> = graph
            .tips()
            .into_iter()
            .filter(|t| graph.node(*t).is_some_and(|v| v.verified == Verification::Failed))
            .collect();
        if failing_tips.len() >= 2 && n >= 2 && i == n - 2 {
            let mut recent: Vec<NodeId> = failing_tips.iter().rev().take(2).copied().collect();
            if let Some(c) = graph.cursor() {
                if let Some(pos) = recent.iter().position(|t| *t == c) {
                    recent.swap(0, pos);
                }
            }
            return StrategyKind::Merge { sources: recent };
        }
        if self.config.fanout_at == Some(i) && self.config.fanout >= 2 {
            return StrategyKind::Generate {
                fanout: self.config.fanout,
            };
        }
        if self.config.stall_patience > 0 && self.consecutive_failures >= self.config.stall_patience {
            self.consecutive_failures = 0;
            return StrategyKind::Backtrack {
                target: backtrack_target(graph),
            };
        }
        if let [.., prev, last] = self.answers.as_slice() {
            if answers_agree(prev, last) {
                return StrategyKind::RefineContent;
            }
        }
        StrategyKind::ExploreNew
    }
}

fn applicable(graph: &TemporalGraph, s: &StrategyKind) -> bool {
    if s.check_shape().is_err() {
        return false;
    }
    match s {
        StrategyKind::InitialReason => false,
        StrategyKind::Backtrack { target } => graph.contains(*target),
        StrategyKind::Merge { sources } => sources.iter().all(|id| graph.contains(*id)),
        _ => true,
    }
}

/// Lineage node (excluding the cursor) whose descendants carry the most
/// distinct answers; ties go to the earliest node.
pub fn backtrack_target(graph: &TemporalGraph) -> NodeId {
    let root = graph.root().expect("policy runs on rooted graphs");
    let Some(cursor) = graph.cursor() else {
        return root;
    };
    let lineage = graph.lineage(cursor).unwrap_or_else(|_| vec![root]);
    let mut best = (root, 0usize);
    let mut first = true;
    for id in lineage.iter().copied().filter(|id| *id != cursor) {
        let distinct: BTreeSet<String> = graph
            .descendants(id)
            .unwrap_or_default()
            .into_iter()
            .filter_map(|d| graph.node(d).map(|n| normalize(&n.answer)))
            .collect();
        if first || distinct.len() > best.1 {
            best = (id, distinct.len());
            first = false;
        }
    }
    best.0
}
