use std::collections::{BTreeMap, VecDeque};
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ConsultationRound, ExpertReport};
use crate::backends::verify;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Approve {
        #[serde(default)]
        feedback: String,
    },
    Reject {
        #[serde(default)]
        feedback: String,
    },
}

impl Verdict {
    pub fn approve() -> Self {
        Self::Approve { feedback: String::new() }
    }

    pub fn reject(feedback: &str) -> Self {
        Self::Reject { feedback: feedback.to_string() }
    }

    pub fn feedback(&self) -> &str {
        match self {
            Self::Approve { feedback } | Self::Reject { feedback } => feedback,
        }
    }
}

/// What an approver gets to look at.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewBundle {
    pub case_id: String,
    /// Zero for the first review, incremented after each rejection.
    pub cycle: usize,
    pub synthesis: String,
    pub proposed_answer: String,
    pub reports: Vec<ExpertReport>,
    pub rounds: Vec<ConsultationRound>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ApproverError {
    #[error("no decision within {0:?}")]
    Timeout(Duration),
}

pub trait Approver: Send + Sync {
    fn id(&self) -> &str;

    fn review(&self, bundle: &ReviewBundle) -> Result<Verdict, ApproverError>;
}

/// Approves iff the proposed answer verifies against the ground truth (or
/// when there is no ground truth to check).
#[derive(Debug, Default)]
pub struct AutoApprover;

impl Approver for AutoApprover {
    fn id(&self) -> &str {
        "auto"
    }

    fn review(&self, b: &ReviewBundle) -> Result<Verdict, ApproverError> {
        Ok(match b.ground_truth.as_deref().filter(|g| !g.trim().is_empty()) {
            None => Verdict::Approve { feedback: "no ground truth to check against".into() },
            Some(gt) if verify(&b.proposed_answer, gt).unwrap_or(false) => Verdict::approve(),
            Some(_) => Verdict::reject("proposed answer does not match the reference; reconsider"),
        })
    }
}

#[derive(Debug, Default)]
pub struct AlwaysApprove;

impl Approver for AlwaysApprove {
    fn id(&self) -> &str {
        "always"
    }

    fn review(&self, _b: &ReviewBundle) -> Result<Verdict, ApproverError> {
        Ok(Verdict::approve())
    }
}

/// Replays a fixed verdict sequence, approving once it runs out.
#[derive(Debug, Default)]
pub struct ScriptedApprover {
    verdicts: Mutex<VecDeque<Verdict>>,
}

impl ScriptedApprover {
    pub fn new(verdicts: impl IntoIterator<Item = Verdict>) -> Self {
        Self {
            verdicts: Mutex::new(verdicts.into_iter().collect()),
        }
    }
}

impl Approver for ScriptedApprover {
    fn id(&self) -> &str {
        "scripted"
    }

    fn review(&self, _b: &ReviewBundle) -> Result<Verdict, ApproverError> {
        Ok(self
            .verdicts
            .lock()
            .expect("verdict lock")
            .pop_front()
            .unwrap_or_else(Verdict::approve))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum ReviewState {
    Pending,
    Decided { verdict: Verdict },
    Expired,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub case_id: String,
    pub cycle: usize,
    pub synthesis: String,
    pub proposed_answer: String,
    pub expert_answers: BTreeMap<String, String>,
    pub graph_refs: BTreeMap<String, String>,
    /// Unix milliseconds.
    pub submitted_at: u64,
    #[serde(flatten)]
    pub state: ReviewState,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueueError {
    #[error("no review item for case {0:?}")]
    UnknownCase(String),
    #[error("case {0:?} has no pending review")]
    AlreadyDecided(String),
}

/// Shared review queue. Each case keeps its review history; only the latest
/// item can be pending, and a decided item never changes again.
#[derive(Debug, Default)]
pub struct ReviewQueue {
    items: Mutex<BTreeMap<String, Vec<ReviewItem>>>,
    changed: Condvar,
}

impl ReviewQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn submit(&self, bundle: &ReviewBundle) {
        let item = ReviewItem {
            case_id: bundle.case_id.clone(),
            cycle: bundle.cycle,
            synthesis: bundle.synthesis.clone(),
            proposed_answer: bundle.proposed_answer.clone(),
            expert_answers: bundle.reports.iter().map(|r| (r.agent_id.clone(), r.answer.clone())).collect(),
            graph_refs: bundle.reports.iter().map(|r| (r.agent_id.clone(), r.graph_id.clone())).collect(),
            submitted_at: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis() as u64),
            state: ReviewState::Pending,
        };
        self.items
            .lock()
            .expect("queue lock")
            .entry(item.case_id.clone())
            .or_default()
            .push(item);
        self.changed.notify_all();
    }

    pub fn pending(&self) -> Vec<ReviewItem> {
        self.items
            .lock()
            .expect("queue lock")
            .values()
            .filter_map(|v| v.last())
            .filter(|i| i.state == ReviewState::Pending)
            .cloned()
            .collect()
    }

    pub fn history(&self, case_id: &str) -> Vec<ReviewItem> {
        self.items.lock().expect("queue lock").get(case_id).cloned().unwrap_or_default()
    }

    pub fn knows(&self, case_id: &str) -> bool {
        self.items.lock().expect("queue lock").contains_key(case_id)
    }

    /// Records a verdict on the case's pending item. Exactly one caller wins.
    pub fn decide(&self, case_id: &str, verdict: Verdict) -> Result<ReviewItem, QueueError> {
        let mut items = self.items.lock().expect("queue lock");
        let item = items
            .get_mut(case_id)
            .and_then(|v| v.last_mut())
            .ok_or_else(|| QueueError::UnknownCase(case_id.to_string()))?;
        if item.state != ReviewState::Pending {
            return Err(QueueError::AlreadyDecided(case_id.to_string()));
        }
        item.state = ReviewState::Decided { verdict };
        let out = item.clone();
        drop(items);
        self.changed.notify_all();
        Ok(out)
    }

    /// Blocks until the item for `(case_id, cycle)` is decided. On timeout
    /// the item is expired so late verdicts are refused.
    pub fn wait(&self, case_id: &str, cycle: usize, timeout: Duration) -> Result<Verdict, ApproverError> {
        let deadline = Instant::now() + timeout;
        let mut items = self.items.lock().expect("queue lock");
        loop {
            let item = items
                .get_mut(case_id)
                .and_then(|v| v.iter_mut().rev().find(|i| i.cycle == cycle));
            match item {
                Some(ReviewItem { state: ReviewState::Decided { verdict }, .. }) => return Ok(verdict.clone()),
                Some(i) if Instant::now() >= deadline => {
                    i.state = ReviewState::Expired;
                    return Err(ApproverError::Timeout(timeout));
                }
                None if Instant::now() >= deadline => return Err(ApproverError::Timeout(timeout)),
                _ => {}
            }
            let left = deadline.saturating_duration_since(Instant::now());
            items = self.changed.wait_timeout(items, left).expect("queue lock").0;
        }
    }
}

/// Puts the bundle on a review queue and blocks until someone decides.
pub struct HumanApprover<'q> {
    queue: &'q ReviewQueue,
    timeout: Duration,
}

impl<'q> HumanApprover<'q> {
    pub fn new(queue: &'q ReviewQueue, timeout: Duration) -> Self {
        Self { queue, timeout }
    }
}

impl Approver for HumanApprover<'_> {
    fn id(&self) -> &str {
        "human"
    }

    fn review(&self, b: &ReviewBundle) -> Result<Verdict, ApproverError> {
        self.queue.submit(b);
        self.queue.wait(&b.case_id, b.cycle, self.timeout)
    }
}
