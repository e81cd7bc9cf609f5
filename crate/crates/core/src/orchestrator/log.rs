use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tracing::error;

use super::{AnswerRevision, CaseRecord, CaseSeverity, Decision, ExpertReport, RosterGap, Verdict};
use crate::engine::RunEvent;
use crate::graph::TemporalGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Assess,
    Activate,
    Analyze,
    Synthesize,
    Consult,
    Decide,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum CaseEventKind {
    StageStarted { stage: Stage },
    Assessed { severity: CaseSeverity, specialties: Vec<String> },
    Activated { agents: Vec<String>, gaps: Vec<RosterGap> },
    Run { agent_id: String, run: RunEvent },
    ExpertReported { report: ExpertReport },
    ExpertExcluded { agent_id: String, reason: String },
    Synthesized { text: String },
    RoundStarted { round_no: usize, feedback: Option<String> },
    AnswerRevised { revision: AnswerRevision },
    RoundFinished { round_no: usize, consensus: Option<String> },
    ReviewRequested { cycle: usize, proposed_answer: String },
    VerdictReceived { cycle: usize, approver: String, verdict: Verdict },
    Notice { message: String },
    Decided { decision: Decision },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseEvent {
    pub case_id: String,
    pub offset: u64,
    #[serde(flatten)]
    pub kind: CaseEventKind,
}

#[derive(Debug, Default)]
struct LogState {
    events: Vec<CaseEvent>,
    closed: bool,
    file: Option<File>,
}

/// Append-only case event log with offsets, optional file mirroring and
/// blocking reads for live subscribers. Also holds the latest graphs and
/// case record so readers can inspect a case while it runs.
#[derive(Debug)]
pub struct CaseLog {
    case_id: String,
    state: Mutex<LogState>,
    grew: Condvar,
    graphs: Mutex<BTreeMap<String, TemporalGraph>>,
    record: Mutex<Option<CaseRecord>>,
}

impl CaseLog {
    pub fn new(case_id: &str) -> Self {
        Self {
            case_id: case_id.to_string(),
            state: Mutex::new(LogState::default()),
            grew: Condvar::new(),
            graphs: Mutex::new(BTreeMap::new()),
            record: Mutex::new(None),
        }
    }

    /// Mirrors every event to a JSON Lines file (truncated first).
    pub fn with_file(case_id: &str, path: &Path) -> std::io::Result<Self> {
        let log = Self::new(case_id);
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path)?;
        log.state.lock().expect("log lock").file = Some(file);
        Ok(log)
    }

    pub fn case_id(&self) -> &str {
        &self.case_id
    }

    pub fn append(&self, kind: CaseEventKind) -> u64 {
        let mut st = self.state.lock().expect("log lock");
        let offset = st.events.len() as u64;
        let event = CaseEvent {
            case_id: self.case_id.clone(),
            offset,
            kind,
        };
        if let Some(f) = st.file.as_mut() {
            let mut line = serde_json::to_vec(&event).expect("event serializes");
            line.push(b'\n');
            if let Err(e) = f.write_all(&line).and_then(|()| f.flush()) {
                error!(case = %self.case_id, error = %e, "case log write failed");
            }
        }
        st.events.push(event);
        drop(st);
        self.grew.notify_all();
        offset
    }

    pub fn close(&self) {
        self.state.lock().expect("log lock").closed = true;
        self.grew.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.state.lock().expect("log lock").closed
    }

    pub fn len(&self) -> usize {
        self.state.lock().expect("log lock").events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn events_from(&self, offset: u64) -> Vec<CaseEvent> {
        let st = self.state.lock().expect("log lock");
        st.events.iter().skip(offset as usize).cloned().collect()
    }

    /// Events at or after `offset`, waiting up to `timeout` for at least one
    /// to appear. The flag reports whether the log is closed.
    pub fn wait_from(&self, offset: u64, timeout: Duration) -> (Vec<CaseEvent>, bool) {
        let deadline = Instant::now() + timeout;
        let mut st = self.state.lock().expect("log lock");
        while st.events.len() as u64 <= offset && !st.closed {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                break;
            }
            st = self.grew.wait_timeout(st, left).expect("log lock").0;
        }
        let out = st.events.iter().skip(offset as usize).cloned().collect();
        (out, st.closed)
    }

    pub fn events_of_stage(&self) -> Vec<Stage> {
        self.events_from(0)
            .into_iter()
            .filter_map(|e| match e.kind {
                CaseEventKind::StageStarted { stage } => Some(stage),
                _ => None,
            })
            .collect()
    }

    pub fn set_graph(&self, agent_id: &str, graph: TemporalGraph) {
        self.graphs.lock().expect("graph lock").insert(agent_id.to_string(), graph);
    }

    pub fn graph(&self, agent_id: &str) -> Option<TemporalGraph> {
        self.graphs.lock().expect("graph lock").get(agent_id).cloned()
    }

    pub fn graph_ids(&self) -> Vec<String> {
        self.graphs.lock().expect("graph lock").keys().cloned().collect()
    }

    pub fn set_record(&self, record: CaseRecord) {
        *self.record.lock().expect("record lock") = Some(record);
    }

    pub fn record(&self) -> Option<CaseRecord> {
        self.record.lock().expect("record lock").clone()
    }
}
