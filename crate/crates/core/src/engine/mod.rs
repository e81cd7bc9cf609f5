//! The verifier-gated reasoning loop.
//!
//! One run retrieves knowledge once, then iterates: condense knowledge, pick
//! a strategy, ask the backend for a step, grow the graph, check the answer
//! against the ground truth. The first passing node becomes final and the
//! run emits its temporal and fine-tuning records. A retry jumps back to the
//! root of the same graph so the full history is kept.

mod clock;
mod policy;

use std::thread;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::backends::{
    verify, Backend, BackendError, ContextStep, GenerationRequest, GenerationResponse, GraphContext,
};
use crate::graph::{
    EdgeKind, GraphError, NodeId, ReasonDraft, StrategyKind, TemporalGraph, Timestamp,
};
use crate::knowledge::{synthesize_knowledge, KnowledgeItem, Retriever};
use crate::store::{DSftRecord, DTempRecord, Problem, RunStore, StoreError, RECORD_VERSION};

pub use clock::{Clock, ClockSpec, RealClock, StepClock};
pub use policy::{backtrack_target, Policy, PolicyConfig, PolicyMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    /// Retries per problem.
    pub max_retries: usize,
    /// Iterations per retry.
    pub max_iterations: usize,
    pub top_k: usize,
    pub policy: PolicyConfig,
    pub seed: u64,
    pub clock: ClockSpec,
    /// Run problems without a ground truth (status is then always unverified).
    pub allow_ungated: bool,
    /// Extra attempts after a transport error before the run fails.
    pub transport_retries: usize,
    pub transport_backoff_ms: u64,
    /// How many lineage steps the backend sees; `None` means all of them.
    pub context_window: Option<usize>,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            max_retries: 3,
            max_iterations: 8,
            top_k: 4,
            policy: PolicyConfig::default(),
            seed: 0,
            clock: ClockSpec::Real,
            allow_ungated: false,
            transport_retries: 2,
            transport_backoff_ms: 200,
            context_window: None,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_retries == 0 {
            return Err("max_retries must be at least 1".into());
        }
        if self.max_iterations == 0 {
            return Err("max_iterations must be at least 1".into());
        }
        if self.policy.fanout < 2 && self.policy.fanout_at.is_some() {
            return Err("policy.fanout must be at least 2".into());
        }
        Ok(())
    }

    /// Upper bound on generation calls for one run.
    pub fn call_budget(&self) -> usize {
        self.max_retries * self.max_iterations
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Verified,
    Unverified,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    RunStarted {
        problem_id: String,
        retrieved: Vec<String>,
    },
    NodeCreated {
        node: NodeId,
        strategy: String,
        tick: u64,
        wall_ms: u64,
        answer: String,
    },
    NodeRefined {
        node: NodeId,
        tick: u64,
        wall_ms: u64,
        answer: String,
    },
    EdgeCreated {
        from: NodeId,
        to: NodeId,
        kind: EdgeKind,
        tick: u64,
        wall_ms: u64,
    },
    VerifierResult {
        node: NodeId,
        passed: bool,
    },
    FinalMarked {
        node: NodeId,
        path: Vec<NodeId>,
    },
    RunFinished {
        status: RunStatus,
        calls_used: usize,
    },
}

/// One line of the run event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunEvent {
    pub run_id: String,
    pub seq: u64,
    #[serde(flatten)]
    pub kind: EventKind,
}

pub trait EventSink {
    fn emit(&mut self, event: RunEvent);
}

impl EventSink for Vec<RunEvent> {
    fn emit(&mut self, event: RunEvent) {
        self.push(event);
    }
}

/// Drops everything.
pub struct NullSink;

impl EventSink for NullSink {
    fn emit(&mut self, _event: RunEvent) {}
}

/// Forwards events to a closure.
pub struct FnSink<F>(pub F);

impl<F: FnMut(RunEvent)> EventSink for FnSink<F> {
    fn emit(&mut self, event: RunEvent) {
        (self.0)(event)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub run_id: String,
    pub problem_id: String,
    pub status: RunStatus,
    pub graph: TemporalGraph,
    /// Final reason and answer; empty unless verified.
    pub r_f: String,
    pub a_f: String,
    pub t_0: Timestamp,
    pub t_f: Timestamp,
    /// Wall time of the last clock reading.
    pub end_wall_ms: u64,
    pub calls_used: usize,
    pub per_node_verifier: Vec<(NodeId, bool)>,
    /// Creation lineage of the final node (or of the cursor when unverified).
    pub path: Vec<NodeId>,
    pub diagnostic: Option<String>,
    pub dtemp: Option<DTempRecord>,
    pub dsft: Option<DSftRecord>,
    #[serde(skip)]
    next_seq: u64,
}

impl RunOutcome {
    /// Node whose answer is reported: the final node, else the cursor.
    pub fn reported_node(&self) -> Option<NodeId> {
        self.graph.final_node().or_else(|| self.graph.cursor())
    }

    /// The reported answer (the last answer for unverified runs).
    pub fn answer(&self) -> &str {
        self.reported_node()
            .and_then(|id| self.graph.node(id))
            .map_or("", |n| n.answer.as_str())
    }

    pub fn reason(&self) -> &str {
        self.reported_node()
            .and_then(|id| self.graph.node(id))
            .map_or("", |n| n.reason.as_str())
    }

    fn emit(&mut self, sink: &mut dyn EventSink, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        sink.emit(RunEvent {
            run_id: self.run_id.clone(),
            seq,
            kind,
        });
    }

    fn emit_growth(&mut self, sink: &mut dyn EventSink, strategy: &StrategyKind, ids: &[NodeId], edges_before: usize) {
        for id in ids {
            let n = self.graph.node(*id).expect("affected node exists");
            let kind = if matches!(strategy, StrategyKind::RefineContent) {
                let at = n.revisions.last().map_or(n.created_at, |r| r.at);
                EventKind::NodeRefined {
                    node: *id,
                    tick: at.tick,
                    wall_ms: at.wall_ms,
                    answer: n.answer.clone(),
                }
            } else {
                EventKind::NodeCreated {
                    node: *id,
                    strategy: strategy.tag().to_string(),
                    tick: n.created_at.tick,
                    wall_ms: n.created_at.wall_ms,
                    answer: n.answer.clone(),
                }
            };
            self.emit(sink, kind);
        }
        let new_edges: Vec<_> = self.graph.edges()[edges_before..].to_vec();
        for e in new_edges {
            self.emit(
                sink,
                EventKind::EdgeCreated {
                    from: e.from,
                    to: e.to,
                    kind: e.kind,
                    tick: e.created_at.tick,
                    wall_ms: e.created_at.wall_ms,
                },
            );
        }
    }

    /// Extends an expert's graph with a consultation revision: one explore
    /// node derived from the cursor. Returns the new node.
    pub fn append_revision(
        &mut self,
        response: GenerationResponse,
        clock: &mut dyn Clock,
        sink: &mut dyn EventSink,
    ) -> Result<NodeId, GraphError> {
        let wall = clock.now_ms();
        self.end_wall_ms = wall;
        let before = self.graph.edges().len();
        let strategy = StrategyKind::ExploreNew;
        let ids = self.graph.apply_strategy(
            &strategy,
            vec![ReasonDraft::new(response.reason, response.answer)],
            wall,
        )?;
        self.calls_used += 1;
        self.emit_growth(sink, &strategy, &ids, before);
        if let Some(n) = self.graph.cursor().and_then(|c| self.graph.node(c)) {
            self.path = self.graph.lineage(n.id)?;
            self.t_f = n.created_at;
        }
        Ok(ids[0])
    }

    fn finish(&mut self, sink: &mut dyn EventSink) {
        let (status, calls_used) = (self.status, self.calls_used);
        self.emit(sink, EventKind::RunFinished { status, calls_used });
    }
}

/// Default run id for a problem under a seed.
pub fn run_id_for(problem_id: &str, seed: u64) -> String {
    format!("{problem_id}-s{seed}")
}

pub struct Engine<'a> {
    pub config: EngineConfig,
    backend: &'a dyn Backend,
    retriever: &'a dyn Retriever,
}

/// One finished run of a batch with its event log.
#[derive(Debug, Clone)]
pub struct BatchRun {
    pub outcome: RunOutcome,
    pub events: Vec<RunEvent>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchSummary {
    pub total: usize,
    pub verified: usize,
    pub unverified: usize,
    pub errors: usize,
    pub calls_used: usize,
}

impl BatchSummary {
    pub fn from_runs(runs: &[BatchRun]) -> Self {
        let mut s = Self {
            total: runs.len(),
            ..Self::default()
        };
        for r in runs {
            match r.outcome.status {
                RunStatus::Verified => s.verified += 1,
                RunStatus::Unverified => s.unverified += 1,
                RunStatus::Error => s.errors += 1,
            }
            s.calls_used += r.outcome.calls_used;
        }
        s
    }
}

/// Stored next to each run so it can be replayed exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub run_id: String,
    pub backend: String,
    pub problem: Problem,
    pub config: EngineConfig,
}

enum Stop {
    Backend(BackendError),
    Graph(GraphError),
}

impl<'a> Engine<'a> {
    pub fn new(config: EngineConfig, backend: &'a dyn Backend, retriever: &'a dyn Retriever) -> Self {
        Self {
            config,
            backend,
            retriever,
        }
    }

    pub fn backend(&self) -> &'a dyn Backend {
        self.backend
    }

    /// Runs one problem under its default run id and script key.
    pub fn run_problem(&self, problem: &Problem, clock: &mut dyn Clock, sink: &mut dyn EventSink) -> RunOutcome {
        let run_id = run_id_for(&problem.id, self.config.seed);
        self.run_keyed(problem, &run_id, &problem.id, clock, sink)
    }

    /// Runs one problem. `run_key` selects script entries; `run_id` names the
    /// outputs. Failures end up in the outcome status, never as a panic.
    pub fn run_keyed(
        &self,
        problem: &Problem,
        run_id: &str,
        run_key: &str,
        clock: &mut dyn Clock,
        sink: &mut dyn EventSink,
    ) -> RunOutcome {
        let mut out = RunOutcome {
            run_id: run_id.to_string(),
            problem_id: problem.id.clone(),
            status: RunStatus::Unverified,
            graph: TemporalGraph::new(),
            r_f: String::new(),
            a_f: String::new(),
            t_0: Timestamp::default(),
            t_f: Timestamp::default(),
            end_wall_ms: 0,
            calls_used: 0,
            per_node_verifier: Vec::new(),
            path: Vec::new(),
            diagnostic: None,
            dtemp: None,
            dsft: None,
            next_seq: 0,
        };
        let gate = problem.gate().map(str::to_string);
        let invalid = self
            .config
            .validate()
            .err()
            .or_else(|| problem.query.trim().is_empty().then(|| "query is empty".to_string()))
            .or_else(|| {
                (gate.is_none() && !self.config.allow_ungated)
                    .then(|| "problem has no ground truth and ungated runs are disabled".to_string())
            });
        if let Some(msg) = invalid {
            out.status = RunStatus::Error;
            out.diagnostic = Some(format!("invalid config: {msg}"));
            out.finish(sink);
            return out;
        }

        let retrieved = self.retriever.retrieve(&problem.query, self.config.top_k);
        out.emit(
            sink,
            EventKind::RunStarted {
                problem_id: problem.id.clone(),
                retrieved: retrieved.iter().map(|k| k.id.clone()).collect(),
            },
        );
        match self.iterate(problem, run_key, gate.as_deref(), &retrieved, clock, sink, &mut out) {
            Ok(()) => {}
            Err(Stop::Backend(e)) => {
                warn!(run = run_id, error = %e, "backend failure");
                out.status = RunStatus::Error;
                out.diagnostic = Some(format!("backend failure: {e}"));
            }
            Err(Stop::Graph(e)) => {
                out.status = RunStatus::Error;
                out.diagnostic = Some(format!("graph error: {e}"));
            }
        }
        if out.status != RunStatus::Verified {
            if let Some(c) = out.graph.cursor() {
                if let Ok(p) = out.graph.path_to(c) {
                    out.path = p.node_ids;
                    out.t_0 = p.t_0;
                    out.t_f = p.t_f;
                }
            }
        }
        out.finish(sink);
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn iterate(
        &self,
        problem: &Problem,
        run_key: &str,
        gate: Option<&str>,
        retrieved: &[KnowledgeItem],
        clock: &mut dyn Clock,
        sink: &mut dyn EventSink,
        out: &mut RunOutcome,
    ) -> Result<(), Stop> {
        let n = self.config.max_iterations;
        let retries = if gate.is_some() { self.config.max_retries } else { 1 };
        let mut policy = Policy::new(self.config.policy.clone());

        for j in 0..retries {
            if j > 0 {
                policy.reset();
            }
            let mut i = 0;
            while i < n {
                let knowledge = synthesize_knowledge(self.backend, &problem.query, retrieved)
                    .map_err(Stop::Backend)?;
                let mut strategy = if out.graph.is_empty() {
                    StrategyKind::InitialReason
                } else if j > 0 && i == 0 {
                    StrategyKind::Backtrack {
                        target: out.graph.root().expect("non-empty graph has a root"),
                    }
                } else {
                    policy.choose(&out.graph, i, n)
                };
                if let StrategyKind::Generate { fanout } = strategy {
                    let room = fanout.min(n - i);
                    strategy = if room >= 2 {
                        StrategyKind::Generate { fanout: room }
                    } else {
                        StrategyKind::ExploreNew
                    };
                }
                debug!(run = %out.run_id, retry = j, iteration = i, strategy = %strategy, "step");

                let context = self.context(&out.graph);
                let mut drafts = Vec::with_capacity(strategy.arity());
                let mut proposal = None;
                for _ in 0..strategy.arity() {
                    let req = GenerationRequest {
                        run_key: run_key.to_string(),
                        call_index: out.calls_used,
                        query: problem.query.clone(),
                        input_refs: problem.input_refs.clone(),
                        strategy: strategy.clone(),
                        graph_context: context.clone(),
                        knowledge: knowledge.text.clone(),
                        prior_answer: None,
                        peer_answers: Vec::new(),
                        feedback: None,
                        seed: self.config.seed,
                    };
                    let resp = self.generate(&req).map_err(Stop::Backend)?;
                    out.calls_used += 1;
                    proposal = resp.proposed_next_strategy.clone();
                    drafts.push(
                        ReasonDraft::new(resp.reason, resp.answer).with_refs(knowledge.refs.clone()),
                    );
                }

                let wall = clock.now_ms();
                out.end_wall_ms = wall;
                let before = out.graph.edges().len();
                let ids = if matches!(strategy, StrategyKind::InitialReason) {
                    let d = drafts.pop().expect("one draft");
                    vec![out.graph.append_initial(d, wall).map_err(Stop::Graph)?]
                } else {
                    out.graph.apply_strategy(&strategy, drafts, wall).map_err(Stop::Graph)?
                };
                out.emit_growth(sink, &strategy, &ids, before);

                for (k, id) in ids.iter().enumerate() {
                    let answer = out.graph.node(*id).expect("affected").answer.clone();
                    let passed = match gate {
                        Some(gt) => verify(&answer, gt).unwrap_or(false),
                        None => false,
                    };
                    out.per_node_verifier.push((*id, passed));
                    if gate.is_some() {
                        out.graph.set_verified(*id, passed).map_err(Stop::Graph)?;
                        out.emit(sink, EventKind::VerifierResult { node: *id, passed });
                    }
                    let last = k + 1 == ids.len();
                    policy.observe(&answer, passed, if last { proposal.clone() } else { None });
                    if passed {
                        self.finalize(problem, *id, sink, out).map_err(Stop::Graph)?;
                        return Ok(());
                    }
                }
                i += strategy.arity();
            }
        }
        Ok(())
    }

    fn finalize(
        &self,
        problem: &Problem,
        id: NodeId,
        sink: &mut dyn EventSink,
        out: &mut RunOutcome,
    ) -> Result<(), GraphError> {
        let path = out.graph.mark_final(id)?;
        let node = out.graph.node(id).expect("final node");
        out.status = RunStatus::Verified;
        out.r_f = node.reason.clone();
        out.a_f = node.answer.clone();
        out.t_0 = path.t_0;
        out.t_f = path.t_f;
        out.path = path.node_ids.clone();
        let digest = problem.input_digest();
        out.dtemp = Some(DTempRecord {
            version: RECORD_VERSION,
            run_id: out.run_id.clone(),
            problem_id: problem.id.clone(),
            input_digest: digest.clone(),
            query: problem.query.clone(),
            r_f: out.r_f.clone(),
            a_f: out.a_f.clone(),
            t_0: out.t_0,
            t_f: out.t_f,
            graph_ref: RunStore::graph_ref(&out.run_id),
            period: problem.period.clone(),
        });
        out.dsft = Some(DSftRecord {
            version: RECORD_VERSION,
            run_id: out.run_id.clone(),
            input_digest: digest,
            query: problem.query.clone(),
            r_f: out.r_f.clone(),
            a_f: out.a_f.clone(),
        });
        out.emit(sink, EventKind::FinalMarked { node: id, path: path.node_ids });
        Ok(())
    }

    /// Lineage of the cursor (optionally windowed) plus the answers sitting
    /// on other open branch tips.
    fn context(&self, graph: &TemporalGraph) -> GraphContext {
        let Some(cursor) = graph.cursor() else {
            return GraphContext::default();
        };
        let lineage = graph.lineage(cursor).unwrap_or_default();
        let skip = self
            .config
            .context_window
            .map_or(0, |w| lineage.len().saturating_sub(w));
        let path = lineage[skip..]
            .iter()
            .filter_map(|id| graph.node(*id))
            .map(|n| ContextStep {
                node: n.id,
                reason: n.reason.clone(),
                answer: n.answer.clone(),
            })
            .collect();
        let open_branch_answers = graph
            .tips()
            .into_iter()
            .filter(|t| *t != cursor)
            .filter_map(|t| graph.node(t).map(|n| n.answer.clone()))
            .collect();
        GraphContext {
            path,
            open_branch_answers,
        }
    }

    /// Calls the backend, retrying transport errors a bounded number of times.
    pub fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        let mut attempt = 0;
        loop {
            match self.backend.generate_step(req) {
                Err(e) if e.is_transport() && attempt < self.config.transport_retries => {
                    attempt += 1;
                    warn!(key = %req.run_key, attempt, error = %e, "transport error, retrying");
                    if self.config.transport_backoff_ms > 0 {
                        thread::sleep(Duration::from_millis(self.config.transport_backoff_ms * attempt as u64));
                    }
                }
                other => return other,
            }
        }
    }

    /// Runs every problem independently (in parallel) with a fresh clock each.
    pub fn run_batch(&self, problems: &[Problem]) -> Vec<BatchRun> {
        problems
            .par_iter()
            .map(|p| {
                let mut clock = self.config.clock.start();
                let mut events = Vec::new();
                let outcome = self.run_problem(p, clock.as_mut(), &mut events);
                BatchRun { outcome, events }
            })
            .collect()
    }

    /// Writes a batch to the run store in input order, so the files depend
    /// only on the inputs. Runs already present are skipped.
    pub fn persist_batch(
        &self,
        store: &RunStore,
        problems: &[Problem],
        runs: &[BatchRun],
    ) -> Result<usize, StoreError> {
        let mut written = 0;
        for (p, r) in problems.iter().zip(runs) {
            if persist_run(store, p, &r.outcome, &r.events, self.backend.name(), &self.config, 1, None)? {
                written += 1;
            }
        }
        Ok(written)
    }
}

/// Persists one run: graph, manifest, datasets (verified runs only), events
/// and the run summary. Returns false if the run id was already stored.
#[allow(clippy::too_many_arguments)]
pub fn persist_run(
    store: &RunStore,
    problem: &Problem,
    outcome: &RunOutcome,
    events: &[RunEvent],
    backend: &str,
    config: &EngineConfig,
    agents: usize,
    case_id: Option<&str>,
) -> Result<bool, StoreError> {
    if store.has_run(&outcome.run_id) {
        return Ok(false);
    }
    store.write_graph(&outcome.run_id, &outcome.graph)?;
    store.write_manifest(
        &outcome.run_id,
        &RunManifest {
            version: RECORD_VERSION,
            run_id: outcome.run_id.clone(),
            backend: backend.to_string(),
            problem: problem.clone(),
            config: config.clone(),
        },
    )?;
    if let (Some(t), Some(s)) = (&outcome.dtemp, &outcome.dsft) {
        store.append_dtemp(t)?;
        store.append_dsft(s)?;
    }
    store.append_events(&outcome.run_id, events)?;
    store.append_run(&crate::metrics::run_record(outcome, problem, agents, case_id))?;
    Ok(true)
}
