use std::collections::BTreeMap;
use std::thread;

use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use super::{
    activate_experts, assess_query, default_keyword_map, AgentSpec, AnswerRevision, Approver,
    ApproverError, CaseEventKind, CaseInput, CaseLog, CaseRecord, CaseState, ConsultationRound,
    Decision, DecisionStatus, ExpertReport, ReviewBundle, Stage, Verdict,
};
use crate::backends::{
    answers_agree, concatenate_reports, modal_answer, Backend, ContextStep, GenerationRequest,
    GraphContext,
};
use crate::engine::{persist_run, Clock, Engine, EngineConfig, FnSink, RunEvent, RunOutcome, RunStatus};
use crate::graph::{StrategyKind, Timestamp};
use crate::knowledge::Retriever;
use crate::store::{Problem, RunStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaseConfig {
    pub max_rounds: usize,
    pub reject_limit: usize,
    pub keyword_map: BTreeMap<String, String>,
    pub engine: EngineConfig,
    /// Forward expert run events to the case log as they happen. Off, they
    /// are appended per expert in roster order once analysis finishes, which
    /// keeps case logs byte-reproducible.
    pub live_events: bool,
}

impl Default for CaseConfig {
    fn default() -> Self {
        Self {
            max_rounds: 3,
            reject_limit: 2,
            keyword_map: default_keyword_map(),
            engine: EngineConfig::default(),
            live_events: false,
        }
    }
}

struct Expert {
    spec: AgentSpec,
    config: EngineConfig,
    outcome: RunOutcome,
    events: Vec<RunEvent>,
    clock: Box<dyn Clock>,
    next_call: usize,
    report: ExpertReport,
}

impl Expert {
    fn run_key(&self, case_id: &str) -> String {
        format!("{case_id}/{}", self.spec.id)
    }
}

pub struct Orchestrator<'a> {
    pub config: CaseConfig,
    backend: &'a dyn Backend,
    retriever: &'a dyn Retriever,
    roster: Vec<AgentSpec>,
    store: Option<&'a RunStore>,
}

impl<'a> Orchestrator<'a> {
    pub fn new(
        config: CaseConfig,
        backend: &'a dyn Backend,
        retriever: &'a dyn Retriever,
        roster: Vec<AgentSpec>,
    ) -> Self {
        Self {
            config,
            backend,
            retriever,
            roster,
            store: None,
        }
    }

    /// Persist expert runs and case records into `store`.
    pub fn with_store(mut self, store: &'a RunStore) -> Self {
        self.store = Some(store);
        self
    }

    /// A case log mirrored into the store when there is one.
    pub fn open_log(&self, case_id: &str) -> CaseLog {
        match self.store {
            Some(s) => {
                let path = s.root().join("cases").join(format!("{case_id}.events.jsonl"));
                CaseLog::with_file(case_id, &path).unwrap_or_else(|e| {
                    warn!(case = case_id, error = %e, "cannot mirror case log");
                    CaseLog::new(case_id)
                })
            }
            None => CaseLog::new(case_id),
        }
    }

    /// Runs all six stages. Stage failures degrade the case (and are noted)
    /// but a decision is always produced. The log is closed on return.
    pub fn run_case(&self, case: &CaseInput, approver: &dyn Approver, log: &CaseLog) -> CaseRecord {
        let mut rec = CaseRecord::new(case);
        let mut case_clock = self.config.engine.clock.start();
        let record = self.run_stages(case, approver, log, &mut rec, case_clock.as_mut());
        if let Some(store) = self.store {
            if let Err(e) = store.write_case(&case.case_id, &record) {
                warn!(case = %case.case_id, error = %e, "cannot store case record");
            }
        }
        log.set_record(record.clone());
        log.close();
        record
    }

    fn snapshot(&self, log: &CaseLog, rec: &CaseRecord) {
        log.set_record(rec.clone());
    }

    fn run_stages(
        &self,
        case: &CaseInput,
        approver: &dyn Approver,
        log: &CaseLog,
        rec: &mut CaseRecord,
        case_clock: &mut dyn Clock,
    ) -> CaseRecord {
        log.append(CaseEventKind::StageStarted { stage: Stage::Assess });
        let assessment = assess_query(case, self.backend, &self.config.keyword_map);
        rec.severity = Some(assessment.severity);
        rec.specialties = assessment.specialties.clone();
        log.append(CaseEventKind::Assessed {
            severity: assessment.severity,
            specialties: assessment.specialties.clone(),
        });
        self.snapshot(log, rec);

        log.append(CaseEventKind::StageStarted { stage: Stage::Activate });
        let activation = match activate_experts(assessment.severity, &assessment.specialties, &self.roster) {
            Ok(a) => a,
            Err(e) => {
                let msg = format!("activation failed: {e}");
                return self.escalate_early(case, log, rec, case_clock, &msg);
            }
        };
        for g in &activation.gaps {
            rec.notices.push(format!("no {} specialist on the roster, {} stands in", g.specialty, g.substitute));
        }
        rec.agents = activation.agents.clone();
        rec.gaps = activation.gaps.clone();
        log.append(CaseEventKind::Activated {
            agents: activation.agents.iter().map(|a| a.id.clone()).collect(),
            gaps: activation.gaps.clone(),
        });
        self.snapshot(log, rec);

        log.append(CaseEventKind::StageStarted { stage: Stage::Analyze });
        let problem = case.to_problem();
        let analysts: Vec<AgentSpec> = activation.analysts().cloned().collect();
        let mut experts = self.analyze(case, &problem, &analysts, log);
        experts.retain(|x| {
            if x.outcome.status == RunStatus::Error {
                let reason = x.outcome.diagnostic.clone().unwrap_or_else(|| "run failed".into());
                rec.notices.push(format!("expert {} excluded: {reason}", x.spec.id));
                log.append(CaseEventKind::ExpertExcluded {
                    agent_id: x.spec.id.clone(),
                    reason,
                });
                self.persist_expert(&problem, x, activation.agents.len(), &case.case_id);
                false
            } else {
                true
            }
        });
        rec.initial_reports = experts.iter().map(|x| x.report.clone()).collect();
        rec.reports = rec.initial_reports.clone();
        self.snapshot(log, rec);

        let multi = analysts.len() >= 2;
        if multi {
            log.append(CaseEventKind::StageStarted { stage: Stage::Synthesize });
            rec.synthesis = Some(self.synthesize(rec));
            log.append(CaseEventKind::Synthesized {
                text: rec.synthesis.clone().unwrap_or_default(),
            });
            self.snapshot(log, rec);

            log.append(CaseEventKind::StageStarted { stage: Stage::Consult });
            for _ in 0..self.config.max_rounds {
                let round = self.consult(case, &mut experts, rec.rounds.len() + 1, None, log);
                let done = round.consensus.is_some();
                rec.rounds.push(round);
                rec.reports = experts.iter().map(|x| x.report.clone()).collect();
                self.snapshot(log, rec);
                if done {
                    break;
                }
            }
        }

        log.append(CaseEventKind::StageStarted { stage: Stage::Decide });
        let decision_agent = activation.decision_agent().map(|a| a.id.clone());
        let decision = self.decide(case, approver, &mut experts, log, rec, multi, case_clock, decision_agent);
        for x in &experts {
            self.persist_expert(&problem, x, activation.agents.len(), &case.case_id);
        }
        info!(case = %case.case_id, status = ?decision.status, answer = %decision.final_answer, "case decided");
        rec.decision = Some(decision.clone());
        rec.state = CaseState::Decided;
        log.append(CaseEventKind::Decided { decision });
        rec.clone()
    }

    fn escalate_early(
        &self,
        case: &CaseInput,
        log: &CaseLog,
        rec: &mut CaseRecord,
        case_clock: &mut dyn Clock,
        msg: &str,
    ) -> CaseRecord {
        warn!(case = %case.case_id, "{msg}");
        rec.notices.push(msg.to_string());
        log.append(CaseEventKind::Notice { message: msg.to_string() });
        log.append(CaseEventKind::StageStarted { stage: Stage::Decide });
        let decision = Decision {
            case_id: case.case_id.clone(),
            final_answer: String::new(),
            status: DecisionStatus::Escalated,
            approver_id: "system".into(),
            feedback: msg.to_string(),
            decided_at: Timestamp::new(log.len() as u64, case_clock.now_ms()),
            decision_agent: None,
        };
        rec.decision = Some(decision.clone());
        rec.state = CaseState::Decided;
        log.append(CaseEventKind::Decided { decision });
        rec.clone()
    }

    fn analyze(&self, case: &CaseInput, problem: &Problem, analysts: &[AgentSpec], log: &CaseLog) -> Vec<Expert> {
        let live = self.config.live_events;
        let mut experts: Vec<Expert> = thread::scope(|s| {
            let handles: Vec<_> = analysts
                .iter()
                .map(|spec| {
                    s.spawn(move || {
                        let mut config = spec.overrides.apply(&self.config.engine);
                        config.allow_ungated = true;
                        let engine = Engine::new(config.clone(), self.backend, self.retriever);
                        let run_id = format!("{}.{}", case.case_id, spec.id);
                        let run_key = format!("{}/{}", case.case_id, spec.id);
                        let mut clock = config.clock.start();
                        let mut events = Vec::new();
                        let outcome = {
                            let mut sink = FnSink(|e: RunEvent| {
                                if live {
                                    log.append(CaseEventKind::Run { agent_id: spec.id.clone(), run: e.clone() });
                                }
                                events.push(e);
                            });
                            engine.run_keyed(problem, &run_id, &run_key, clock.as_mut(), &mut sink)
                        };
                        let report = ExpertReport {
                            agent_id: spec.id.clone(),
                            graph_id: run_id,
                            answer: outcome.answer().to_string(),
                            rationale_summary: outcome.reason().to_string(),
                            specialty: spec.specialty().map(str::to_string),
                            round_produced: 0,
                            status: outcome.status,
                            node: outcome.reported_node(),
                        };
                        let next_call = outcome.calls_used;
                        Expert {
                            spec: spec.clone(),
                            config,
                            outcome,
                            events,
                            clock,
                            next_call,
                            report,
                        }
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("expert thread")).collect()
        });
        for x in &mut experts {
            if !live {
                for e in &x.events {
                    log.append(CaseEventKind::Run { agent_id: x.spec.id.clone(), run: e.clone() });
                }
            }
            log.set_graph(&x.spec.id, x.outcome.graph.clone());
            if x.outcome.status != RunStatus::Error {
                log.append(CaseEventKind::ExpertReported { report: x.report.clone() });
            }
        }
        experts
    }

    fn synthesize(&self, rec: &mut CaseRecord) -> String {
        if rec.reports.is_empty() {
            return String::new();
        }
        match self.backend.summarize_reports(&rec.reports) {
            Ok(s) => s,
            Err(e) => {
                rec.notices.push(format!("synthesis failed, using plain digest: {e}"));
                concatenate_reports(&rec.reports).unwrap_or_default()
            }
        }
    }

    /// One barrier round: every expert sees all current reports and may
    /// revise; a revision extends that expert's graph with an explore node.
    fn consult(
        &self,
        case: &CaseInput,
        experts: &mut [Expert],
        round_no: usize,
        feedback: Option<&str>,
        log: &CaseLog,
    ) -> ConsultationRound {
        log.append(CaseEventKind::RoundStarted {
            round_no,
            feedback: feedback.map(str::to_string),
        });
        let inputs: Vec<ExpertReport> = experts.iter().map(|x| x.report.clone()).collect();
        let requests: Vec<GenerationRequest> = experts
            .iter()
            .map(|x| {
                let peers = inputs
                    .iter()
                    .filter(|r| r.agent_id != x.spec.id)
                    .map(|r| format!("{}: {}", r.agent_id, r.answer))
                    .collect();
                let path = x
                    .outcome
                    .graph
                    .cursor()
                    .and_then(|c| x.outcome.graph.lineage(c).ok())
                    .unwrap_or_default()
                    .into_iter()
                    .filter_map(|id| x.outcome.graph.node(id))
                    .map(|n| ContextStep { node: n.id, reason: n.reason.clone(), answer: n.answer.clone() })
                    .collect();
                GenerationRequest {
                    run_key: x.run_key(&case.case_id),
                    call_index: x.next_call,
                    query: case.query.clone(),
                    input_refs: case.input_refs.clone(),
                    strategy: StrategyKind::ExploreNew,
                    graph_context: GraphContext { path, open_branch_answers: Vec::new() },
                    knowledge: String::new(),
                    prior_answer: Some(x.report.answer.clone()),
                    peer_answers: peers,
                    feedback: feedback.map(str::to_string),
                    seed: x.config.seed,
                }
            })
            .collect();
        let replies: Vec<_> = thread::scope(|s| {
            let handles: Vec<_> = requests
                .iter()
                .map(|req| s.spawn(move || self.backend.generate_step(req)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("consult thread")).collect()
        });

        let mut revisions = Vec::new();
        for (x, reply) in experts.iter_mut().zip(replies) {
            x.next_call += 1;
            let resp = match reply {
                Ok(r) => r,
                Err(e) => {
                    warn!(agent = %x.spec.id, error = %e, "consultation call failed, expert holds");
                    log.append(CaseEventKind::Notice {
                        message: format!("{} could not be consulted in round {round_no}: {e}", x.spec.id),
                    });
                    continue;
                }
            };
            if answers_agree(&resp.answer, &x.report.answer) || resp.answer.trim().is_empty() {
                continue;
            }
            let old = x.report.answer.clone();
            let reason = resp.reason.clone();
            let mut captured = Vec::new();
            let appended = {
                let mut sink = FnSink(|e: RunEvent| captured.push(e));
                x.outcome.append_revision(resp, x.clock.as_mut(), &mut sink)
            };
            let node = match appended {
                Ok(n) => n,
                Err(e) => {
                    warn!(agent = %x.spec.id, error = %e, "revision rejected by graph");
                    continue;
                }
            };
            for e in captured {
                log.append(CaseEventKind::Run { agent_id: x.spec.id.clone(), run: e.clone() });
                x.events.push(e);
            }
            let graph_node = x.outcome.graph.node(node).expect("revision node");
            x.report.answer = graph_node.answer.clone();
            x.report.rationale_summary = graph_node.reason.clone();
            x.report.round_produced = round_no;
            x.report.node = Some(node);
            let revision = AnswerRevision {
                agent_id: x.spec.id.clone(),
                old_answer: old,
                new_answer: x.report.answer.clone(),
                reason,
                node,
            };
            log.append(CaseEventKind::AnswerRevised { revision: revision.clone() });
            log.set_graph(&x.spec.id, x.outcome.graph.clone());
            revisions.push(revision);
        }
        let consensus = consensus_of(experts.iter().map(|x| x.report.answer.as_str()));
        log.append(CaseEventKind::RoundFinished {
            round_no,
            consensus: consensus.clone(),
        });
        ConsultationRound {
            round_no,
            inputs,
            revisions,
            consensus,
            feedback: feedback.map(str::to_string),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn decide(
        &self,
        case: &CaseInput,
        approver: &dyn Approver,
        experts: &mut [Expert],
        log: &CaseLog,
        rec: &mut CaseRecord,
        multi: bool,
        case_clock: &mut dyn Clock,
        decision_agent: Option<String>,
    ) -> Decision {
        let mut rejections = 0;
        let decision = |status, answer: String, approver_id: &str, feedback: String, clock: &mut dyn Clock| Decision {
            case_id: case.case_id.clone(),
            final_answer: answer,
            status,
            approver_id: approver_id.to_string(),
            feedback,
            decided_at: Timestamp::new(log.len() as u64, clock.now_ms()),
            decision_agent: decision_agent.clone(),
        };
        loop {
            let answers: Vec<&str> = experts.iter().map(|x| x.report.answer.as_str()).collect();
            if answers.is_empty() {
                return decision(
                    DecisionStatus::Escalated,
                    String::new(),
                    "system",
                    "no expert produced a usable report".into(),
                    case_clock,
                );
            }
            let modal = modal_answer(&answers).unwrap_or_default();
            let Some(consensus) = consensus_of(answers.iter().copied()) else {
                return decision(
                    DecisionStatus::Escalated,
                    modal,
                    "system",
                    format!("no consensus after {} rounds; modal answer attached", rec.rounds.len()),
                    case_clock,
                );
            };
            let synthesis = rec
                .synthesis
                .clone()
                .unwrap_or_else(|| experts[0].report.rationale_summary.clone());
            let bundle = ReviewBundle {
                case_id: case.case_id.clone(),
                cycle: rejections,
                synthesis,
                proposed_answer: consensus.clone(),
                reports: experts.iter().map(|x| x.report.clone()).collect(),
                rounds: rec.rounds.clone(),
                ground_truth: case.ground_truth.clone(),
            };
            log.append(CaseEventKind::ReviewRequested {
                cycle: rejections,
                proposed_answer: consensus.clone(),
            });
            rec.state = CaseState::PendingReview;
            self.snapshot(log, rec);
            let verdict = approver.review(&bundle);
            rec.state = CaseState::Running;
            match verdict {
                Err(ApproverError::Timeout(d)) => {
                    log.append(CaseEventKind::Notice { message: format!("approver timed out after {d:?}") });
                    return decision(
                        DecisionStatus::Escalated,
                        consensus,
                        approver.id(),
                        "approver timed out".into(),
                        case_clock,
                    );
                }
                Ok(v) => {
                    log.append(CaseEventKind::VerdictReceived {
                        cycle: rejections,
                        approver: approver.id().to_string(),
                        verdict: v.clone(),
                    });
                    match v {
                        Verdict::Approve { feedback } => {
                            return decision(DecisionStatus::Approved, consensus, approver.id(), feedback, case_clock);
                        }
                        Verdict::Reject { feedback } => {
                            rejections += 1;
                            let round = self.consult(case, experts, rec.rounds.len() + 1, Some(&feedback), log);
                            rec.rounds.push(round);
                            rec.reports = experts.iter().map(|x| x.report.clone()).collect();
                            if multi {
                                rec.synthesis = Some(self.synthesize(rec));
                            }
                            self.snapshot(log, rec);
                            if rejections >= self.config.reject_limit.max(1) {
                                let answers: Vec<&str> = experts.iter().map(|x| x.report.answer.as_str()).collect();
                                let answer = consensus_of(answers.iter().copied())
                                    .or_else(|| modal_answer(&answers))
                                    .unwrap_or_default();
                                return decision(
                                    DecisionStatus::Escalated,
                                    answer,
                                    approver.id(),
                                    format!("rejected {rejections} times: {feedback}"),
                                    case_clock,
                                );
                            }
                        }
                    }
                }
            }
        }
    }

    fn persist_expert(&self, problem: &Problem, x: &Expert, agents: usize, case_id: &str) {
        let Some(store) = self.store else { return };
        if let Err(e) = persist_run(
            store,
            problem,
            &x.outcome,
            &x.events,
            self.backend.name(),
            &x.config,
            agents,
            Some(case_id),
        ) {
            warn!(agent = %x.spec.id, error = %e, "cannot persist expert run");
        }
    }
}

/// The common answer if every pair agrees under verifier normalization.
fn consensus_of<'s>(answers: impl Iterator<Item = &'s str>) -> Option<String> {
    let answers: Vec<&str> = answers.collect();
    let first = *answers.first()?;
    answers
        .iter()
        .all(|a| answers.iter().all(|b| answers_agree(a, b)))
        .then(|| first.to_string())
}

/// Runs one consultation round outside a case, for tools and tests.
pub fn consult_round(answers: &[&str]) -> Option<String> {
    consensus_of(answers.iter().copied())
}
