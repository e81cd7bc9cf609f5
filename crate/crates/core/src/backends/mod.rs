//! The model boundary.
//!
//! Everything that needs a language model goes through [`Backend`]: step
//! generation for the reasoning loop, severity triage, report synthesis,
//! knowledge condensation and closed-to-open question rewriting. Two
//! implementations ship: [`ScriptedBackend`] replays a JSON Lines script
//! deterministically, [`RemoteBackend`] talks to a chat-completion endpoint.

mod remote;
mod scripted;
pub mod verify;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{NodeId, StrategyKind};
use crate::knowledge::KnowledgeItem;
use crate::orchestrator::{CaseSeverity, ExpertReport};

pub use remote::{RemoteBackend, RemoteConfig};
pub use scripted::{ScriptEntry, ScriptedBackend};
pub use verify::{answers_agree, modal_answer, normalize, verify, VerifyError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Text,
    Image,
    Audio,
    Video,
    Lab,
    Vitals,
    Timeseries,
}

impl Modality {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Text => "Text",
            Self::Image => "Image",
            Self::Audio => "Audio",
            Self::Video => "Video",
            Self::Lab => "Lab",
            Self::Vitals => "Vitals",
            Self::Timeseries => "Timeseries",
        }
    }
}

/// Reference to one multimodal input. Payloads are passed through opaquely.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalityRef {
    pub modality: Modality,
    pub locator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextStep {
    pub node: NodeId,
    pub reason: String,
    pub answer: String,
}

/// What the model sees of the evolving graph.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphContext {
    pub path: Vec<ContextStep>,
    pub open_branch_answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRequest {
    /// Script lookup key: the problem id, or `case/agent` for expert runs.
    pub run_key: String,
    pub call_index: usize,
    pub query: String,
    pub input_refs: Vec<ModalityRef>,
    pub strategy: StrategyKind,
    pub graph_context: GraphContext,
    pub knowledge: String,
    /// Set during consultation: the expert's current answer.
    pub prior_answer: Option<String>,
    pub peer_answers: Vec<String>,
    pub feedback: Option<String>,
    pub seed: u64,
}

impl GenerationRequest {
    pub fn new(run_key: impl Into<String>, query: impl Into<String>, strategy: StrategyKind) -> Self {
        Self {
            run_key: run_key.into(),
            call_index: 0,
            query: query.into(),
            input_refs: Vec::new(),
            strategy,
            graph_context: GraphContext::default(),
            knowledge: String::new(),
            prior_answer: None,
            peer_answers: Vec::new(),
            feedback: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResponse {
    pub reason: String,
    pub answer: String,
    pub proposed_next_strategy: Option<StrategyKind>,
    pub raw: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeverityRequest<'a> {
    pub key: &'a str,
    pub query: &'a str,
    pub input_refs: &'a [ModalityRef],
    /// Fixture label, honored by the scripted backend.
    pub hint: Option<CaseSeverity>,
}

/// One option of a closed-form question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceOption {
    pub letter: char,
    pub text: String,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("script has no entry for {key} call {call_index}")]
    ScriptExhausted { key: String, call_index: usize },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed reply ({reason}): {raw:?}")]
    MalformedReply { raw: String, reason: String },
    #[error("empty input")]
    EmptyInput,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl BackendError {
    pub fn is_transport(&self) -> bool {
        matches!(self, Self::Transport(_))
    }
}

pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    fn generate_step(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError>;

    fn classify_severity(&self, req: &SeverityRequest<'_>) -> Result<CaseSeverity, BackendError>;

    /// Fails with [`BackendError::EmptyInput`] for an empty report list.
    fn summarize_reports(&self, reports: &[ExpertReport]) -> Result<String, BackendError>;

    fn synthesize_knowledge(
        &self,
        query: &str,
        items: &[KnowledgeItem],
    ) -> Result<String, BackendError>;

    fn rewrite_open_ended(
        &self,
        query: &str,
        options: &[ChoiceOption],
    ) -> Result<String, BackendError>;

    fn suggest_specialties(&self, _query: &str) -> Result<Vec<String>, BackendError> {
        Ok(Vec::new())
    }
}

/// Parses `<think>...</think><answer>...</answer>` replies. Text outside the
/// tags is ignored; a missing think block falls back to the untagged text.
pub fn parse_tagged_reply(raw: &str) -> Result<GenerationResponse, BackendError> {
    let malformed = |reason: &str| BackendError::MalformedReply {
        raw: raw.to_string(),
        reason: reason.to_string(),
    };
    let (answer, answer_span) = tag_contents(raw, "answer").ok_or_else(|| malformed("missing <answer> block"))?;
    let answer = answer.trim().to_string();
    if answer.is_empty() {
        return Err(malformed("empty <answer> block"));
    }
    let reason = match tag_contents(raw, "think") {
        Some((t, _)) => t.trim().to_string(),
        None => {
            let mut rest = String::new();
            rest.push_str(&raw[..answer_span.0]);
            rest.push_str(&raw[answer_span.1..]);
            rest.trim().to_string()
        }
    };
    if reason.is_empty() {
        return Err(malformed("empty reasoning"));
    }
    let proposed_next_strategy = tag_contents(raw, "strategy")
        .and_then(|(s, _)| parse_strategy_directive(s.trim()));
    Ok(GenerationResponse {
        reason,
        answer,
        proposed_next_strategy,
        raw: Some(raw.to_string()),
    })
}

/// Contents of the first `<tag>...</tag>` block and the byte span of the
/// whole block.
pub fn tag_contents<'a>(text: &'a str, tag: &str) -> Option<(&'a str, (usize, usize))> {
    let open = format!("<{tag}>");
    let close = format!("</{tag}>");
    let start = text.find(&open)?;
    let body_start = start + open.len();
    let end = text[body_start..].find(&close)? + body_start;
    Some((&text[body_start..end], (start, end + close.len())))
}

/// Parses directives such as `explore_new`, `backtrack:v2`, `generate:3`,
/// `merge:v1,v3`.
pub fn parse_strategy_directive(s: &str) -> Option<StrategyKind> {
    let (head, arg) = match s.split_once(':') {
        Some((h, a)) => (h.trim(), Some(a.trim())),
        None => (s.trim(), None),
    };
    let node = |t: &str| -> Option<NodeId> {
        t.trim().trim_start_matches('v').parse().ok().map(NodeId)
    };
    match (head, arg) {
        ("initial_reason", None) => Some(StrategyKind::InitialReason),
        ("explore_new", None) => Some(StrategyKind::ExploreNew),
        ("refine_content", None) => Some(StrategyKind::RefineContent),
        ("backtrack", Some(a)) => Some(StrategyKind::Backtrack { target: node(a)? }),
        ("generate", Some(a)) => Some(StrategyKind::Generate { fanout: a.parse().ok()? }),
        ("merge", Some(a)) => Some(StrategyKind::Merge {
            sources: a.split(',').map(node).collect::<Option<Vec<_>>>()?,
        }),
        _ => None,
    }
}

/// Instruction line embedded in prompts for each strategy.
pub fn strategy_directive(strategy: &StrategyKind) -> String {
    match strategy {
        StrategyKind::InitialReason => {
            "Produce an initial reason and answer for the query.".into()
        }
        StrategyKind::ExploreNew => {
            "Explore a new reason distinct from all prior reasons.".into()
        }
        StrategyKind::RefineContent => {
            "Refine the content of the current reason; keep its connections.".into()
        }
        StrategyKind::Backtrack { target } => format!(
            "The current path looks suboptimal. Return to reason {target} and continue along an alternative path."
        ),
        StrategyKind::Generate { fanout } => format!(
            "Generate one of {fanout} alternative reasons branching from the current reason."
        ),
        StrategyKind::Merge { sources } => {
            let ids: Vec<String> = sources.iter().map(ToString::to_string).collect();
            format!("Merge reasons {} into a single aggregated reason.", ids.join(", "))
        }
    }
}

/// Deterministic report digest: one line per expert plus the modal answer.
pub fn concatenate_reports(reports: &[ExpertReport]) -> Result<String, BackendError> {
    if reports.is_empty() {
        return Err(BackendError::EmptyInput);
    }
    let mut out = String::new();
    for r in reports {
        let first = r.rationale_summary.lines().next().unwrap_or("");
        let _ = writeln!(out, "{}: {} | {}", r.agent_id, r.answer, first);
    }
    let answers: Vec<&str> = reports.iter().map(|r| r.answer.as_str()).collect();
    if let Some(m) = modal_answer(&answers) {
        let _ = write!(out, "modal answer: {m}");
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tagged_reply_is_parsed() {
        let r = parse_tagged_reply("<think>steps</think><answer>B</answer>").unwrap();
        assert_eq!(r.reason, "steps");
        assert_eq!(r.answer, "B");
        assert_eq!(r.proposed_next_strategy, None);
    }

    #[test]
    fn missing_answer_preserves_raw() {
        let raw = "<think>steps</think> so B";
        match parse_tagged_reply(raw) {
            Err(BackendError::MalformedReply { raw: kept, .. }) => assert_eq!(kept, raw),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn untagged_reasoning_falls_back_to_outer_text() {
        let r = parse_tagged_reply("It is viral. <answer>C</answer>").unwrap();
        assert_eq!(r.reason, "It is viral.");
        assert_eq!(r.answer, "C");
    }

    #[test]
    fn strategy_tag_is_proposal() {
        let r = parse_tagged_reply(
            "<think>x</think><answer>A</answer><strategy>merge:v1,v3</strategy>",
        )
        .unwrap();
        assert_eq!(
            r.proposed_next_strategy,
            Some(StrategyKind::Merge { sources: vec![NodeId(1), NodeId(3)] })
        );
    }

    #[test]
    fn directives_parse() {
        assert_eq!(parse_strategy_directive("explore_new"), Some(StrategyKind::ExploreNew));
        assert_eq!(
            parse_strategy_directive("backtrack:v2"),
            Some(StrategyKind::Backtrack { target: NodeId(2) })
        );
        assert_eq!(
            parse_strategy_directive("generate:3"),
            Some(StrategyKind::Generate { fanout: 3 })
        );
        assert_eq!(parse_strategy_directive("fly"), None);
    }

    fn report(agent: &str, answer: &str) -> ExpertReport {
        ExpertReport {
            agent_id: agent.into(),
            graph_id: format!("case/{agent}"),
            answer: answer.into(),
            rationale_summary: format!("because {answer}\nmore"),
            specialty: None,
            round_produced: 0,
            status: crate::engine::RunStatus::Unverified,
            node: None,
        }
    }

    #[test]
    fn concatenation_includes_single_answer() {
        let s = concatenate_reports(&[report("gmp", "Pneumonia")]).unwrap();
        assert!(s.contains("Pneumonia"));
    }

    #[test]
    fn concatenation_reports_modal_answer() {
        let s = concatenate_reports(&[report("a", "B"), report("b", "B"), report("c", "C")]).unwrap();
        assert!(s.ends_with("modal answer: B"), "{s}");
        assert!(!s.contains("more"));
    }

    #[test]
    fn concatenation_rejects_empty() {
        assert_eq!(concatenate_reports(&[]), Err(BackendError::EmptyInput));
    }
}
