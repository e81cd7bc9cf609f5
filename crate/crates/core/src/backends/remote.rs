use std::fmt::Write as _;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{
    normalize, parse_tagged_reply, strategy_directive, Backend, BackendError, ChoiceOption,
    GenerationRequest, GenerationResponse, SeverityRequest,
};
use crate::knowledge::KnowledgeItem;
use crate::orchestrator::{CaseSeverity, ExpertReport};

const SYSTEM_PROMPT: &str = "You are a careful medical reasoning agent. Each reply is one step of a \
temporal graph of reasons. Reply exactly as <think>your reasoning</think><answer>your final answer</answer>. \
Optionally suggest the next step as <strategy>explore_new|refine_content|backtrack:vN|generate:K|merge:vA,vB</strategy>.";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_ms: u64,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8000/v1".into(),
            model: "gpt-4o".into(),
            token_env: "CHRONOREASON_API_TOKEN".into(),
            timeout_ms: 60_000,
        }
    }
}

/// Chat-completion client (`POST {base_url}/chat/completions`).
pub struct RemoteBackend {
    config: RemoteConfig,
    token: Option<String>,
    agent: ureq::Agent,
}

impl RemoteBackend {
    pub fn new(config: RemoteConfig) -> Self {
        let token = std::env::var(&config.token_env).ok().filter(|t| !t.is_empty());
        Self::with_token(config, token)
    }

    pub fn with_token(config: RemoteConfig, token: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            config,
            token,
            agent,
        }
    }

    fn chat(&self, user: &str) -> Result<String, BackendError> {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let body = json!({
            "model": self.config.model,
            "temperature": 0,
            "messages": [
                {"role": "system", "content": SYSTEM_PROMPT},
                {"role": "user", "content": user},
            ],
        });
        let mut req = self.agent.post(&url);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        debug!(%url, "chat completion request");
        let mut resp = req
            .send_json(&body)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(BackendError::Transport(format!("http {status}: {text}")));
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| BackendError::MalformedReply {
            raw: text.clone(),
            reason: e.to_string(),
        })?;
        value["choices"][0]["message"]["content"]
            .as_str()
            .map(str::to_string)
            .ok_or(BackendError::MalformedReply {
                raw: text,
                reason: "no choices[0].message.content".into(),
            })
    }
}

/// User prompt for one reasoning step.
pub(crate) fn step_prompt(req: &GenerationRequest) -> String {
    let mut p = String::new();
    let _ = writeln!(p, "Strategy: {}", strategy_directive(&req.strategy));
    let _ = writeln!(p, "Query: {}", req.query);
    if !req.input_refs.is_empty() {
        let _ = writeln!(p, "Inputs:");
        for r in &req.input_refs {
            let _ = writeln!(
                p,
                "- {}: {}{}",
                r.modality.label(),
                r.locator,
                r.caption.as_ref().map(|c| format!(" ({c})")).unwrap_or_default()
            );
        }
    }
    if !req.knowledge.is_empty() {
        let _ = writeln!(p, "Knowledge:\n{}", req.knowledge);
    }
    if !req.graph_context.path.is_empty() {
        let _ = writeln!(p, "Reasoning so far:");
        for s in &req.graph_context.path {
            let _ = writeln!(p, "[{}] {} => {}", s.node, s.reason, s.answer);
        }
    }
    if !req.graph_context.open_branch_answers.is_empty() {
        let _ = writeln!(
            p,
            "Answers on other open branches: {}",
            req.graph_context.open_branch_answers.join("; ")
        );
    }
    if let Some(prior) = &req.prior_answer {
        let _ = writeln!(p, "Your current answer: {prior}");
    }
    if !req.peer_answers.is_empty() {
        let _ = writeln!(
            p,
            "Peer experts answered: {}. Revise your answer only if their reasoning convinces you.",
            req.peer_answers.join("; ")
        );
    }
    if let Some(f) = &req.feedback {
        let _ = writeln!(p, "Reviewer feedback: {f}");
    }
    p
}

pub(crate) fn parse_severity(reply: &str) -> Option<CaseSeverity> {
    let text = tag_or_whole(reply);
    match normalize(text).as_str() {
        "mild" => Some(CaseSeverity::Mild),
        "moderate" => Some(CaseSeverity::Moderate),
        "severe" => Some(CaseSeverity::Severe),
        _ => None,
    }
}

fn tag_or_whole(reply: &str) -> &str {
    super::tag_contents(reply, "answer")
        .map(|(t, _)| t)
        .unwrap_or(reply)
}

impl Backend for RemoteBackend {
    fn name(&self) -> &str {
        "remote"
    }

    fn generate_step(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        if req.query.trim().is_empty() {
            return Err(BackendError::InvalidRequest("empty query".into()));
        }
        let reply = self.chat(&step_prompt(req))?;
        parse_tagged_reply(&reply)
    }

    fn classify_severity(&self, req: &SeverityRequest<'_>) -> Result<CaseSeverity, BackendError> {
        let prompt = format!(
            "Classify the severity of this medical case. Answer with exactly one word: Mild, Moderate or Severe.\nCase: {}",
            req.query
        );
        let reply = self.chat(&prompt)?;
        Ok(parse_severity(&reply).unwrap_or_else(|| {
            warn!(key = req.key, reply = %reply, "unparsable severity reply, defaulting to moderate");
            CaseSeverity::Moderate
        }))
    }

    fn summarize_reports(&self, reports: &[ExpertReport]) -> Result<String, BackendError> {
        if reports.is_empty() {
            return Err(BackendError::EmptyInput);
        }
        let mut prompt = String::from(
            "Synthesize the following expert reports into one summary report, keeping the key findings and the answer each expert reached.\n",
        );
        for r in reports {
            let _ = writeln!(prompt, "- {} answered {}: {}", r.agent_id, r.answer, r.rationale_summary);
        }
        let reply = self.chat(&prompt)?;
        Ok(tag_or_whole(&reply).trim().to_string())
    }

    fn synthesize_knowledge(
        &self,
        query: &str,
        items: &[KnowledgeItem],
    ) -> Result<String, BackendError> {
        let mut prompt = format!(
            "Condense the retrieved passages into one paragraph of knowledge relevant to the query.\nQuery: {query}\n"
        );
        for k in items {
            let _ = writeln!(prompt, "[{}] {}", k.id, k.text);
        }
        let reply = self.chat(&prompt)?;
        Ok(tag_or_whole(&reply).trim().to_string())
    }

    fn rewrite_open_ended(
        &self,
        query: &str,
        options: &[ChoiceOption],
    ) -> Result<String, BackendError> {
        let mut prompt = format!(
            "Rewrite this multiple-choice question as an open-ended question without listing options.\nQuestion: {query}\n"
        );
        for o in options {
            let _ = writeln!(prompt, "{}) {}", o.letter, o.text);
        }
        let reply = self.chat(&prompt)?;
        let text = tag_or_whole(&reply).trim().to_string();
        if text.is_empty() {
            return Err(BackendError::MalformedReply {
                raw: reply,
                reason: "empty rewrite".into(),
            });
        }
        Ok(text)
    }

    fn suggest_specialties(&self, query: &str) -> Result<Vec<String>, BackendError> {
        let prompt = format!(
            "List the medical specialties needed for this case as a comma-separated list of lowercase tags, or 'none'.\nCase: {query}"
        );
        let reply = self.chat(&prompt)?;
        let text = normalize(tag_or_whole(&reply));
        if text == "none" {
            return Ok(Vec::new());
        }
        Ok(text
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect())
    }
}
