use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::warn;

use super::{
    concatenate_reports, Backend, BackendError, ChoiceOption, GenerationRequest,
    GenerationResponse, SeverityRequest,
};
use crate::graph::StrategyKind;
use crate::knowledge::KnowledgeItem;
use crate::orchestrator::{CaseSeverity, ExpertReport};

/// One line of a script file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEntry {
    pub problem_id: String,
    #[serde(default)]
    pub call_index: usize,
    #[serde(default)]
    pub reason: String,
    #[serde(default)]
    pub answer: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_strategy: Option<StrategyKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity: Option<CaseSeverity>,
    /// Verbatim model output, for reward scoring.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
}

impl ScriptEntry {
    pub fn step(problem_id: &str, call_index: usize, reason: &str, answer: &str) -> Self {
        Self {
            problem_id: problem_id.into(),
            call_index,
            reason: reason.into(),
            answer: answer.into(),
            next_strategy: None,
            severity: None,
            raw: None,
        }
    }
}

/// Replays `(problem_id, call_index)` keyed responses. Stateless per call, so
/// it is safe to share across concurrent runs.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    steps: HashMap<(String, usize), ScriptEntry>,
    severities: HashMap<String, CaseSeverity>,
    fallback: bool,
}

impl ScriptedBackend {
    pub fn new(entries: impl IntoIterator<Item = ScriptEntry>) -> Self {
        let mut steps = HashMap::new();
        let mut severities = HashMap::new();
        for e in entries {
            if let Some(s) = e.severity {
                severities.insert(e.problem_id.clone(), s);
            }
            if !e.reason.is_empty() || !e.answer.is_empty() {
                steps.insert((e.problem_id.clone(), e.call_index), e);
            }
        }
        Self {
            steps,
            severities,
            fallback: false,
        }
    }

    pub fn from_jsonl(path: &Path) -> Result<Self, BackendError> {
        let text = fs::read_to_string(path)
            .map_err(|e| BackendError::InvalidRequest(format!("{}: {e}", path.display())))?;
        Self::parse_jsonl(&text)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, BackendError> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ScriptEntry = serde_json::from_str(line).map_err(|e| {
                BackendError::InvalidRequest(format!("script line {}: {e}", i + 1))
            })?;
            entries.push(e);
        }
        Ok(Self::new(entries))
    }

    /// Serve seeded filler responses when the script has no entry.
    pub fn with_fallback(mut self, enabled: bool) -> Self {
        self.fallback = enabled;
        self
    }

    fn fallback_response(req: &GenerationRequest) -> GenerationResponse {
        let mut hasher = Sha256::new();
        hasher.update(req.seed.to_le_bytes());
        hasher.update(req.run_key.as_bytes());
        hasher.update((req.call_index as u64).to_le_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest[..32]);
        let mut rng = ChaCha8Rng::from_seed(seed);
        let letter = ['A', 'B', 'C', 'D', 'E'][rng.random_range(0..5)];
        let reason = format!(
            "fallback {} step {} for {}",
            req.strategy.tag(),
            req.call_index,
            req.run_key
        );
        GenerationResponse {
            raw: Some(format!("<think>{reason}</think><answer>{letter}</answer>")),
            reason,
            answer: letter.to_string(),
            proposed_next_strategy: None,
        }
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn generate_step(&self, req: &GenerationRequest) -> Result<GenerationResponse, BackendError> {
        if let Some(e) = self.steps.get(&(req.run_key.clone(), req.call_index)) {
            let reason = if e.reason.is_empty() {
                format!("step {} for {}", req.call_index, req.run_key)
            } else {
                e.reason.clone()
            };
            return Ok(GenerationResponse {
                raw: Some(
                    e.raw
                        .clone()
                        .unwrap_or_else(|| format!("<think>{reason}</think><answer>{}</answer>", e.answer)),
                ),
                reason,
                answer: e.answer.clone(),
                proposed_next_strategy: e.next_strategy.clone(),
            });
        }
        if let Some(prior) = &req.prior_answer {
            // consultation without a scripted revision: the expert holds
            return Ok(GenerationResponse {
                reason: format!("holds answer after reviewing peers: {prior}"),
                answer: prior.clone(),
                proposed_next_strategy: None,
                raw: None,
            });
        }
        if self.fallback {
            return Ok(Self::fallback_response(req));
        }
        Err(BackendError::ScriptExhausted {
            key: req.run_key.clone(),
            call_index: req.call_index,
        })
    }

    fn classify_severity(&self, req: &SeverityRequest<'_>) -> Result<CaseSeverity, BackendError> {
        if let Some(h) = req.hint {
            return Ok(h);
        }
        if let Some(s) = self.severities.get(req.key) {
            return Ok(*s);
        }
        warn!(key = req.key, "no severity label in script, defaulting to moderate");
        Ok(CaseSeverity::Moderate)
    }

    fn summarize_reports(&self, reports: &[ExpertReport]) -> Result<String, BackendError> {
        concatenate_reports(reports)
    }

    fn synthesize_knowledge(
        &self,
        _query: &str,
        items: &[KnowledgeItem],
    ) -> Result<String, BackendError> {
        Ok(items
            .iter()
            .map(|k| format!("[{}] {}", k.id, k.text))
            .collect::<Vec<_>>()
            .join("\n"))
    }

    fn rewrite_open_ended(
        &self,
        query: &str,
        options: &[ChoiceOption],
    ) -> Result<String, BackendError> {
        Ok(crate::store::strip_choice_list(query, options))
    }
}
