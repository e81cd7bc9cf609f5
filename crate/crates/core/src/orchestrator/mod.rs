//! Multi-agent case handling.
//!
//! A case goes through six stages: assess severity, activate experts, run one
//! reasoning graph per expert, synthesize their reports, consult over a few
//! barrier-synchronized rounds, and decide through an approver. Mild cases
//! are handled by the general practitioner alone; moderate cases add one
//! specialist per recommended specialty; severe cases bring in at least two
//! specialist teams plus the primary doctor as decision agent.

mod approver;
mod log;
mod pipeline;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::backends::{normalize, Backend, ModalityRef, SeverityRequest};
use crate::engine::{EngineConfig, PolicyConfig, RunStatus};
use crate::graph::{NodeId, Timestamp};
use crate::store::Problem;

pub use approver::{
    AlwaysApprove, Approver, ApproverError, AutoApprover, HumanApprover, QueueError, ReviewBundle,
    ReviewItem, ReviewQueue, ReviewState, ScriptedApprover, Verdict,
};
pub use log::{CaseEvent, CaseEventKind, CaseLog, Stage};
pub use pipeline::{consult_round, CaseConfig, Orchestrator};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CaseSeverity {
    Mild,
    Moderate,
    Severe,
}

impl fmt::Display for CaseSeverity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mild => "Mild",
            Self::Moderate => "Moderate",
            Self::Severe => "Severe",
        })
    }
}

impl FromStr for CaseSeverity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mild" => Ok(Self::Mild),
            "moderate" => Ok(Self::Moderate),
            "severe" => Ok(Self::Severe),
            other => Err(format!("unknown severity {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum Role {
    GeneralPractitioner,
    Specialist { specialty: String },
    PrimaryDoctor,
}

/// Per-agent engine settings that differ from the case defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineOverrides {
    pub max_retries: Option<usize>,
    pub max_iterations: Option<usize>,
    pub top_k: Option<usize>,
    pub policy: Option<PolicyConfig>,
}

impl EngineOverrides {
    pub fn apply(&self, base: &EngineConfig) -> EngineConfig {
        let mut c = base.clone();
        if let Some(v) = self.max_retries {
            c.max_retries = v;
        }
        if let Some(v) = self.max_iterations {
            c.max_iterations = v;
        }
        if let Some(v) = self.top_k {
            c.top_k = v;
        }
        if let Some(p) = &self.policy {
            c.policy = p.clone();
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub id: String,
    #[serde(flatten)]
    pub role: Role,
    /// Backend binding name; only the case backend exists today.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[serde(default, skip_serializing_if = "is_default")]
    pub overrides: EngineOverrides,
}

fn is_default(o: &EngineOverrides) -> bool {
    *o == EngineOverrides::default()
}

impl AgentSpec {
    pub fn gmp(id: &str) -> Self {
        Self::with_role(id, Role::GeneralPractitioner)
    }

    pub fn specialist(id: &str, specialty: &str) -> Self {
        Self::with_role(id, Role::Specialist { specialty: specialty.to_string() })
    }

    pub fn primary_doctor(id: &str) -> Self {
        Self::with_role(id, Role::PrimaryDoctor)
    }

    fn with_role(id: &str, role: Role) -> Self {
        Self {
            id: id.to_string(),
            role,
            backend: None,
            overrides: EngineOverrides::default(),
        }
    }

    pub fn specialty(&self) -> Option<&str> {
        match &self.role {
            Role::Specialist { specialty } => Some(specialty),
            _ => None,
        }
    }

    pub fn is_primary_doctor(&self) -> bool {
        self.role == Role::PrimaryDoctor
    }
}

/// One expert's current position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertReport {
    pub agent_id: String,
    /// Run id of the expert's graph.
    pub graph_id: String,
    pub answer: String,
    pub rationale_summary: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub specialty: Option<String>,
    pub round_produced: usize,
    pub status: RunStatus,
    /// Graph node carrying `answer`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerRevision {
    pub agent_id: String,
    pub old_answer: String,
    pub new_answer: String,
    pub reason: String,
    pub node: NodeId,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsultationRound {
    pub round_no: usize,
    pub inputs: Vec<ExpertReport>,
    pub revisions: Vec<AnswerRevision>,
    pub consensus: Option<String>,
    /// Approver feedback this round was seeded with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionStatus {
    Approved,
    Rejected,
    Escalated,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub case_id: String,
    pub final_answer: String,
    pub status: DecisionStatus,
    pub approver_id: String,
    pub feedback: String,
    pub decided_at: Timestamp,
    /// Set for severe cases: the primary doctor acting as decision agent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_agent: Option<String>,
}

/// One line of a case file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseInput {
    pub case_id: String,
    pub query: String,
    #[serde(default)]
    pub input_refs: Vec<ModalityRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity_hint: Option<CaseSeverity>,
    #[serde(default)]
    pub specialties: Vec<String>,
    #[serde(default)]
    pub period: String,
    #[serde(default)]
    pub dataset_tag: String,
    #[serde(default)]
    pub focus: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality_label: Option<String>,
}

impl CaseInput {
    pub fn new(case_id: &str, query: &str) -> Self {
        Self {
            case_id: case_id.to_string(),
            query: query.to_string(),
            input_refs: Vec::new(),
            ground_truth: None,
            severity_hint: None,
            specialties: Vec::new(),
            period: String::new(),
            dataset_tag: String::new(),
            focus: String::new(),
            modality_label: None,
        }
    }

    pub fn to_problem(&self) -> Problem {
        let mut p = Problem::new(&self.case_id, &self.query);
        p.input_refs = self.input_refs.clone();
        p.ground_truth = self.ground_truth.clone();
        p.severity_hint = self.severity_hint;
        p.specialties = self.specialties.clone();
        p.period = self.period.clone();
        p.dataset_tag = self.dataset_tag.clone();
        p.focus = self.focus.clone();
        p.modality_label = self.modality_label.clone();
        p
    }

    /// Problem rows double as cases.
    pub fn from_problem(p: &Problem) -> Self {
        Self {
            case_id: p.id.clone(),
            query: p.query.clone(),
            input_refs: p.input_refs.clone(),
            ground_truth: p.ground_truth.clone(),
            severity_hint: p.severity_hint,
            specialties: p.specialties.clone(),
            period: p.period.clone(),
            dataset_tag: p.dataset_tag.clone(),
            focus: p.focus.clone(),
            modality_label: p.modality_label.clone(),
        }
    }
}

#[derive(Debug, Error)]
pub enum CaseError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("roster is empty")]
    EmptyRoster,
    #[error("roster has no general practitioner")]
    NoGeneralPractitioner,
    #[error("roster lists agent {0:?} twice")]
    DuplicateAgent(String),
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, CaseError> {
    let text = fs::read_to_string(path).map_err(|e| CaseError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CaseError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Loads a case file. Problem-shaped rows (`id` instead of `case_id`) are
/// accepted too.
pub fn load_cases(path: &Path) -> Result<Vec<CaseInput>, CaseError> {
    let rows: Vec<serde_json::Value> = read_jsonl(path)?;
    rows.into_iter()
        .enumerate()
        .map(|(i, mut v)| {
            if let Some(obj) = v.as_object_mut() {
                if !obj.contains_key("case_id") {
                    if let Some(id) = obj.remove("id") {
                        obj.insert("case_id".into(), id);
                    }
                }
            }
            serde_json::from_value(v).map_err(|e| CaseError::Malformed {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_roster(path: &Path) -> Result<Vec<AgentSpec>, CaseError> {
    let roster: Vec<AgentSpec> = read_jsonl(path)?;
    validate_roster(&roster)?;
    Ok(roster)
}

pub fn validate_roster(roster: &[AgentSpec]) -> Result<(), CaseError> {
    if roster.is_empty() {
        return Err(CaseError::EmptyRoster);
    }
    if !roster.iter().any(|a| a.role == Role::GeneralPractitioner) {
        return Err(CaseError::NoGeneralPractitioner);
    }
    let mut seen = std::collections::HashSet::new();
    for a in roster {
        if !seen.insert(a.id.as_str()) {
            return Err(CaseError::DuplicateAgent(a.id.clone()));
        }
    }
    Ok(())
}

/// Roster used when none is configured.
pub fn default_roster() -> Vec<AgentSpec> {
    vec![
        AgentSpec::gmp("gmp"),
        AgentSpec::specialist("cardio", "cardiology"),
        AgentSpec::specialist("ortho", "orthopedics"),
        AgentSpec::specialist("neuro", "neurology"),
        AgentSpec::specialist("pulmo", "pulmonology"),
        AgentSpec::specialist("radio", "radiology"),
        AgentSpec::primary_doctor("pd"),
    ]
}

/// Keyword to specialty map used when none is configured.
pub fn default_keyword_map() -> BTreeMap<String, String> {
    [
        ("fracture", "orthopedics"),
        ("tibial", "orthopedics"),
        ("chest pain", "cardiology"),
        ("cardiomegaly", "cardiology"),
        ("arrhythmia", "cardiology"),
        ("stroke", "neurology"),
        ("seizure", "neurology"),
        ("pneumonia", "pulmonology"),
        ("radiograph", "radiology"),
        ("x-ray", "radiology"),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v.to_string()))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assessment {
    pub severity: CaseSeverity,
    pub specialties: Vec<String>,
}

/// Severity from the backend (the hint wins in scripted mode), specialties
/// from the case, the keyword map and the backend, deduplicated in order.
pub fn assess_query(
    case: &CaseInput,
    backend: &dyn Backend,
    keyword_map: &BTreeMap<String, String>,
) -> Assessment {
    let req = SeverityRequest {
        key: &case.case_id,
        query: &case.query,
        input_refs: &case.input_refs,
        hint: case.severity_hint,
    };
    let severity = backend.classify_severity(&req).unwrap_or_else(|e| {
        warn!(case = %case.case_id, error = %e, "severity classification failed, using moderate");
        CaseSeverity::Moderate
    });
    let mut specialties: Vec<String> = Vec::new();
    let mut push = |s: &str| {
        let s = s.trim().to_ascii_lowercase();
        if !s.is_empty() && !specialties.contains(&s) {
            specialties.push(s);
        }
    };
    for s in &case.specialties {
        push(s);
    }
    let q = normalize(&case.query);
    for (keyword, specialty) in keyword_map {
        if q.contains(&normalize(keyword)) {
            push(specialty);
        }
    }
    match backend.suggest_specialties(&case.query) {
        Ok(extra) => extra.iter().for_each(|s| push(s)),
        Err(e) => warn!(case = %case.case_id, error = %e, "specialty suggestion failed"),
    }
    if severity == CaseSeverity::Mild {
        specialties.clear();
    }
    Assessment { severity, specialties }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterGap {
    pub specialty: String,
    pub substitute: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activation {
    pub agents: Vec<AgentSpec>,
    pub gaps: Vec<RosterGap>,
}

impl Activation {
    /// Agents that produce analyses (everyone except the primary doctor).
    pub fn analysts(&self) -> impl Iterator<Item = &AgentSpec> {
        self.agents.iter().filter(|a| !a.is_primary_doctor())
    }

    pub fn decision_agent(&self) -> Option<&AgentSpec> {
        self.agents.iter().find(|a| a.is_primary_doctor())
    }
}

/// Severity routing over a roster. Missing specialists are replaced by a
/// general practitioner stand-in and reported as gaps.
pub fn activate_experts(
    severity: CaseSeverity,
    specialties: &[String],
    roster: &[AgentSpec],
) -> Result<Activation, CaseError> {
    validate_roster(roster)?;
    let gmp = roster
        .iter()
        .find(|a| a.role == Role::GeneralPractitioner)
        .expect("validated roster has a gmp");
    let mut agents = vec![gmp.clone()];
    let mut gaps = Vec::new();
    let substitute = |specialty: &str, gaps: &mut Vec<RosterGap>| {
        let mut a = gmp.clone();
        a.id = format!("{}+{specialty}", gmp.id);
        warn!(specialty, substitute = %a.id, "roster gap");
        gaps.push(RosterGap {
            specialty: specialty.to_string(),
            substitute: a.id.clone(),
        });
        a
    };
    let unused = |agents: &[AgentSpec], a: &AgentSpec| !agents.iter().any(|x| x.id == a.id);

    match severity {
        CaseSeverity::Mild => {}
        CaseSeverity::Moderate => {
            let wanted: Vec<String> = if specialties.is_empty() {
                roster
                    .iter()
                    .find_map(|a| a.specialty().map(str::to_string))
                    .map_or_else(|| vec!["general".to_string()], |s| vec![s])
            } else {
                specialties.to_vec()
            };
            for s in &wanted {
                let found = roster
                    .iter()
                    .find(|a| a.specialty() == Some(s.as_str()) && unused(&agents, a))
                    .cloned();
                let agent = found.unwrap_or_else(|| substitute(s, &mut gaps));
                agents.push(agent);
            }
        }
        CaseSeverity::Severe => {
            let mut teams = 0;
            for s in specialties {
                let matching: Vec<AgentSpec> = roster
                    .iter()
                    .filter(|a| a.specialty() == Some(s.as_str()) && unused(&agents, a))
                    .cloned()
                    .collect();
                if matching.is_empty() {
                    agents.push(substitute(s, &mut gaps));
                    teams += 1;
                }
                for a in matching {
                    agents.push(a);
                    teams += 1;
                }
            }
            for a in roster.iter().filter(|a| a.specialty().is_some()) {
                if teams >= 2 {
                    break;
                }
                if unused(&agents, a) {
                    agents.push(a.clone());
                    teams += 1;
                }
            }
            while teams < 2 {
                let tag = format!("general-{teams}");
                agents.push(substitute(&tag, &mut gaps));
                teams += 1;
            }
            let pd = roster.iter().find(|a| a.is_primary_doctor()).cloned().unwrap_or_else(|| {
                let mut a = substitute("primary-doctor", &mut gaps);
                a.role = Role::PrimaryDoctor;
                a
            });
            agents.push(pd);
        }
    }
    Ok(Activation { agents, gaps })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseState {
    Running,
    PendingReview,
    Decided,
}

/// Everything recorded about one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub version: u32,
    pub case_id: String,
    pub period: String,
    pub state: CaseState,
    pub severity: Option<CaseSeverity>,
    pub specialties: Vec<String>,
    pub agents: Vec<AgentSpec>,
    pub gaps: Vec<RosterGap>,
    /// Reports as produced by the analysis stage.
    pub initial_reports: Vec<ExpertReport>,
    /// Reports after the last consultation round.
    pub reports: Vec<ExpertReport>,
    pub synthesis: Option<String>,
    pub rounds: Vec<ConsultationRound>,
    pub decision: Option<Decision>,
    pub notices: Vec<String>,
}

impl CaseRecord {
    pub fn new(case: &CaseInput) -> Self {
        Self {
            version: crate::store::RECORD_VERSION,
            case_id: case.case_id.clone(),
            period: case.period.clone(),
            state: CaseState::Running,
            severity: None,
            specialties: Vec::new(),
            agents: Vec::new(),
            gaps: Vec::new(),
            initial_reports: Vec::new(),
            reports: Vec::new(),
            synthesis: None,
            rounds: Vec::new(),
            decision: None,
            notices: Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::ScriptedBackend;

    fn specs(n: &[String]) -> Vec<String> {
        n.to_vec()
    }

    #[test]
    fn mild_is_gmp_only() {
        let a = activate_experts(CaseSeverity::Mild, &["cardiology".into()], &default_roster()).unwrap();
        assert_eq!(a.agents.len(), 1);
        assert_eq!(a.agents[0].role, Role::GeneralPractitioner);
    }

    #[test]
    fn moderate_adds_one_per_specialty() {
        let a = activate_experts(CaseSeverity::Moderate, &["cardiology".into()], &default_roster()).unwrap();
        assert_eq!(a.agents.len(), 2);
        let a = activate_experts(CaseSeverity::Moderate, &[], &default_roster()).unwrap();
        assert_eq!(a.agents.len(), 2);
        let two = specs(&["cardiology".into(), "neurology".into()]);
        assert_eq!(activate_experts(CaseSeverity::Moderate, &two, &default_roster()).unwrap().agents.len(), 3);
    }

    #[test]
    fn severe_brings_teams_and_pd() {
        let mut roster = default_roster();
        roster.push(AgentSpec::specialist("cardio2", "cardiology"));
        let a = activate_experts(
            CaseSeverity::Severe,
            &["cardiology".into(), "radiology".into()],
            &roster,
        )
        .unwrap();
        // gmp + cardio + cardio2 + radio + pd
        assert_eq!(a.agents.len(), 5);
        assert_eq!(a.decision_agent().unwrap().id, "pd");
        assert_eq!(a.analysts().count(), 4);
        let a = activate_experts(CaseSeverity::Severe, &[], &roster).unwrap();
        assert!(a.agents.len() >= 4);
    }

    #[test]
    fn gaps_substitute_gmp() {
        let roster = vec![AgentSpec::gmp("g")];
        let a = activate_experts(CaseSeverity::Moderate, &["dermatology".into()], &roster).unwrap();
        assert_eq!(a.agents.len(), 2);
        assert_eq!(a.gaps, vec![RosterGap { specialty: "dermatology".into(), substitute: "g+dermatology".into() }]);
        let a = activate_experts(CaseSeverity::Severe, &[], &roster).unwrap();
        assert_eq!(a.agents.len(), 4);
        assert!(a.decision_agent().is_some());
        assert!(matches!(activate_experts(CaseSeverity::Mild, &[], &[]), Err(CaseError::EmptyRoster)));
    }

    #[test]
    fn assessment_uses_hint_and_keywords() {
        let b = ScriptedBackend::new([]);
        let mut c = CaseInput::new("c1", "Knee pain after fall, tibial plateau fracture suspected");
        c.severity_hint = Some(CaseSeverity::Moderate);
        let a = assess_query(&c, &b, &default_keyword_map());
        assert_eq!(a.severity, CaseSeverity::Moderate);
        assert_eq!(a.specialties, vec!["orthopedics"]);
        c.severity_hint = Some(CaseSeverity::Mild);
        let a = assess_query(&c, &b, &default_keyword_map());
        assert_eq!(a, Assessment { severity: CaseSeverity::Mild, specialties: vec![] });
    }

    #[test]
    fn roster_round_trips_as_jsonl() {
        let line = r#"{"id":"cardio","role":"specialist","specialty":"cardiology","overrides":{"max_iterations":4}}"#;
        let a: AgentSpec = serde_json::from_str(line).unwrap();
        assert_eq!(a.specialty(), Some("cardiology"));
        assert_eq!(a.overrides.max_iterations, Some(4));
        let back: AgentSpec = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        assert_eq!(back, a);
    }
}
