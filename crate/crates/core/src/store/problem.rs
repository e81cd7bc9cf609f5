use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use super::StoreError;
use crate::backends::ModalityRef;
use crate::orchestrator::CaseSeverity;

/// Which side of the reasoning/training split a problem landed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Reasoning,
    Training,
}

/// A verifiable query. Unknown fields survive a load/save round trip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub query: String,
    #[serde(default)]
    pub input_refs: Vec<ModalityRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub severity_hint: Option<CaseSeverity>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub specialties: Vec<String>,
    #[serde(default)]
    pub period: String,
    #[serde(default)]
    pub dataset_tag: String,
    #[serde(default)]
    pub focus: String,
    /// Explicit modality column label, e.g. `Text (EHR + DB)`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub modality_label: Option<String>,
    /// Set on open-ended rewrites: the id of the closed-form original.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant_of: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

const KNOWN_FIELDS: &[&str] = &[
    "id",
    "query",
    "input_refs",
    "ground_truth",
    "severity_hint",
    "specialties",
    "period",
    "dataset_tag",
    "focus",
    "modality_label",
    "variant_of",
    "split",
];

impl Problem {
    pub fn new(id: impl Into<String>, query: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            query: query.into(),
            input_refs: Vec::new(),
            ground_truth: None,
            severity_hint: None,
            specialties: Vec::new(),
            period: String::new(),
            dataset_tag: String::new(),
            focus: String::new(),
            modality_label: None,
            variant_of: None,
            split: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn with_ground_truth(mut self, gt: impl Into<String>) -> Self {
        self.ground_truth = Some(gt.into());
        self
    }

    /// Ground truth if present and non-blank.
    pub fn gate(&self) -> Option<&str> {
        self.ground_truth
            .as_deref()
            .filter(|g| !g.trim().is_empty())
    }

    /// Modality column: explicit label, else the distinct input modalities in
    /// declaration order joined with ` + `.
    pub fn modality_type(&self) -> String {
        if let Some(l) = &self.modality_label {
            return l.clone();
        }
        let mut seen = Vec::new();
        for r in &self.input_refs {
            if !seen.contains(&r.modality) {
                seen.push(r.modality);
            }
        }
        if seen.is_empty() {
            return "Text".into();
        }
        seen.iter().map(|m| m.label()).collect::<Vec<_>>().join(" + ")
    }

    pub fn input_digest(&self) -> String {
        input_digest(&self.input_refs)
    }

    /// Validates one JSON object, naming the offending field on failure.
    pub fn from_value(line: usize, value: Value) -> Result<Self, StoreError> {
        let Value::Object(mut obj) = value else {
            return Err(StoreError::Schema {
                line,
                field: "<record>".into(),
                message: "expected a JSON object".into(),
            });
        };
        let id: String = required(&mut obj, line, "id")?;
        let query: String = required(&mut obj, line, "query")?;
        for (name, v) in [("id", &id), ("query", &query)] {
            if v.trim().is_empty() {
                return Err(StoreError::Schema {
                    line,
                    field: name.into(),
                    message: "must be non-empty".into(),
                });
            }
        }
        let input_refs: Vec<ModalityRef> = optional(&mut obj, line, "input_refs")?.unwrap_or_default();
        if let Some(i) = input_refs.iter().position(|r| r.locator.trim().is_empty()) {
            return Err(StoreError::Schema {
                line,
                field: format!("input_refs[{i}].locator"),
                message: "must be non-empty".into(),
            });
        }
        let problem = Self {
            id,
            query,
            input_refs,
            ground_truth: optional(&mut obj, line, "ground_truth")?,
            severity_hint: optional(&mut obj, line, "severity_hint")?,
            specialties: optional(&mut obj, line, "specialties")?.unwrap_or_default(),
            period: optional(&mut obj, line, "period")?.unwrap_or_default(),
            dataset_tag: optional(&mut obj, line, "dataset_tag")?.unwrap_or_default(),
            focus: optional(&mut obj, line, "focus")?.unwrap_or_default(),
            modality_label: optional(&mut obj, line, "modality_label")?,
            variant_of: optional(&mut obj, line, "variant_of")?,
            split: optional(&mut obj, line, "split")?,
            extra: obj
                .into_iter()
                .filter(|(k, _)| !KNOWN_FIELDS.contains(&k.as_str()))
                .collect(),
        };
        Ok(problem)
    }
}

fn required<T: DeserializeOwned>(
    obj: &mut Map<String, Value>,
    line: usize,
    field: &str,
) -> Result<T, StoreError> {
    match obj.remove(field) {
        None | Some(Value::Null) => Err(StoreError::Schema {
            line,
            field: field.into(),
            message: "missing required field".into(),
        }),
        Some(v) => serde_json::from_value(v).map_err(|e| StoreError::Schema {
            line,
            field: field.into(),
            message: e.to_string(),
        }),
    }
}

fn optional<T: DeserializeOwned>(
    obj: &mut Map<String, Value>,
    line: usize,
    field: &str,
) -> Result<Option<T>, StoreError> {
    match obj.remove(field) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v).map(Some).map_err(|e| StoreError::Schema {
            line,
            field: field.into(),
            message: e.to_string(),
        }),
    }
}

/// Stable hash of an input reference list.
pub fn input_digest(refs: &[ModalityRef]) -> String {
    let bytes = serde_json::to_vec(refs).expect("modality refs serialize");
    hex::encode(Sha256::digest(&bytes))
}

pub fn parse_problems(text: &str) -> Result<Vec<Problem>, StoreError> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| StoreError::Schema {
            line: line_no,
            field: "<record>".into(),
            message: e.to_string(),
        })?;
        let p = Problem::from_value(line_no, value)?;
        if !ids.insert(p.id.clone()) {
            return Err(StoreError::DuplicateId {
                line: line_no,
                id: p.id,
            });
        }
        out.push(p);
    }
    Ok(out)
}

pub fn load_problems(path: &Path) -> Result<Vec<Problem>, StoreError> {
    let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    parse_problems(&text)
}

pub fn write_problems(path: &Path, problems: &[Problem]) -> Result<(), StoreError> {
    let mut text = String::new();
    for p in problems {
        text.push_str(&serde_json::to_string(p).expect("problem serializes"));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| StoreError::io(path, e))
}
