//! Retrieval over a local document corpus and per-step knowledge synthesis.
//!
//! Ranking is a plain tf-idf overlap: for each distinct query token `t`,
//! `tf(t, d) * ln(1 + N / df(t))`, summed. Ties break on ascending document
//! id so results are reproducible.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{Backend, BackendError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeItem {
    pub id: String,
    pub source: String,
    pub text: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    #[serde(default)]
    pub title: String,
    pub body: String,
    #[serde(default)]
    pub tags: Vec<String>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CorpusError {
    #[error("duplicate document id {0:?}")]
    DuplicateId(String),
    #[error("malformed document at line {line}: {message}")]
    MalformedDocument { line: usize, message: String },
    #[error("reading {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Posting {
    doc: usize,
    tf: u32,
}

/// Immutable indexed corpus.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    documents: Vec<Document>,
    index: BTreeMap<String, Vec<Posting>>,
}

/// Lowercase alphanumeric word tokens.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

pub trait Retriever: Send + Sync {
    fn retrieve(&self, query: &str, top_k: usize) -> Vec<KnowledgeItem>;

    fn contains(&self, id: &str) -> bool;
}

impl Corpus {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn index(documents: Vec<Document>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::new();
        for (i, d) in documents.iter().enumerate() {
            if d.id.trim().is_empty() {
                return Err(CorpusError::MalformedDocument {
                    line: i + 1,
                    message: "empty id".into(),
                });
            }
            if d.body.trim().is_empty() {
                return Err(CorpusError::MalformedDocument {
                    line: i + 1,
                    message: format!("document {:?} has an empty body", d.id),
                });
            }
            if !seen.insert(d.id.clone()) {
                return Err(CorpusError::DuplicateId(d.id.clone()));
            }
        }
        let mut index: BTreeMap<String, Vec<Posting>> = BTreeMap::new();
        for (doc, d) in documents.iter().enumerate() {
            let mut counts: BTreeMap<String, u32> = BTreeMap::new();
            for t in tokenize(&d.title).chain(tokenize(&d.body)) {
                *counts.entry(t).or_default() += 1;
            }
            for (t, tf) in counts {
                index.entry(t).or_default().push(Posting { doc, tf });
            }
        }
        Ok(Self { documents, index })
    }

    pub fn from_jsonl(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|e| CorpusError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        Self::parse_jsonl(&text)
    }

    pub fn parse_jsonl(text: &str) -> Result<Self, CorpusError> {
        let mut docs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let d: Document =
                serde_json::from_str(line).map_err(|e| CorpusError::MalformedDocument {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            docs.push(d);
        }
        Self::index(docs)
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn posting_len(&self, token: &str) -> usize {
        self.index.get(token).map_or(0, Vec::len)
    }

    pub fn document(&self, id: &str) -> Option<&Document> {
        self.documents.iter().find(|d| d.id == id)
    }
}

impl Retriever for Corpus {
    fn retrieve(&self, query: &str, top_k: usize) -> Vec<KnowledgeItem> {
        if top_k == 0 || self.documents.is_empty() {
            return Vec::new();
        }
        let n = self.documents.len() as f64;
        let mut scores = vec![0.0_f64; self.documents.len()];
        let terms: BTreeSet<String> = tokenize(query).collect();
        for t in &terms {
            let Some(postings) = self.index.get(t) else {
                continue;
            };
            let idf = (1.0 + n / postings.len() as f64).ln();
            for p in postings {
                scores[p.doc] += f64::from(p.tf) * idf;
            }
        }
        let mut ranked: Vec<(usize, f64)> = scores
            .into_iter()
            .enumerate()
            .filter(|(_, s)| *s > 0.0)
            .collect();
        ranked.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.documents[a.0].id.cmp(&self.documents[b.0].id))
        });
        ranked
            .into_iter()
            .take(top_k)
            .map(|(i, score)| {
                let d = &self.documents[i];
                KnowledgeItem {
                    id: d.id.clone(),
                    source: d.id.clone(),
                    text: d.body.clone(),
                    score,
                }
            })
            .collect()
    }

    fn contains(&self, id: &str) -> bool {
        self.documents.iter().any(|d| d.id == id)
    }
}

/// Knowledge text for one step with the ids it was built from.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepKnowledge {
    pub text: String,
    pub refs: Vec<String>,
}

/// Condenses retrieved items into step knowledge. An empty retrieval yields
/// empty knowledge without consulting the backend.
pub fn synthesize_knowledge(
    backend: &dyn Backend,
    query: &str,
    retrieved: &[KnowledgeItem],
) -> Result<StepKnowledge, BackendError> {
    if retrieved.is_empty() {
        return Ok(StepKnowledge::default());
    }
    let text = backend.synthesize_knowledge(query, retrieved)?;
    Ok(StepKnowledge {
        text,
        refs: retrieved.iter().map(|k| k.id.clone()).collect(),
    })
}
