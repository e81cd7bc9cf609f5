use std::collections::{BTreeSet, HashMap};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tracing::warn;

use super::{Problem, Split, StoreError};
use crate::backends::verify::as_choice_letter;
use crate::backends::{normalize, Backend, ChoiceOption, SeverityRequest};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CurationNote {
    Duplicate { problem_id: String, kept: String },
    SeverityFilled { problem_id: String, severity: crate::orchestrator::CaseSeverity },
    Rewritten { problem_id: String, variant: String },
    RewriteFailed { problem_id: String, message: String },
    Rejected { problem_id: String, reason: String },
    Ungated { problem_id: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationReport {
    pub input: usize,
    pub kept: usize,
    pub notes: Vec<CurationNote>,
}

/// Suffix of the id given to open-ended rewrites.
pub const OPEN_VARIANT_SUFFIX: &str = "~open";

/// Hash of the trimmed, case-folded, whitespace-collapsed query.
pub fn query_key(query: &str) -> String {
    let folded = query.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    hex::encode(Sha256::digest(folded.as_bytes()))
}

fn choice_marker() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?:^|\s)\(?([A-E])[\)\.]\s+").expect("valid regex"))
}

/// Splits a closed-form query into its stem and the `A) ... B) ...` options.
/// Needs at least two consecutive letters starting at `A`.
pub fn parse_choice_options(query: &str) -> Option<(String, Vec<ChoiceOption>)> {
    let mut marks: Vec<(char, usize, usize)> = Vec::new();
    for caps in choice_marker().captures_iter(query) {
        let whole = caps.get(0).expect("match");
        let letter = caps[1].chars().next().expect("one letter");
        let expected = char::from(b'A' + marks.len() as u8);
        if letter == expected {
            let start = whole.start() + (whole.as_str().len() - whole.as_str().trim_start().len());
            marks.push((letter, start, whole.end()));
        }
    }
    if marks.len() < 2 {
        return None;
    }
    let stem = query[..marks[0].1].trim().to_string();
    let options = marks
        .iter()
        .enumerate()
        .map(|(i, (letter, _, body))| {
            let end = marks.get(i + 1).map_or(query.len(), |m| m.1);
            ChoiceOption {
                letter: *letter,
                text: query[*body..end].trim().trim_end_matches([',', ';']).trim().to_string(),
            }
        })
        .collect();
    Some((stem, options))
}

/// Deterministic closed-to-open rewrite: the query with its option list
/// removed.
pub fn strip_choice_list(query: &str, options: &[ChoiceOption]) -> String {
    match parse_choice_options(query) {
        Some((stem, _)) if !stem.is_empty() => stem,
        _ => {
            let mut q = query.to_string();
            for o in options {
                q = q.replace(&o.text, "");
            }
            q.trim().to_string()
        }
    }
}

/// Dedup, severity fill, closed-to-open rewriting and format checks.
/// Nothing is fatal; every issue lands in the report. Running it again on
/// its own output is a no-op.
pub fn curate(problems: Vec<Problem>, backend: Option<&dyn Backend>) -> (Vec<Problem>, CurationReport) {
    let mut report = CurationReport {
        input: problems.len(),
        ..CurationReport::default()
    };
    let mut seen: HashMap<String, String> = HashMap::new();
    let mut ids: BTreeSet<String> = problems.iter().map(|p| p.id.clone()).collect();
    let mut out = Vec::new();

    for mut p in problems {
        if let Some(reason) = format_problem(&p) {
            report.notes.push(CurationNote::Rejected { problem_id: p.id.clone(), reason });
            continue;
        }
        let key = query_key(&p.query);
        if let Some(kept) = seen.get(&key) {
            report.notes.push(CurationNote::Duplicate { problem_id: p.id.clone(), kept: kept.clone() });
            continue;
        }
        seen.insert(key, p.id.clone());

        if p.severity_hint.is_none() {
            if let Some(b) = backend {
                let req = SeverityRequest {
                    key: &p.id,
                    query: &p.query,
                    input_refs: &p.input_refs,
                    hint: None,
                };
                match b.classify_severity(&req) {
                    Ok(s) => {
                        p.severity_hint = Some(s);
                        report.notes.push(CurationNote::SeverityFilled { problem_id: p.id.clone(), severity: s });
                    }
                    Err(e) => warn!(problem = %p.id, error = %e, "severity classification failed"),
                }
            }
        }
        if p.gate().is_none() {
            report.notes.push(CurationNote::Ungated { problem_id: p.id.clone() });
        }

        let variant = match (backend, p.variant_of.is_none()) {
            (Some(b), true) => open_variant(b, &p, &ids, &mut report),
            _ => None,
        };
        out.push(p);
        if let Some(v) = variant {
            ids.insert(v.id.clone());
            seen.insert(query_key(&v.query), v.id.clone());
            out.push(v);
        }
    }
    report.kept = out.len();
    (out, report)
}

fn format_problem(p: &Problem) -> Option<String> {
    if p.id.trim().is_empty() {
        return Some("empty id".into());
    }
    if p.query.trim().is_empty() {
        return Some("empty query".into());
    }
    if p.input_refs.iter().any(|r| r.locator.trim().is_empty()) {
        return Some("input reference with empty locator".into());
    }
    None
}

fn open_variant(
    backend: &dyn Backend,
    p: &Problem,
    ids: &BTreeSet<String>,
    report: &mut CurationReport,
) -> Option<Problem> {
    let (_, options) = parse_choice_options(&p.query)?;
    let id = format!("{}{OPEN_VARIANT_SUFFIX}", p.id);
    if ids.contains(&id) {
        // already rewritten on an earlier pass
        return None;
    }
    let query = match backend.rewrite_open_ended(&p.query, &options) {
        Ok(q) if !q.trim().is_empty() => q,
        Ok(_) => {
            report.notes.push(CurationNote::RewriteFailed {
                problem_id: p.id.clone(),
                message: "empty rewrite".into(),
            });
            return None;
        }
        Err(e) => {
            report.notes.push(CurationNote::RewriteFailed { problem_id: p.id.clone(), message: e.to_string() });
            return None;
        }
    };
    let ground_truth = p.ground_truth.as_ref().map(|gt| {
        as_choice_letter(&normalize(gt))
            .and_then(|l| options.iter().find(|o| o.letter.eq_ignore_ascii_case(&l)))
            .map_or_else(|| gt.clone(), |o| o.text.clone())
    });
    report.notes.push(CurationNote::Rewritten { problem_id: p.id.clone(), variant: id.clone() });
    Some(Problem {
        id,
        query,
        ground_truth,
        variant_of: Some(p.id.clone()),
        ..p.clone()
    })
}

/// How to carve the reasoning set out of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSpec {
    Fraction { fraction: f64, seed: u64 },
    Ids(Vec<String>),
}

/// Partitions problems into the reasoning set and the training remainder.
/// Both halves keep input order and are tagged with their split.
pub fn break_dataset(
    problems: Vec<Problem>,
    spec: &SplitSpec,
) -> Result<(Vec<Problem>, Vec<Problem>), StoreError> {
    let chosen: BTreeSet<String> = match spec {
        SplitSpec::Fraction { fraction, seed } => {
            if !(0.0..=1.0).contains(fraction) {
                return Err(StoreError::InvalidSplit(format!("fraction {fraction} outside [0, 1]")));
            }
            let mut ids: Vec<&str> = problems.iter().map(|p| p.id.as_str()).collect();
            ids.sort_unstable();
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            ids.shuffle(&mut rng);
            let take = (fraction * ids.len() as f64).round() as usize;
            ids.into_iter().take(take).map(str::to_string).collect()
        }
        SplitSpec::Ids(list) => {
            let known: BTreeSet<&str> = problems.iter().map(|p| p.id.as_str()).collect();
            if let Some(missing) = list.iter().find(|id| !known.contains(id.as_str())) {
                return Err(StoreError::InvalidSplit(format!("unknown problem id {missing:?}")));
            }
            list.iter().cloned().collect()
        }
    };
    let (mut reasoning, mut training): (Vec<_>, Vec<_>) =
        problems.into_iter().partition(|p| chosen.contains(&p.id));
    for p in &mut reasoning {
        p.split = Some(Split::Reasoning);
    }
    for p in &mut training {
        p.split = Some(Split::Training);
    }
    Ok((reasoning, training))
}
