use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backends::{answers_agree, modal_answer};
use crate::store::{ArchivedPeriod, RunRecord};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseDiff {
    pub case_id: String,
    pub answer_a: String,
    pub answer_b: String,
    pub answer_changed: bool,
    /// b minus a.
    pub latency_delta_ms: i64,
    pub volume_delta: i64,
    pub reason_diff: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PeriodDiff {
    pub period_a: String,
    pub period_b: String,
    /// Matching cases where anything changed.
    pub changed: Vec<CaseDiff>,
    pub only_in_a: Vec<String>,
    pub only_in_b: Vec<String>,
}

impl PeriodDiff {
    pub fn is_empty(&self) -> bool {
        self.changed.is_empty() && self.only_in_a.is_empty() && self.only_in_b.is_empty()
    }
}

struct CaseView {
    answer: String,
    latency_ms: u64,
    volume: usize,
    reason: String,
}

fn views(period: &ArchivedPeriod) -> BTreeMap<String, CaseView> {
    let mut by_case: BTreeMap<String, Vec<&RunRecord>> = BTreeMap::new();
    for r in &period.runs {
        let key = r.case_id.clone().unwrap_or_else(|| r.problem_id.clone());
        by_case.entry(key).or_default().push(r);
    }
    by_case
        .into_iter()
        .map(|(case, mut runs)| {
            runs.sort_by(|a, b| a.run_id.cmp(&b.run_id));
            let decided = period
                .cases
                .get(&case)
                .and_then(|c| c.pointer("/decision/final_answer"))
                .and_then(|v| v.as_str())
                .map(str::to_string);
            let answers: Vec<&str> = runs.iter().map(|r| r.answer.as_str()).collect();
            let view = CaseView {
                answer: decided.or_else(|| modal_answer(&answers)).unwrap_or_default(),
                latency_ms: runs.iter().map(|r| r.latency_ms).max().unwrap_or(0),
                volume: runs.iter().map(|r| r.volume).max().unwrap_or(0),
                reason: runs.iter().map(|r| r.final_reason.as_str()).collect::<Vec<_>>().join("\n"),
            };
            (case, view)
        })
        .collect()
}

/// Word-level change summary between two rationales, e.g. `-3 +5 words`.
pub fn reason_diff_summary(a: &str, b: &str) -> String {
    let wa: Vec<&str> = a.split_whitespace().collect();
    let wb: Vec<&str> = b.split_whitespace().collect();
    // Longest common subsequence over words; rationales are short.
    let mut lcs = vec![vec![0usize; wb.len() + 1]; wa.len() + 1];
    for i in (0..wa.len()).rev() {
        for j in (0..wb.len()).rev() {
            lcs[i][j] = if wa[i] == wb[j] {
                lcs[i + 1][j + 1] + 1
            } else {
                lcs[i + 1][j].max(lcs[i][j + 1])
            };
        }
    }
    let common = lcs[0][0];
    let (removed, added) = (wa.len() - common, wb.len() - common);
    if removed == 0 && added == 0 {
        "unchanged".into()
    } else {
        format!("-{removed} +{added} words")
    }
}

/// Compares two archived periods case by case.
pub fn compare_periods(a: &ArchivedPeriod, b: &ArchivedPeriod) -> PeriodDiff {
    let va = views(a);
    let vb = views(b);
    let mut changed = Vec::new();
    for (case, x) in &va {
        let Some(y) = vb.get(case) else { continue };
        let answer_changed = !answers_agree(&x.answer, &y.answer);
        let latency_delta_ms = y.latency_ms as i64 - x.latency_ms as i64;
        let volume_delta = y.volume as i64 - x.volume as i64;
        let reason_changed = x.reason != y.reason;
        if answer_changed || latency_delta_ms != 0 || volume_delta != 0 || reason_changed {
            changed.push(CaseDiff {
                case_id: case.clone(),
                answer_a: x.answer.clone(),
                answer_b: y.answer.clone(),
                answer_changed,
                latency_delta_ms,
                volume_delta,
                reason_diff: reason_diff_summary(&x.reason, &y.reason),
            });
        }
    }
    PeriodDiff {
        period_a: a.label.clone(),
        period_b: b.label.clone(),
        changed,
        only_in_a: va.keys().filter(|k| !vb.contains_key(*k)).cloned().collect(),
        only_in_b: vb.keys().filter(|k| !va.contains_key(*k)).cloned().collect(),
    }
}
