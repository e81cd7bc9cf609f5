//! Verifiable rewards and the small amount of arithmetic around them.
//!
//! Nothing here trains anything. The functions score model outputs, normalize
//! rewards within a sampling group, estimate the KL penalty from externally
//! supplied log-probabilities and evaluate the supervised loss.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{verify, VerifyError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("ground truth is empty")]
    EmptyGroundTruth,
    #[error("reward group is empty")]
    EmptyGroup,
    #[error("non-finite input {0}")]
    NonFinite(f64),
    #[error("log-probability {value} at position {index} is positive")]
    PositiveLogProb { index: usize, value: f64 },
}

impl From<VerifyError> for RewardError {
    fn from(_: VerifyError) -> Self {
        Self::EmptyGroundTruth
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: u8,
    pub accuracy: u8,
    pub total: u8,
}

impl RewardBreakdown {
    pub fn new(format: u8, accuracy: u8) -> Self {
        Self {
            format,
            accuracy,
            total: format + accuracy,
        }
    }
}

fn template() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?s)\A<think>(.*?)</think>\s*<answer>(.*?)</answer>\z").expect("valid regex")
    })
}

const TAGS: [&str; 4] = ["<think>", "</think>", "<answer>", "</answer>"];

/// 1 iff the trimmed output is exactly one think block followed by exactly
/// one answer block, with nothing else around them and no repeated or
/// nested tags.
pub fn format_reward(raw: &str) -> u8 {
    let text = raw.trim();
    if TAGS.iter().any(|t| text.matches(t).count() != 1) {
        return 0;
    }
    match template().captures(text) {
        Some(c) if !c[1].trim().is_empty() && !c[2].trim().is_empty() => 1,
        _ => 0,
    }
}

/// Answer-block contents, or the whole output when it has no answer block.
pub fn extract_answer(raw: &str) -> &str {
    match (raw.find("<answer>"), raw.find("</answer>")) {
        (Some(s), Some(e)) if s + "<answer>".len() <= e => &raw[s + "<answer>".len()..e],
        _ => raw,
    }
}

pub fn accuracy_reward(raw: &str, ground_truth: &str) -> Result<u8, RewardError> {
    Ok(u8::from(verify(extract_answer(raw), ground_truth)?))
}

pub fn score(raw: &str, ground_truth: &str) -> Result<RewardBreakdown, RewardError> {
    Ok(RewardBreakdown::new(format_reward(raw), accuracy_reward(raw, ground_truth)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageVector {
    pub values: Vec<f64>,
    pub group_size: usize,
}

/// `(r - mean) / std` with the population standard deviation. A group whose
/// rewards are all equal gets all-zero advantages.
pub fn group_advantages(rewards: &[f64]) -> Result<AdvantageVector, RewardError> {
    if rewards.is_empty() {
        return Err(RewardError::EmptyGroup);
    }
    if let Some(bad) = rewards.iter().find(|r| !r.is_finite()) {
        return Err(RewardError::NonFinite(*bad));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let values = if rewards.iter().all(|r| *r == rewards[0]) || std == 0.0 {
        vec![0.0; rewards.len()]
    } else {
        rewards.iter().map(|r| (r - mean) / std).collect()
    };
    Ok(AdvantageVector {
        values,
        group_size: rewards.len(),
    })
}

/// Unbiased estimator `r - ln r - 1` with `r = exp(logp_ref - logp_current)`.
pub fn kl_unbiased(logp_current: f64, logp_ref: f64) -> Result<f64, RewardError> {
    for v in [logp_current, logp_ref] {
        if !v.is_finite() {
            return Err(RewardError::NonFinite(v));
        }
    }
    let d = logp_ref - logp_current;
    // r - ln r - 1 = exp(d) - d - 1; expm1 keeps precision near zero
    Ok((d.exp_m1() - d).max(0.0))
}

/// Negative log-likelihood of a token sequence.
pub fn sft_nll(token_logprobs: &[f64]) -> Result<f64, RewardError> {
    for (index, &value) in token_logprobs.iter().enumerate() {
        if !value.is_finite() {
            return Err(RewardError::NonFinite(value));
        }
        if value > 0.0 {
            return Err(RewardError::PositiveLogProb { index, value });
        }
    }
    Ok(-token_logprobs.iter().sum::<f64>())
}

/// One input line of the reward scoring command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreInput {
    pub raw_output: String,
    pub ground_truth: String,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub line: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<String>,
    pub reward: RewardBreakdown,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub advantage: Option<f64>,
}

/// Scores every record and, when `group_key` is given, attaches the
/// group-relative advantage of each record's total reward.
pub fn score_records(
    records: &[ScoreInput],
    group_key: Option<&str>,
) -> Result<Vec<ScoredRecord>, RewardError> {
    let mut out = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let group = group_key.map(|k| match r.extra.get(k) {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(v) => v.to_string(),
            None => String::new(),
        });
        out.push(ScoredRecord {
            line: i + 1,
            group,
            reward: score(&r.raw_output, &r.ground_truth)?,
            advantage: None,
        });
    }
    if group_key.is_some() {
        let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in out.iter().enumerate() {
            groups.entry(s.group.clone().unwrap_or_default()).or_default().push(i);
        }
        for members in groups.values() {
            let rewards: Vec<f64> = members.iter().map(|&i| f64::from(out[i].reward.total)).collect();
            let adv = group_advantages(&rewards)?;
            for (&i, a) in members.iter().zip(adv.values) {
                out[i].advantage = Some(a);
            }
        }
    }
    Ok(out)
}
