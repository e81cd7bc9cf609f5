use std::collections::BTreeMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{record_accuracy, MetricsError};
use crate::store::RunRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupField {
    Dataset,
    Focus,
    Modality,
    Period,
}

impl GroupField {
    pub const ALL: [GroupField; 4] = [Self::Dataset, Self::Focus, Self::Modality, Self::Period];

    /// Parses a comma-separated list such as `dataset,period`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>, MetricsError> {
        let mut out: Vec<Self> = s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect::<Result<_, _>>()?;
        out.sort();
        out.dedup();
        Ok(out)
    }
}

impl FromStr for GroupField {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "dataset" | "dataset_tag" => Ok(Self::Dataset),
            "focus" => Ok(Self::Focus),
            "modality" => Ok(Self::Modality),
            "period" => Ok(Self::Period),
            _ => Err(MetricsError::UnknownGroup(s.to_string())),
        }
    }
}

const ANY: &str = "*";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub dataset_tag: String,
    pub focus: String,
    pub modality: String,
    pub period: String,
    /// Over runs with a ground truth; absent when none had one.
    pub accuracy: Option<f64>,
    pub mean_time_s: f64,
    pub mean_efficiency: Option<f64>,
    pub mean_volume: f64,
    pub runs: usize,
    pub graded: usize,
}

/// Series (a): per task accuracy against efficiency, one point per dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPoint {
    pub task: String,
    pub accuracy: Option<f64>,
    pub mean_time_s: f64,
    /// Row-level analogue of step efficiency: accuracy over mean time.
    pub efficiency: Option<f64>,
}

/// Series (b): accuracy per modality within a period, with the period's
/// span on a shared time axis (seconds).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityBar {
    pub period: String,
    pub modality: String,
    pub accuracy: Option<f64>,
    pub runs: usize,
    pub span_start_s: f64,
    pub span_end_s: f64,
}

/// Series (c): agents working per period against that period's accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentPoint {
    pub period: String,
    pub agents: usize,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChartSeries {
    pub accuracy_efficiency: Vec<TaskPoint>,
    pub modality_bars: Vec<ModalityBar>,
    pub agents_per_period: Vec<AgentPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    /// Period filter the report was built with, `*` for all.
    pub period: String,
    pub group_by: Vec<GroupField>,
    pub rows: Vec<BenchRow>,
    pub series: ChartSeries,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, sum) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| sum / n as f64)
}

/// Labels in order of first appearance.
fn first_seen<'r>(labels: impl Iterator<Item = &'r str>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for l in labels {
        if !out.iter().any(|o| o == l) {
            out.push(l.to_string());
        }
    }
    out
}

fn row_of(key: [String; 4], runs: &[&RunRecord]) -> BenchRow {
    let [dataset_tag, focus, modality, period] = key;
    BenchRow {
        dataset_tag,
        focus,
        modality,
        period,
        accuracy: record_accuracy(runs.iter().copied()),
        mean_time_s: mean(runs.iter().map(|r| r.latency_ms as f64 / 1000.0)).unwrap_or(0.0),
        mean_efficiency: mean(runs.iter().filter_map(|r| r.mean_efficiency)),
        mean_volume: mean(runs.iter().map(|r| r.volume as f64)).unwrap_or(0.0),
        runs: runs.len(),
        graded: runs.iter().filter(|r| r.correct.is_some()).count(),
    }
}

/// Groups run records into rows (fields not grouped on read `*`) and
/// derives the three chart series. `period` restricts the selection.
pub fn build_report(
    records: &[RunRecord],
    period: Option<&str>,
    group_by: &[GroupField],
) -> Result<BenchReport, MetricsError> {
    let selected: Vec<&RunRecord> = records
        .iter()
        .filter(|r| period.is_none_or(|p| r.period == p))
        .collect();
    if selected.is_empty() {
        return Err(MetricsError::EmptySelection);
    }
    let group_by: Vec<GroupField> = if group_by.is_empty() {
        GroupField::ALL.to_vec()
    } else {
        group_by.to_vec()
    };
    let pick = |field: GroupField, value: &str| {
        if group_by.contains(&field) {
            value.to_string()
        } else {
            ANY.to_string()
        }
    };
    let mut groups: BTreeMap<[String; 4], Vec<&RunRecord>> = BTreeMap::new();
    for r in &selected {
        let key = [
            pick(GroupField::Dataset, &r.dataset_tag),
            pick(GroupField::Focus, &r.focus),
            pick(GroupField::Modality, &r.modality),
            pick(GroupField::Period, &r.period),
        ];
        groups.entry(key).or_default().push(r);
    }
    let rows = groups.into_iter().map(|(k, v)| row_of(k, &v)).collect();

    let accuracy_efficiency = first_seen(selected.iter().map(|r| r.dataset_tag.as_str()))
        .into_iter()
        .map(|task| {
            let runs: Vec<&RunRecord> = selected.iter().copied().filter(|r| r.dataset_tag == task).collect();
            let accuracy = record_accuracy(runs.iter().copied());
            let mean_time_s = mean(runs.iter().map(|r| r.latency_ms as f64 / 1000.0)).unwrap_or(0.0);
            TaskPoint {
                efficiency: accuracy.filter(|_| mean_time_s > 0.0).map(|a| a / mean_time_s),
                task,
                accuracy,
                mean_time_s,
            }
        })
        .collect();

    let periods = first_seen(selected.iter().map(|r| r.period.as_str()));
    let mut modality_bars = Vec::new();
    let mut agents_per_period = Vec::new();
    let mut cursor = 0.0;
    for p in &periods {
        let runs: Vec<&RunRecord> = selected.iter().copied().filter(|r| &r.period == p).collect();
        let span = runs.iter().map(|r| r.latency_ms as f64 / 1000.0).sum::<f64>();
        let (start, end) = (cursor, cursor + span);
        cursor = end;
        for m in first_seen(runs.iter().map(|r| r.modality.as_str())) {
            let of_m: Vec<&RunRecord> = runs.iter().copied().filter(|r| r.modality == m).collect();
            modality_bars.push(ModalityBar {
                period: p.clone(),
                modality: m,
                accuracy: record_accuracy(of_m.iter().copied()),
                runs: of_m.len(),
                span_start_s: start,
                span_end_s: end,
            });
        }
        agents_per_period.push(AgentPoint {
            period: p.clone(),
            agents: runs.iter().map(|r| r.agents).max().unwrap_or(1),
            accuracy: record_accuracy(runs.iter().copied()),
        });
    }

    Ok(BenchReport {
        period: period.unwrap_or(ANY).to_string(),
        group_by,
        rows,
        series: ChartSeries {
            accuracy_efficiency,
            modality_bars,
            agents_per_period,
        },
    })
}
