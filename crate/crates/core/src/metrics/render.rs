use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::report::BenchReport;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChartKind {
    AccuracyEfficiency,
    ModalityBars,
    AgentsPerPeriod,
}

impl ChartKind {
    pub const ALL: [ChartKind; 3] = [Self::AccuracyEfficiency, Self::ModalityBars, Self::AgentsPerPeriod];

    pub fn file_stem(self) -> &'static str {
        match self {
            Self::AccuracyEfficiency => "accuracy_efficiency",
            Self::ModalityBars => "modality_bars",
            Self::AgentsPerPeriod => "agents_per_period",
        }
    }
}

impl FromStr for ChartKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.file_stem() == s || k.file_stem().replace('_', "-") == s)
            .ok_or_else(|| format!("unknown chart {s:?}"))
    }
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

/// Aligned text table, one line per row.
pub fn render_table(report: &BenchReport) -> String {
    let header = ["dataset", "focus", "modality", "period", "accuracy", "time_s", "efficiency", "volume", "runs"];
    let body: Vec<[String; 9]> = report
        .rows
        .iter()
        .map(|r| {
            [
                r.dataset_tag.clone(),
                r.focus.clone(),
                r.modality.clone(),
                r.period.clone(),
                opt(r.accuracy, 2),
                format!("{:.1}", r.mean_time_s),
                opt(r.mean_efficiency, 4),
                format!("{:.1}", r.mean_volume),
                r.runs.to_string(),
            ]
        })
        .collect();
    let mut widths = header.map(str::len);
    for row in &body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let mut line = |cells: Vec<&str>| {
        let parts: Vec<String> = cells.iter().zip(widths).map(|(c, w)| format!("{c:<w$}")).collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(header.to_vec());
    for row in &body {
        line(row.iter().map(String::as_str).collect());
    }
    out
}

/// One JSON object per row.
pub fn render_jsonl(report: &BenchReport) -> String {
    report
        .rows
        .iter()
        .map(|r| serde_json::to_string(r).expect("row serializes") + "\n")
        .collect()
}

/// Plain columnar values for a chart series.
pub fn render_csv(report: &BenchReport, kind: ChartKind) -> String {
    let s = &report.series;
    let (header, rows): (&[&str], Vec<Vec<String>>) = match kind {
        ChartKind::AccuracyEfficiency => (
            &["task", "accuracy", "mean_time_s", "efficiency"],
            s.accuracy_efficiency
                .iter()
                .map(|p| vec![p.task.clone(), opt(p.accuracy, 6), p.mean_time_s.to_string(), opt(p.efficiency, 6)])
                .collect(),
        ),
        ChartKind::ModalityBars => (
            &["period", "modality", "accuracy", "runs", "span_start_s", "span_end_s"],
            s.modality_bars
                .iter()
                .map(|b| {
                    vec![
                        b.period.clone(),
                        b.modality.clone(),
                        opt(b.accuracy, 6),
                        b.runs.to_string(),
                        b.span_start_s.to_string(),
                        b.span_end_s.to_string(),
                    ]
                })
                .collect(),
        ),
        ChartKind::AgentsPerPeriod => (
            &["period", "agents", "accuracy"],
            s.agents_per_period
                .iter()
                .map(|p| vec![p.period.clone(), p.agents.to_string(), opt(p.accuracy, 6)])
                .collect(),
        ),
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv write");
    for r in rows {
        w.write_record(&r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv of utf-8 cells")
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;

fn frame(title: &str, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n\
         <line x1=\"{PAD}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{}\" stroke=\"black\"/>\n{body}</svg>\n",
        W / 2.0,
        esc(title),
        H - PAD,
        W - PAD,
        H - PAD,
        H - PAD,
    )
}

fn y_of(v: f64, max: f64) -> f64 {
    let max = if max > 0.0 { max } else { 1.0 };
    H - PAD - (v / max) * (H - 2.0 * PAD)
}

fn x_slot(i: usize, n: usize) -> f64 {
    PAD + (i as f64 + 0.5) * (W - 2.0 * PAD) / n.max(1) as f64
}

/// A minimal vector rendering of a chart series.
pub fn render_svg(report: &BenchReport, kind: ChartKind) -> String {
    let s = &report.series;
    let mut body = String::new();
    match kind {
        ChartKind::AccuracyEfficiency => {
            let max_e = s.accuracy_efficiency.iter().filter_map(|p| p.efficiency).fold(0.0, f64::max);
            for p in &s.accuracy_efficiency {
                let (Some(a), Some(e)) = (p.accuracy, p.efficiency) else { continue };
                let x = PAD + a * (W - 2.0 * PAD);
                let y = y_of(e, max_e);
                let _ = writeln!(body, "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"5\" fill=\"steelblue\"/>");
                let _ = writeln!(
                    body,
                    "<text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
                    x + 7.0,
                    y - 4.0,
                    esc(&p.task)
                );
            }
            frame("Accuracy vs efficiency", &body)
        }
        ChartKind::ModalityBars => {
            let n = s.modality_bars.len();
            let bw = ((W - 2.0 * PAD) / n.max(1) as f64 * 0.7).max(2.0);
            for (i, b) in s.modality_bars.iter().enumerate() {
                let a = b.accuracy.unwrap_or(0.0);
                let x = x_slot(i, n) - bw / 2.0;
                let y = y_of(a, 1.0);
                let _ = writeln!(
                    body,
                    "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bw:.1}\" height=\"{:.1}\" fill=\"seagreen\"><title>{} {} {a:.2}</title></rect>",
                    H - PAD - y,
                    esc(&b.period),
                    esc(&b.modality)
                );
                let _ = writeln!(
                    body,
                    "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{} {}</text>",
                    x + bw / 2.0,
                    H - PAD + 14.0,
                    esc(&b.period),
                    esc(&b.modality)
                );
            }
            frame("Accuracy by modality per period", &body)
        }
        ChartKind::AgentsPerPeriod => {
            let n = s.agents_per_period.len();
            let max_a = s.agents_per_period.iter().map(|p| p.agents).max().unwrap_or(1) as f64;
            let pts: Vec<String> = s
                .agents_per_period
                .iter()
                .enumerate()
                .map(|(i, p)| format!("{:.1},{:.1}", x_slot(i, n), y_of(p.agents as f64, max_a)))
                .collect();
            let _ = writeln!(
                body,
                "<polyline points=\"{}\" fill=\"none\" stroke=\"darkorange\" stroke-width=\"2\"/>",
                pts.join(" ")
            );
            for (i, p) in s.agents_per_period.iter().enumerate() {
                let _ = writeln!(
                    body,
                    "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{} ({})</text>",
                    x_slot(i, n),
                    H - PAD + 14.0,
                    esc(&p.period),
                    p.agents
                );
            }
            frame("Agents per period", &body)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::build_report;
    use crate::metrics::report::tests::record;

    #[test]
    fn renderings_cover_rows_and_series() {
        let recs = vec![
            record("1", "A", "Text", "P1", true, 1),
            record("2", "B,x", "Text", "P2", false, 3),
        ];
        let rep = build_report(&recs, None, &[]).unwrap();
        let table = render_table(&rep);
        assert_eq!(table.lines().count(), 3);
        assert!(table.starts_with("dataset"));
        assert_eq!(render_jsonl(&rep).lines().count(), 2);
        let csv = render_csv(&rep, ChartKind::AccuracyEfficiency);
        assert!(csv.contains("\"B,x\""));
        assert_eq!(render_csv(&rep, ChartKind::AgentsPerPeriod), "period,agents,accuracy\nP1,1,1.000000\nP2,3,0.000000\n");
        for k in ChartKind::ALL {
            let svg = render_svg(&rep, k);
            assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
            assert_eq!(k.file_stem().parse::<ChartKind>(), Ok(k));
        }
    }
}
