//! Subcommand implementations. Results go to stdout (JSON Lines unless a
//! format says otherwise), diagnostics to stderr.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde_json::json;
use tracing::{info, warn};

use chronoreason::backends::{Backend, RemoteBackend, ScriptedBackend};
use chronoreason::engine::{BatchSummary, ClockSpec, Engine, NullSink, RunManifest};
use chronoreason::knowledge::Corpus;
use chronoreason::metrics::{
    build_report, compare_periods, render_csv, render_jsonl, render_svg, render_table, run_record, BenchReport,
    ChartKind, GroupField, PeriodDiff,
};
use chronoreason::orchestrator::{
    default_roster, load_cases, load_roster, AgentSpec, AlwaysApprove, Approver, AutoApprover, Orchestrator,
};
use chronoreason::rlvr::{score_records, ScoreInput};
use chronoreason::store::{
    archive_path, archive_period, break_dataset, curate, load_archive, load_problems, write_problems, Problem,
    RunRecord, RunStore, SplitSpec,
};

use crate::config::{ApproverKind, BackendKind, Config};
use crate::service::{self, AppState, ServiceOptions};
use crate::{ChartFormat, Cli, Command, DiffFormat, GlobalArgs, ReportArgs, ReportFormat, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// The config file with command line overrides applied.
pub fn resolve_config(g: &GlobalArgs) -> Result<Config> {
    let mut c = match &g.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(s) = g.seed {
        c.engine.seed = s;
    }
    if let Some(b) = g.backend {
        c.backend.kind = b;
    }
    if let Some(clock) = g.clock {
        c.engine.clock = clock;
    }
    if let Some(s) = &g.script {
        c.backend.script = Some(s.clone());
    }
    if let Some(s) = &g.store {
        c.paths.store = s.clone();
    }
    if let Some(s) = &g.corpus {
        c.paths.corpus = Some(s.clone());
    }
    if let Some(s) = &g.roster {
        c.paths.roster = Some(s.clone());
    }
    c.validate()?;
    Ok(c)
}

pub fn build_backend(c: &Config) -> Result<Box<dyn Backend>> {
    Ok(match c.backend.kind {
        BackendKind::Scripted => match &c.backend.script {
            Some(p) => Box::new(ScriptedBackend::from_jsonl(p)?.with_fallback(c.backend.fallback)),
            None => {
                warn!("no script given; the scripted backend answers with seeded filler");
                Box::new(ScriptedBackend::new(Vec::new()).with_fallback(true))
            }
        },
        BackendKind::Remote => Box::new(RemoteBackend::new(c.backend.remote.clone())),
    })
}

pub fn load_corpus(c: &Config) -> Result<Corpus> {
    match &c.paths.corpus {
        Some(p) => Corpus::from_jsonl(p).with_context(|| format!("corpus {}", p.display())),
        None => Ok(Corpus::empty()),
    }
}

pub fn roster(c: &Config) -> Result<Vec<AgentSpec>> {
    match &c.paths.roster {
        Some(p) => load_roster(p).with_context(|| format!("roster {}", p.display())),
        None => Ok(default_roster()),
    }
}

fn open_store(c: &Config) -> Result<RunStore> {
    RunStore::open(&c.paths.store).with_context(|| format!("run store {}", c.paths.store.display()))
}

fn emit_line(out: &mut impl Write, value: &serde_json::Value) -> Result<()> {
    writeln!(out, "{}", serde_json::to_string(value)?)?;
    Ok(())
}

fn select<T>(items: Vec<T>, only: &[String], id: impl Fn(&T) -> &str) -> Result<Vec<T>> {
    if only.is_empty() {
        return Ok(items);
    }
    if let Some(missing) = only.iter().find(|o| !items.iter().any(|i| id(i) == o.as_str())) {
        return Err(usage(format!("no problem or case with id {missing:?}")));
    }
    Ok(items.into_iter().filter(|i| only.iter().any(|o| o == id(i))).collect())
}

pub fn dispatch(cli: Cli) -> Result<()> {
    let config = resolve_config(&cli.global)?;
    match cli.command {
        Command::Curate {
            input,
            output,
            rewrite,
            split_fraction,
            split_ids,
            training,
        } => {
            let split = match (split_fraction, split_ids) {
                (Some(fraction), _) => Some(SplitSpec::Fraction {
                    fraction,
                    seed: config.engine.seed,
                }),
                (None, Some(ids)) => Some(SplitSpec::Ids(ids)),
                (None, None) => None,
            };
            cmd_curate(&config, &input, &output, rewrite, split, training.as_deref())
        }
        Command::Run { problems, only, period } => cmd_run(&config, &problems, &only, period.as_deref()),
        Command::Case {
            cases,
            only,
            period,
            approver,
        } => cmd_case(&config, &cases, &only, period.as_deref(), approver),
        Command::Bench {
            problems,
            tag_period,
            report,
        } => cmd_bench(&config, &problems, tag_period.as_deref(), &report),
        Command::Report { archive, report } => cmd_report(&config, archive.as_deref(), &report),
        Command::Chart {
            kinds,
            format,
            out,
            period,
        } => cmd_chart(&config, &kinds, format, &out, period.as_deref()),
        Command::ScoreRewards {
            input,
            group_key,
            output,
        } => cmd_score(&input, group_key.as_deref(), output.as_deref()),
        Command::Serve { bind, approver } => cmd_serve(&config, bind, approver),
        Command::Replay { run_id, output } => cmd_replay(&config, &run_id, output.as_deref()),
        Command::Archive { period } => {
            let store = open_store(&config)?;
            let manifest = archive_period(&store, &period)?;
            println!("{}", serde_json::to_string_pretty(&manifest)?);
            Ok(())
        }
        Command::DiffPeriods { from, to, format } => {
            let root = &config.paths.store;
            let a = load_archive(root, &from)?;
            let b = load_archive(root, &to)?;
            let diff = compare_periods(&a, &b);
            match format {
                DiffFormat::Json => println!("{}", serde_json::to_string_pretty(&diff)?),
                DiffFormat::Text => print!("{}", diff_text(&diff)),
            }
            Ok(())
        }
    }
}

fn cmd_curate(
    config: &Config,
    input: &Path,
    output: &Path,
    rewrite: bool,
    split: Option<SplitSpec>,
    training: Option<&Path>,
) -> Result<()> {
    let problems = load_problems(input)?;
    let backend = if rewrite { Some(build_backend(config)?) } else { None };
    let (kept, report) = curate(problems, backend.as_deref());
    match (split, training) {
        (Some(spec), Some(training)) => {
            let (reasoning, rest) = break_dataset(kept, &spec).map_err(|e| usage(e.to_string()))?;
            write_problems(output, &reasoning)?;
            write_problems(training, &rest)?;
            info!(reasoning = reasoning.len(), training = rest.len(), "dataset split");
        }
        _ => write_problems(output, &kept)?,
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn load_selected(path: &Path, only: &[String], period: Option<&str>) -> Result<Vec<Problem>> {
    let mut problems = select(load_problems(path)?, only, |p| &p.id)?;
    if let Some(period) = period {
        for p in &mut problems {
            p.period = period.to_string();
        }
    }
    Ok(problems)
}

fn cmd_run(config: &Config, path: &Path, only: &[String], period: Option<&str>) -> Result<()> {
    let problems = load_selected(path, only, period)?;
    let backend = build_backend(config)?;
    let corpus = load_corpus(config)?;
    let store = open_store(config)?;
    let engine = Engine::new(config.engine.clone(), backend.as_ref(), &corpus);
    let runs = engine.run_batch(&problems);
    let written = engine.persist_batch(&store, &problems, &runs)?;
    let mut out = io::stdout().lock();
    for r in &runs {
        let o = &r.outcome;
        emit_line(
            &mut out,
            &json!({
                "run_id": o.run_id,
                "status": o.status,
                "answer": o.answer(),
                "calls_used": o.calls_used,
                "nodes": o.graph.len(),
                "latency_ms": chronoreason::metrics::latency(o),
            }),
        )?;
    }
    let s = BatchSummary::from_runs(&runs);
    eprintln!(
        "{} runs: {} verified, {} unverified, {} errors, {} calls; {} new in {}",
        s.total,
        s.verified,
        s.unverified,
        s.errors,
        s.calls_used,
        written,
        store.root().display()
    );
    Ok(())
}

fn cmd_case(config: &Config, path: &Path, only: &[String], period: Option<&str>, approver: ApproverKind) -> Result<()> {
    let approver: &dyn Approver = match approver {
        ApproverKind::Auto => &AutoApprover,
        ApproverKind::Always => &AlwaysApprove,
        ApproverKind::Human => return Err(usage("the human approver needs the review service: use `serve`")),
    };
    let mut cases = select(load_cases(path)?, only, |c| &c.case_id)?;
    if let Some(period) = period {
        for c in &mut cases {
            c.period = period.to_string();
        }
    }
    let backend = build_backend(config)?;
    let corpus = load_corpus(config)?;
    let store = open_store(config)?;
    let orch = Orchestrator::new(config.case_config(), backend.as_ref(), &corpus, roster(config)?).with_store(&store);
    let mut out = io::stdout().lock();
    for case in &cases {
        let log = orch.open_log(&case.case_id);
        let rec = orch.run_case(case, approver, &log);
        emit_line(
            &mut out,
            &json!({
                "case_id": rec.case_id,
                "severity": rec.severity,
                "agents": rec.agents.iter().map(|a| a.id.as_str()).collect::<Vec<_>>(),
                "rounds": rec.rounds.len(),
                "decision": rec.decision,
                "notices": rec.notices,
            }),
        )?;
    }
    Ok(())
}

fn render_report(report: &BenchReport, format: ReportFormat) -> Result<String> {
    Ok(match format {
        ReportFormat::Table => render_table(report),
        ReportFormat::Jsonl => render_jsonl(report),
        ReportFormat::Json => serde_json::to_string_pretty(report)? + "\n",
    })
}

fn report_from(records: &[RunRecord], args: &ReportArgs) -> Result<BenchReport> {
    let group_by = match &args.group_by {
        Some(s) => GroupField::parse_list(s).map_err(|e| usage(e.to_string()))?,
        None => Vec::new(),
    };
    Ok(build_report(records, args.period.as_deref(), &group_by)?)
}

fn cmd_bench(config: &Config, path: &Path, tag_period: Option<&str>, args: &ReportArgs) -> Result<()> {
    let problems = load_selected(path, &[], tag_period)?;
    let backend = build_backend(config)?;
    let corpus = load_corpus(config)?;
    let store = open_store(config)?;
    let engine = Engine::new(config.engine.clone(), backend.as_ref(), &corpus);
    let runs = engine.run_batch(&problems);
    engine.persist_batch(&store, &problems, &runs)?;
    let records: Vec<RunRecord> = problems
        .iter()
        .zip(&runs)
        .map(|(p, r)| run_record(&r.outcome, p, 1, None))
        .collect();
    print!("{}", render_report(&report_from(&records, args)?, args.format)?);
    Ok(())
}

fn cmd_report(config: &Config, archive: Option<&str>, args: &ReportArgs) -> Result<()> {
    let records = match archive {
        Some(label) => load_archive(&config.paths.store, label)?.runs,
        None => open_store(config)?.load_runs()?,
    };
    print!("{}", render_report(&report_from(&records, args)?, args.format)?);
    Ok(())
}

fn cmd_chart(config: &Config, kinds: &[String], format: ChartFormat, out: &Path, period: Option<&str>) -> Result<()> {
    let kinds: Vec<ChartKind> = if kinds.is_empty() {
        ChartKind::ALL.to_vec()
    } else {
        kinds
            .iter()
            .map(|k| ChartKind::from_str(k).map_err(usage))
            .collect::<Result<_>>()?
    };
    let records = open_store(config)?.load_runs()?;
    let report = build_report(&records, period, &[])?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for kind in kinds {
        let (ext, body) = match format {
            ChartFormat::Svg => ("svg", render_svg(&report, kind)),
            ChartFormat::Csv => ("csv", render_csv(&report, kind)),
        };
        let path = out.join(format!("{}.{ext}", kind.file_stem()));
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn cmd_score(input: &Path, group_key: Option<&str>, output: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str::<ScoreInput>(l).with_context(|| format!("line {}", i + 1)))
        .collect::<Result<Vec<_>>>()?;
    let scored = score_records(&records, group_key)?;
    let mut body = String::new();
    for s in &scored {
        body.push_str(&serde_json::to_string(s)?);
        body.push('\n');
    }
    match output {
        Some(p) => fs::write(p, body).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{body}"),
    }
    Ok(())
}

fn cmd_serve(config: &Config, bind: Option<String>, approver: Option<ApproverKind>) -> Result<()> {
    let state = service_state(config, approver)?;
    let bind = bind.unwrap_or_else(|| config.service.bind.clone());
    service::serve_forever(state, &bind)
}

/// Service state for `config`.
pub fn service_state(config: &Config, approver: Option<ApproverKind>) -> Result<AppState> {
    let options = ServiceOptions {
        case_config: config.case_config(),
        roster: roster(config)?,
        approver: approver.unwrap_or(config.service.approver),
        review_timeout: Duration::from_millis(config.service.review_timeout_ms),
        token: config.service_token(),
    };
    Ok(AppState::new(build_backend(config)?, load_corpus(config)?, open_store(config)?, options))
}

/// Stored graph bytes, from the live store or any archive holding the run.
fn stored_graph(store: &RunStore, run_id: &str) -> Option<Vec<u8>> {
    if let Ok(b) = store.graph_bytes(run_id) {
        return Some(b);
    }
    chronoreason::store::list_archives(store.root()).into_iter().find_map(|label| {
        let p: PathBuf = archive_path(store.root(), &label).join(RunStore::graph_ref(run_id));
        fs::read(p).ok()
    })
}

fn cmd_replay(config: &Config, run_id: &str, output: Option<&Path>) -> Result<()> {
    let store = open_store(config)?;
    let stored = stored_graph(&store, run_id);
    let case_run = store
        .load_runs()?
        .into_iter()
        .find(|r| r.run_id == run_id)
        .and_then(|r| r.case_id);
    let bytes = match (store.load_manifest::<RunManifest>(run_id), case_run) {
        (Ok(_), Some(case_id)) => {
            // expert graphs also hold consultation revisions, which only a
            // rerun of the whole case reproduces
            warn!(run = run_id, case = %case_id, "expert run of a case: printing the stored graph");
            stored.with_context(|| format!("no stored graph for {run_id:?}"))?
        }
        (Ok(manifest), None) => {
            if manifest.config.clock == ClockSpec::Real {
                warn!(run = run_id, "run used the real clock; wall times will differ");
            }
            let backend = build_backend(config)?;
            if backend.name() != manifest.backend {
                warn!(recorded = %manifest.backend, current = %backend.name(), "replaying with a different backend");
            }
            let corpus = load_corpus(config)?;
            let engine = Engine::new(manifest.config.clone(), backend.as_ref(), &corpus);
            let mut clock = manifest.config.clock.start();
            let outcome = engine.run_problem(&manifest.problem, clock.as_mut(), &mut NullSink);
            let bytes = outcome.graph.to_bytes();
            match &stored {
                Some(s) if *s == bytes => info!(run = run_id, "replay matches the stored graph"),
                Some(_) => bail!("replayed graph of {run_id:?} differs from the stored graph"),
                None => warn!(run = run_id, "no stored graph to compare against"),
            }
            bytes
        }
        (Err(e), _) => return Err(e).with_context(|| format!("cannot replay {run_id:?}")),
    };
    match output {
        Some(p) => fs::write(p, &bytes).with_context(|| format!("writing {}", p.display()))?,
        None => {
            let mut out = io::stdout().lock();
            out.write_all(&bytes)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

pub fn diff_text(d: &PeriodDiff) -> String {
    let mut s = format!(
        "{} -> {}: {} changed, {} only in {}, {} only in {}\n",
        d.period_a,
        d.period_b,
        d.changed.len(),
        d.only_in_a.len(),
        d.period_a,
        d.only_in_b.len(),
        d.period_b
    );
    for c in &d.changed {
        let answer = if c.answer_changed {
            format!("answer {} -> {}", c.answer_a, c.answer_b)
        } else {
            format!("answer {}", c.answer_a)
        };
        s.push_str(&format!(
            "{}  {answer}  latency {:+} ms  volume {:+}  reasons {}\n",
            c.case_id, c.latency_delta_ms, c.volume_delta, c.reason_diff
        ));
    }
    for id in &d.only_in_a {
        s.push_str(&format!("{id}  only in {}\n", d.period_a));
    }
    for id in &d.only_in_b {
        s.push_str(&format!("{id}  only in {}\n", d.period_b));
    }
    s
}
