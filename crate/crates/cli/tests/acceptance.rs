//! End-to-end acceptance checks. Each criterion prints one PASS or FAIL
//! line; the process exits non-zero when any of them fails.
//!
//! Run with `cargo test -p chronoreason-cli --test acceptance`.

mod common;
#[path = "../../core/tests/common/mod.rs"]
mod core_common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use chronoreason::backends::{ScriptEntry, ScriptedBackend};
use chronoreason::engine::{ClockSpec, Engine, EngineConfig, RunStatus};
use chronoreason::knowledge::Corpus;
use chronoreason::metrics::{
    build_report, compare_periods, dataset_accuracy, latency, node_accuracy, reason_efficiency, run_record, timings,
};
use chronoreason::orchestrator::{
    default_roster, AlwaysApprove, AutoApprover, CaseConfig, CaseInput, CaseSeverity, DecisionStatus, Orchestrator,
};
use chronoreason::rlvr::{accuracy_reward, format_reward, group_advantages, kl_unbiased};
use chronoreason::store::{load_archive, Problem, RunStore, DSFT_FILE, DTEMP_FILE};
use core_common::fixtures::mixed_batch;
use core_common::graph_ops::{random_ops, run_and_check};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($arg)+));
        }
    };
}

fn engine_config(l: usize, n: usize, seed: u64) -> EngineConfig {
    EngineConfig {
        max_retries: l,
        max_iterations: n,
        seed,
        clock: ClockSpec::Step(1000),
        transport_backoff_ms: 0,
        ..EngineConfig::default()
    }
}

fn c1_budget_and_datasets() -> Outcome {
    let (l, n) = (3, 4);
    let t0 = Instant::now();
    let (problems, backend, success) = mixed_batch(50, l * n);
    let corpus = Corpus::empty();
    let engine = Engine::new(engine_config(l, n, 7), &backend, &corpus);
    let runs = engine.run_batch(&problems);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = RunStore::open(dir.path()).map_err(|e| e.to_string())?;
    engine.persist_batch(&store, &problems, &runs).map_err(|e| e.to_string())?;
    let elapsed = t0.elapsed();

    let mut verified = 0;
    for ((run, p), s) in runs.iter().zip(&problems).zip(&success) {
        let o = &run.outcome;
        ensure!(o.calls_used <= l * n, "{} used {} calls", p.id, o.calls_used);
        ensure!((o.status == RunStatus::Verified) == s.is_some(), "{} has status {:?}", p.id, o.status);
        ensure!(o.dtemp.is_some() == (o.status == RunStatus::Verified), "{} dataset gating", p.id);
        let Some(t) = &o.dtemp else { continue };
        verified += 1;
        let f = o.graph.final_node().ok_or("verified run without a final node")?;
        let node = o.graph.node(f).ok_or("dangling final node")?;
        let path = o.graph.path_to(f).map_err(|e| e.to_string())?;
        ensure!(t.input_digest == p.input_digest() && t.query == p.query, "{} inputs differ", p.id);
        ensure!(t.r_f == node.reason && t.a_f == node.answer, "{} final node differs", p.id);
        ensure!((t.t_0, t.t_f) == (path.t_0, path.t_f), "{} timestamps differ from the lineage", p.id);
    }
    let stored = store.load_dtemp().map_err(|e| e.to_string())?;
    let expected: Vec<_> = runs.iter().filter_map(|r| r.outcome.dtemp.clone()).collect();
    ensure!(stored == expected, "dtemp.jsonl has {} rows, expected {}", stored.len(), expected.len());
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("50 problems, {verified} verified, all within {} calls, {elapsed:.2?}", l * n))
}

fn checksum(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn store_checksums(root: &Path) -> Result<BTreeMap<String, String>, String> {
    let mut sums = BTreeMap::new();
    for f in [DTEMP_FILE, DSFT_FILE] {
        sums.insert(f.to_string(), checksum(&fs::read(root.join(f)).map_err(|e| format!("{f}: {e}"))?));
    }
    for e in fs::read_dir(root.join("graphs")).map_err(|e| e.to_string())? {
        let p = e.map_err(|e| e.to_string())?.path();
        let bytes = fs::read(&p).map_err(|e| e.to_string())?;
        sums.insert(format!("graphs/{}", p.file_name().unwrap().to_string_lossy()), checksum(&bytes));
    }
    Ok(sums)
}

fn c2_determinism() -> Outcome {
    let mut sums = Vec::new();
    for _ in 0..2 {
        let (problems, backend, _) = mixed_batch(30, 12);
        let corpus = Corpus::empty();
        let engine = Engine::new(engine_config(3, 4, 11), &backend, &corpus);
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let store = RunStore::open(dir.path()).map_err(|e| e.to_string())?;
        let runs = engine.run_batch(&problems);
        engine.persist_batch(&store, &problems, &runs).map_err(|e| e.to_string())?;
        sums.push(store_checksums(dir.path())?);
    }
    ensure!(sums[0].len() == 32, "expected 2 datasets and 30 graphs, found {} files", sums[0].len());
    for (name, sum) in &sums[0] {
        ensure!(sums[1].get(name) == Some(sum), "{name} differs between executions");
    }
    ensure!(sums[0] == sums[1], "file sets differ");
    Ok(format!("{} files byte-identical across two executions", sums[0].len()))
}

fn c3_graph_invariants() -> Outcome {
    let t0 = Instant::now();
    let mut nodes = 0;
    for seed in 0..1000u64 {
        let ops = random_ops(seed, 200);
        let g = run_and_check(&ops, seed ^ 0x5eed).map_err(|e| format!("sequence {seed}: {e}"))?;
        ensure!(g.len() <= 200, "sequence {seed} grew to {} nodes", g.len());
        nodes += g.len();
    }
    let elapsed = t0.elapsed();
    ensure!(elapsed < Duration::from_secs(30), "took {elapsed:?}");
    Ok(format!("1000 sequences, {nodes} nodes, volumes match the oracle, {elapsed:.2?}"))
}

fn c4_metrics() -> Outcome {
    let (problems, backend, _) = mixed_batch(21, 12);
    let corpus = Corpus::empty();
    let engine = Engine::new(engine_config(3, 4, 5), &backend, &corpus);
    let mut steps = 0;
    for run in engine.run_batch(&problems) {
        let o = &run.outcome;
        let tau = latency(o);
        let t = timings(o);
        ensure!(tau == o.t_f.wall_ms - o.t_0.wall_ms, "{}: latency {tau} is not t_f - t_0", o.run_id);
        let sum: u64 = t.iter().map(|x| x.delta_ms).sum();
        ensure!(tau == sum, "{}: latency {tau} but steps sum to {sum}", o.run_id);
        for x in &t {
            let acc = node_accuracy(o, x.node);
            if x.delta_ms == 0 {
                ensure!(reason_efficiency(x, acc).is_none(), "zero-length step has an efficiency");
                continue;
            }
            let expected = f64::from(acc) / (x.delta_ms as f64 / 1000.0);
            let got = reason_efficiency(x, acc).ok_or("missing efficiency")?;
            ensure!((got - expected).abs() <= 1e-12, "efficiency {got} vs {expected}");
            steps += 1;
        }
    }

    let nine: Vec<&str> = (0..10).map(|i| if i == 4 { "C" } else { "B" }).collect();
    let acc = dataset_accuracy(&nine, &["B"; 10]).map_err(|e| e.to_string())?;
    ensure!(acc == 0.9, "9 of 10 gave {acc}");

    // nineteen of twenty through the engine and the report
    let entries = (0..20).map(|i| {
        let answer = if i == 13 { "C" } else { "B" };
        ScriptEntry::step(&format!("x{i:02}"), 0, "reading the film", answer)
    });
    let backend = ScriptedBackend::new(entries);
    let problems: Vec<Problem> = (0..20)
        .map(|i| Problem::new(format!("x{i:02}"), "which finding?").with_ground_truth("B"))
        .collect();
    let engine = Engine::new(engine_config(1, 1, 1), &backend, &corpus);
    let records: Vec<_> = engine
        .run_batch(&problems)
        .iter()
        .zip(&problems)
        .map(|(r, p)| run_record(&r.outcome, p, 1, None))
        .collect();
    let report = build_report(&records, None, &[]).map_err(|e| e.to_string())?;
    let reported = report.rows.first().and_then(|r| r.accuracy);
    ensure!(reported == Some(0.95), "19 of 20 reported as {reported:?}");
    Ok(format!("latency identities over 21 runs, {steps} efficiencies, 0.9 and 0.95"))
}

#[derive(Deserialize)]
struct Labeled {
    raw_output: String,
    ground_truth: String,
    format: u8,
    accuracy: u8,
    note: String,
}

fn c5_rewards() -> Outcome {
    let rows: Vec<Labeled> = include_str!("../../core/tests/data/reward_table.jsonl")
        .lines()
        .map(serde_json::from_str)
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    ensure!(rows.len() == 20, "table has {} rows", rows.len());
    for r in &rows {
        ensure!(format_reward(&r.raw_output) == r.format, "format: {}", r.note);
        ensure!(accuracy_reward(&r.raw_output, &r.ground_truth) == Ok(r.accuracy), "accuracy: {}", r.note);
    }

    let adv = group_advantages(&[1.0, 0.0, 1.0, 1.0]).map_err(|e| e.to_string())?.values;
    for (g, e) in adv.iter().zip([0.57735, -1.73205, 0.57735, 0.57735]) {
        ensure!((g - e).abs() <= 1e-5, "advantages {adv:?}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut groups = 0;
    for _ in 0..2000 {
        let n = rng.random_range(2..64);
        let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
        if rewards.iter().all(|r| *r == rewards[0]) {
            continue;
        }
        let adv = group_advantages(&rewards).map_err(|e| e.to_string())?.values;
        let len = adv.len() as f64;
        let mean = adv.iter().sum::<f64>() / len;
        let std = (adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / len).sqrt();
        ensure!(mean.abs() <= 1e-9 && (std - 1.0).abs() <= 1e-9, "mean {mean} std {std}");
        groups += 1;
    }

    let kl = kl_unbiased(0.0, std::f64::consts::LN_2).map_err(|e| e.to_string())?;
    ensure!((kl - 0.306853).abs() <= 1e-6, "kl at ratio two is {kl}");
    for _ in 0..100_000 {
        let (a, b) = (rng.random_range(-30.0..0.0), rng.random_range(-30.0..0.0));
        let kl = kl_unbiased(a, b).map_err(|e| e.to_string())?;
        ensure!(kl >= 0.0, "kl({a}, {b}) = {kl}");
    }
    Ok(format!("20 labeled outputs, {groups} standardized groups, kl {kl:.6}, 1e5 non-negative"))
}

fn case_config() -> CaseConfig {
    CaseConfig {
        engine: engine_config(1, 1, 0),
        ..CaseConfig::default()
    }
}

fn case_script(case_id: &str, steps: &[(&str, usize, &str)]) -> ScriptedBackend {
    ScriptedBackend::new(steps.iter().map(|(agent, call, answer)| {
        ScriptEntry::step(&format!("{case_id}/{agent}"), *call, &format!("{agent} at call {call}"), answer)
    }))
}

fn case(id: &str, severity: CaseSeverity, specialties: &[&str], gt: Option<&str>) -> CaseInput {
    let mut c = CaseInput::new(id, "patient presents with symptoms; what is the finding?");
    c.severity_hint = Some(severity);
    c.specialties = specialties.iter().map(|s| s.to_string()).collect();
    c.ground_truth = gt.map(str::to_string);
    c
}

fn c6_routing_and_consensus() -> Outcome {
    let corpus = Corpus::empty();
    let run = |b: &ScriptedBackend, c: &CaseInput, auto: bool| {
        let o = Orchestrator::new(case_config(), b, &corpus, default_roster());
        let log = o.open_log(&c.case_id);
        if auto {
            o.run_case(c, &AutoApprover, &log)
        } else {
            o.run_case(c, &AlwaysApprove, &log)
        }
    };

    let mild = run(&case_script("m", &[("gmp", 0, "B")]), &case("m", CaseSeverity::Mild, &["cardiology"], None), false);
    ensure!(mild.agents.len() == 1, "mild used {} agents", mild.agents.len());

    let specialties = ["cardiology", "neurology"];
    let b = case_script("mod", &[("gmp", 0, "B"), ("cardio", 0, "B"), ("neuro", 0, "B")]);
    let moderate = run(&b, &case("mod", CaseSeverity::Moderate, &specialties, None), false);
    ensure!(moderate.agents.len() == 1 + specialties.len(), "moderate used {} agents", moderate.agents.len());

    let b = case_script("sev", &[("gmp", 0, "B"), ("cardio", 0, "B"), ("ortho", 0, "B")]);
    let severe = run(&b, &case("sev", CaseSeverity::Severe, &["cardiology"], None), false);
    let analysts = severe.agents.iter().filter(|a| !a.is_primary_doctor()).count();
    let pd_last = severe.agents.last().is_some_and(|a| a.is_primary_doctor());
    ensure!(analysts >= 3 && pd_last, "severe used {analysts} analysts, primary doctor last: {pd_last}");

    let b = case_script(
        "conv",
        &[("gmp", 0, "B"), ("cardio", 0, "C"), ("neuro", 0, "D"), ("cardio", 1, "B"), ("neuro", 2, "B")],
    );
    let conv = run(&b, &case("conv", CaseSeverity::Moderate, &specialties, None), false);
    ensure!(conv.rounds.len() == 2, "converging case took {} rounds", conv.rounds.len());
    ensure!(conv.rounds[1].consensus.as_deref() == Some("B"), "no consensus in round two");

    let b = case_script("split", &[("gmp", 0, "C"), ("cardio", 0, "B"), ("neuro", 0, "B")]);
    let split = run(&b, &case("split", CaseSeverity::Moderate, &specialties, None), false);
    let d = split.decision.ok_or("split case undecided")?;
    ensure!(
        d.status == DecisionStatus::Escalated && d.final_answer == "B",
        "split case ended {:?} with {}",
        d.status,
        d.final_answer
    );

    let limit = case_config().reject_limit;
    let b = case_script("rej", &[("gmp", 0, "C"), ("cardio", 0, "C")]);
    let rej = run(&b, &case("rej", CaseSeverity::Moderate, &["cardiology"], Some("B")), true);
    ensure!(rej.rounds.len() == 1 + limit, "{} rounds for {limit} rejections", rej.rounds.len());
    ensure!(rej.rounds[1..].iter().all(|r| r.feedback.is_some()), "a rejection round lacks feedback");
    let d = rej.decision.ok_or("rejected case undecided")?;
    ensure!(d.status == DecisionStatus::Escalated, "rejected case ended {:?}", d.status);

    Ok(format!(
        "agents 1/{}/{}+pd, 2 rounds to converge, split escalates to B, {limit} rejections add {limit} rounds",
        moderate.agents.len(),
        analysts
    ))
}

fn c7_periods() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    core_common::periods::two_periods(dir.path());
    let a = load_archive(dir.path(), "P1").map_err(|e| e.to_string())?;
    let b = load_archive(dir.path(), "P2").map_err(|e| e.to_string())?;
    let diff = compare_periods(&a, &b);
    let mut changed: Vec<(&str, bool, i64)> = diff
        .changed
        .iter()
        .map(|c| (c.case_id.as_str(), c.answer_changed, c.latency_delta_ms))
        .collect();
    changed.sort();
    ensure!(changed == [("flip", true, 0), ("slow", false, -5000)], "diff lists {changed:?}");
    ensure!(diff.only_in_a.is_empty() && diff.only_in_b.is_empty(), "unmatched cases in the diff");

    // one mild case, then a severe panel, then a mild case again
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let store = RunStore::open(dir.path()).map_err(|e| e.to_string())?;
    let corpus = Corpus::empty();
    let b = ScriptedBackend::new(
        [("q1", "gmp"), ("q2", "gmp"), ("q2", "cardio"), ("q2", "ortho"), ("q3", "gmp")]
            .into_iter()
            .map(|(c, a)| ScriptEntry::step(&format!("{c}/{a}"), 0, &format!("{a} reads {c}"), "B")),
    );
    let o = Orchestrator::new(case_config(), &b, &corpus, default_roster()).with_store(&store);
    let mut k = 0;
    for (id, period, severity) in [("q1", "P1", CaseSeverity::Mild), ("q2", "P2", CaseSeverity::Severe), ("q3", "P3", CaseSeverity::Mild)] {
        let mut c = case(id, severity, &["cardiology"], Some("B"));
        c.period = period.into();
        let rec = o.run_case(&c, &AutoApprover, &o.open_log(id));
        if id == "q2" {
            k = rec.agents.len();
        }
    }
    let runs = store.load_runs().map_err(|e| e.to_string())?;
    let report = build_report(&runs, None, &[]).map_err(|e| e.to_string())?;
    let series: Vec<(String, usize)> = report
        .series
        .agents_per_period
        .iter()
        .map(|p| (p.period.clone(), p.agents))
        .collect();
    let expected = [("P1".to_string(), 1), ("P2".to_string(), k), ("P3".to_string(), 1)];
    ensure!(k > 1 && series == expected, "agents series {series:?}");
    Ok(format!("diff lists flip (B -> C) and slow (-5000 ms); agents series 1, {k}, 1"))
}

fn c8_service() -> Outcome {
    let h = Arc::new(common::start(None));
    let t0 = Instant::now();
    let r = h.submit("s1");
    ensure!(r.status == 202, "submit returned {}", r.status);
    h.wait_pending("s1", 0);
    let ok = h.post("/v1/review/s1/decision", &json!({"verdict": "approve"}));
    ensure!(ok.status == 200, "approve returned {}", ok.status);
    let rec = h.wait_decided("s1");
    let round_trip = t0.elapsed();
    ensure!(round_trip < Duration::from_secs(2), "submit to decision took {round_trip:?}");
    ensure!(rec["decision"]["status"] == "Approved", "decision {}", rec["decision"]);

    h.submit("s2");
    h.wait_pending("s2", 0);
    let codes: Vec<u16> = (0..8)
        .map(|_| {
            let h = Arc::clone(&h);
            thread::spawn(move || h.post("/v1/review/s2/decision", &json!({"verdict": "approve"})).status)
        })
        .collect::<Vec<_>>()
        .into_iter()
        .map(|t| t.join().unwrap_or(0))
        .collect();
    let wins = codes.iter().filter(|c| **c == 200).count();
    let conflicts = codes.iter().filter(|c| **c == 409).count();
    ensure!(wins == 1 && conflicts == 7, "concurrent decisions returned {codes:?}");
    h.wait_decided("s2");

    let file = common::log_file_lines(h.dir.path(), "s1");
    let streamed: Vec<String> = h.events("/v1/cases/s1/events", None).into_iter().map(|e| e.1).collect();
    ensure!(!file.is_empty() && streamed == file, "stream has {} events, log {}", streamed.len(), file.len());
    Ok(format!(
        "round trip {round_trip:.2?}, 1 of 8 decisions accepted, {} events replayed in order",
        file.len()
    ))
}

fn main() {
    // panics are reported as FAIL lines instead
    panic::set_hook(Box::new(|_| {}));
    let criteria: [Criterion; 8] = [
        ("budget and dataset gating", c1_budget_and_datasets),
        ("determinism", c2_determinism),
        ("graph invariants", c3_graph_invariants),
        ("metrics", c4_metrics),
        ("rewards", c5_rewards),
        ("routing and consensus", c6_routing_and_consensus),
        ("period analysis", c7_periods),
        ("service", c8_service),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS {} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {} {name}: {why}", i + 1);
            }
        }
    }
    println!("{} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
