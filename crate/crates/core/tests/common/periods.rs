//! Two archived periods that differ in exactly one answer and one latency.

#![allow(dead_code)]

use std::path::Path;

use chronoreason::backends::{ScriptEntry, ScriptedBackend};
use chronoreason::engine::{ClockSpec, Engine, EngineConfig, PolicyConfig};
use chronoreason::knowledge::Corpus;
use chronoreason::store::{archive_period, Problem, RunStore};

/// Chain length of the `slow` case: ten one-step gaps.
pub const SLOW_NODES: usize = 11;

fn period_inputs(label: &str) -> (Vec<Problem>, ScriptedBackend) {
    let flip_answer = if label == "P1" { "B" } else { "C" };
    let mut entries = vec![
        ScriptEntry::step("stable", 0, "findings fit option B", "B"),
        ScriptEntry::step("flip", 0, "reading the notes", flip_answer),
    ];
    let wrong = ["C", "D", "E", "A"];
    for i in 0..SLOW_NODES {
        let a = if i + 1 == SLOW_NODES { "B" } else { wrong[i % 4] };
        entries.push(ScriptEntry::step("slow", i, &format!("slow step {i}"), a));
    }
    let problems = ["stable", "flip", "slow"]
        .into_iter()
        .map(|id| {
            let mut p = Problem::new(id, format!("{id} question"));
            if id != "flip" {
                p.ground_truth = Some("B".into());
            }
            p.period = label.into();
            p.dataset_tag = "fixture".into();
            p
        })
        .collect();
    (problems, ScriptedBackend::new(entries))
}

/// Runs the fixture for `label` with the given clock step, persists it and
/// seals the period.
pub fn run_period(store: &RunStore, label: &str, seed: u64, step_ms: u64) {
    let (problems, backend) = period_inputs(label);
    let corpus = Corpus::empty();
    let config = EngineConfig {
        max_retries: 1,
        max_iterations: SLOW_NODES,
        seed,
        clock: ClockSpec::Step(step_ms),
        allow_ungated: true,
        policy: PolicyConfig {
            stall_patience: usize::MAX,
            ..PolicyConfig::default()
        },
        ..EngineConfig::default()
    };
    let engine = Engine::new(config, &backend, &corpus);
    let runs = engine.run_batch(&problems);
    engine.persist_batch(store, &problems, &runs).expect("persist period");
    archive_period(store, label).expect("archive period");
}

/// P1 at 2 s per step and P2 at 1.5 s per step: the slow case goes from
/// 20 s to 15 s, and `flip` changes its answer from B to C.
pub fn two_periods(root: &Path) -> RunStore {
    let store = RunStore::open(root).expect("open store");
    run_period(&store, "P1", 1, 2000);
    run_period(&store, "P2", 2, 1500);
    store
}
