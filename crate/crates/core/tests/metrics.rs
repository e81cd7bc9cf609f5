mod common;

use chronoreason::backends::{ScriptEntry, ScriptedBackend};
use chronoreason::engine::{ClockSpec, Engine, EngineConfig, PolicyConfig, RunOutcome, RunStatus};
use chronoreason::knowledge::Corpus;
use chronoreason::metrics::{
    build_report, dataset_accuracy, latency, mean_efficiency, node_accuracy, reason_efficiency,
    run_record, timings, GroupField, ReasonTiming,
};
use chronoreason::graph::{NodeId, Timestamp};
use chronoreason::store::Problem;
use common::fixtures::mixed_batch;
use proptest::prelude::*;

fn chain_run(nodes: usize, step_ms: u64) -> RunOutcome {
    // distinct wrong answers along the way, correct at the last call
    let letters = ["C", "D", "E", "A"];
    let entries = (0..nodes).map(|i| {
        let a = if i + 1 == nodes { "B" } else { letters[i % 4] };
        ScriptEntry::step("chain", i, &format!("step {i}"), a)
    });
    let backend = ScriptedBackend::new(entries);
    let corpus = Corpus::empty();
    let config = EngineConfig {
        max_retries: 1,
        max_iterations: nodes,
        clock: ClockSpec::Step(step_ms),
        policy: PolicyConfig {
            stall_patience: usize::MAX,
            ..PolicyConfig::default()
        },
        ..EngineConfig::default()
    };
    let engine = Engine::new(config, &backend, &corpus);
    let mut clock = engine.config.clock.start();
    engine.run_problem(&Problem::new("chain", "q").with_ground_truth("B"), clock.as_mut(), &mut Vec::new())
}

#[test]
fn sixteen_node_lineage_at_one_second_steps_is_fifteen_seconds() {
    let o = chain_run(16, 1000);
    assert_eq!(o.status, RunStatus::Verified);
    assert_eq!(o.path.len(), 16);
    assert_eq!(latency(&o), 15_000);
    let t = timings(&o);
    assert_eq!(t.iter().map(|x| x.delta_ms).sum::<u64>(), 15_000);
    assert_eq!(t.last().unwrap().delta_ms, 0);
    // only the last node is correct and its step has no duration
    assert_eq!(mean_efficiency(&o), Some(0.0));
}

#[test]
fn single_node_run_has_zero_latency() {
    let o = chain_run(1, 1000);
    assert_eq!(latency(&o), 0);
    assert_eq!(timings(&o).len(), 1);
    assert_eq!(mean_efficiency(&o), None);
}

#[test]
fn efficiency_is_accuracy_over_seconds() {
    let t = ReasonTiming {
        node: NodeId(0),
        t_start: Timestamp::new(0, 1000),
        t_end: Timestamp::new(1, 5000),
        delta_ms: 4000,
    };
    assert_eq!(reason_efficiency(&t, 1), Some(0.25));
    // row-level analogue used for the accuracy-efficiency series
    let row = 0.93 / 20.0;
    assert!((row - 0.0465_f64).abs() < 1e-12);
}

#[test]
fn nineteen_of_twenty_is_point_nine_five() {
    let answers: Vec<&str> = (0..20).map(|i| if i == 3 { "C" } else { "B" }).collect();
    let truths = vec!["B"; 20];
    assert_eq!(dataset_accuracy(&answers, &truths).unwrap(), 0.95);
}

#[test]
fn report_rows_match_dataset_accuracy_per_group() {
    let (problems, backend, _) = mixed_batch(40, 12);
    let corpus = Corpus::empty();
    let config = EngineConfig {
        max_retries: 3,
        max_iterations: 4,
        clock: ClockSpec::Step(500),
        ..EngineConfig::default()
    };
    let engine = Engine::new(config, &backend, &corpus);
    let runs = engine.run_batch(&problems);
    let records: Vec<_> = runs
        .iter()
        .zip(&problems)
        .map(|(r, p)| run_record(&r.outcome, p, 1, None))
        .collect();
    let report = build_report(&records, None, &[GroupField::Dataset]).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows.iter().map(|r| r.runs).sum::<usize>(), 40);
    for row in &report.rows {
        let (answers, truths): (Vec<String>, Vec<String>) = runs
            .iter()
            .zip(&problems)
            .filter(|(_, p)| p.dataset_tag == row.dataset_tag)
            .map(|(r, p)| (r.outcome.answer().to_string(), p.ground_truth.clone().unwrap()))
            .unzip();
        assert_eq!(row.accuracy, Some(dataset_accuracy(&answers, &truths).unwrap()));
        assert!((0.0..=1.0).contains(&row.accuracy.unwrap()));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn latency_is_the_sum_of_lineage_steps(seed in 0u64..10_000, step in 1u64..5000) {
        let (problems, backend, _) = mixed_batch(3, 9);
        let corpus = Corpus::empty();
        let config = EngineConfig {
            max_retries: 3,
            max_iterations: 3,
            seed,
            clock: ClockSpec::Step(step),
            ..EngineConfig::default()
        };
        let engine = Engine::new(config, &backend, &corpus);
        for r in engine.run_batch(&problems) {
            let o = &r.outcome;
            let sum: u64 = timings(o).iter().map(|t| t.delta_ms).sum();
            prop_assert_eq!(latency(o), sum);
            prop_assert_eq!(latency(o), o.t_f.wall_ms - o.t_0.wall_ms);
            for t in timings(o) {
                let a = node_accuracy(o, t.node);
                if let Some(e) = reason_efficiency(&t, a) {
                    prop_assert!((e - f64::from(a) * 1000.0 / t.delta_ms as f64).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn efficiency_is_monotone(a in 0u8..=1, d1 in 1u64..100_000, d2 in 1u64..100_000) {
        let t = |d| ReasonTiming { node: NodeId(0), t_start: Timestamp::new(0, 0), t_end: Timestamp::new(1, d), delta_ms: d };
        let (lo, hi) = (d1.min(d2), d1.max(d2));
        prop_assert!(reason_efficiency(&t(lo), 1) >= reason_efficiency(&t(lo), 0));
        if lo < hi && a == 1 {
            prop_assert!(reason_efficiency(&t(lo), a) > reason_efficiency(&t(hi), a));
        }
    }

    #[test]
    fn accuracy_is_k_over_n(n in 1usize..200, k_seed in any::<usize>()) {
        let k = k_seed % (n + 1);
        let answers: Vec<&str> = (0..n).map(|i| if i < k { "B" } else { "C" }).collect();
        let truths = vec!["B"; n];
        prop_assert_eq!(dataset_accuracy(&answers, &truths).unwrap(), k as f64 / n as f64);
    }
}
