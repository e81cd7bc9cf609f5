//! Scripted problem batches with known success points.

#![allow(dead_code)]

use chronoreason::backends::{ModalityRef, Modality, ScriptEntry, ScriptedBackend};
use chronoreason::store::Problem;

pub const LETTERS: [&str; 5] = ["A", "B", "C", "D", "E"];

/// `n` problems; problem `i` first answers correctly at call `success[i]`,
/// or never when that is `None`. Wrong answers cycle through the other
/// letters so consecutive misses differ.
pub fn mixed_batch(n: usize, budget: usize) -> (Vec<Problem>, ScriptedBackend, Vec<Option<usize>>) {
    let mut problems = Vec::new();
    let mut entries = Vec::new();
    let mut success = Vec::new();
    for i in 0..n {
        let id = format!("p{i:03}");
        let gt = LETTERS[i % 5];
        // every seventh problem never succeeds; the rest succeed somewhere
        // inside the budget, including the very first call
        let s = (i % 7 != 6).then(|| (i * 5 + i / 3) % budget);
        let mut p = Problem::new(&id, format!("question {i}: which option fits finding {i}?")).with_ground_truth(gt);
        p.dataset_tag = if i % 2 == 0 { "set-a".into() } else { "set-b".into() };
        p.period = "P1".into();
        p.input_refs = vec![ModalityRef {
            modality: Modality::Text,
            locator: format!("notes/{id}.txt"),
            caption: None,
        }];
        for call in 0..budget {
            let answer = if Some(call) == s {
                gt.to_string()
            } else {
                let wrong: Vec<&str> = LETTERS.iter().copied().filter(|l| *l != gt).collect();
                wrong[call % wrong.len()].to_string()
            };
            entries.push(ScriptEntry::step(&id, call, &format!("step {call} on {id}: weighing option {answer}"), &answer));
        }
        problems.push(p);
        success.push(s);
    }
    (problems, ScriptedBackend::new(entries), success)
}
