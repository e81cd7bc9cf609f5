//! Random strategy sequences and an independent invariant checker.
//!
//! Shared by the core property tests and the acceptance suite.

#![allow(dead_code)]

use chronoreason::graph::{EdgeKind, NodeId, ReasonDraft, StrategyKind, TemporalGraph};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub enum Op {
    Explore,
    Refine,
    Backtrack(u32),
    Generate(usize),
    Merge(Vec<u32>),
}

/// A random op list whose application stays within `max_nodes` nodes.
pub fn random_ops(seed: u64, max_nodes: usize) -> Vec<Op> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = rng.random_range(1..=max_nodes);
    let mut ops = Vec::new();
    let mut nodes = 1usize;
    while nodes < max_nodes && ops.len() < len {
        let op = match rng.random_range(0..10) {
            0..=2 => Op::Explore,
            3..=4 => Op::Refine,
            5 => Op::Backtrack(rng.random()),
            6..=7 => Op::Generate(rng.random_range(2..=4)),
            _ => {
                let n = rng.random_range(2..=4);
                Op::Merge((0..n).map(|_| rng.random()).collect())
            }
        };
        let grow = match &op {
            Op::Refine => 0,
            Op::Generate(k) => *k,
            _ => 1,
        };
        if nodes + grow > max_nodes {
            break;
        }
        nodes += grow;
        ops.push(op);
    }
    ops
}

fn to_strategy(op: &Op, g: &TemporalGraph) -> StrategyKind {
    let n = g.len() as u32;
    match op {
        Op::Explore => StrategyKind::ExploreNew,
        Op::Refine => StrategyKind::RefineContent,
        Op::Backtrack(t) => StrategyKind::Backtrack { target: NodeId(t % n) },
        Op::Generate(k) => StrategyKind::Generate { fanout: *k },
        Op::Merge(seeds) => {
            let mut sources: Vec<NodeId> = Vec::new();
            for s in seeds {
                let id = NodeId(s % n);
                if !sources.contains(&id) {
                    sources.push(id);
                }
            }
            if sources.len() < 2 && n >= 2 {
                let other = NodeId((sources[0].0 + 1) % n);
                sources.push(other);
            }
            if sources.len() < 2 {
                return StrategyKind::ExploreNew;
            }
            StrategyKind::Merge { sources }
        }
    }
}

/// Ancestors of every node by dynamic programming over creation order: a
/// node's ancestors are the union of its non-self predecessors and theirs.
/// This is only valid because non-self edges always point forward, which
/// the checker asserts separately.
pub fn oracle_volumes(g: &TemporalGraph) -> Vec<usize> {
    let n = g.len();
    let words = n.div_ceil(64);
    let mut anc = vec![vec![0u64; words]; n];
    let mut edges: Vec<_> = g.edges().iter().filter(|e| e.from != e.to).collect();
    edges.sort_by_key(|e| e.to.0);
    for e in edges {
        let (f, t) = (e.from.0 as usize, e.to.0 as usize);
        let from = anc[f].clone();
        let row = &mut anc[t];
        for (w, x) in row.iter_mut().zip(&from) {
            *w |= *x;
        }
        row[f / 64] |= 1 << (f % 64);
    }
    anc.iter().map(|r| r.iter().map(|w| w.count_ones() as usize).sum()).collect()
}

fn out_non_self(g: &TemporalGraph, id: NodeId) -> usize {
    g.edges().iter().filter(|e| e.from == id && e.to != id).count()
}

fn in_non_self(g: &TemporalGraph, id: NodeId) -> usize {
    g.edges().iter().filter(|e| e.to == id && e.from != id).count()
}

/// Applies `ops` to a fresh graph, checking every structural invariant
/// after each step. Returns the final graph.
pub fn run_and_check(ops: &[Op], wall_seed: u64) -> Result<TemporalGraph, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(wall_seed);
    let mut g = TemporalGraph::new();
    let mut wall = 0u64;
    g.append_initial(ReasonDraft::new("root", "A"), wall).map_err(|e| e.to_string())?;
    for (step, op) in ops.iter().enumerate() {
        wall += rng.random_range(0..5);
        let strategy = to_strategy(op, &g);
        let cursor = g.cursor().ok_or("no cursor")?;
        let n_before = g.len();
        let edges_before = g.edges().len();
        let revisions_before = g.node(cursor).unwrap().revisions.len();
        let out_before = out_non_self(&g, cursor);
        let drafts = (0..strategy.arity())
            .map(|i| ReasonDraft::new(format!("s{step}.{i}"), format!("a{step}")))
            .collect();
        let ids = g
            .apply_strategy(&strategy, drafts, wall)
            .map_err(|e| format!("step {step} {strategy}: {e}"))?;
        let fail = |what: &str| Err(format!("step {step} {strategy}: {what}"));
        match &strategy {
            StrategyKind::Generate { fanout } => {
                if ids.len() != *fanout || g.len() != n_before + fanout {
                    return fail("cap did not add k nodes");
                }
                if out_non_self(&g, cursor) != out_before + fanout {
                    return fail("cap outdegree did not grow by k");
                }
            }
            StrategyKind::Merge { sources } => {
                if in_non_self(&g, ids[0]) != sources.len() || sources.len() < 2 {
                    return fail("cone indegree differs from source count");
                }
            }
            StrategyKind::RefineContent => {
                if g.len() != n_before {
                    return fail("refine changed the node count");
                }
                if g.node(cursor).unwrap().revisions.len() != revisions_before + 1 {
                    return fail("refine did not add one revision");
                }
                let added = &g.edges()[edges_before..];
                if added.len() != 1 || added[0].kind != EdgeKind::RefinementLoop || !added[0].is_self_loop() {
                    return fail("refine did not add exactly one self-loop");
                }
            }
            _ => {
                if g.len() != n_before + 1 {
                    return fail("expected one new node");
                }
            }
        }
        check_structure(&g).map_err(|e| format!("step {step} {strategy}: {e}"))?;
    }
    let oracle = oracle_volumes(&g);
    for node in g.nodes() {
        let v = g.volume(node.id).map_err(|e| e.to_string())?;
        if v != oracle[node.id.0 as usize] {
            return Err(format!("volume of {} is {v}, oracle says {}", node.id, oracle[node.id.0 as usize]));
        }
    }
    Ok(g)
}

/// Root uniqueness and time monotonicity.
pub fn check_structure(g: &TemporalGraph) -> Result<(), String> {
    let roots: Vec<_> = g.nodes().filter(|n| n.parent.is_none()).collect();
    if roots.len() != 1 || Some(roots[0].id) != g.root() {
        return Err(format!("{} parentless nodes", roots.len()));
    }
    if g.nodes().filter(|n| n.produced_by == StrategyKind::InitialReason).count() != 1 {
        return Err("initial reason appears more than once".into());
    }
    let mut last = None;
    for n in g.nodes() {
        if last.is_some_and(|(t, w)| n.created_at.tick <= t || n.created_at.wall_ms < w) {
            return Err(format!("node {} breaks time order", n.id));
        }
        last = Some((n.created_at.tick, n.created_at.wall_ms));
    }
    let mut last_edge = None;
    for e in g.edges() {
        if last_edge.is_some_and(|t| e.created_at.tick < t) {
            return Err("edge ticks decrease".into());
        }
        last_edge = Some(e.created_at.tick);
        let (from, to) = (g.node(e.from).ok_or("dangling edge")?, g.node(e.to).ok_or("dangling edge")?);
        if e.from != e.to && from.created_at.tick >= to.created_at.tick {
            return Err(format!("edge {}->{} points backwards", e.from, e.to));
        }
        if e.created_at.tick < to.created_at.tick {
            return Err("edge older than its target".into());
        }
    }
    Ok(())
}
