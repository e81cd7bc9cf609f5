//! Temporal graph of reasons.
//!
//! Every reasoning step is a node carrying its reason text, its answer and
//! the logical/wall-clock instant at which it was created. Nodes are joined
//! by timestamped edges produced by one of five transformations:
//!
//! - explore: a new node derived from the cursor
//! - refine: the cursor's content is rewritten in place (recorded as a self-loop)
//! - backtrack: the cursor jumps to an earlier node and a fresh branch grows from it
//! - generate: `k` siblings fan out of the cursor (cap shape)
//! - merge: several nodes feed a single new node (cone shape)
//!
//! All non-self edges point forward in tick order, so the only cycles that
//! can ever appear are refinement self-loops.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Current version of the serialized graph envelope.
pub const GRAPH_SCHEMA_VERSION: u32 = 1;

/// Logical tick plus milliseconds since run start.
#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Timestamp {
    pub tick: u64,
    pub wall_ms: u64,
}

impl Timestamp {
    pub fn new(tick: u64, wall_ms: u64) -> Self {
        Self { tick, wall_ms }
    }
}

#[derive(
    Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

/// The transformation that produced (or will produce) a node.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StrategyKind {
    InitialReason,
    ExploreNew,
    RefineContent,
    Backtrack { target: NodeId },
    Generate { fanout: usize },
    Merge { sources: Vec<NodeId> },
}

impl StrategyKind {
    pub fn tag(&self) -> &'static str {
        match self {
            Self::InitialReason => "initial_reason",
            Self::ExploreNew => "explore_new",
            Self::RefineContent => "refine_content",
            Self::Backtrack { .. } => "backtrack",
            Self::Generate { .. } => "generate",
            Self::Merge { .. } => "merge",
        }
    }

    /// Number of `(reason, answer)` drafts the strategy consumes.
    pub fn arity(&self) -> usize {
        match self {
            Self::Generate { fanout } => *fanout,
            _ => 1,
        }
    }

    /// Checks the shape constraints that do not depend on a graph.
    pub fn check_shape(&self) -> Result<(), GraphError> {
        match self {
            Self::Generate { fanout } if *fanout < 2 => Err(GraphError::InvalidStrategy(
                format!("generate fanout must be >= 2, got {fanout}"),
            )),
            Self::Merge { sources } => {
                let distinct: BTreeSet<_> = sources.iter().collect();
                if sources.len() < 2 || distinct.len() != sources.len() {
                    Err(GraphError::InvalidStrategy(
                        "merge needs at least two distinct sources".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Backtrack { target } => write!(f, "backtrack({target})"),
            Self::Generate { fanout } => write!(f, "generate({fanout})"),
            Self::Merge { sources } => {
                let ids: Vec<String> = sources.iter().map(ToString::to_string).collect();
                write!(f, "merge({})", ids.join(","))
            }
            other => f.write_str(other.tag()),
        }
    }
}

/// Verifier state of a node.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verification {
    #[default]
    Unchecked,
    #[serde(rename = "true")]
    Passed,
    #[serde(rename = "false")]
    Failed,
}

impl Verification {
    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Self::Passed
        } else {
            Self::Failed
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Revision {
    pub at: Timestamp,
    pub prior_reason: String,
    pub prior_answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasonNode {
    pub id: NodeId,
    pub reason: String,
    pub answer: String,
    pub created_at: Timestamp,
    pub produced_by: StrategyKind,
    pub knowledge_refs: Vec<String>,
    pub verified: Verification,
    pub revisions: Vec<Revision>,
    /// The node the cursor sat on when this node was created (first source
    /// for merges). Absent only for the root.
    pub parent: Option<NodeId>,
    /// Branch tip left behind by the backtrack that created this node.
    pub abandoned: Option<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKind {
    Derivation,
    RefinementLoop,
    MergeIn,
    BacktrackBranch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalEdge {
    pub from: NodeId,
    pub to: NodeId,
    pub created_at: Timestamp,
    pub kind: EdgeKind,
}

impl TemporalEdge {
    pub fn is_self_loop(&self) -> bool {
        self.from == self.to
    }
}

/// Input for one node produced by a strategy.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReasonDraft {
    pub reason: String,
    pub answer: String,
    pub knowledge_refs: Vec<String>,
}

impl ReasonDraft {
    pub fn new(reason: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            reason: reason.into(),
            answer: answer.into(),
            knowledge_refs: Vec::new(),
        }
    }

    pub fn with_refs(mut self, refs: Vec<String>) -> Self {
        self.knowledge_refs = refs;
        self
    }
}

/// Creation lineage from the root to a final node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningPath {
    pub node_ids: Vec<NodeId>,
    pub t_0: Timestamp,
    pub t_f: Timestamp,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("graph already has a root")]
    RootExists,
    #[error("graph has no root")]
    NoRoot,
    #[error("reason text must be non-empty")]
    EmptyReason,
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("strategy expects {expected} drafts, got {got}")]
    ArityMismatch { expected: usize, got: usize },
    #[error("invalid strategy: {0}")]
    InvalidStrategy(String),
    #[error("node {0} is not verified")]
    NotVerified(NodeId),
    #[error("clock went backwards: {now}ms after {last}ms")]
    ClockRegression { last: u64, now: u64 },
    #[error("malformed graph at line {line}, column {column}: {message}")]
    MalformedInput {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("unsupported graph schema version {0}")]
    UnsupportedVersion(u32),
    #[error("graph invariant violated: {0}")]
    InvariantViolation(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TemporalGraph {
    nodes: BTreeMap<NodeId, ReasonNode>,
    edges: Vec<TemporalEdge>,
    root: Option<NodeId>,
    cursor: Option<NodeId>,
    final_node: Option<NodeId>,
    next_tick: u64,
    last_wall: u64,
}

impl TemporalGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn root(&self) -> Option<NodeId> {
        self.root
    }

    pub fn cursor(&self) -> Option<NodeId> {
        self.cursor
    }

    pub fn final_node(&self) -> Option<NodeId> {
        self.final_node
    }

    pub fn node(&self, id: NodeId) -> Option<&ReasonNode> {
        self.nodes.get(&id)
    }

    /// Nodes in creation order.
    pub fn nodes(&self) -> impl Iterator<Item = &ReasonNode> {
        self.nodes.values()
    }

    pub fn edges(&self) -> &[TemporalEdge] {
        &self.edges
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.nodes.contains_key(&id)
    }

    fn require(&self, id: NodeId) -> Result<&ReasonNode, GraphError> {
        self.nodes.get(&id).ok_or(GraphError::UnknownNode(id))
    }

    fn stamp(&mut self, wall_ms: u64) -> Timestamp {
        let ts = Timestamp::new(self.next_tick, wall_ms);
        self.next_tick += 1;
        self.last_wall = wall_ms;
        ts
    }

    fn check_clock(&self, wall_ms: u64) -> Result<(), GraphError> {
        if wall_ms < self.last_wall {
            return Err(GraphError::ClockRegression {
                last: self.last_wall,
                now: wall_ms,
            });
        }
        Ok(())
    }

    fn next_id(&self) -> NodeId {
        NodeId(self.nodes.len() as u32)
    }

    fn insert_node(
        &mut self,
        draft: ReasonDraft,
        produced_by: StrategyKind,
        parent: Option<NodeId>,
        wall_ms: u64,
    ) -> NodeId {
        let id = self.next_id();
        let created_at = self.stamp(wall_ms);
        self.nodes.insert(
            id,
            ReasonNode {
                id,
                reason: draft.reason,
                answer: draft.answer,
                created_at,
                produced_by,
                knowledge_refs: draft.knowledge_refs,
                verified: Verification::Unchecked,
                revisions: Vec::new(),
                parent,
                abandoned: None,
            },
        );
        id
    }

    fn push_edge(&mut self, from: NodeId, to: NodeId, kind: EdgeKind) {
        let created_at = self.nodes[&to].created_at;
        let created_at = if from == to {
            // self-loops are stamped at the revision instant
            self.nodes[&to]
                .revisions
                .last()
                .map(|r| r.at)
                .unwrap_or(created_at)
        } else {
            created_at
        };
        self.edges.push(TemporalEdge {
            from,
            to,
            created_at,
            kind,
        });
    }

    /// Creates the root node. The root becomes the cursor.
    pub fn append_initial(
        &mut self,
        draft: ReasonDraft,
        wall_ms: u64,
    ) -> Result<NodeId, GraphError> {
        if self.root.is_some() {
            return Err(GraphError::RootExists);
        }
        if draft.reason.is_empty() {
            return Err(GraphError::EmptyReason);
        }
        self.check_clock(wall_ms)?;
        let id = self.insert_node(draft, StrategyKind::InitialReason, None, wall_ms);
        self.root = Some(id);
        self.cursor = Some(id);
        Ok(id)
    }

    /// Applies one transformation and returns the ids of the nodes it created
    /// or (for refinement) rewrote. The graph is left untouched on error.
    pub fn apply_strategy(
        &mut self,
        strategy: &StrategyKind,
        payload: Vec<ReasonDraft>,
        wall_ms: u64,
    ) -> Result<Vec<NodeId>, GraphError> {
        let cursor = self.cursor.ok_or(GraphError::NoRoot)?;
        strategy.check_shape()?;
        if matches!(strategy, StrategyKind::InitialReason) {
            return Err(GraphError::RootExists);
        }
        if payload.len() != strategy.arity() {
            return Err(GraphError::ArityMismatch {
                expected: strategy.arity(),
                got: payload.len(),
            });
        }
        if payload.iter().any(|d| d.reason.is_empty()) {
            return Err(GraphError::EmptyReason);
        }
        match strategy {
            StrategyKind::Backtrack { target } => {
                self.require(*target)?;
            }
            StrategyKind::Merge { sources } => {
                for s in sources {
                    self.require(*s)?;
                }
            }
            _ => {}
        }
        self.check_clock(wall_ms)?;

        let mut payload = payload.into_iter();
        let affected = match strategy {
            StrategyKind::InitialReason => unreachable!(),
            StrategyKind::ExploreNew => {
                let draft = payload.next().expect("arity checked");
                let id = self.insert_node(draft, strategy.clone(), Some(cursor), wall_ms);
                self.push_edge(cursor, id, EdgeKind::Derivation);
                self.cursor = Some(id);
                vec![id]
            }
            StrategyKind::RefineContent => {
                let draft = payload.next().expect("arity checked");
                let at = self.stamp(wall_ms);
                let node = self.nodes.get_mut(&cursor).expect("cursor exists");
                let prior_reason = std::mem::replace(&mut node.reason, draft.reason);
                let prior_answer = std::mem::replace(&mut node.answer, draft.answer);
                node.knowledge_refs = draft.knowledge_refs;
                node.verified = Verification::Unchecked;
                node.revisions.push(Revision {
                    at,
                    prior_reason,
                    prior_answer,
                });
                self.push_edge(cursor, cursor, EdgeKind::RefinementLoop);
                vec![cursor]
            }
            StrategyKind::Backtrack { target } => {
                let draft = payload.next().expect("arity checked");
                let id = self.insert_node(draft, strategy.clone(), Some(*target), wall_ms);
                self.nodes.get_mut(&id).expect("just inserted").abandoned = Some(cursor);
                self.push_edge(*target, id, EdgeKind::BacktrackBranch);
                self.cursor = Some(id);
                vec![id]
            }
            StrategyKind::Generate { .. } => {
                let mut ids = Vec::with_capacity(strategy.arity());
                for draft in payload {
                    let id = self.insert_node(draft, strategy.clone(), Some(cursor), wall_ms);
                    self.push_edge(cursor, id, EdgeKind::Derivation);
                    ids.push(id);
                }
                self.cursor = ids.last().copied();
                ids
            }
            StrategyKind::Merge { sources } => {
                let draft = payload.next().expect("arity checked");
                let id = self.insert_node(draft, strategy.clone(), Some(sources[0]), wall_ms);
                for s in sources {
                    self.push_edge(*s, id, EdgeKind::MergeIn);
                }
                self.cursor = Some(id);
                vec![id]
            }
        };
        Ok(affected)
    }

    pub fn set_verified(&mut self, id: NodeId, ok: bool) -> Result<(), GraphError> {
        let node = self.nodes.get_mut(&id).ok_or(GraphError::UnknownNode(id))?;
        node.verified = Verification::from_bool(ok);
        Ok(())
    }

    /// Marks a verified node as final and returns its creation lineage.
    pub fn mark_final(&mut self, id: NodeId) -> Result<ReasoningPath, GraphError> {
        let node = self.require(id)?;
        if node.verified != Verification::Passed {
            return Err(GraphError::NotVerified(id));
        }
        self.final_node = Some(id);
        self.path_to(id)
    }

    /// Root-to-node path following creation-parent links.
    pub fn path_to(&self, id: NodeId) -> Result<ReasoningPath, GraphError> {
        let node_ids = self.lineage(id)?;
        let t_0 = self.nodes[&node_ids[0]].created_at;
        let t_f = self.nodes[&id].created_at;
        Ok(ReasoningPath { node_ids, t_0, t_f })
    }

    pub fn lineage(&self, id: NodeId) -> Result<Vec<NodeId>, GraphError> {
        let mut out = vec![id];
        let mut current = self.require(id)?;
        while let Some(parent) = current.parent {
            out.push(parent);
            current = self.require(parent)?;
        }
        out.reverse();
        Ok(out)
    }

    /// Number of distinct nodes that reach `id` through non-self edges.
    pub fn volume(&self, id: NodeId) -> Result<usize, GraphError> {
        Ok(self.ancestors(id)?.len())
    }

    pub fn ancestors(&self, id: NodeId) -> Result<BTreeSet<NodeId>, GraphError> {
        self.require(id)?;
        let mut incoming: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for e in self.edges.iter().filter(|e| !e.is_self_loop()) {
            incoming.entry(e.to).or_default().push(e.from);
        }
        Ok(walk(id, |n| incoming.get(&n).map(Vec::as_slice).unwrap_or(&[])))
    }

    pub fn descendants(&self, id: NodeId) -> Result<BTreeSet<NodeId>, GraphError> {
        self.require(id)?;
        let mut outgoing: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for e in self.edges.iter().filter(|e| !e.is_self_loop()) {
            outgoing.entry(e.from).or_default().push(e.to);
        }
        Ok(walk(id, |n| outgoing.get(&n).map(Vec::as_slice).unwrap_or(&[])))
    }

    /// Non-self outgoing edge count (parallel edges counted separately).
    pub fn outdegree(&self, id: NodeId) -> usize {
        self.edges
            .iter()
            .filter(|e| e.from == id && !e.is_self_loop())
            .count()
    }

    pub fn indegree(&self, id: NodeId) -> usize {
        self.edges
            .iter()
            .filter(|e| e.to == id && !e.is_self_loop())
            .count()
    }

    /// Nodes with no outgoing non-self edge, in creation order.
    pub fn tips(&self) -> Vec<NodeId> {
        let has_child: BTreeSet<NodeId> = self
            .edges
            .iter()
            .filter(|e| !e.is_self_loop())
            .map(|e| e.from)
            .collect();
        self.nodes
            .keys()
            .copied()
            .filter(|id| !has_child.contains(id))
            .collect()
    }

    /// Most recently created node.
    pub fn last_node(&self) -> Option<NodeId> {
        self.nodes.keys().next_back().copied()
    }

    /// Checks every structural invariant of the graph.
    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |msg: String| Err(GraphError::InvariantViolation(msg));
        if self.nodes.is_empty() {
            if self.root.is_some() || !self.edges.is_empty() {
                return bad("empty graph with root or edges".into());
            }
            return Ok(());
        }
        let Some(root) = self.root else {
            return bad("non-empty graph without root".into());
        };
        for (id, node) in &self.nodes {
            if *id != node.id {
                return bad(format!("node keyed {id} carries id {}", node.id));
            }
            if node.reason.is_empty() {
                return bad(format!("{id} has empty reason"));
            }
            let mut prev = node.created_at;
            for rev in &node.revisions {
                if rev.at.tick <= prev.tick || rev.at.wall_ms < prev.wall_ms {
                    return bad(format!("{id} revisions out of order"));
                }
                prev = rev.at;
            }
            match node.parent {
                None if *id != root => return bad(format!("{id} has no creation parent")),
                Some(p) if !self.nodes.contains_key(&p) => {
                    return bad(format!("{id} parent {p} missing"))
                }
                _ => {}
            }
        }
        let mut has_incoming = BTreeSet::new();
        for e in &self.edges {
            let (Some(from), Some(to)) = (self.nodes.get(&e.from), self.nodes.get(&e.to)) else {
                return bad(format!("edge {}->{} references a missing node", e.from, e.to));
            };
            if (e.kind == EdgeKind::RefinementLoop) != e.is_self_loop() {
                return bad(format!("edge {}->{} kind/self-loop mismatch", e.from, e.to));
            }
            if e.created_at.wall_ms < from.created_at.wall_ms {
                return bad(format!("edge {}->{} predates its source", e.from, e.to));
            }
            if !e.is_self_loop() {
                if to.created_at.tick <= from.created_at.tick {
                    return bad(format!("edge {}->{} goes back in time", e.from, e.to));
                }
                if to.created_at.wall_ms < from.created_at.wall_ms {
                    return bad(format!("edge {}->{} wall clock regression", e.from, e.to));
                }
                has_incoming.insert(e.to);
            }
        }
        let sources: Vec<_> = self
            .nodes
            .keys()
            .filter(|id| !has_incoming.contains(id))
            .collect();
        if sources != [&root] {
            return bad(format!("expected sole source {root}, found {sources:?}"));
        }
        if let Some(f) = self.final_node {
            match self.nodes.get(&f) {
                Some(n) if n.verified == Verification::Passed => {}
                _ => return bad(format!("final node {f} is not verified")),
            }
        }
        for id in [self.cursor, self.final_node].into_iter().flatten() {
            if !self.nodes.contains_key(&id) {
                return bad(format!("dangling reference to {id}"));
            }
        }
        Ok(())
    }

    /// Canonical single-line JSON encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut nodes: Vec<&ReasonNode> = self.nodes.values().collect();
        nodes.sort_by_key(|n| n.created_at.tick);
        let envelope = EnvelopeRef {
            version: GRAPH_SCHEMA_VERSION,
            nodes,
            edges: &self.edges,
            root: self.root,
            cursor: self.cursor,
            final_node: self.final_node,
        };
        serde_json::to_vec(&envelope).expect("graph serialization is infallible")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GraphError> {
        let env: Envelope = serde_json::from_slice(bytes).map_err(|e| GraphError::MalformedInput {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Self::from_envelope(env)
    }

    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::from_slice(&self.to_bytes()).expect("canonical bytes are valid json")
    }

    pub fn from_json_value(value: serde_json::Value) -> Result<Self, GraphError> {
        let env: Envelope = serde_json::from_value(value).map_err(|e| GraphError::MalformedInput {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Self::from_envelope(env)
    }

    fn from_envelope(env: Envelope) -> Result<Self, GraphError> {
        if env.version != GRAPH_SCHEMA_VERSION {
            return Err(GraphError::UnsupportedVersion(env.version));
        }
        let mut nodes = BTreeMap::new();
        let mut next_tick = 0;
        let mut last_wall = 0;
        let mut prev_tick = None;
        for node in env.nodes {
            if prev_tick.is_some_and(|t| node.created_at.tick <= t) {
                return Err(GraphError::InvariantViolation(
                    "nodes are not sorted by tick".into(),
                ));
            }
            prev_tick = Some(node.created_at.tick);
            for ts in std::iter::once(node.created_at).chain(node.revisions.iter().map(|r| r.at)) {
                next_tick = next_tick.max(ts.tick + 1);
                last_wall = last_wall.max(ts.wall_ms);
            }
            let id = node.id;
            if nodes.insert(id, node).is_some() {
                return Err(GraphError::InvariantViolation(format!("duplicate node {id}")));
            }
        }
        let graph = Self {
            nodes,
            edges: env.edges,
            root: env.root,
            cursor: env.cursor,
            final_node: env.final_node,
            next_tick,
            last_wall,
        };
        if graph.next_id().0 as usize != graph.nodes.len()
            || graph.nodes.keys().enumerate().any(|(i, id)| id.0 as usize != i)
        {
            return Err(GraphError::InvariantViolation(
                "node ids are not dense in creation order".into(),
            ));
        }
        graph.validate()?;
        Ok(graph)
    }

    /// Human-readable dump: one node per line, indented by lineage depth.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for node in self.nodes.values() {
            let depth = self.lineage(node.id).map(|l| l.len() - 1).unwrap_or(0);
            let mut marks = String::new();
            if Some(node.id) == self.root {
                marks.push_str(" [root]");
            }
            if Some(node.id) == self.cursor {
                marks.push_str(" [cursor]");
            }
            if Some(node.id) == self.final_node {
                marks.push_str(" [final]");
            }
            let verified = match node.verified {
                Verification::Unchecked => "?",
                Verification::Passed => "T",
                Verification::Failed => "F",
            };
            let _ = writeln!(
                out,
                "{:indent$}t{:<4} {:>6}ms {} {} ({}) [{}] answer={:?} reason={:?}{}{}",
                "",
                node.created_at.tick,
                node.created_at.wall_ms,
                node.id,
                node.produced_by,
                verified,
                node.revisions.len(),
                node.answer,
                first_line(&node.reason),
                node.abandoned
                    .map(|a| format!(" abandoned={a}"))
                    .unwrap_or_default(),
                marks,
                indent = depth * 2,
            );
        }
        out
    }
}

fn first_line(s: &str) -> &str {
    s.lines().next().unwrap_or("")
}

fn walk<'a, F>(start: NodeId, next: F) -> BTreeSet<NodeId>
where
    F: Fn(NodeId) -> &'a [NodeId],
{
    let mut seen = BTreeSet::new();
    let mut stack = vec![start];
    while let Some(n) = stack.pop() {
        for &m in next(n) {
            if m != start && seen.insert(m) {
                stack.push(m);
            }
        }
    }
    seen
}

#[derive(Serialize)]
struct EnvelopeRef<'a> {
    version: u32,
    nodes: Vec<&'a ReasonNode>,
    edges: &'a [TemporalEdge],
    root: Option<NodeId>,
    cursor: Option<NodeId>,
    #[serde(rename = "final")]
    final_node: Option<NodeId>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    version: u32,
    nodes: Vec<ReasonNode>,
    edges: Vec<TemporalEdge>,
    root: Option<NodeId>,
    cursor: Option<NodeId>,
    #[serde(rename = "final")]
    final_node: Option<NodeId>,
}

/// Serializes through the canonical envelope, so embedded graphs match the
/// stored files.
impl Serialize for TemporalGraph {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.to_json_value().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for TemporalGraph {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let env = Envelope::deserialize(deserializer)?;
        Self::from_envelope(env).map_err(serde::de::Error::custom)
    }
}
