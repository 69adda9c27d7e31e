//! The tree and its asynchronous tick engine.
//!
//! Propagation follows two tables. The return table decides, from the
//! states before and after a tick, which tick type rises to the parent.
//! The call table decides, from the stored state and the incoming tick
//! type, how a node evaluates its children. Pending ticks wait in a queue
//! ordered by the Kleene-Brouwer order of node order keys, so descendants
//! always tick before ancestors and siblings tick left to right.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::expr::{ActionSpec, ConditionSpec};
use crate::memory::{Memory, Sample, STATE_PREFIX};

/// Pops allowed per callback before the engine reports a cycle.
pub const TICK_BUDGET: usize = 10_000;

/// Result state of a node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NodeState {
    Running,
    Success,
    Failure,
}

impl NodeState {
    pub const ALL: [NodeState; 3] = [NodeState::Running, NodeState::Success, NodeState::Failure];

    /// Memory encoding: R/S/F as 0.0/1.0/2.0.
    pub fn encode(self) -> f64 {
        match self {
            NodeState::Running => 0.0,
            NodeState::Success => 1.0,
            NodeState::Failure => 2.0,
        }
    }

    pub fn decode(value: f64) -> NodeState {
        if value == 1.0 {
            NodeState::Success
        } else if value == 2.0 {
            NodeState::Failure
        } else {
            NodeState::Running
        }
    }
}

/// Tick classification: direction (Fall is top-down, Rise is bottom-up)
/// and intent (Activating may run actions, Checking only refreshes state).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TickType {
    ActivatingFall,
    ActivatingRise,
    CheckingFall,
    CheckingRise,
    None,
}

impl TickType {
    pub const ALL: [TickType; 5] = [
        TickType::ActivatingFall,
        TickType::ActivatingRise,
        TickType::CheckingFall,
        TickType::CheckingRise,
        TickType::None,
    ];

    fn is_rise(self) -> bool {
        matches!(self, TickType::ActivatingRise | TickType::CheckingRise)
    }

    /// Dominance for queue merging: AF > AR > CF > CR.
    fn strength(self) -> u8 {
        match self {
            TickType::ActivatingFall => 4,
            TickType::ActivatingRise => 3,
            TickType::CheckingFall => 2,
            TickType::CheckingRise => 1,
            TickType::None => 0,
        }
    }

    pub fn merge(self, other: TickType) -> TickType {
        if self.strength() >= other.strength() {
            self
        } else {
            other
        }
    }
}

/// Tick type risen to the parent, from the states before and after a tick.
/// The diagonal is silent, and transitions into Running never propagate:
/// activation only ever travels top-down.
pub fn return_table(before: NodeState, after: NodeState) -> TickType {
    use NodeState::*;
    use TickType::*;
    match (before, after) {
        (Running, Success) | (Running, Failure) => ActivatingRise,
        (Success, Failure) | (Failure, Success) => CheckingRise,
        _ => None,
    }
}

/// Child tick type for sequential control nodes (Sequence, Selector,
/// Skipper), from the stored state and the incoming tick type.
pub fn call_table_sequential(state: NodeState, tick: TickType) -> TickType {
    use NodeState::*;
    use TickType::*;
    match (state, tick) {
        (_, ActivatingFall) => ActivatingFall,
        (Running, ActivatingRise) => ActivatingFall,
        (_, ActivatingRise) => None,
        (_, CheckingFall) => None,
        (_, CheckingRise) => CheckingFall,
        (_, None) => None,
    }
}

/// Parallel differs from the sequential table only at (Running, AR):
/// all subtrees were already activated by the initial fall, so a rise
/// only needs to re-check them.
pub fn call_table_parallel(state: NodeState, tick: TickType) -> TickType {
    use NodeState::*;
    use TickType::*;
    match (state, tick) {
        (Running, ActivatingRise) => CheckingFall,
        _ => call_table_sequential(state, tick),
    }
}

/// Leaves execute on activating falls, re-read on checking falls, and
/// ignore rises regardless of state.
pub fn call_table_leaf(_state: NodeState, tick: TickType) -> TickType {
    use TickType::*;
    match tick {
        ActivatingFall => ActivatingFall,
        CheckingFall => CheckingFall,
        ActivatingRise | CheckingRise | None => None,
    }
}

/// Node order key: root is `[0]`, a child appends its position to the
/// parent's key.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OrderKey(pub Vec<u32>);

impl OrderKey {
    pub fn root() -> OrderKey {
        OrderKey(vec![0])
    }

    pub fn child(&self, index: u32) -> OrderKey {
        let mut key = self.0.clone();
        key.push(index);
        OrderKey(key)
    }

    /// Memory key holding this node's stored state.
    pub fn state_key(&self) -> String {
        let dotted: Vec<String> = self.0.iter().map(u32::to_string).collect();
        format!("{STATE_PREFIX}{}", dotted.join("."))
    }
}

/// Kleene-Brouwer order: `a` precedes `b` when its entry is smaller at the
/// first differing position, or when `b` is a strict prefix of `a`. Hence
/// descendants precede ancestors and left siblings precede right ones.
pub fn kb_less(a: &OrderKey, b: &OrderKey) -> bool {
    kb_cmp(a, b) == Ordering::Less
}

pub fn kb_cmp(a: &OrderKey, b: &OrderKey) -> Ordering {
    for (x, y) in a.0.iter().zip(b.0.iter()) {
        match x.cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    // Shared prefix: the longer key is the descendant and comes first.
    b.0.len().cmp(&a.0.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlKind {
    Sequence,
    Selector,
    Skipper,
    Parallel,
}

impl ControlKind {
    /// Child state that ends the left-to-right scan immediately.
    fn returns_on(self, state: NodeState) -> bool {
        use NodeState::*;
        match self {
            ControlKind::Sequence => matches!(state, Running | Failure),
            ControlKind::Selector => matches!(state, Running | Success),
            ControlKind::Skipper => matches!(state, Success | Failure),
            ControlKind::Parallel => false,
        }
    }

    /// State returned when every child was scanned without a return hit.
    fn continue_on(self) -> NodeState {
        match self {
            ControlKind::Sequence => NodeState::Success,
            ControlKind::Selector => NodeState::Failure,
            ControlKind::Skipper => NodeState::Running,
            ControlKind::Parallel => NodeState::Success,
        }
    }
}

#[derive(Debug, Clone)]
pub enum NodeKind {
    Control(ControlKind),
    Condition(ConditionSpec),
    Action(ActionSpec),
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub struct Node {
    pub kind: NodeKind,
    pub name: String,
    pub order: OrderKey,
    pub parent: Option<NodeId>,
    pub children: Vec<NodeId>,
    state_key: String,
}

/// Pending ticks keyed by Kleene-Brouwer rank, one entry per node;
/// re-insertions merge by dominance.
#[derive(Debug, Default)]
struct TickQueue {
    pending: BTreeMap<u32, TickType>,
}

impl TickQueue {
    fn insert(&mut self, rank: u32, tick: TickType) {
        self.pending
            .entry(rank)
            .and_modify(|t| *t = t.merge(tick))
            .or_insert(tick);
    }

    fn pop_first(&mut self) -> Option<(u32, TickType)> {
        let (&rank, &tick) = self.pending.iter().next()?;
        self.pending.remove(&rank);
        Some((rank, tick))
    }
}

/// An executable tree bound to its memory.
#[derive(Debug)]
pub struct Tree {
    nodes: Vec<Node>,
    memory: Memory,
    queue: TickQueue,
    /// Variable key to the conditions watching it.
    watchers: BTreeMap<String, Vec<NodeId>>,
    /// Node id to Kleene-Brouwer rank and back.
    kb_rank: Vec<u32>,
    rank_node: Vec<NodeId>,
}

impl Tree {
    /// Assembles a tree from an arena whose entry 0 is the root. Parent
    /// and child links must be consistent; order keys must match the
    /// structure. Declares node-state variables (initially Running) and
    /// builds the condition watch index.
    pub(crate) fn from_parts(nodes: Vec<Node>, mut memory: Memory) -> Tree {
        let mut watchers: BTreeMap<String, Vec<NodeId>> = BTreeMap::new();
        for (id, node) in nodes.iter().enumerate() {
            memory.insert_raw(&node.state_key, crate::memory::Scope::Input, 0.0, false);
            if let NodeKind::Condition(spec) = &node.kind {
                for key in spec.deps() {
                    watchers.entry(key).or_default().push(id);
                }
            }
        }
        let mut by_rank: Vec<NodeId> = (0..nodes.len()).collect();
        by_rank.sort_by(|&a, &b| kb_cmp(&nodes[a].order, &nodes[b].order));
        let mut kb_rank = vec![0u32; nodes.len()];
        for (rank, &id) in by_rank.iter().enumerate() {
            kb_rank[id] = rank as u32;
        }
        Tree {
            nodes,
            memory,
            queue: TickQueue::default(),
            watchers,
            kb_rank,
            rank_node: by_rank,
        }
    }

    pub(crate) fn make_node(
        kind: NodeKind,
        name: String,
        order: OrderKey,
        parent: Option<NodeId>,
    ) -> Node {
        let state_key = order.state_key();
        Node {
            kind,
            name,
            order,
            parent,
            children: Vec::new(),
            state_key,
        }
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    pub fn memory_mut(&mut self) -> &mut Memory {
        &mut self.memory
    }

    pub fn hash(&self) -> u64 {
        self.memory.hash()
    }

    pub fn state_of(&self, id: NodeId) -> NodeState {
        let raw = self
            .memory
            .peek_raw(&self.nodes[id].state_key)
            .unwrap_or(0.0);
        NodeState::decode(raw)
    }

    fn set_state(&mut self, id: NodeId, state: NodeState) {
        let key = self.nodes[id].state_key.clone();
        self.memory.write_raw(&key, state.encode());
    }

    /// Ticks one node: look up the child tick type, evaluate, store the
    /// new state, and report it with the tick type rising to the parent.
    pub fn tick(&mut self, id: NodeId, tick: TickType) -> Result<(NodeState, TickType)> {
        let old = self.state_of(id);
        let child_tick = match &self.nodes[id].kind {
            NodeKind::Control(ControlKind::Parallel) => call_table_parallel(old, tick),
            NodeKind::Control(_) => call_table_sequential(old, tick),
            NodeKind::Condition(_) | NodeKind::Action(_) => call_table_leaf(old, tick),
        };
        let new = self.evaluate(id, child_tick)?;
        self.set_state(id, new);
        Ok((new, return_table(old, new)))
    }

    fn evaluate(&mut self, id: NodeId, tick: TickType) -> Result<NodeState> {
        if tick == TickType::None {
            return Ok(self.state_of(id));
        }
        // Clones are cheap pointers-and-vecs; they free `self` for the
        // recursive child ticks below.
        match self.nodes[id].kind.clone() {
            NodeKind::Control(ControlKind::Parallel) => {
                let children = self.nodes[id].children.clone();
                let mut any_running = false;
                let mut any_failure = false;
                for child in children {
                    let (state, _) = self.tick(child, tick)?;
                    match state {
                        NodeState::Running => any_running = true,
                        NodeState::Failure => any_failure = true,
                        NodeState::Success => {}
                    }
                }
                Ok(if any_failure {
                    NodeState::Failure
                } else if any_running {
                    NodeState::Running
                } else {
                    NodeState::Success
                })
            }
            NodeKind::Control(kind) => {
                let children = self.nodes[id].children.clone();
                for child in children {
                    let (state, _) = self.tick(child, tick)?;
                    if kind.returns_on(state) {
                        return Ok(state);
                    }
                }
                Ok(kind.continue_on())
            }
            NodeKind::Condition(spec) => match tick {
                TickType::ActivatingFall | TickType::CheckingFall => {
                    spec.evaluate(&mut self.memory).map_err(|e| self.blame(id, e))
                }
                _ => Ok(self.state_of(id)),
            },
            NodeKind::Action(spec) => match tick {
                TickType::ActivatingFall => {
                    spec.run(&mut self.memory).map_err(|e| self.blame(id, e))?;
                    Ok(NodeState::Success)
                }
                // Checking never executes assignments.
                _ => Ok(self.state_of(id)),
            },
        }
    }

    fn blame(&self, id: NodeId, err: Error) -> Error {
        match err {
            Error::DivideByZero { node: None } => Error::DivideByZero {
                node: Some(self.nodes[id].name.clone()),
            },
            other => other,
        }
    }

    /// Conditions whose watch set intersects the dirty keys and whose
    /// fresh evaluation differs from the stored state, in Kleene-Brouwer
    /// order. Consumes the dirty set.
    pub fn changed_conditions(&mut self) -> Result<Vec<NodeId>> {
        let changed = self.scan_conditions()?;
        self.memory.clear_dirty();
        Ok(changed)
    }

    /// Like [`Tree::changed_conditions`] but leaves the dirty set intact,
    /// for use as a would-anything-change probe.
    pub fn has_changed_conditions(&mut self) -> Result<bool> {
        Ok(!self.scan_conditions()?.is_empty())
    }

    fn scan_conditions(&mut self) -> Result<Vec<NodeId>> {
        if self.memory.dirty_keys().is_empty() {
            return Ok(Vec::new());
        }
        let mut candidates = BTreeSet::new();
        for key in self.memory.dirty_keys() {
            if let Some(ids) = self.watchers.get(key) {
                candidates.extend(ids.iter().copied());
            }
        }
        let mut hits: Vec<NodeId> = Vec::new();
        for id in candidates {
            let spec = match &self.nodes[id].kind {
                NodeKind::Condition(spec) => spec.clone(),
                _ => continue,
            };
            let fresh = spec
                .evaluate(&mut self.memory)
                .map_err(|e| self.blame(id, e))?;
            if fresh != self.state_of(id) {
                hits.push(id);
            }
        }
        hits.sort_by_key(|&id| self.kb_rank[id]);
        Ok(hits)
    }

    fn enqueue_changed_conditions(&mut self) -> Result<()> {
        for id in self.changed_conditions()? {
            self.queue.insert(self.kb_rank[id], TickType::ActivatingFall);
        }
        Ok(())
    }

    /// Drains the tick queue: pop the KB-least node, tick it, rise to the
    /// parent when the return table says so, then fold in any conditions
    /// flipped by action writes. A pop budget turns livelock into an error.
    fn run_queue(&mut self) -> Result<()> {
        let mut pops = 0usize;
        while let Some((rank, tick)) = self.queue.pop_first() {
            pops += 1;
            if pops > TICK_BUDGET {
                return Err(Error::CycleBudgetExceeded { budget: TICK_BUDGET });
            }
            let id = self.rank_node[rank as usize];
            let (_, rise) = self.tick(id, tick)?;
            if rise.is_rise() {
                if let Some(parent) = self.nodes[id].parent {
                    self.queue.insert(self.kb_rank[parent], rise);
                }
            }
            self.enqueue_changed_conditions()?;
        }
        Ok(())
    }

    /// Applies a sample and propagates until quiescence, returning the
    /// accumulated Output changes. Callbacks are strictly serialized.
    pub fn callback(&mut self, sample: &Sample) -> Result<Sample> {
        self.memory.set(sample);
        self.enqueue_changed_conditions()?;
        self.run_queue()?;
        Ok(self.memory.drain_output_changes())
    }

    /// Initial activation: a single activating-fall tick on the root,
    /// then the same propagation loop as a callback.
    pub fn start(&mut self) -> Result<Sample> {
        self.tick(self.root(), TickType::ActivatingFall)?;
        self.enqueue_changed_conditions()?;
        self.run_queue()?;
        Ok(self.memory.drain_output_changes())
    }

    /// Classical top-down baseline: apply the sample, then a full
    /// activating-fall traversal from the root. Used for benchmarking and
    /// as an equivalence oracle; a tree driven this way must not also be
    /// driven through [`Tree::callback`].
    pub fn classical_callback(&mut self, sample: &Sample) -> Result<Sample> {
        self.memory.set(sample);
        self.tick(self.root(), TickType::ActivatingFall)?;
        // The traversal re-evaluated everything; the dirty set has no
        // consumer in this mode.
        self.memory.clear_dirty();
        Ok(self.memory.drain_output_changes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl;

    fn build(text: &str) -> Tree {
        dsl::build(&dsl::parse_tree(text).unwrap()).unwrap()
    }

    fn sample(pairs: &[(&str, f64)]) -> Sample {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn kb_child_precedes_parent() {
        let parent = OrderKey(vec![0, 0]);
        let child = OrderKey(vec![0, 0, 1]);
        assert!(kb_less(&child, &parent));
        assert!(!kb_less(&parent, &child));
    }

    #[test]
    fn kb_left_sibling_first() {
        assert!(kb_less(&OrderKey(vec![0, 0, 1, 0]), &OrderKey(vec![0, 0, 1, 1])));
    }

    #[test]
    fn kb_is_irreflexive() {
        let key = OrderKey(vec![0, 0]);
        assert!(!kb_less(&key, &key));
    }

    #[test]
    fn queue_merges_by_dominance() {
        let mut q = TickQueue::default();
        q.insert(3, TickType::CheckingRise);
        q.insert(3, TickType::ActivatingRise);
        q.insert(1, TickType::CheckingFall);
        assert_eq!(q.pop_first(), Some((1, TickType::CheckingFall)));
        assert_eq!(q.pop_first(), Some((3, TickType::ActivatingRise)));
        assert_eq!(q.pop_first(), None);
    }

    #[test]
    fn queue_keeps_activating_over_checking() {
        assert_eq!(
            TickType::ActivatingFall.merge(TickType::ActivatingRise),
            TickType::ActivatingFall
        );
        assert_eq!(
            TickType::CheckingRise.merge(TickType::CheckingFall),
            TickType::CheckingFall
        );
    }

    #[test]
    fn sequence_resumed_by_rise_activates_children() {
        // Sequence in R ticked with AR evaluates children with AF.
        assert_eq!(
            call_table_sequential(NodeState::Running, TickType::ActivatingRise),
            TickType::ActivatingFall
        );
    }

    #[test]
    fn success_to_failure_rises_as_checking() {
        assert_eq!(
            return_table(NodeState::Success, NodeState::Failure),
            TickType::CheckingRise
        );
    }

    #[test]
    fn unchanged_state_rises_nothing() {
        for s in NodeState::ALL {
            assert_eq!(return_table(s, s), TickType::None);
        }
    }

    #[test]
    fn action_executes_on_activating_fall_only() {
        let mut tree = build("output out; act go { out := 1 }");
        let (state, _) = tree.tick(0, TickType::ActivatingFall).unwrap();
        assert_eq!(state, NodeState::Success);
        assert_eq!(tree.memory_mut().get("out"), 1.0);

        let mut tree = build("output out; act go { out := 1 }");
        let (state, _) = tree.tick(0, TickType::CheckingFall).unwrap();
        assert_eq!(state, NodeState::Running);
        assert_eq!(tree.memory_mut().get("out"), 0.0);
    }

    #[test]
    fn condition_runs_on_boundary_value() {
        let mut tree = build("cond c { S: x > 0; F: x < 0; R: default }");
        tree.memory_mut().set(&sample(&[("x", 0.0)]));
        let (state, _) = tree.tick(0, TickType::ActivatingFall).unwrap();
        assert_eq!(state, NodeState::Running);
    }

    #[test]
    fn sequence_stops_at_first_failure() {
        let mut tree = build(
            "seq { cond a { S: default } cond b { F: default } cond c { S: default } }",
        );
        let (state, _) = tree.tick(0, TickType::ActivatingFall).unwrap();
        assert_eq!(state, NodeState::Failure);
        // Third child never ticked: still at its initial Running state.
        assert_eq!(tree.state_of(3), NodeState::Running);
    }

    #[test]
    fn skipper_skips_running_children() {
        let mut tree = build("skip { cond a { R: default } cond b { S: default } }");
        let (state, _) = tree.tick(0, TickType::ActivatingFall).unwrap();
        assert_eq!(state, NodeState::Success);

        let mut tree = build("skip { cond a { R: default } cond b { R: default } }");
        let (state, _) = tree.tick(0, TickType::ActivatingFall).unwrap();
        assert_eq!(state, NodeState::Running);
    }

    #[test]
    fn parallel_ticks_all_children() {
        let mut tree = build(
            "output a; output b; par { act one { a := 1 } act two { b := 1 } }",
        );
        let (state, _) = tree.tick(0, TickType::ActivatingFall).unwrap();
        assert_eq!(state, NodeState::Success);
        assert_eq!(tree.memory_mut().get("a"), 1.0);
        assert_eq!(tree.memory_mut().get("b"), 1.0);
    }

    #[test]
    fn parallel_combines_success_and_running() {
        let mut tree = build("par { cond a { S: default } cond b { R: default } }");
        let (state, _) = tree.tick(0, TickType::ActivatingFall).unwrap();
        assert_eq!(state, NodeState::Running);
    }

    #[test]
    fn changed_conditions_filters_by_watch_set() {
        let mut tree = build(
            "seq { cond c { S: x > 0; R: default } act a { out := 1 } }",
        );
        tree.start().unwrap();
        tree.memory_mut().set(&sample(&[("y", 1.0)]));
        assert!(tree.changed_conditions().unwrap().is_empty());
        tree.memory_mut().set(&sample(&[("x", 1.0)]));
        let hits = tree.changed_conditions().unwrap();
        assert_eq!(hits.len(), 1);
        assert!(matches!(tree.node(hits[0]).kind, NodeKind::Condition(_)));
    }

    #[test]
    fn suppressed_write_flips_nothing() {
        let mut tree = build("seq { cond c { S: x > 0; R: default } act a { out := 1 } }");
        tree.start().unwrap();
        tree.memory_mut().set(&sample(&[("x", 0.0)]));
        assert!(tree.changed_conditions().unwrap().is_empty());
    }

    #[test]
    fn start_activates_single_action() {
        let mut tree = build("output out; act go { out := 1 }");
        assert_eq!(tree.start().unwrap(), sample(&[("out", 1.0)]));
    }

    #[test]
    fn start_leaves_default_condition_running() {
        let mut tree = build("cond c { R: default }");
        assert!(tree.start().unwrap().is_empty());
        assert_eq!(tree.state_of(tree.root()), NodeState::Running);
    }

    #[test]
    fn callback_without_watchers_ticks_nothing() {
        let mut tree = build("seq { cond c { S: x > 0; R: default } act a { out := 1 } }");
        tree.start().unwrap();
        let out = tree.callback(&sample(&[("unrelated", 5.0)])).unwrap();
        assert!(out.is_empty());
        assert_eq!(tree.state_of(tree.root()), NodeState::Running);
    }

    #[test]
    fn callback_propagates_condition_flip_to_action() {
        let mut tree = build(
            "output out; seq { cond c { S: x > 0; R: default } act a { out := 1 } }",
        );
        tree.start().unwrap();
        let out = tree.callback(&sample(&[("x", 2.0)])).unwrap();
        assert_eq!(out, sample(&[("out", 1.0)]));
        assert_eq!(tree.state_of(tree.root()), NodeState::Success);
    }

    #[test]
    fn resume_reruns_left_actions_silently() {
        // On resume the sequence re-ticks children from the left; the
        // re-executed action writes an equal value and emits nothing.
        let mut tree = build(
            "output land; seq { act go { land := 1 } cond accepted { S: ok > 0; R: default } \
             cond finished { S: done > 0; R: default } }",
        );
        assert_eq!(tree.start().unwrap(), sample(&[("land", 1.0)]));
        let out = tree.callback(&sample(&[("ok", 1.0)])).unwrap();
        assert!(out.is_empty());
        let out = tree.callback(&sample(&[("done", 1.0)])).unwrap();
        assert!(out.is_empty());
        assert_eq!(tree.state_of(tree.root()), NodeState::Success);
    }

    #[test]
    fn condition_feedback_settles_without_livelock() {
        // Two branches hand a token back and forth through the memory.
        // The silent S-to-R demotions and the queue order make the loop
        // die out instead of cycling.
        let mut tree = build(
            "par {
                seq s1 { cond c0 { S: y == 1; R: default } act a1 { y := 0; x := 1 } cond h1 { R: default } }
                seq s2 { cond c1 { S: x == 1; R: default } act a2 { x := 0; y := 1 } cond h2 { R: default } }
            }",
        );
        tree.start().unwrap();
        assert!(tree.callback(&sample(&[("y", 1.0)])).unwrap().is_empty());
    }

    #[test]
    fn budget_bounds_pops_per_callback() {
        // One flipped variable arms more conditions than the budget
        // allows popping in a single callback.
        let mut text = String::from("seq {\n");
        for i in 0..=TICK_BUDGET {
            text.push_str(&format!("cond c{i} {{ S: x > 0; R: default }}\n"));
        }
        text.push('}');
        let mut tree = build(&text);
        tree.start().unwrap();
        let err = tree.callback(&sample(&[("x", 1.0)])).unwrap_err();
        assert!(matches!(err, Error::CycleBudgetExceeded { .. }));
    }

    #[test]
    fn classical_callback_suppresses_repeat_outputs() {
        let mut tree = build("output out; act go { out := 1 }");
        assert_eq!(
            tree.classical_callback(&Sample::new()).unwrap(),
            sample(&[("out", 1.0)])
        );
        assert!(tree.classical_callback(&Sample::new()).unwrap().is_empty());
    }

    #[test]
    fn classical_callback_traverses_on_sparse_samples() {
        let mut tree = build(
            "output out; seq { cond c { S: x > 0; R: default } act a { out := 1 } }",
        );
        tree.classical_callback(&Sample::new()).unwrap();
        // A sparse sample still re-runs the traversal; flipping x later
        // is observed without any queue involvement.
        assert!(tree.classical_callback(&sample(&[("noise", 1.0)])).unwrap().is_empty());
        let out = tree.classical_callback(&sample(&[("x", 1.0)])).unwrap();
        assert_eq!(out, sample(&[("out", 1.0)]));
    }

    #[test]
    fn deterministic_replay_reaches_identical_hash() {
        let text = "output out; seq { cond c { S: x > 0; R: default } act a { out := x + 1 } }";
        let stream = [
            sample(&[("x", 1.0)]),
            sample(&[("x", 0.0)]),
            sample(&[("x", 2.0)]),
        ];
        let run = |_| {
            let mut tree = build(text);
            let mut outputs = vec![tree.start().unwrap()];
            for s in &stream {
                outputs.push(tree.callback(s).unwrap());
            }
            (outputs, tree.hash())
        };
        assert_eq!(run(0), run(1));
    }
}
