//! Redundant-executor synchronization: the complementary sync tree, the
//! wrapper callback that routes samples between the mission tree and the
//! sync tree, and variable-dump transfer from master to slaves.
//!
//! A round starts when a mission condition changes (or a peer's hash
//! broadcast arrives), proceeds through hash collection with a timeout,
//! elects the minimum alive replica as master, pushes the master's
//! variables when hashes disagree, and cleans up. Rounds are only
//! triggered by condition changes: samples that flip nothing cost no
//! synchronization at all.

use std::collections::BTreeSet;

use crate::dsl::{self, NodeDef, TreeDefinition, VarDecl};
use crate::engine::{ControlKind, NodeState, Tree};
use crate::error::{Error, Result};
use crate::expr::{self, ActionSpec, ConditionSpec, Expr, Guard};
use crate::memory::{Sample, Scope};

pub const TRIGGER_SYNC: &str = "trigger_sync";
pub const SYNC_ENDED: &str = "sync_ended";
pub const SEND_VARS: &str = "send_vars";
pub const RECEIVED_VARS: &str = "received_vars";
pub const MASTER: &str = "master";
pub const TIME_START: &str = "time_start";
pub const LAST_MASTER: &str = "last_master";
const HASH_SENT: &str = "hash_sent";
const WAIT_DONE: &str = "wait_done";
const MY_HASH_LO: &str = "my_hash_lo";
const MY_HASH_HI: &str = "my_hash_hi";
const MAX_DELAY: &str = "max_delay";

/// One redundant executor's identity and timing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncConfig {
    /// 1-based replica index.
    pub me: u32,
    /// Replica count, at least 2.
    pub n: u32,
    /// Seconds to wait for peer hashes before electing without them.
    pub max_delay: f64,
}

impl SyncConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.me == 0 || self.me > self.n {
            return Err(Error::Config(format!(
                "replica index {} out of range 1..={}",
                self.me, self.n
            )));
        }
        if !self.max_delay.is_finite() || self.max_delay <= 0.0 {
            return Err(Error::Config("max_delay must be positive".to_string()));
        }
        Ok(())
    }
}

/// True for keys owned by the synchronization protocol. Mission trees may
/// not declare or reference them, and any sample carrying one is routed
/// to the sync tree.
pub fn is_reserved_sync_key(key: &str) -> bool {
    matches!(
        key,
        TRIGGER_SYNC
            | SYNC_ENDED
            | SEND_VARS
            | RECEIVED_VARS
            | MASTER
            | TIME_START
            | LAST_MASTER
            | HASH_SENT
            | WAIT_DONE
            | MY_HASH_LO
            | MY_HASH_HI
    ) || key.starts_with("hash_")
}

pub fn is_sync_sample(sample: &Sample) -> bool {
    sample.keys().any(|k| is_reserved_sync_key(k))
}

fn hash_lo(i: u32) -> String {
    format!("hash_{i}_lo")
}

fn hash_hi(i: u32) -> String {
    format!("hash_{i}_hi")
}

fn hash_set(i: u32) -> String {
    format!("hash_set_{i}")
}

fn guard(text: &str) -> Guard {
    Guard::Expr(expr::parse_expr(text).expect("generated guard parses"))
}

fn assign(target: &str, text: &str) -> (String, Expr) {
    (
        target.to_string(),
        expr::parse_expr(text).expect("generated assignment parses"),
    )
}

fn cond(name: &str, rules: Vec<(Guard, NodeState)>) -> NodeDef {
    NodeDef::Condition {
        name: name.to_string(),
        spec: ConditionSpec { rules },
    }
}

fn act(name: &str, assignments: Vec<(String, Expr)>) -> NodeDef {
    NodeDef::Action {
        name: name.to_string(),
        spec: ActionSpec { assignments },
    }
}

fn control(kind: ControlKind, name: &str, children: Vec<NodeDef>) -> NodeDef {
    NodeDef::Control {
        kind,
        name: Some(name.to_string()),
        children,
    }
}

/// An always-Running condition. A sequence with one of these at the end
/// parks in Running instead of completing, which keeps it resumable:
/// the tables never re-activate a node whose stored state is Success.
fn hold(name: &str) -> NodeDef {
    cond(name, vec![(Guard::Default, NodeState::Running)])
}

fn decl(key: &str, scope: Scope, initial: f64) -> VarDecl {
    VarDecl {
        key: key.to_string(),
        scope,
        initial,
        local: false,
    }
}

/// Builds the synchronization tree for one replica.
pub fn build_sync_tree(cfg: &SyncConfig) -> Result<Tree> {
    cfg.validate()?;
    dsl::build(&sync_tree_definition(cfg))
}

/// The sync tree as a definition.
///
/// Root sequence: (1) start condition, (2) latched hash broadcast,
/// (3) hash collection with timeout then master election, (4) agreement
/// check with master push / receipt wait, (5) cleanup, (6) a hold that
/// keeps the root Running between rounds.
///
/// The collection latch freezes to Failure on either outcome (all hashes
/// received or timeout) so the election chain runs every round; master
/// selection is therefore always the minimum index with a hash present
/// at decision time.
pub fn sync_tree_definition(cfg: &SyncConfig) -> TreeDefinition {
    let n = cfg.n;
    let me = cfg.me;

    let mut declarations = vec![
        decl(TRIGGER_SYNC, Scope::Input, 0.0),
        decl(SYNC_ENDED, Scope::Output, 0.0),
        decl(SEND_VARS, Scope::Output, 0.0),
        decl(RECEIVED_VARS, Scope::Input, 0.0),
        decl(MASTER, Scope::Input, 0.0),
        decl(TIME_START, Scope::Input, 0.0),
        decl(LAST_MASTER, Scope::Output, 0.0),
        decl(HASH_SENT, Scope::Input, 0.0),
        decl(WAIT_DONE, Scope::Input, 0.0),
        decl(MY_HASH_LO, Scope::Input, 0.0),
        decl(MY_HASH_HI, Scope::Input, 0.0),
        decl(MAX_DELAY, Scope::Input, cfg.max_delay),
        VarDecl {
            key: "time".to_string(),
            scope: Scope::Input,
            initial: 0.0,
            local: true,
        },
    ];
    for i in 1..=n {
        let scope = if i == me { Scope::Output } else { Scope::Input };
        declarations.push(decl(&hash_lo(i), scope, 0.0));
        declarations.push(decl(&hash_hi(i), scope, 0.0));
        declarations.push(decl(&hash_set(i), scope, 0.0));
    }

    // (1) A round starts on a local trigger or on any peer's broadcast.
    let start_guard = {
        let mut terms = vec![format!("{TRIGGER_SYNC} == 1")];
        terms.extend((1..=n).map(|i| format!("{} == 1", hash_set(i))));
        terms.join(" or ")
    };
    let start = cond(
        "start_sync",
        vec![
            (guard(&start_guard), NodeState::Success),
            (Guard::Default, NodeState::Running),
        ],
    );

    // (2) Broadcast this replica's mission hash once per round.
    let send = control(
        ControlKind::Skipper,
        "send_latch",
        vec![
            cond(
                "hash_sent_q",
                vec![
                    (guard(&format!("{HASH_SENT} == 1")), NodeState::Success),
                    (Guard::Default, NodeState::Running),
                ],
            ),
            act(
                "send_hash",
                vec![
                    assign(&hash_lo(me), MY_HASH_LO),
                    assign(&hash_hi(me), MY_HASH_HI),
                    assign(&hash_set(me), "1"),
                    assign(TIME_START, "time"),
                    assign(HASH_SENT, "1"),
                ],
            ),
        ],
    );

    // (3) Wait until every replica's hash arrived or the timeout passed,
    // then elect the first alive index. The timeout only arms after this
    // replica's own broadcast, so a stale time_start cannot fire it.
    let recv_conds: Vec<NodeDef> = (1..=n)
        .map(|i| {
            cond(
                &format!("recv_{i}"),
                vec![
                    (guard(&format!("{} == 1", hash_set(i))), NodeState::Success),
                    (Guard::Default, NodeState::Running),
                ],
            )
        })
        .collect();
    let all_received = control(ControlKind::Sequence, "all_received", recv_conds);
    let timeout = cond(
        "timeout",
        vec![
            (
                guard(&format!(
                    "{} == 1 and time - {TIME_START} > {MAX_DELAY}",
                    hash_set(me)
                )),
                NodeState::Success,
            ),
            (Guard::Default, NodeState::Running),
        ],
    );
    let wait = control(ControlKind::Skipper, "wait", vec![all_received, timeout]);
    let wait_latch = control(
        ControlKind::Skipper,
        "wait_latch",
        vec![
            cond(
                "wait_done_q",
                vec![
                    (guard(&format!("{WAIT_DONE} == 1")), NodeState::Failure),
                    (Guard::Default, NodeState::Running),
                ],
            ),
            control(
                ControlKind::Sequence,
                "wait_seq",
                vec![
                    wait,
                    act("mark_wait_done", vec![assign(WAIT_DONE, "1")]),
                    hold("wait_hold"),
                ],
            ),
        ],
    );
    let mut election_arms: Vec<NodeDef> = (1..n)
        .map(|i| {
            control(
                ControlKind::Sequence,
                &format!("pick_{i}"),
                vec![
                    cond(
                        &format!("alive_{i}"),
                        vec![
                            (guard(&format!("{} == 1", hash_set(i))), NodeState::Success),
                            (Guard::Default, NodeState::Failure),
                        ],
                    ),
                    act(&format!("set_master_{i}"), vec![assign(MASTER, &i.to_string())]),
                ],
            )
        })
        .collect();
    election_arms.push(act(
        &format!("set_master_{n}"),
        vec![assign(MASTER, &n.to_string())],
    ));
    let collect = control(
        ControlKind::Selector,
        "collect",
        vec![
            wait_latch,
            control(ControlKind::Selector, "choose_master", election_arms),
        ],
    );

    // (4) Succeed when every alive replica reports the same hash;
    // otherwise the master pushes its variables and slaves wait for the
    // dump receipt. The receipt condition defaults to Running so the
    // waiting round stays resumable.
    //
    // Both guards require wait_done: a rise from a flipped condition
    // re-activates its whole ancestor subtree, so without the phase flag
    // a replica's own broadcast would elect itself and push its variables
    // while collection is still in progress.
    let equal_guard = {
        let mut pairs = vec![format!("{WAIT_DONE} == 1")];
        for i in 1..=n {
            for j in (i + 1)..=n {
                pairs.push(format!(
                    "({} == 0 or {} == 0 or ({} == {} and {} == {}))",
                    hash_set(i),
                    hash_set(j),
                    hash_lo(i),
                    hash_lo(j),
                    hash_hi(i),
                    hash_hi(j)
                ));
            }
        }
        pairs.join(" and ")
    };
    let agree = control(
        ControlKind::Selector,
        "agree",
        vec![
            cond(
                "hashes_equal",
                vec![
                    (guard(&equal_guard), NodeState::Success),
                    (Guard::Default, NodeState::Failure),
                ],
            ),
            control(
                ControlKind::Selector,
                "push",
                vec![
                    control(
                        ControlKind::Sequence,
                        "master_push",
                        vec![
                            cond(
                                "i_am_master",
                                vec![
                                    (
                                        guard(&format!(
                                            "{WAIT_DONE} == 1 and {MASTER} == {me}"
                                        )),
                                        NodeState::Success,
                                    ),
                                    (Guard::Default, NodeState::Failure),
                                ],
                            ),
                            act("request_push", vec![assign(SEND_VARS, "1")]),
                        ],
                    ),
                    cond(
                        "got_vars",
                        vec![
                            (guard(&format!("{RECEIVED_VARS} == 1")), NodeState::Success),
                            (Guard::Default, NodeState::Running),
                        ],
                    ),
                ],
            ),
        ],
    );

    // (5) Publish the round's master, signal completion, and zero the
    // protocol state for the next round.
    let mut cleanup = vec![
        assign(LAST_MASTER, MASTER),
        assign(SYNC_ENDED, "1"),
        assign(TRIGGER_SYNC, "0"),
        assign(SEND_VARS, "0"),
        assign(RECEIVED_VARS, "0"),
        assign(MASTER, "0"),
        assign(HASH_SENT, "0"),
        assign(WAIT_DONE, "0"),
        assign(TIME_START, "0"),
    ];
    for i in 1..=n {
        cleanup.push(assign(&hash_set(i), "0"));
        cleanup.push(assign(&hash_lo(i), "0"));
        cleanup.push(assign(&hash_hi(i), "0"));
    }
    let finish = act("finish", cleanup);

    let root = control(
        ControlKind::Sequence,
        "sync_root",
        vec![start, send, collect, agree, finish, hold("round_gate")],
    );

    TreeDefinition { declarations, root }
}

/// A mission tree paired with its synchronization tree.
#[derive(Debug)]
pub struct Executor {
    mission: Tree,
    sync: Tree,
    cfg: SyncConfig,
    /// Master as of the last completed round; replica 1 by convention
    /// before any election.
    current_master: u32,
}

impl Executor {
    /// Builds both trees. The mission definition may not declare or
    /// reference reserved synchronization keys.
    pub fn new(mission: &TreeDefinition, cfg: SyncConfig) -> Result<Executor> {
        cfg.validate()?;
        check_mission_vocabulary(mission)?;
        Ok(Executor {
            mission: dsl::build(mission)?,
            sync: build_sync_tree(&cfg)?,
            cfg,
            current_master: 1,
        })
    }

    /// Activates both trees; returns the mission's initial outputs.
    pub fn start(&mut self) -> Result<Sample> {
        self.sync.start()?;
        self.mission.start()
    }

    pub fn config(&self) -> &SyncConfig {
        &self.cfg
    }

    pub fn mission(&self) -> &Tree {
        &self.mission
    }

    pub fn sync_tree(&self) -> &Tree {
        &self.sync
    }

    pub fn mission_hash(&self) -> u64 {
        self.mission.hash()
    }

    pub fn current_master(&self) -> u32 {
        self.current_master
    }

    /// The wrapper callback. Non-sync samples update the mission memory;
    /// if that flips any condition the sample is replaced by a sync
    /// trigger. Sync samples run the sync tree, and once a round ends the
    /// mission consumes its pending changes. Time samples are mirrored
    /// into the sync tree so collection timeouts can fire.
    pub fn callback_with_sync(&mut self, sample: &Sample) -> Result<Sample> {
        let mut outputs = Sample::new();
        let mut sync_sample = None;
        if is_sync_sample(sample) {
            sync_sample = Some(sample.clone());
        } else {
            self.mission.memory_mut().set(sample);
            if let Some(&t) = sample.get("time") {
                let mut tick = Sample::new();
                tick.insert("time".to_string(), t);
                merge(&mut outputs, self.sync_callback(&tick)?);
            }
            if self.mission.has_changed_conditions()? {
                let mut trigger = Sample::new();
                trigger.insert(TRIGGER_SYNC.to_string(), 1.0);
                sync_sample = Some(trigger);
            }
        }
        if let Some(s) = sync_sample {
            merge(&mut outputs, self.sync_callback(&s)?);
        }
        self.finish_round(outputs)
    }

    fn sync_callback(&mut self, sample: &Sample) -> Result<Sample> {
        // The send action reads the mission hash through these inputs;
        // refresh them so a starting round broadcasts the current state.
        let hash = self.mission.hash();
        let memory = self.sync.memory_mut();
        memory.write_raw(MY_HASH_LO, f64::from((hash & 0xffff_ffff) as u32));
        memory.write_raw(MY_HASH_HI, f64::from((hash >> 32) as u32));
        self.sync.callback(sample)
    }

    fn finish_round(&mut self, mut outputs: Sample) -> Result<Sample> {
        if let Some(&master) = outputs.get(LAST_MASTER) {
            if master != 0.0 {
                self.current_master = master as u32;
            }
        }
        if outputs.contains_key(SYNC_ENDED) {
            // Re-arm the flag so the next round's assignment is a change.
            self.sync.memory_mut().write_raw(SYNC_ENDED, 0.0);
            merge(&mut outputs, self.mission.callback(&Sample::new())?);
        }
        Ok(outputs)
    }

    /// Canonical snapshot of the mission memory, sent by the master when
    /// hashes disagree. The `send_vars` key appearing in a callback's
    /// outputs is the request to transfer it.
    pub fn make_var_dump(&self) -> Vec<u8> {
        self.mission.memory().canonical_snapshot()
    }

    /// Adopts a master's dump bit-exactly (states included, nothing
    /// marked dirty), then injects the receipt into the sync tree. On a
    /// malformed dump the mission state is untouched and no receipt is
    /// injected. Returns the receipt callback's outputs.
    pub fn apply_var_dump(&mut self, dump: &[u8]) -> Result<Sample> {
        self.mission.memory_mut().adopt_snapshot(dump)?;
        let mut receipt = Sample::new();
        receipt.insert(RECEIVED_VARS.to_string(), 1.0);
        self.callback_with_sync(&receipt)
    }
}

fn merge(into: &mut Sample, from: Sample) {
    for (k, v) in from {
        into.insert(k, v);
    }
}

fn check_mission_vocabulary(def: &TreeDefinition) -> Result<()> {
    let mut keys = BTreeSet::new();
    for d in &def.declarations {
        keys.insert(d.key.clone());
    }
    collect_def_keys(&def.root, &mut keys);
    for key in keys {
        if is_reserved_sync_key(&key) {
            return Err(Error::ReservedSyncKey(key));
        }
    }
    Ok(())
}

fn collect_def_keys(node: &NodeDef, keys: &mut BTreeSet<String>) {
    match node {
        NodeDef::Control { children, .. } => {
            for child in children {
                collect_def_keys(child, keys);
            }
        }
        NodeDef::Condition { spec, .. } => keys.extend(spec.deps()),
        NodeDef::Action { spec, .. } => {
            for (target, rhs) in &spec.assignments {
                keys.insert(target.clone());
                keys.extend(rhs.deps());
            }
        }
    }
}

/// Rendering of sync traffic as JSON lines: hash broadcasts and receipts
/// are plain objects, variable dumps are a frame object followed by the
/// snapshot bytes in base64.
pub mod wire {
    use base64::engine::general_purpose::STANDARD as BASE64;
    use base64::Engine;

    use crate::error::{Error, Result};
    use crate::memory::Sample;

    pub const DUMP_FRAME_KEY: &str = "__var_dump__";

    #[derive(Debug, Clone, PartialEq)]
    pub enum Message {
        Sample(Sample),
        VarDump(Vec<u8>),
    }

    pub fn render(message: &Message) -> String {
        match message {
            Message::Sample(sample) => {
                format!("{}\n", serde_json::to_string(sample).expect("sample serializes"))
            }
            Message::VarDump(bytes) => {
                format!("{{\"{DUMP_FRAME_KEY}\":1}}\n{}\n", BASE64.encode(bytes))
            }
        }
    }

    /// Parses one message, consuming one line (two for dumps).
    pub fn parse<'a>(lines: &mut impl Iterator<Item = &'a str>) -> Result<Option<Message>> {
        let Some(line) = lines.next() else {
            return Ok(None);
        };
        let object: serde_json::Map<String, serde_json::Value> = serde_json::from_str(line)
            .map_err(|e| Error::MalformedDump(format!("bad message line: {e}")))?;
        if object.contains_key(DUMP_FRAME_KEY) {
            let payload = lines
                .next()
                .ok_or_else(|| Error::MalformedDump("dump frame without payload".to_string()))?;
            let bytes = BASE64
                .decode(payload.trim())
                .map_err(|e| Error::MalformedDump(format!("bad dump payload: {e}")))?;
            return Ok(Some(Message::VarDump(bytes)));
        }
        let mut sample = Sample::new();
        for (key, value) in object {
            let number = value
                .as_f64()
                .ok_or_else(|| Error::MalformedDump(format!("`{key}` is not a number")))?;
            sample.insert(key, number);
        }
        Ok(Some(Message::Sample(sample)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MISSION: &str = "
        output cmd;
        seq m {
            cond go { S: x > 0; R: default }
            act fire { cmd := 1 }
            cond hold { R: default }
        }";

    fn cfg(me: u32) -> SyncConfig {
        SyncConfig {
            me,
            n: 3,
            max_delay: 0.5,
        }
    }

    fn executor(me: u32) -> Executor {
        let def = dsl::parse_tree(MISSION).unwrap();
        let mut ex = Executor::new(&def, cfg(me)).unwrap();
        ex.start().unwrap();
        ex
    }

    fn sample(pairs: &[(&str, f64)]) -> Sample {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    /// The positive hash announcement of replica `me`, if this output
    /// carries one. Cleanup writes zeroed hash variables; those are
    /// protocol resets, not wire traffic.
    fn hash_broadcast(out: &Sample, me: u32) -> Option<Sample> {
        if out.get(&hash_set(me)) != Some(&1.0) {
            return None;
        }
        let mut msg = Sample::new();
        for key in [hash_lo(me), hash_hi(me), hash_set(me)] {
            msg.insert(key.clone(), *out.get(&key)?);
        }
        Some(msg)
    }

    /// Drives a sample through all executors with a zero-latency in-test
    /// bus, delivering broadcasts and dumps until quiescence.
    fn run_round(exs: &mut [Executor], sample_in: &Sample) -> Vec<Sample> {
        let mut results: Vec<Sample> = vec![Sample::new(); exs.len()];
        let mut fan_out: Vec<(usize, Sample)> = Vec::new();
        for (i, ex) in exs.iter_mut().enumerate() {
            let out = ex.callback_with_sync(sample_in).unwrap();
            fan_out.push((i, out.clone()));
            merge(&mut results[i], out);
        }
        loop {
            let mut inbox: Vec<Vec<Sample>> = vec![Vec::new(); exs.len()];
            let mut dumps: Vec<(usize, Vec<u8>)> = Vec::new();
            for (from, out) in std::mem::take(&mut fan_out) {
                if let Some(msg) = hash_broadcast(&out, exs[from].config().me) {
                    for (to, slot) in inbox.iter_mut().enumerate() {
                        if to != from {
                            slot.push(msg.clone());
                        }
                    }
                }
                if out.contains_key(SEND_VARS) {
                    dumps.push((from, exs[from].make_var_dump()));
                }
            }
            if inbox.iter().all(Vec::is_empty) && dumps.is_empty() {
                break;
            }
            for (i, messages) in inbox.into_iter().enumerate() {
                for msg in messages {
                    let out = exs[i].callback_with_sync(&msg).unwrap();
                    fan_out.push((i, out.clone()));
                    merge(&mut results[i], out);
                }
            }
            for (from, dump) in dumps {
                for i in 0..exs.len() {
                    if i != from {
                        let out = exs[i].apply_var_dump(&dump).unwrap();
                        fan_out.push((i, out.clone()));
                        merge(&mut results[i], out);
                    }
                }
            }
        }
        results
    }

    #[test]
    fn config_bounds_are_checked() {
        assert!(SyncConfig { me: 0, n: 3, max_delay: 1.0 }.validate().is_err());
        assert!(SyncConfig { me: 4, n: 3, max_delay: 1.0 }.validate().is_err());
        assert!(SyncConfig { me: 1, n: 1, max_delay: 1.0 }.validate().is_err());
        assert!(SyncConfig { me: 1, n: 3, max_delay: 0.0 }.validate().is_err());
        assert!(SyncConfig { me: 1, n: 3, max_delay: 0.5 }.validate().is_ok());
    }

    #[test]
    fn sync_vocabulary_is_detected() {
        assert!(is_sync_sample(&sample(&[("trigger_sync", 1.0)])));
        assert!(is_sync_sample(&sample(&[("hash_set_2", 1.0)])));
        assert!(is_sync_sample(&sample(&[("hash_1_lo", 7.0)])));
        assert!(!is_sync_sample(&sample(&[("x", 1.0), ("time", 2.0)])));
    }

    #[test]
    fn mission_may_not_use_reserved_keys() {
        let def = dsl::parse_tree("act a { hash_set_1 := 1 }").unwrap();
        assert!(matches!(
            Executor::new(&def, cfg(1)),
            Err(Error::ReservedSyncKey(_))
        ));
    }

    #[test]
    fn plain_sample_without_flip_returns_nothing() {
        let mut ex = executor(1);
        let out = ex.callback_with_sync(&sample(&[("telemetry", 3.0)])).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn condition_flip_broadcasts_hash() {
        let mut ex = executor(1);
        let out = ex.callback_with_sync(&sample(&[("x", 1.0)])).unwrap();
        assert_eq!(out.get("hash_set_1"), Some(&1.0));
        assert!(out.contains_key("hash_1_lo"));
        assert!(out.contains_key("hash_1_hi"));
        // The mission has not run yet: the flip stays pending until the
        // round completes.
        assert!(!out.contains_key("cmd"));
    }

    #[test]
    fn equal_hash_round_completes_and_releases_mission() {
        let mut exs = vec![executor(1), executor(2), executor(3)];
        let results = run_round(&mut exs, &sample(&[("x", 1.0)]));
        for (i, out) in results.iter().enumerate() {
            assert_eq!(out.get(SYNC_ENDED), Some(&1.0), "replica {i}: {out:?}");
            assert_eq!(out.get("cmd"), Some(&1.0), "replica {i}");
            assert_eq!(out.get(LAST_MASTER), Some(&1.0), "replica {i}");
        }
        let h: Vec<u64> = exs.iter().map(Executor::mission_hash).collect();
        assert_eq!(h[0], h[1]);
        assert_eq!(h[1], h[2]);
        for ex in &exs {
            assert_eq!(ex.current_master(), 1);
        }
    }

    #[test]
    fn protocol_state_resets_after_round() {
        let mut exs = vec![executor(1), executor(2), executor(3)];
        run_round(&mut exs, &sample(&[("x", 1.0)]));
        for ex in &exs {
            let m = ex.sync_tree().memory();
            for key in [TRIGGER_SYNC, SEND_VARS, RECEIVED_VARS, MASTER, HASH_SENT, WAIT_DONE] {
                assert_eq!(m.peek(key), 0.0, "{key} not reset");
            }
            for i in 1..=3 {
                assert_eq!(m.peek(&hash_set(i)), 0.0);
            }
        }
        // A second round runs cleanly after the reset.
        let results = run_round(&mut exs, &sample(&[("x", 0.0)]));
        for out in &results {
            assert_eq!(out.get(SYNC_ENDED), Some(&1.0));
        }
    }

    #[test]
    fn diverged_slave_adopts_master_state() {
        let mut exs = vec![executor(1), executor(2), executor(3)];
        // Replica 2 misses one sample: its hash diverges silently.
        exs[0].callback_with_sync(&sample(&[("cal", 7.0)])).unwrap();
        exs[2].callback_with_sync(&sample(&[("cal", 7.0)])).unwrap();
        assert_ne!(exs[0].mission_hash(), exs[1].mission_hash());

        let results = run_round(&mut exs, &sample(&[("x", 1.0)]));
        for out in &results {
            assert_eq!(out.get(SYNC_ENDED), Some(&1.0));
        }
        assert_eq!(exs[0].mission_hash(), exs[1].mission_hash());
        assert_eq!(exs[1].mission_hash(), exs[2].mission_hash());
        assert_eq!(exs[1].mission().memory().peek("cal"), 7.0);
    }

    #[test]
    fn malformed_dump_is_rejected_atomically() {
        let mut ex = executor(2);
        let before = ex.mission_hash();
        let err = ex.apply_var_dump(b"garbage-without-equals;");
        assert!(matches!(err, Err(Error::MalformedDump(_))));
        assert_eq!(ex.mission_hash(), before);
        assert_eq!(ex.sync_tree().memory().peek(RECEIVED_VARS), 0.0);
    }

    #[test]
    fn equal_state_dump_application_preserves_hash() {
        let mut a = executor(1);
        let b = executor(2);
        let before = a.mission_hash();
        assert_eq!(before, b.mission_hash());
        a.mission.memory_mut().adopt_snapshot(&b.make_var_dump()).unwrap();
        assert_eq!(a.mission_hash(), before);
    }

    #[test]
    fn timeout_elects_minimum_alive_replica() {
        // Replica 1 is silent; 2 and 3 exchange hashes and time out.
        let mut exs = [executor(2), executor(3)];
        let mut broadcasts = Vec::new();
        for ex in exs.iter_mut() {
            let out = ex.callback_with_sync(&sample(&[("x", 1.0)])).unwrap();
            broadcasts.push(hash_broadcast(&out, ex.config().me).unwrap());
        }
        exs[0].callback_with_sync(&broadcasts[1]).unwrap();
        exs[1].callback_with_sync(&broadcasts[0]).unwrap();
        for t in [0.2, 0.4] {
            for ex in exs.iter_mut() {
                let out = ex.callback_with_sync(&sample(&[("time", t)])).unwrap();
                assert!(!out.contains_key(SYNC_ENDED), "timed out early at {t}");
            }
        }
        let mut finals = Vec::new();
        for ex in exs.iter_mut() {
            finals.push(ex.callback_with_sync(&sample(&[("time", 0.9)])).unwrap());
        }
        for out in &finals {
            assert_eq!(out.get(LAST_MASTER), Some(&2.0));
            assert_eq!(out.get(SYNC_ENDED), Some(&1.0));
            assert_eq!(out.get("cmd"), Some(&1.0));
        }
        assert_eq!(exs[0].current_master(), 2);
        assert_eq!(exs[1].current_master(), 2);
    }

    #[test]
    fn wire_round_trip() {
        let broadcast = wire::Message::Sample(sample(&[
            ("hash_1_lo", 123.0),
            ("hash_1_hi", 456.0),
            ("hash_set_1", 1.0),
        ]));
        let dump = wire::Message::VarDump(b"a=3ff0000000000000;".to_vec());
        let text = format!("{}{}", wire::render(&broadcast), wire::render(&dump));
        let mut lines = text.lines();
        assert_eq!(wire::parse(&mut lines).unwrap(), Some(broadcast));
        assert_eq!(wire::parse(&mut lines).unwrap(), Some(dump));
        assert_eq!(wire::parse(&mut lines).unwrap(), None);
    }
}
