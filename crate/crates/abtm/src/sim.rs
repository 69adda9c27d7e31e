//! Deterministic multi-replica simulator: a discrete-event loop over
//! virtual time driving redundant executors through scheduled samples,
//! per-link fault rules, and crash-stop injection, with consistency
//! checking at sync-round boundaries.
//!
//! Determinism: events are totally ordered by (time, sequence number);
//! sequence numbers are assigned in generation order (crashes, then time
//! ticks, then scheduled samples, then runtime messages as they are
//! produced). Identical configurations replay identically, byte for byte.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dsl::{self, TreeDefinition};
use crate::error::{Error, Result};
use crate::memory::Sample;
use crate::sync::{self, Executor, SyncConfig};

/// Where a scheduled sample is delivered.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum Target {
    /// The literal string "all".
    All(String),
    Replicas(Vec<u32>),
}

impl Target {
    fn replicas(&self, n: u32) -> Result<Vec<u32>> {
        match self {
            Target::All(word) if word == "all" => Ok((1..=n).collect()),
            Target::All(word) => Err(Error::Config(format!(
                "unknown target `{word}` (expected \"all\" or a replica list)"
            ))),
            Target::Replicas(list) => {
                for &r in list {
                    if r == 0 || r > n {
                        return Err(Error::Config(format!("target replica {r} out of range")));
                    }
                }
                Ok(list.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduledSample {
    pub time: f64,
    pub target: Target,
    pub sample: Sample,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum FaultAction {
    Drop,
    Delay(f64),
}

/// A per-link rule. `from` 0 is the external world; `key`, when present,
/// restricts the rule to messages carrying that key (variable dumps match
/// the `__var_dump__` frame key). `times` bounds how often it applies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaultRule {
    pub from: u32,
    pub to: u32,
    #[serde(default)]
    pub key: Option<String>,
    pub action: FaultAction,
    #[serde(default)]
    pub times: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrashSpec {
    pub replica: u32,
    pub time: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub replicas: u32,
    /// Path to the mission tree file.
    pub tree: String,
    pub max_delay: f64,
    #[serde(default)]
    pub schedule: Vec<ScheduledSample>,
    #[serde(default)]
    pub faults: Vec<FaultRule>,
    #[serde(default)]
    pub crashes: Vec<CrashSpec>,
    #[serde(default)]
    pub seed: u64,
    pub duration: f64,
    /// Period of injected `{time: t}` samples; must be positive.
    pub time_tick: f64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct OutputRecord {
    pub time: f64,
    pub outputs: Sample,
    /// True when the emitting replica considered itself master; only
    /// external records form the scenario's output.
    pub external: bool,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct ReplicaTranscript {
    pub replica: u32,
    pub outputs: Vec<OutputRecord>,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RoundHash {
    pub replica: u32,
    pub hash: String,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct RoundRecord {
    pub round: u64,
    pub time: f64,
    /// Mission hashes of the replicas alive when the round completed.
    pub hashes: Vec<RoundHash>,
    pub equal: bool,
    pub master: u32,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct MasterRecord {
    pub time: f64,
    pub replica: u32,
    pub master: u32,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct Counts {
    /// Sample events fed to the replicas (a broadcast counts once).
    pub samples: u64,
    /// Completed synchronization rounds.
    pub sync_rounds: u64,
    /// External (master) output records.
    pub outputs: u64,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SimReport {
    pub seed: u64,
    pub replicas: Vec<ReplicaTranscript>,
    pub rounds: Vec<RoundRecord>,
    pub master_history: Vec<MasterRecord>,
    /// True iff every completed round ended with equal hashes among the
    /// alive replicas.
    pub consistent: bool,
    pub counts: Counts,
}

impl SimReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Short human-readable summary.
    pub fn summary(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "samples: {}  sync rounds: {}  external outputs: {}",
            self.counts.samples, self.counts.sync_rounds, self.counts.outputs
        );
        let _ = writeln!(
            out,
            "consistency: {}",
            if self.consistent { "ok" } else { "VIOLATED" }
        );
        for record in &self.master_history {
            let _ = writeln!(
                out,
                "t={:.3} replica {} sees master {}",
                record.time, record.replica, record.master
            );
        }
        for round in &self.rounds {
            let hashes: Vec<String> = round
                .hashes
                .iter()
                .map(|h| format!("{}:{}", h.replica, h.hash))
                .collect();
            let _ = writeln!(
                out,
                "round {} t={:.3} master={} equal={} [{}]",
                round.round,
                round.time,
                round.master,
                round.equal,
                hashes.join(" ")
            );
        }
        out
    }
}

/// The periodic `{time: t}` sample stream: t = 0, tick, 2·tick, … up to
/// and including the duration.
pub fn inject_time(time_tick: f64, duration: f64) -> Result<Vec<(f64, Sample)>> {
    if !time_tick.is_finite() || time_tick <= 0.0 {
        return Err(Error::Config("time_tick must be positive".to_string()));
    }
    if !duration.is_finite() || duration < 0.0 {
        return Err(Error::Config("duration must be non-negative".to_string()));
    }
    let mut samples = Vec::new();
    let mut k = 0u64;
    loop {
        let t = k as f64 * time_tick;
        if t > duration {
            break;
        }
        let mut sample = Sample::new();
        sample.insert("time".to_string(), t);
        samples.push((t, sample));
        k += 1;
    }
    Ok(samples)
}

/// True iff the given (alive) replicas hold equal mission hashes.
pub fn check_consistency(replicas: &[&Executor]) -> bool {
    let mut hashes = replicas.iter().map(|ex| ex.mission_hash());
    match hashes.next() {
        Some(first) => hashes.all(|h| h == first),
        None => true,
    }
}

#[derive(Debug, Clone)]
enum Payload {
    Crash(u32),
    Deliver { to: u32, msg: Message },
}

#[derive(Debug, Clone)]
enum Message {
    Sample(Sample),
    VarDump(Vec<u8>),
}

struct Bus {
    queue: BTreeMap<(u64, u64), Payload>,
    next_seq: u64,
    faults: Vec<(FaultRule, u64)>,
}

impl Bus {
    fn push(&mut self, time: f64, payload: Payload) {
        let key = (time.to_bits(), self.next_seq);
        self.next_seq += 1;
        self.queue.insert(key, payload);
    }

    /// Applies the first matching fault rule, then enqueues.
    fn send(&mut self, time: f64, from: u32, to: u32, msg: Message) {
        let mut time = time;
        for (rule, used) in self.faults.iter_mut() {
            if rule.from != from || rule.to != to {
                continue;
            }
            if let Some(limit) = rule.times {
                if *used >= limit {
                    continue;
                }
            }
            if let Some(key) = &rule.key {
                let hit = match &msg {
                    Message::Sample(sample) => sample.contains_key(key),
                    Message::VarDump(_) => key == sync::wire::DUMP_FRAME_KEY,
                };
                if !hit {
                    continue;
                }
            }
            *used += 1;
            match rule.action {
                FaultAction::Drop => return,
                FaultAction::Delay(by) => time += by,
            }
            break;
        }
        self.push(time, Payload::Deliver { to, msg });
    }

    fn pop(&mut self) -> Option<(f64, Payload)> {
        let (&key, _) = self.queue.iter().next()?;
        let payload = self.queue.remove(&key).expect("key just observed");
        Some((f64::from_bits(key.0), payload))
    }
}

/// Runs a scenario, loading the mission tree from the configured path.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<SimReport> {
    let text = std::fs::read_to_string(&cfg.tree)
        .map_err(|e| Error::Config(format!("cannot read tree file `{}`: {e}", cfg.tree)))?;
    let def = dsl::parse_tree(&text)?;
    run_scenario_with(cfg, &def)
}

/// Runs a scenario against an already-parsed mission definition.
pub fn run_scenario_with(cfg: &ScenarioConfig, mission: &TreeDefinition) -> Result<SimReport> {
    validate_config(cfg)?;
    let n = cfg.replicas;

    let mut executors: Vec<Executor> = Vec::new();
    for me in 1..=n {
        let sync_cfg = SyncConfig {
            me,
            n,
            max_delay: cfg.max_delay,
        };
        executors.push(Executor::new(mission, sync_cfg)?);
    }

    let mut bus = Bus {
        queue: BTreeMap::new(),
        next_seq: 0,
        faults: cfg.faults.iter().cloned().map(|r| (r, 0)).collect(),
    };

    // Crashes first so a replica stopping at t misses deliveries at t.
    for crash in &cfg.crashes {
        bus.push(crash.time, Payload::Crash(crash.replica));
    }
    let mut sample_events = 0u64;
    for (t, sample) in inject_time(cfg.time_tick, cfg.duration)? {
        sample_events += 1;
        for to in 1..=n {
            bus.send(t, 0, to, Message::Sample(sample.clone()));
        }
    }
    for entry in &cfg.schedule {
        sample_events += 1;
        for to in entry.target.replicas(n)? {
            bus.send(entry.time, 0, to, Message::Sample(entry.sample.clone()));
        }
    }

    let mut alive = vec![true; n as usize + 1];
    let mut transcripts: Vec<ReplicaTranscript> = (1..=n)
        .map(|replica| ReplicaTranscript {
            replica,
            outputs: Vec::new(),
        })
        .collect();
    let mut master_history = Vec::new();
    let mut rounds: Vec<RoundRecord> = Vec::new();
    let mut rounds_done = vec![0u64; n as usize + 1];
    let mut external_outputs = 0u64;

    for (i, ex) in executors.iter_mut().enumerate() {
        let replica = i as u32 + 1;
        let outputs = ex.start().map_err(|e| Error::Replica {
            replica,
            time: 0.0,
            source: Box::new(e),
        })?;
        if !outputs.is_empty() {
            let external = ex.current_master() == replica;
            external_outputs += u64::from(external);
            transcripts[i].outputs.push(OutputRecord {
                time: 0.0,
                outputs,
                external,
            });
        }
    }

    while let Some((time, payload)) = bus.pop() {
        if time > cfg.duration {
            break;
        }
        match payload {
            Payload::Crash(replica) => {
                alive[replica as usize] = false;
            }
            Payload::Deliver { to, msg } => {
                if !alive[to as usize] {
                    continue;
                }
                let idx = (to - 1) as usize;
                let outputs = match msg {
                    Message::Sample(sample) => executors[idx].callback_with_sync(&sample),
                    Message::VarDump(bytes) => executors[idx].apply_var_dump(&bytes),
                }
                .map_err(|e| Error::Replica {
                    replica: to,
                    time,
                    source: Box::new(e),
                })?;
                route_outputs(
                    &outputs,
                    to,
                    time,
                    cfg,
                    &mut bus,
                    &executors,
                    &alive,
                    &mut transcripts,
                    &mut master_history,
                    &mut rounds,
                    &mut rounds_done,
                    &mut external_outputs,
                );
            }
        }
    }

    let consistent = rounds.iter().all(|r| r.equal);
    let counts = Counts {
        samples: sample_events,
        sync_rounds: rounds.len() as u64,
        outputs: external_outputs,
    };
    Ok(SimReport {
        seed: cfg.seed,
        replicas: transcripts,
        rounds,
        master_history,
        consistent,
        counts,
    })
}

#[allow(clippy::too_many_arguments)]
fn route_outputs(
    outputs: &Sample,
    from: u32,
    time: f64,
    cfg: &ScenarioConfig,
    bus: &mut Bus,
    executors: &[Executor],
    alive: &[bool],
    transcripts: &mut [ReplicaTranscript],
    master_history: &mut Vec<MasterRecord>,
    rounds: &mut Vec<RoundRecord>,
    rounds_done: &mut [u64],
    external_outputs: &mut u64,
) {
    let idx = (from - 1) as usize;
    let n = cfg.replicas;

    // Positive hash announcement: forward the sender's triple. Zeroed
    // hash variables written by the round cleanup stay local.
    let set_key = format!("hash_set_{from}");
    if outputs.get(&set_key) == Some(&1.0) {
        let mut broadcast = Sample::new();
        for key in [
            format!("hash_{from}_lo"),
            format!("hash_{from}_hi"),
            set_key,
        ] {
            if let Some(&v) = outputs.get(&key) {
                broadcast.insert(key, v);
            }
        }
        for to in 1..=n {
            if to != from && alive[to as usize] {
                bus.send(time, from, to, Message::Sample(broadcast.clone()));
            }
        }
    }

    // Master push: the dump is taken after the callback returned, so it
    // carries the post-round state including consumed mission changes.
    if outputs.contains_key(sync::SEND_VARS) {
        let dump = executors[idx].make_var_dump();
        for to in 1..=n {
            if to != from && alive[to as usize] {
                bus.send(time, from, to, Message::VarDump(dump.clone()));
            }
        }
    }

    if let Some(&master) = outputs.get(sync::LAST_MASTER) {
        if master != 0.0 {
            master_history.push(MasterRecord {
                time,
                replica: from,
                master: master as u32,
            });
        }
    }

    if outputs.contains_key(sync::SYNC_ENDED) {
        rounds_done[from as usize] += 1;
        let k = rounds_done[from as usize];
        let complete = (1..=n)
            .filter(|&r| alive[r as usize])
            .all(|r| rounds_done[r as usize] >= k);
        let already = rounds.iter().any(|r| r.round == k);
        if complete && !already {
            let hashes: Vec<RoundHash> = (1..=n)
                .filter(|&r| alive[r as usize])
                .map(|r| RoundHash {
                    replica: r,
                    hash: format!("{:016x}", executors[(r - 1) as usize].mission_hash()),
                })
                .collect();
            let equal = hashes.windows(2).all(|w| w[0].hash == w[1].hash);
            rounds.push(RoundRecord {
                round: k,
                time,
                hashes,
                equal,
                master: executors[idx].current_master(),
            });
        }
    }

    let mission: Sample = outputs
        .iter()
        .filter(|(k, _)| !sync::is_reserved_sync_key(k))
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    if !mission.is_empty() {
        let external = executors[idx].current_master() == from;
        *external_outputs += u64::from(external);
        transcripts[idx].outputs.push(OutputRecord {
            time,
            outputs: mission,
            external,
        });
    }
}

fn validate_config(cfg: &ScenarioConfig) -> Result<()> {
    if cfg.replicas < 2 {
        return Err(Error::Config("at least 2 replicas required".to_string()));
    }
    if !cfg.duration.is_finite() || cfg.duration < 0.0 {
        return Err(Error::Config("duration must be non-negative".to_string()));
    }
    for entry in &cfg.schedule {
        if entry.time.is_nan() || entry.time < 0.0 || entry.time > cfg.duration {
            return Err(Error::Config(format!(
                "scheduled sample at t={} outside 0..={}",
                entry.time, cfg.duration
            )));
        }
    }
    for crash in &cfg.crashes {
        if crash.replica == 0 || crash.replica > cfg.replicas {
            return Err(Error::Config(format!(
                "crash replica {} out of range",
                crash.replica
            )));
        }
        if crash.time.is_nan() || crash.time < 0.0 || crash.time > cfg.duration {
            return Err(Error::Config(format!(
                "crash at t={} outside 0..={}",
                crash.time, cfg.duration
            )));
        }
    }
    for rule in &cfg.faults {
        if rule.to == 0 || rule.to > cfg.replicas || rule.from > cfg.replicas {
            return Err(Error::Config("fault rule link out of range".to_string()));
        }
        if let FaultAction::Delay(by) = rule.action {
            if !by.is_finite() || by < 0.0 {
                return Err(Error::Config("fault delay must be non-negative".to_string()));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A waypoint-style mission: each threshold crossing of `pos` flips
    /// one condition and commands the next leg.
    const MISSION: &str = "
        output cmd_1; output cmd_2; output cmd_3;
        seq legs {
            cond at_0 { S: pos >= 10; R: default }
            act go_1 { cmd_1 := 1 }
            cond at_1 { S: pos >= 20; R: default }
            act go_2 { cmd_2 := 1 }
            cond at_2 { S: pos >= 30; R: default }
            act go_3 { cmd_3 := 1 }
            cond done { R: default }
        }";

    fn mission_def() -> TreeDefinition {
        dsl::parse_tree(MISSION).unwrap()
    }

    fn base_config() -> ScenarioConfig {
        let schedule = (1..=35)
            .map(|k| ScheduledSample {
                time: k as f64 * 0.2,
                target: Target::All("all".to_string()),
                sample: [("pos".to_string(), k as f64)].into_iter().collect(),
            })
            .collect();
        ScenarioConfig {
            replicas: 3,
            tree: String::new(),
            max_delay: 0.5,
            schedule,
            faults: vec![],
            crashes: vec![],
            seed: 7,
            duration: 8.0,
            time_tick: 0.1,
        }
    }

    #[test]
    fn time_injection_counts_samples() {
        assert_eq!(inject_time(0.05, 1.0).unwrap().len(), 21);
        assert!(matches!(inject_time(0.0, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn happy_path_three_replicas() {
        let report = run_scenario_with(&base_config(), &mission_def()).unwrap();
        assert!(report.consistent);
        assert_eq!(report.counts.sync_rounds, 3);
        // Identical mission outputs on every replica, external only on 1.
        let outs: Vec<Vec<&Sample>> = report
            .replicas
            .iter()
            .map(|t| t.outputs.iter().map(|o| &o.outputs).collect())
            .collect();
        assert_eq!(outs[0], outs[1]);
        assert_eq!(outs[1], outs[2]);
        for t in &report.replicas {
            for o in &t.outputs {
                assert_eq!(o.external, t.replica == 1);
            }
        }
        assert!(report.master_history.iter().all(|m| m.master == 1));
        assert_eq!(report.counts.outputs, 3);
    }

    #[test]
    fn dropped_sample_heals_through_push() {
        let mut cfg = base_config();
        // A one-off calibration sample is lost on the way to replica 2.
        cfg.schedule.push(ScheduledSample {
            time: 1.55,
            target: Target::All("all".to_string()),
            sample: [("cal".to_string(), 7.0)].into_iter().collect(),
        });
        cfg.faults.push(FaultRule {
            from: 0,
            to: 2,
            key: Some("cal".to_string()),
            action: FaultAction::Drop,
            times: Some(1),
        });
        let report = run_scenario_with(&cfg, &mission_def()).unwrap();
        assert!(report.consistent, "{}", report.summary());
        // The drop shows up as a push in the round after it: hashes in
        // the report are taken at round completion, after healing.
        let reference = run_scenario_with(&base_config(), &mission_def()).unwrap();
        let external =
            |r: &SimReport| -> Vec<Sample> {
                r.replicas
                    .iter()
                    .flat_map(|t| t.outputs.iter())
                    .filter(|o| o.external)
                    .map(|o| o.outputs.clone())
                    .collect()
            };
        assert_eq!(external(&report), external(&reference));
    }

    #[test]
    fn master_crash_elects_minimum_alive() {
        let mut cfg = base_config();
        cfg.crashes.push(CrashSpec {
            replica: 1,
            time: 2.5,
        });
        let report = run_scenario_with(&cfg, &mission_def()).unwrap();
        assert!(report.consistent, "{}", report.summary());
        let after: Vec<&MasterRecord> = report
            .master_history
            .iter()
            .filter(|m| m.time > 2.5)
            .collect();
        assert!(!after.is_empty());
        assert!(after.iter().all(|m| m.master == 2), "{after:?}");
        // Replica 2 takes over external output after the election.
        let late_externals: Vec<&OutputRecord> = report.replicas[1]
            .outputs
            .iter()
            .filter(|o| o.time > 2.5)
            .collect();
        assert!(!late_externals.is_empty());
        assert!(late_externals.iter().all(|o| o.external));
    }

    #[test]
    fn reports_are_deterministic() {
        let a = run_scenario_with(&base_config(), &mission_def()).unwrap();
        let b = run_scenario_with(&base_config(), &mission_def()).unwrap();
        assert_eq!(a.to_json(), b.to_json());
    }

    #[test]
    fn consistency_check_compares_alive_hashes() {
        let def = mission_def();
        let mk = |me| {
            let mut ex = Executor::new(
                &def,
                SyncConfig {
                    me,
                    n: 2,
                    max_delay: 0.5,
                },
            )
            .unwrap();
            ex.start().unwrap();
            ex
        };
        let mut a = mk(1);
        let b = mk(2);
        assert!(check_consistency(&[&a, &b]));
        a.callback_with_sync(&[("noise".to_string(), 1.0)].into_iter().collect())
            .unwrap();
        assert!(!check_consistency(&[&a, &b]));
        assert!(check_consistency(&[&b]));
        assert!(check_consistency(&[]));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut cfg = base_config();
        cfg.replicas = 1;
        assert!(matches!(
            run_scenario_with(&cfg, &mission_def()),
            Err(Error::Config(_))
        ));
        let mut cfg = base_config();
        cfg.time_tick = 0.0;
        assert!(matches!(
            run_scenario_with(&cfg, &mission_def()),
            Err(Error::Config(_))
        ));
        let mut cfg = base_config();
        cfg.crashes.push(CrashSpec {
            replica: 9,
            time: 1.0,
        });
        assert!(matches!(
            run_scenario_with(&cfg, &mission_def()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn scenario_json_round_trip() {
        let cfg = base_config();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: ScenarioConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.replicas, cfg.replicas);
        assert_eq!(back.schedule.len(), cfg.schedule.len());
        assert_eq!(back.schedule[0].target, cfg.schedule[0].target);
    }
}
