//! Efficiency evaluation: random tree generation, dense/sparse sample
//! streams, and the classical-vs-asynchronous timing ratio.
//!
//! Generated trees are feedback-free — conditions read fresh input
//! variables, actions write fresh output variables with constant values —
//! so the asynchronous engine and the classical per-sample traversal must
//! produce bit-identical output transcripts. That equivalence is checked
//! before any timing is taken; a mismatch aborts the benchmark, since a
//! correctness bug would make the numbers meaningless.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dsl::{self, NodeDef, TreeDefinition, VarDecl};
use crate::engine::{ControlKind, NodeState, Tree};
use crate::error::{Error, Result};
use crate::expr::{ActionSpec, ConditionSpec, Expr, Guard};
use crate::memory::{Sample, Scope};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Every sample flips at least one condition.
    Dense,
    /// No sample is watched by any condition.
    Sparse,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Dense => "dense",
            Mode::Sparse => "sparse",
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub tree_count: usize,
    /// Tree height in levels; leaves sit at depth `height - 1`.
    pub height: (u32, u32),
    /// Children per control node.
    pub children: (u32, u32),
    pub modes: Vec<Mode>,
    pub samples_per_tree: usize,
    pub seed: u64,
    /// Keep only trees whose node count falls in this band.
    pub node_filter: Option<(usize, usize)>,
    /// Timed repetitions per engine (plus one discarded warm-up).
    pub repetitions: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            tree_count: 200,
            height: (3, 5),
            children: (3, 7),
            modes: vec![Mode::Dense, Mode::Sparse],
            samples_per_tree: 1000,
            seed: 0,
            node_filter: None,
            repetitions: 3,
        }
    }
}

impl BenchConfig {
    fn validate(&self) -> Result<()> {
        if self.tree_count == 0 {
            return Err(Error::Config("tree_count must be at least 1".to_string()));
        }
        if self.height.0 < 2 || self.height.0 > self.height.1 {
            return Err(Error::Config("bad height range".to_string()));
        }
        if self.children.0 == 0 || self.children.0 > self.children.1 {
            return Err(Error::Config("bad children range".to_string()));
        }
        if self.modes.is_empty() {
            return Err(Error::Config("no modes selected".to_string()));
        }
        Ok(())
    }
}

/// Guard sizes used to vary condition cost: number of comparison terms.
pub const GUARD_TIERS: [usize; 3] = [1, 3, 9];

struct TreeGen<'a> {
    rng: ChaCha8Rng,
    cfg: &'a BenchConfig,
    tier: usize,
    var_counter: usize,
}

impl TreeGen<'_> {
    fn fresh_input(&mut self) -> String {
        self.var_counter += 1;
        format!("in_{}", self.var_counter)
    }

    fn fresh_output(&mut self) -> String {
        self.var_counter += 1;
        format!("out_{}", self.var_counter)
    }

    /// Root layout: a sequence of [target skipper, random subtrees, hold].
    ///
    /// The dense stream drives the first condition of the leading
    /// skipper. Its sibling settles the skipper either way, so a flip is
    /// absorbed on the spot: the condition changed (and is ticked), but
    /// nothing above it needs to move. The trailing always-unknown hold
    /// keeps the root Running. Target skipper and hold count toward the
    /// children budget.
    fn gen_root(&mut self, decls: &mut Vec<VarDecl>) -> NodeDef {
        let height = self.rng.gen_range(self.cfg.height.0..=self.cfg.height.1);
        let count = self.rng.gen_range(self.cfg.children.0..=self.cfg.children.1);
        let target = NodeDef::Control {
            kind: ControlKind::Skipper,
            name: None,
            children: vec![self.gen_condition(decls, 0.0), self.gen_condition(decls, 1.0)],
        };
        let mut children = vec![target];
        for _ in 0..count.saturating_sub(2) {
            children.push(self.gen_node(1, height, ControlKind::Sequence, true, decls));
        }
        children.push(NodeDef::Condition {
            name: "hold".to_string(),
            spec: ConditionSpec {
                rules: vec![(Guard::Default, NodeState::Running)],
            },
        });
        NodeDef::Control {
            kind: ControlKind::Sequence,
            name: None,
            children,
        }
    }

    fn gen_node(
        &mut self,
        depth: u32,
        height: u32,
        parent: ControlKind,
        last: bool,
        decls: &mut Vec<VarDecl>,
    ) -> NodeDef {
        if depth + 1 >= height {
            return self.gen_leaf(parent, last, decls);
        }
        let kind = match self.rng.gen_range(0..3u8) {
            0 => ControlKind::Sequence,
            1 => ControlKind::Selector,
            _ => ControlKind::Skipper,
        };
        let count = self.rng.gen_range(self.cfg.children.0..=self.cfg.children.1);
        let children = (0..count)
            .map(|i| self.gen_node(depth + 1, height, kind, i + 1 == count, decls))
            .collect();
        NodeDef::Control {
            kind,
            name: None,
            children,
        }
    }

    fn gen_leaf(&mut self, parent: ControlKind, last: bool, decls: &mut Vec<VarDecl>) -> NodeDef {
        if self.rng.gen_bool(0.5) {
            // The initial guard value puts the quiescent tree in the
            // parent's pass-through state: satisfied under sequences and
            // selectors, unknown under skippers (satisfied when last, so
            // the skipper settles instead of idling on all-unknown).
            let initial = match parent {
                ControlKind::Skipper if !last => 0.0,
                _ => 1.0,
            };
            self.gen_condition(decls, initial)
        } else {
            let key = self.fresh_output();
            decls.push(VarDecl {
                key: key.clone(),
                scope: Scope::Output,
                initial: 0.0,
                local: false,
            });
            NodeDef::Action {
                name: format!("a_{}", self.var_counter),
                spec: ActionSpec {
                    assignments: vec![(key, Expr::Number(1.0))],
                },
            }
        }
    }

    fn gen_condition(&mut self, decls: &mut Vec<VarDecl>, initial: f64) -> NodeDef {
        let terms: Vec<String> = (0..self.tier)
            .map(|_| {
                let key = self.fresh_input();
                decls.push(VarDecl {
                    key: key.clone(),
                    scope: Scope::Input,
                    initial,
                    local: false,
                });
                format!("{key} > 0.5")
            })
            .collect();
        let spec = ConditionSpec {
            rules: vec![
                (
                    Guard::Expr(
                        crate::expr::parse_expr(&terms.join(" and "))
                            .expect("generated guard parses"),
                    ),
                    NodeState::Success,
                ),
                (Guard::Default, NodeState::Running),
            ],
        };
        NodeDef::Condition {
            name: format!("c_{}", self.var_counter),
            spec,
        }
    }
}

fn definition_node_count(node: &NodeDef) -> usize {
    match node {
        NodeDef::Control { children, .. } => {
            1 + children.iter().map(definition_node_count).sum::<usize>()
        }
        _ => 1,
    }
}

/// Generates one random feedback-free tree. Control kinds are drawn
/// uniformly from sequence/selector/skipper; leaves are a coin flip
/// between a `tier`-term condition over fresh inputs and an action
/// writing a fresh output. Deterministic in the seed. When a node-count
/// filter is set, trees are drawn from the same stream until one fits.
pub fn generate_random_tree(seed: u64, cfg: &BenchConfig, tier: usize) -> Result<TreeDefinition> {
    cfg.validate()?;
    let mut gen = TreeGen {
        rng: ChaCha8Rng::seed_from_u64(seed),
        cfg,
        tier,
        var_counter: 0,
    };
    for _ in 0..10_000 {
        gen.var_counter = 0;
        let mut declarations = Vec::new();
        let root = gen.gen_root(&mut declarations);
        let def = TreeDefinition { declarations, root };
        match cfg.node_filter {
            Some((lo, hi)) => {
                let count = definition_node_count(&def.root);
                if count >= lo && count <= hi {
                    return Ok(def);
                }
            }
            None => return Ok(def),
        }
    }
    Err(Error::Config(
        "node filter rejected 10000 consecutive trees".to_string(),
    ))
}

/// Builds a sample stream for a generated tree.
///
/// Dense samples toggle one condition across its guard threshold every
/// sample: the first condition of the generated root's leading skipper,
/// and the only condition the stream ever moves. Toggling
/// anything else could resume a parked subtree whose gate above it has
/// retreated, which is exactly where asynchronous resumption and
/// classical re-decision legitimately disagree, so an equivalence oracle
/// stream must not manufacture that situation.
///
/// Sparse samples write an unwatched variable with a fresh value each
/// time.
pub fn generate_samples(
    def: &TreeDefinition,
    mode: Mode,
    count: usize,
    seed: u64,
) -> Vec<Sample> {
    let _ = seed;
    let target = match (mode, &def.root) {
        (Mode::Dense, NodeDef::Control { children, .. }) => match children.first() {
            Some(NodeDef::Control { children: skipper, .. }) => match skipper.first() {
                Some(NodeDef::Condition { spec, .. }) => {
                    Some(spec.deps().into_iter().collect::<Vec<String>>())
                }
                _ => None,
            },
            _ => None,
        },
        _ => None,
    };
    // The target starts unknown, so the stream opens by satisfying it.
    let mut on = false;
    let mut stream = Vec::with_capacity(count);
    for k in 0..count {
        let sample = match (mode, &target) {
            (Mode::Dense, Some(deps)) => {
                let mut s = Sample::new();
                if on {
                    s.insert(deps[0].clone(), 0.0);
                } else {
                    for key in deps {
                        s.insert(key.clone(), 1.0);
                    }
                }
                on = !on;
                s
            }
            // Sparse, or a degenerate all-action tree with nothing to flip.
            _ => {
                let mut s = Sample::new();
                s.insert("sparse_noise".to_string(), (k + 1) as f64);
                s
            }
        };
        stream.push(sample);
    }
    stream
}

fn transcript_async(def: &TreeDefinition, stream: &[Sample]) -> Result<Vec<Sample>> {
    let mut tree = dsl::build(def)?;
    let mut outputs = vec![tree.start()?];
    for sample in stream {
        outputs.push(tree.callback(sample)?);
    }
    Ok(outputs)
}

fn transcript_classical(def: &TreeDefinition, stream: &[Sample]) -> Result<Vec<Sample>> {
    let mut tree = dsl::build(def)?;
    let mut outputs = vec![tree.classical_callback(&Sample::new())?];
    for sample in stream {
        outputs.push(tree.classical_callback(sample)?);
    }
    Ok(outputs)
}

fn samples_bit_equal(a: &Sample, b: &Sample) -> bool {
    a.len() == b.len()
        && a.iter()
            .zip(b.iter())
            .all(|((ka, va), (kb, vb))| ka == kb && va.to_bits() == vb.to_bits())
}

/// Times only the sample loop: each repetition builds and activates a
/// fresh tree untimed, then measures the callbacks. The first repetition
/// is a warm-up and is discarded; the best remaining time wins.
fn time_run(
    setup: impl Fn() -> Result<Tree>,
    run: impl Fn(&mut Tree, &Sample) -> Result<Sample>,
    stream: &[Sample],
    repetitions: usize,
) -> Result<u64> {
    let mut best = u64::MAX;
    for rep in 0..=repetitions.max(1) {
        let mut tree = setup()?;
        let started = Instant::now();
        for sample in stream {
            run(&mut tree, sample)?;
        }
        let elapsed = started.elapsed().as_nanos() as u64;
        if rep > 0 {
            best = best.min(elapsed);
        }
    }
    Ok(best.max(1))
}

/// Checks transcript equivalence, then times both engines over the same
/// stream. Returns nanoseconds per engine and the classical/asynchronous
/// ratio.
pub fn measure_ratio(
    def: &TreeDefinition,
    stream: &[Sample],
    repetitions: usize,
) -> Result<(u64, u64, f64)> {
    let reference = transcript_classical(def, stream)?;
    let advanced = transcript_async(def, stream)?;
    for (i, (c, a)) in reference.iter().zip(advanced.iter()).enumerate() {
        if !samples_bit_equal(c, a) {
            return Err(Error::OracleMismatch {
                sample_index: i,
                classical: serde_json::to_string(c).unwrap_or_default(),
                asynchronous: serde_json::to_string(a).unwrap_or_default(),
            });
        }
    }

    let t_classical = time_run(
        || {
            let mut tree = dsl::build(def)?;
            tree.classical_callback(&Sample::new())?;
            Ok(tree)
        },
        |tree, sample| tree.classical_callback(sample),
        stream,
        repetitions,
    )?;
    let t_abtm = time_run(
        || {
            let mut tree = dsl::build(def)?;
            tree.start()?;
            Ok(tree)
        },
        |tree, sample| tree.callback(sample),
        stream,
        repetitions,
    )?;
    Ok((t_classical, t_abtm, t_classical as f64 / t_abtm as f64))
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub tree_id: usize,
    pub nodes: usize,
    pub mode: Mode,
    pub tier: usize,
    pub t_classical_ns: u64,
    pub t_abtm_ns: u64,
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RatioStats {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub seed: u64,
    pub rows: Vec<BenchRow>,
    /// Keys: `dense`, `sparse`, and per-tier `dense/tier1` style entries.
    pub aggregates: BTreeMap<String, RatioStats>,
}

impl BenchReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tree_id,nodes,mode,tier,t_classical_ns,t_abtm_ns,R\n");
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{:.4}",
                row.tree_id,
                row.nodes,
                row.mode.as_str(),
                row.tier,
                row.t_classical_ns,
                row.t_abtm_ns,
                row.ratio
            );
        }
        out
    }

    pub fn aggregate_json(&self) -> String {
        serde_json::to_string_pretty(&serde_json::json!({
            "seed": self.seed,
            "aggregates": self.aggregates,
        }))
        .expect("aggregate serializes")
    }
}

fn ratio_stats(mut ratios: Vec<f64>) -> RatioStats {
    ratios.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
    let median = if ratios.len() % 2 == 1 {
        ratios[ratios.len() / 2]
    } else {
        (ratios[ratios.len() / 2 - 1] + ratios[ratios.len() / 2]) / 2.0
    };
    RatioStats {
        median,
        min: *ratios.first().expect("nonempty"),
        max: *ratios.last().expect("nonempty"),
    }
}

/// Full run: `tree_count` random trees (guard tiers cycling through
/// [`GUARD_TIERS`]), each measured over fresh streams in every selected
/// mode. Fails on the first transcript mismatch.
pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for id in 0..cfg.tree_count {
        let tier = GUARD_TIERS[id % GUARD_TIERS.len()];
        let tree_seed = cfg.seed.wrapping_add(id as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let def = generate_random_tree(tree_seed, cfg, tier)?;
        let nodes = definition_node_count(&def.root);
        for &mode in &cfg.modes {
            let stream = generate_samples(&def, mode, cfg.samples_per_tree, tree_seed ^ 0x5eed);
            let (t_classical, t_abtm, ratio) = measure_ratio(&def, &stream, cfg.repetitions)?;
            rows.push(BenchRow {
                tree_id: id,
                nodes,
                mode,
                tier,
                t_classical_ns: t_classical,
                t_abtm_ns: t_abtm,
                ratio,
            });
        }
    }
    let mut aggregates = BTreeMap::new();
    for &mode in &cfg.modes {
        let all: Vec<f64> = rows
            .iter()
            .filter(|r| r.mode == mode)
            .map(|r| r.ratio)
            .collect();
        if !all.is_empty() {
            aggregates.insert(mode.as_str().to_string(), ratio_stats(all));
        }
        for tier in GUARD_TIERS {
            let tiered: Vec<f64> = rows
                .iter()
                .filter(|r| r.mode == mode && r.tier == tier)
                .map(|r| r.ratio)
                .collect();
            if !tiered.is_empty() {
                aggregates.insert(format!("{}/tier{}", mode.as_str(), tier), ratio_stats(tiered));
            }
        }
    }
    Ok(BenchReport {
        seed: cfg.seed,
        rows,
        aggregates,
    })
}
