//! The blackboard: a key-value store of binary64 variables with scope
//! metadata, change tracking, canonical serialization, and hashing.
//!
//! All node/environment interaction flows through here. Input variables
//! enter via samples; Output variables leave via callback returns. Node
//! states are stored under reserved `__state__/` keys so that the memory
//! hash covers the full executor state.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

/// Prefix of engine-owned node-state variables. Leaf nodes may neither
/// declare nor assign keys under it.
pub const STATE_PREFIX: &str = "__state__/";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Visibility of a variable with respect to the callback contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    /// Written by incoming samples (or internally); never returned.
    Input,
    /// Changes are accumulated and returned by the callback.
    Output,
}

#[derive(Debug, Clone)]
struct Variable {
    value: f64,
    scope: Scope,
    /// Local variables are excluded from snapshots and hashes. Used for
    /// replica-private data such as `time`.
    local: bool,
}

/// A map of variable updates: the unit of callback input and output.
pub type Sample = BTreeMap<String, f64>;

/// The blackboard. One instance per tree; never shared.
#[derive(Debug, Default, Clone)]
pub struct Memory {
    variables: BTreeMap<String, Variable>,
    /// Keys whose value differs from its value at the last dirty-clear
    /// point. A write that reverts a key to that value cleans it again.
    dirty: BTreeSet<String>,
    /// Bit patterns at the last dirty-clear point, recorded lazily for
    /// keys written since.
    dirty_base: BTreeMap<String, u64>,
    /// Output-scoped changes since the last drain, last write wins.
    output_log: Sample,
}

impl Memory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Declares a variable. Keys are unique; the node-state prefix is
    /// reserved for the engine.
    pub fn declare(&mut self, key: &str, scope: Scope, initial: f64, local: bool) -> Result<()> {
        if key.starts_with(STATE_PREFIX) {
            return Err(Error::ReservedKey(key.to_string()));
        }
        if self.variables.contains_key(key) {
            return Err(Error::DuplicateKey(key.to_string()));
        }
        self.insert_raw(key, scope, initial, local);
        Ok(())
    }

    /// Engine-internal declaration that bypasses the reserved-prefix check.
    pub(crate) fn insert_raw(&mut self, key: &str, scope: Scope, value: f64, local: bool) {
        self.variables
            .insert(key.to_string(), Variable { value, scope, local });
    }

    fn auto_declare(&mut self, key: &str) {
        // `time` is replica-local by default: replicas receive time samples
        // at slightly different points and it must not perturb the hash.
        let local = key == "time";
        self.insert_raw(key, Scope::Input, 0.0, local);
    }

    /// Applies a batch of updates. Undeclared keys are auto-declared as
    /// Input 0.0. Returns exactly the keys whose stored bit pattern
    /// changed; those keys join the dirty set and Output-scoped changes
    /// are merged into the output log.
    pub fn set(&mut self, changes: &Sample) -> BTreeSet<String> {
        let mut changed = BTreeSet::new();
        for (key, &value) in changes {
            if !self.variables.contains_key(key.as_str()) {
                self.auto_declare(key);
            }
            let var = self.variables.get_mut(key.as_str()).expect("declared above");
            let old = var.value.to_bits();
            if old == value.to_bits() {
                continue;
            }
            var.value = value;
            changed.insert(key.clone());
            let base = *self.dirty_base.entry(key.clone()).or_insert(old);
            if base == value.to_bits() {
                self.dirty.remove(key.as_str());
            } else {
                self.dirty.insert(key.clone());
            }
            if matches!(var.scope, Scope::Output) {
                self.output_log.insert(key.clone(), value);
            }
        }
        changed
    }

    /// Single-key convenience wrapper over [`Memory::set`].
    pub fn set_one(&mut self, key: &str, value: f64) -> bool {
        let mut sample = Sample::new();
        sample.insert(key.to_string(), value);
        !self.set(&sample).is_empty()
    }

    /// Current value; undeclared keys are auto-declared as Input 0.0.
    pub fn get(&mut self, key: &str) -> f64 {
        if !self.variables.contains_key(key) {
            self.auto_declare(key);
        }
        self.variables[key].value
    }

    /// Read without declaring. Missing keys read as 0.0.
    pub fn peek(&self, key: &str) -> f64 {
        self.variables.get(key).map_or(0.0, |v| v.value)
    }

    pub fn is_declared(&self, key: &str) -> bool {
        self.variables.contains_key(key)
    }

    pub fn scope_of(&self, key: &str) -> Option<Scope> {
        self.variables.get(key).map(|v| v.scope)
    }

    /// Overwrites a value without touching dirty or the output log.
    /// Used for node states and adopted replica state.
    pub(crate) fn write_raw(&mut self, key: &str, value: f64) {
        match self.variables.get_mut(key) {
            Some(var) => var.value = value,
            None => {
                let local = key == "time";
                self.insert_raw(key, Scope::Input, value, local);
            }
        }
    }

    pub(crate) fn peek_raw(&self, key: &str) -> Option<f64> {
        self.variables.get(key).map(|v| v.value)
    }

    /// Returns the accumulated Output changes and clears the log.
    pub fn drain_output_changes(&mut self) -> Sample {
        std::mem::take(&mut self.output_log)
    }

    pub fn dirty_keys(&self) -> &BTreeSet<String> {
        &self.dirty
    }

    pub(crate) fn clear_dirty(&mut self) {
        self.dirty.clear();
        self.dirty_base.clear();
    }

    /// Deterministic byte rendering of all non-local variables, sorted by
    /// key. Each entry is `key=` followed by the 16-digit lowercase hex of
    /// the big-endian binary64 bit pattern and a `;`. Node-state variables
    /// are included; this is the cross-replica wire format.
    pub fn canonical_snapshot(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (key, var) in &self.variables {
            if var.local {
                continue;
            }
            out.extend_from_slice(key.as_bytes());
            out.push(b'=');
            out.extend_from_slice(format!("{:016x}", var.value.to_bits()).as_bytes());
            out.push(b';');
        }
        out
    }

    /// FNV-1a 64-bit over the canonical snapshot.
    pub fn hash(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for byte in self.canonical_snapshot() {
            h ^= u64::from(byte);
            h = h.wrapping_mul(FNV_PRIME);
        }
        h
    }

    /// Replaces every non-local variable with the contents of a canonical
    /// snapshot: existing entries are overwritten bit-exactly, missing ones
    /// created, and non-local entries absent from the snapshot removed.
    /// Nothing is marked dirty; the state is being adopted, not observed.
    /// The memory is untouched on parse failure.
    pub fn adopt_snapshot(&mut self, snapshot: &[u8]) -> Result<()> {
        let entries = parse_snapshot(snapshot)?;
        let stale: Vec<String> = self
            .variables
            .iter()
            .filter(|(k, v)| !v.local && !entries.contains_key(k.as_str()))
            .map(|(k, _)| k.clone())
            .collect();
        for key in stale {
            self.variables.remove(&key);
        }
        for (key, bits) in entries {
            let value = f64::from_bits(bits);
            match self.variables.get_mut(key.as_str()) {
                Some(var) if !var.local => var.value = value,
                Some(_) => {}
                None => self.insert_raw(&key, Scope::Input, value, false),
            }
        }
        Ok(())
    }
}

fn parse_snapshot(bytes: &[u8]) -> Result<BTreeMap<String, u64>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::MalformedDump("not valid UTF-8".to_string()))?;
    let mut entries = BTreeMap::new();
    for chunk in text.split_inclusive(';') {
        let body = chunk
            .strip_suffix(';')
            .ok_or_else(|| Error::MalformedDump("entry not terminated by `;`".to_string()))?;
        let (key, hex) = body
            .split_once('=')
            .ok_or_else(|| Error::MalformedDump(format!("entry `{body}` lacks `=`")))?;
        if key.is_empty() || hex.len() != 16 {
            return Err(Error::MalformedDump(format!("bad entry `{body}`")));
        }
        let bits = u64::from_str_radix(hex, 16)
            .map_err(|_| Error::MalformedDump(format!("bad hex in `{body}`")))?;
        entries.insert(key.to_string(), bits);
    }
    Ok(entries)
}
