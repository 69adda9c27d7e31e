//! Event-driven behavior tree runtime over a key-value memory, with
//! redundant-executor synchronization, a deterministic multi-replica
//! simulator, and a classical-vs-asynchronous benchmark harness.
//!
//! The building blocks:
//!
//! - [`memory`]: the blackboard all nodes read and write, with change
//!   tracking, canonical snapshots, and hashing.
//! - [`expr`]: the guard/assignment expression language for leaf nodes.
//! - [`engine`]: trees, tick propagation tables, and the callback loop.
//! - [`dsl`]: the text format, validator, and builder.
//! - [`sync`]: the replica synchronization protocol and executor shell.
//! - [`sim`]: discrete-event multi-replica simulation with fault injection.
//! - [`bench`]: random tree generation and engine timing comparison.

pub mod bench;
pub mod dsl;
pub mod engine;
pub mod error;
pub mod expr;
pub mod memory;
pub mod sim;
pub mod sync;

pub use engine::{kb_less, NodeState, OrderKey, TickType, Tree};
pub use error::{Error, Result};
pub use memory::{Memory, Sample, Scope};
