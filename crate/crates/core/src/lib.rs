//! Detecting failures to link visual and textual representations of the
//! same entity, from recorded hidden-state traces.

pub mod bench;
pub mod lens;
pub mod metrics;
pub mod plot;
pub mod probe;
pub mod selective;
pub mod synth;
pub mod trace_store;

/// Seed used when none is given.
pub const DEFAULT_SEED: u64 = 20_240_917;
