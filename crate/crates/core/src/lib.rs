//! Benchmark harness for decoupled dataset distillation: dataset plumbing,
//! teacher training, synthesis engines, epoch-wise relabeling, the unified
//! post-evaluation protocol, and grid-level reporting.

pub mod arch;
pub mod datahub;
pub mod fingerprint;
pub mod teachers;
pub mod relabel;
pub mod synth;
