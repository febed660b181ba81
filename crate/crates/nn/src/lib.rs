//! A small deterministic neural-network runtime in f64.
//!
//! Provides the layer zoo (convolution, batch/layer norm, attention,
//! pooling, residual composition), explicit backward passes including
//! gradients with respect to the input image, seeded initialization, and
//! first-order optimizers. Everything is plain `ndarray`; the same seed
//! yields bit-identical results regardless of worker count.

pub mod attn;
pub mod basic;
pub mod checkpoint;
pub mod conv;
pub mod layer;
pub mod loss;
pub mod net;
pub mod norm;
pub mod optim;
pub mod rng;

pub use layer::{Layer, Mode, ParamView};
pub use net::{all_finite, Forward, FwdOpts, Grads, Network, Trace};
pub use norm::BnBatch;
