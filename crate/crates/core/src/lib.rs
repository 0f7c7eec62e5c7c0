//! Structured pruning of layered linear models to explicit speedup targets.
//!
//! The crate is organised around the stages of a one-shot compression run:
//!
//! * [`store`]: on-disk model, calibration and database containers.
//! * [`calib`]: layer-wise Gram accumulation and damped inversion.
//! * [`pruner`]: structured OBS saliency, compensation and inverse downdates,
//!   plus the per-layer database of pruned variants.
//! * [`latency`]: latency tables, runtime/speedup estimation and a host
//!   micro-benchmark harness.
//! * [`search`]: exact DP allocation under a time budget and the randomized
//!   sensitivity-coefficient search around it.
//! * [`distill`]: token, logit and combined distillation losses.
//! * [`pipeline`]: glue used by the command-line tool.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the
//! `parallel` feature is enabled and runs sequentially otherwise.

pub mod calib;
pub mod chain;
pub mod distill;
pub mod error;
pub mod harness;
pub mod latency;
pub mod linalg;
pub mod par;
pub mod pipeline;
pub mod pruner;
pub mod search;
pub mod store;
pub mod synth;

pub use error::{Error, Result};
