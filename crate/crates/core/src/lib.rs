//! Adaptive task-specific memory for multi-task conditioning.
//!
//! - [`numerics`]: dense matrices, a reverse-mode tape, Adam, seeded streams.
//! - [`atm`]: memory banks (attention read, EMA soft-aggregation write), the
//!   adaptive gate, composition.
//! - [`conditioning`]: trainable semantic queries, frozen encoder, frozen
//!   detail branch.
//! - [`pipeline`]: decoder head and the three-stage training schedule.
//! - [`synthbench`]: synthetic benchmark, metrics, ablations.
//! - [`config`], [`report`], [`checkpoint`]: run configuration and the files
//!   the command-line tool reads and writes.

pub mod atm;
pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod error;
pub mod numerics;
pub mod pipeline;
pub mod report;
pub mod synthbench;

pub use error::{AtmError, Result};
pub use numerics::Matrix;
