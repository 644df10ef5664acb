//! Planning and simulation toolkit for heterogeneous multimodal training.
//!
//! The crate covers the workload model ([`workload`]), sequence packing
//! ([`packing`]), pipeline stage planning ([`sharding`]), 1F1B schedule
//! simulation ([`pipeline`]), MoE routing with hybrid balancing ([`moe`]) and
//! an allocator fragmentation model ([`memsim`]). [`experiment`] wires them
//! into the `omnisched` command-line runner.

pub mod error;
pub mod experiment;
pub mod memsim;
pub mod moe;
pub mod packing;
pub mod pipeline;
pub mod report;
pub mod sharding;
pub mod workload;

pub use error::{Error, ErrorReport, Result};
