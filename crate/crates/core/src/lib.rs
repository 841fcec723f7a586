//! Streaming dataflow accelerator generation from affine tensor programs.
//!
//! The pipeline runs model ingestion, kernel analysis, streaming graph
//! construction, a resource model, design space exploration, HLS code
//! generation and a cycle-level stream simulator.

pub mod affine_ir;
pub mod cli;
pub mod codegen;
pub mod dse;
pub mod kernel_analysis;
pub mod model_ingest;
pub mod resource_model;
pub mod simulator;
pub mod stream_arch;
