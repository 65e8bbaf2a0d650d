//! Desk-scale multimodal grounding: a from-scratch toy MLLM that emits
//! structured grounding-token outputs, a multi-task mask/box decoder driven
//! by the grounding-token embedding, negative rejection of absent referents,
//! selective reasoning, and the diagnostic probes for linguistic-prior-driven
//! hallucination — all exercised on a procedurally generated synthetic-scene
//! corpus where every ground truth is exact.

pub mod blob;
pub mod error;
pub mod grounder;
pub mod losses;
pub mod model;
pub mod protocol;
pub mod scalar;
pub mod scenegen;
pub mod trainer;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;
