//! Two-stage plant disease diagnosis engine.
//!
//! Stage 1 runs a disease-agnostic detector on the normalized image; an
//! image without detections is diagnosed healthy on the spot. Stage 2 cuts a
//! fixed-size square around every detected box, classifies it, and the
//! per-image diagnosis is the majority label. The crate also carries the
//! dataset manifest tooling and the F1 evaluation used to score runs.

pub mod backends;
pub mod cli;
pub mod dataset;
pub mod imaging;
pub mod metrics;
pub mod pipeline;
pub mod taxonomy;
