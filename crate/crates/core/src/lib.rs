//! Model-agnostic audit engine for black-box tabular models.
//!
//! The engine generates nearest counterfactuals for every audited instance and
//! derives explainability, robustness, performance, drift and fairness scores
//! from them, aggregated into a single trust factor.

pub mod api;
pub mod drift;
pub mod fairness;
pub mod heom;
pub mod model;
pub mod nice;
pub mod scores;
pub mod synth;
pub mod tabular;
pub mod workbench;
