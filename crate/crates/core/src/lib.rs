//! Budgeted, LLM-driven development of data tasks: a scheduling agent orders
//! candidate tasks through a dependency DAG, an implementation agent drafts
//! and repairs code against a growing error-fix knowledge base, and
//! evaluators score every attempt against ground truth.

pub mod evaluators;
pub mod gateway;
pub mod implementer;
pub mod knowledge;
pub mod mermaid;
pub mod model;
pub mod orchestrator;
pub mod sandbox;
pub mod scheduler;
pub mod toy;
