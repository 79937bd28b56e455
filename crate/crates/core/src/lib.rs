//! Training-data construction and evaluation for text-based web agents.
//!
//! The crate turns raw pages and navigation trajectories into supervised
//! instances ([`preprocess`]), mines structurally similar distractors
//! ([`miner`]), writes unsatisfiable counterfactual instructions
//! ([`counterfactual`]), synthesises new grounded instructions with a
//! generator/verifier pair ([`synthesis`]), and scores predictions
//! ([`alignment`], [`metrics`]). [`pipeline`] chains the stages over JSONL.

pub mod action;
pub mod alignment;
pub mod counterfactual;
pub mod dom;
pub mod instance;
pub mod metrics;
pub mod miner;
pub mod parallel;
pub mod pipeline;
pub mod preprocess;
pub mod similarity;
pub mod synthesis;

pub use action::{parse_action_output, Action, ActionKind};
pub use dom::{parse_html, DomNode, DomPath, DomTree, NodeId};
pub use instance::{InstanceKind, TrainingInstance};
