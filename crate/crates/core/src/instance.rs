//! Supervised training samples.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::counterfactual::RuleKind;
use crate::dom::NodeId;
use crate::preprocess::FormattedObservation;
use crate::synthesis::{TaskType, Verdict};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstanceKind {
    Base,
    Discrimination,
    Rejection,
    Synthetic,
}

impl InstanceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            InstanceKind::Base => "base",
            InstanceKind::Discrimination => "discrimination",
            InstanceKind::Rejection => "rejection",
            InstanceKind::Synthetic => "synthetic",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceMetadata {
    /// Mined hard negatives, hardest first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_ids: Option<Vec<NodeId>>,
    /// Target plus negatives in document order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_ids: Option<Vec<NodeId>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rule_kind: Option<RuleKind>,
    /// Phrase whose absence from the page makes a rejection unsatisfiable.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probe: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_type: Option<TaskType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<Verdict>,
    /// Instance this one was derived from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_instance: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingInstance {
    pub instance_id: String,
    pub observation: FormattedObservation,
    pub instruction: String,
    pub history: Vec<Action>,
    pub label: Action,
    pub kind: InstanceKind,
    #[serde(default)]
    pub metadata: InstanceMetadata,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum InstanceError {
    #[error("instance id is empty")]
    EmptyId,
    #[error("rejection instance must be labelled None")]
    RejectionNotNone,
    #[error("negative {0} equals the labelled element")]
    NegativeIsLabel(NodeId),
    #[error("observation instruction differs from instance instruction")]
    InstructionMismatch,
    #[error("observation does not reference labelled element {0}")]
    LabelNotInObservation(NodeId),
}

impl TrainingInstance {
    /// Checks the cross-field invariants that the type system does not.
    pub fn validate(&self) -> Result<(), InstanceError> {
        if self.instance_id.is_empty() {
            return Err(InstanceError::EmptyId);
        }
        if self.observation.instruction != self.instruction {
            return Err(InstanceError::InstructionMismatch);
        }
        if self.kind == InstanceKind::Rejection && self.label != Action::None {
            return Err(InstanceError::RejectionNotNone);
        }
        if let Some(target) = self.label.element_id() {
            if let Some(neg) = self
                .metadata
                .negative_ids
                .iter()
                .flatten()
                .find(|&&n| n == target)
            {
                return Err(InstanceError::NegativeIsLabel(*neg));
            }
            if !self.observation.html_text.contains(&format!("id=\"{target}\"")) {
                return Err(InstanceError::LabelNotInObservation(target));
            }
        }
        Ok(())
    }

    /// Full training text: prompt followed by the answer turn.
    pub fn to_chatml(&self) -> String {
        format!("{}{}\n<|im_end|>\n", self.observation.to_chatml(), self.label.to_output_text())
    }
}
