//! Topological hard negative mining.
//!
//! Every interactive element other than the target is scored with
//! [`hybrid_score`]; the `k` highest scores become hard negatives. Ties are
//! broken by document order.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::dom::{DomTree, NodeId};
use crate::instance::{InstanceKind, InstanceMetadata, TrainingInstance};
use crate::preprocess::{extract_interactive, format_observation, is_interactive, CleanConfig};
use crate::similarity::{hybrid_score, SimilarityError, SimilarityScore, SimilarityWeights};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    /// Pool size: at most this many negatives per target.
    pub k: usize,
    pub weights: SimilarityWeights,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            k: 20,
            weights: SimilarityWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardNegativeSet {
    pub target_id: NodeId,
    /// Descending by `s_total`, ties in document order.
    pub negatives: Vec<SimilarityScore>,
}

impl HardNegativeSet {
    pub fn negative_ids(&self) -> Vec<NodeId> {
        self.negatives.iter().map(|s| s.candidate_id).collect()
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MiningError {
    #[error("target {0} is not an interactive element")]
    TargetNotInteractive(NodeId),
    #[error("page has no interactive element besides the target")]
    NoCandidates,
    #[error("gold action points at {found:?}, hard negatives were mined for {expected}")]
    MismatchedTarget {
        expected: NodeId,
        found: Option<NodeId>,
    },
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
}

pub fn mine_hard_negatives(
    tree: &DomTree,
    target_id: NodeId,
    clean: &CleanConfig,
    config: &MiningConfig,
) -> Result<HardNegativeSet, MiningError> {
    let target = tree
        .node(target_id)
        .map_err(SimilarityError::from)?;
    if !is_interactive(target, clean) {
        return Err(MiningError::TargetNotInteractive(target_id));
    }
    let mut scored = extract_interactive(tree, clean)
        .into_iter()
        .filter(|&id| id != target_id)
        .map(|id| hybrid_score(tree, id, target_id, &config.weights))
        .collect::<Result<Vec<_>, _>>()?;
    if scored.is_empty() {
        return Err(MiningError::NoCandidates);
    }
    // Candidates arrive in document order, so a stable sort keeps that order on ties.
    scored.sort_by(|a, b| b.s_total.total_cmp(&a.s_total));
    scored.truncate(config.k);
    Ok(HardNegativeSet {
        target_id,
        negatives: scored,
    })
}

/// Wraps a mined set into a discrimination sample. The negatives stay in place
/// in the page (each carries its injected id); their ids are listed in the
/// metadata.
pub fn build_discrimination_instance(
    instance_id: impl Into<String>,
    tree: &DomTree,
    instruction: &str,
    history: &[Action],
    hard_negatives: &HardNegativeSet,
    gold: &Action,
    clean: &CleanConfig,
) -> Result<TrainingInstance, MiningError> {
    if gold.element_id() != Some(hard_negatives.target_id) {
        return Err(MiningError::MismatchedTarget {
            expected: hard_negatives.target_id,
            found: gold.element_id(),
        });
    }
    let negative_ids = hard_negatives.negative_ids();
    let mut candidate_ids = negative_ids.clone();
    candidate_ids.push(hard_negatives.target_id);
    candidate_ids.sort_unstable();

    Ok(TrainingInstance {
        instance_id: instance_id.into(),
        observation: format_observation(tree, instruction, history, clean),
        instruction: instruction.to_string(),
        history: history.to_vec(),
        label: gold.clone(),
        kind: InstanceKind::Discrimination,
        metadata: InstanceMetadata {
            negative_ids: Some(negative_ids),
            candidate_ids: Some(candidate_ids),
            ..Default::default()
        },
    })
}
