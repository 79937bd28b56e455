//! Counterfactual rejection samples.
//!
//! An instruction is perturbed so that nothing on the page satisfies it, and
//! the sample is relabelled with [`Action::None`]. Two strategies exist:
//! entity swaps (regex rewrites such as a product model number) and action
//! mismatches (phrase substitutions such as "login" to "register"). A
//! perturbation is only kept when the swapped-in phrase is absent from every
//! enabled interactive element.

use std::collections::BTreeSet;

use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::dom::{DomTree, NodeId};
use crate::instance::{InstanceKind, TrainingInstance};
use crate::preprocess::{extract_interactive, CleanConfig};

pub const DEFAULT_RULES: &str = include_str!("../rules/default.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    EntitySwap,
    ActionMismatch,
}

impl RuleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RuleKind::EntitySwap => "entity_swap",
            RuleKind::ActionMismatch => "action_mismatch",
        }
    }
}

#[derive(Debug, Error)]
pub enum RuleError {
    #[error("invalid rule file: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid pattern `{pattern}`: {source}")]
    Pattern {
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("rule `{0}` can never change an instruction")]
    NoOp(String),
}

/// A compiled instruction rewrite.
#[derive(Debug, Clone)]
pub struct PerturbationRule {
    pub kind: RuleKind,
    pattern: Regex,
    replacement: String,
    match_case: bool,
}

static COUNTER_TOKEN: std::sync::LazyLock<Regex> =
    std::sync::LazyLock::new(|| Regex::new(r"\{(inc|dec):(\d+)\}").expect("valid regex"));

impl PerturbationRule {
    pub fn entity_swap(pattern: &str, replacement: &str) -> Result<Self, RuleError> {
        Self::compile(RuleKind::EntitySwap, pattern, replacement, false)
    }

    /// Whole-word, case-insensitive substitution of `from` by `to`.
    pub fn action_mismatch(from: &str, to: &str) -> Result<Self, RuleError> {
        if from.trim().eq_ignore_ascii_case(to.trim()) {
            return Err(RuleError::NoOp(from.to_string()));
        }
        let pattern = format!(r"(?i)\b{}\b", regex::escape(from.trim()));
        Self::compile(RuleKind::ActionMismatch, &pattern, to.trim(), true)
    }

    fn compile(kind: RuleKind, pattern: &str, replacement: &str, match_case: bool) -> Result<Self, RuleError> {
        let regex = Regex::new(pattern).map_err(|source| RuleError::Pattern {
            pattern: pattern.to_string(),
            source,
        })?;
        if pattern.is_empty() || regex.is_match("") || pattern == replacement {
            return Err(RuleError::NoOp(pattern.to_string()));
        }
        Ok(PerturbationRule {
            kind,
            pattern: regex,
            replacement: replacement.to_string(),
            match_case,
        })
    }

    /// Rewrites the first match. Returns the new text and the inserted phrase,
    /// or `None` when the rule does not match, cannot be expanded, or would
    /// leave the text unchanged.
    pub fn apply(&self, text: &str) -> Option<(String, String)> {
        let caps = self.pattern.captures(text)?;
        let whole = caps.get(0)?;
        let mut phrase = self.expand(&caps)?;
        if self.match_case && whole.as_str().starts_with(|c: char| c.is_uppercase()) {
            phrase = capitalize(&phrase);
        }
        let rewritten = format!("{}{}{}", &text[..whole.start()], phrase, &text[whole.end()..]);
        (rewritten != text).then_some((rewritten, phrase))
    }

    fn expand(&self, caps: &Captures<'_>) -> Option<String> {
        let mut failed = false;
        let template = COUNTER_TOKEN.replace_all(&self.replacement, |c: &Captures<'_>| {
            let group: usize = c[2].parse().unwrap_or(usize::MAX);
            let value = caps
                .get(group)
                .and_then(|m| m.as_str().parse::<u64>().ok())
                .and_then(|v| if &c[1] == "inc" { v.checked_add(1) } else { v.checked_sub(1) });
            match value {
                Some(v) => v.to_string(),
                None => {
                    failed = true;
                    String::new()
                }
            }
        });
        if failed {
            return None;
        }
        let mut out = String::new();
        caps.expand(&template, &mut out);
        Some(out)
    }
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    #[serde(default)]
    entity_swap: Vec<EntitySwapSpec>,
    #[serde(default)]
    action_mismatch: Vec<VerbSwapSpec>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntitySwapSpec {
    pattern: String,
    replacement: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VerbSwapSpec {
    from: String,
    to: String,
}

/// Entity-swap rules plus the ordered verb incompatibility map.
#[derive(Debug, Clone)]
pub struct RuleSet {
    pub entity_swaps: Vec<PerturbationRule>,
    pub verb_map: Vec<PerturbationRule>,
}

impl RuleSet {
    pub fn from_toml(source: &str) -> Result<Self, RuleError> {
        let file: RuleFile = toml::from_str(source)?;
        Ok(RuleSet {
            entity_swaps: file
                .entity_swap
                .iter()
                .map(|r| PerturbationRule::entity_swap(&r.pattern, &r.replacement))
                .collect::<Result<_, _>>()?,
            verb_map: file
                .action_mismatch
                .iter()
                .map(|r| PerturbationRule::action_mismatch(&r.from, &r.to))
                .collect::<Result<_, _>>()?,
        })
    }
}

impl Default for RuleSet {
    fn default() -> Self {
        RuleSet::from_toml(DEFAULT_RULES).expect("bundled rules are valid")
    }
}

/// A perturbed copy of a sample whose correct answer is to do nothing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RejectionInstance {
    pub base: TrainingInstance,
    pub perturbed_instruction: String,
    pub rule_kind: RuleKind,
    /// The swapped-in phrase that the page cannot satisfy.
    pub probe: String,
    pub label: Action,
}

impl RejectionInstance {
    pub fn into_training_instance(self, instance_id: impl Into<String>) -> TrainingInstance {
        let mut observation = self.base.observation.clone();
        observation.instruction = self.perturbed_instruction.clone();
        let mut metadata = self.base.metadata.clone();
        metadata.rule_kind = Some(self.rule_kind);
        metadata.probe = Some(self.probe);
        metadata.source_instance = Some(self.base.instance_id.clone());
        metadata.negative_ids = None;
        metadata.candidate_ids = None;
        TrainingInstance {
            instance_id: instance_id.into(),
            observation,
            instruction: self.perturbed_instruction,
            history: self.base.history,
            label: self.label,
            kind: InstanceKind::Rejection,
            metadata,
        }
    }
}

/// Lowercased alphanumeric tokens.
pub fn content_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

fn element_tokens(tree: &DomTree, id: NodeId) -> BTreeSet<String> {
    let mut tokens = BTreeSet::new();
    for node in tree.subtree(id).into_iter().flatten() {
        for value in node.attributes.values() {
            tokens.extend(content_tokens(value));
        }
        if let Some(text) = &node.text {
            tokens.extend(content_tokens(text));
        }
    }
    tokens
}

/// Enabled interactive elements whose subtree contains every token of `probe`.
pub fn satisfying_elements(tree: &DomTree, probe: &str, clean: &CleanConfig) -> Vec<NodeId> {
    let wanted: BTreeSet<String> = content_tokens(probe).collect();
    extract_interactive(tree, clean)
        .into_iter()
        .filter(|&id| tree.node(id).is_ok_and(|n| !n.has_attr("disabled")))
        .filter(|&id| wanted.is_empty() || wanted.is_subset(&element_tokens(tree, id)))
        .collect()
}

pub fn is_satisfiable(tree: &DomTree, probe: &str, clean: &CleanConfig) -> bool {
    !satisfying_elements(tree, probe, clean).is_empty()
}

fn perturb(
    instance: &TrainingInstance,
    rule: &PerturbationRule,
    tree: &DomTree,
    clean: &CleanConfig,
) -> Option<RejectionInstance> {
    let (perturbed_instruction, probe) = rule.apply(&instance.instruction)?;
    if is_satisfiable(tree, &probe, clean) {
        return None;
    }
    Some(RejectionInstance {
        base: instance.clone(),
        perturbed_instruction,
        rule_kind: rule.kind,
        probe,
        label: Action::None,
    })
}

/// Swaps the target entity via the first matching rule; `None` if no rule
/// matches, the sample is not grounded, or the swapped entity is on the page.
pub fn apply_entity_swap(
    instance: &TrainingInstance,
    rules: &[PerturbationRule],
    tree: &DomTree,
    clean: &CleanConfig,
) -> Option<RejectionInstance> {
    instance.label.element_id()?;
    let rule = rules
        .iter()
        .filter(|r| r.kind == RuleKind::EntitySwap)
        .find(|r| r.apply(&instance.instruction).is_some())?;
    perturb(instance, rule, tree, clean)
}

/// Replaces the first recognised action phrase with its incompatible
/// counterpart; `None` if no phrase is recognised or the page offers the new
/// action.
pub fn apply_action_mismatch(
    instance: &TrainingInstance,
    tree: &DomTree,
    verb_map: &[PerturbationRule],
    clean: &CleanConfig,
) -> Option<RejectionInstance> {
    let rule = verb_map
        .iter()
        .find(|r| r.apply(&instance.instruction).is_some())?;
    perturb(instance, rule, tree, clean)
}
