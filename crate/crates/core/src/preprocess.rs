//! DOM pruning and prompt formatting.
//!
//! [`clean_tree`] strips bulky tags, filters attributes, truncates text and
//! renumbers the surviving elements. [`format_observation`] renders a cleaned
//! tree into the flattened model input, injecting each interactive element's
//! node id as its `id` attribute.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::action::Action;
use crate::dom::{DomNode, DomTree, NodeId, NodeSpec};

pub const SYSTEM_PROMPT: &str = "You are a proficient web navigation agent. Given the HTML content \
and a user instruction, select the correct element and operation. Output format: Element ID and Operation.";

const VOID_TAGS: &[&str] = &[
    "area", "base", "br", "col", "embed", "hr", "img", "input", "link", "meta", "source", "track",
    "wbr",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CleanConfig {
    /// Tags whose whole subtree is deleted.
    pub removed_tags: BTreeSet<String>,
    /// Attributes kept on every element, in output order.
    pub kept_attributes: Vec<String>,
    /// Attributes kept after `kept_attributes` because they decide whether an
    /// element is interactive or usable (`role`, `disabled`).
    pub state_attributes: Vec<String>,
    /// Maximum number of whitespace tokens kept in an element's text.
    pub text_token_limit: usize,
    pub interactive_tags: BTreeSet<String>,
    /// `role` values that make any element interactive.
    pub interactive_roles: BTreeSet<String>,
}

impl Default for CleanConfig {
    fn default() -> Self {
        let set = |items: &[&str]| items.iter().map(|s| s.to_string()).collect();
        CleanConfig {
            removed_tags: set(&["script", "style", "svg", "head", "meta", "noscript", "link"]),
            kept_attributes: ["class", "id", "type", "name", "aria-label", "placeholder", "value"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            state_attributes: vec!["role".into(), "disabled".into()],
            text_token_limit: 50,
            interactive_tags: set(&["a", "button", "input", "select", "textarea"]),
            interactive_roles: set(&[
                "button", "link", "checkbox", "tab", "menuitem", "textbox", "combobox",
            ]),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CleanError {
    #[error("document is empty after cleaning")]
    EmptyAfterCleaning,
}

/// Cleans `tree`. See [`clean_tree_with_map`].
pub fn clean_tree(tree: &DomTree, config: &CleanConfig) -> Result<DomTree, CleanError> {
    clean_tree_with_map(tree, config).map(|(cleaned, _)| cleaned)
}

/// Cleans `tree` and also returns, for every original node id, the id of the
/// same element in the cleaned tree (`None` if it was removed).
pub fn clean_tree_with_map(
    tree: &DomTree,
    config: &CleanConfig,
) -> Result<(DomTree, Vec<Option<NodeId>>), CleanError> {
    let mut map = vec![None; tree.node_count()];
    let mut next = 0;
    let spec = clean_node(tree, tree.root(), config, &mut map, &mut next)
        .ok_or(CleanError::EmptyAfterCleaning)?;
    let mut cleaned = DomTree::from_spec(spec);
    let structural = |n: &DomNode| matches!(n.tag.as_str(), "html" | "head" | "body") && n.text.is_none();
    if cleaned.nodes().all(structural) {
        return Err(CleanError::EmptyAfterCleaning);
    }
    cleaned.source_url = tree.source_url.clone();
    Ok((cleaned, map))
}

fn clean_node(
    tree: &DomTree,
    node: &DomNode,
    config: &CleanConfig,
    map: &mut [Option<NodeId>],
    next: &mut usize,
) -> Option<NodeSpec> {
    if config.removed_tags.contains(&node.tag) {
        return None;
    }
    map[node.id.index()] = Some(NodeId(*next));
    *next += 1;

    let mut spec = NodeSpec::new(node.tag.clone());
    for name in config.kept_attributes.iter().chain(&config.state_attributes) {
        if let Some(value) = node.attributes.get(name) {
            spec.attributes.entry(name.clone()).or_insert_with(|| value.clone());
        }
    }
    spec.text = node
        .text
        .as_deref()
        .map(|t| truncate_tokens(t, config.text_token_limit))
        .filter(|t| !t.is_empty());
    for &child in &node.children {
        let child = tree.node(child).expect("child ids are valid");
        if let Some(child_spec) = clean_node(tree, child, config, map, next) {
            spec.children.push(child_spec);
        }
    }
    Some(spec)
}

/// Keeps the first `limit` whitespace-separated tokens.
pub fn truncate_tokens(text: &str, limit: usize) -> String {
    text.split_whitespace()
        .take(limit)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn is_interactive(node: &DomNode, config: &CleanConfig) -> bool {
    config.interactive_tags.contains(&node.tag)
        || node
            .attr("role")
            .is_some_and(|role| config.interactive_roles.contains(&role.trim().to_ascii_lowercase()))
}

/// Interactive elements in document order.
pub fn extract_interactive(tree: &DomTree, config: &CleanConfig) -> Vec<NodeId> {
    tree.nodes()
        .filter(|n| is_interactive(n, config))
        .map(|n| n.id)
        .collect()
}

/// Canonical HTML for a tree, without injected ids. Parsing the output and
/// cleaning it again reproduces the same cleaned tree.
pub fn to_html(tree: &DomTree) -> String {
    let mut out = String::new();
    write_node(tree, tree.root(), None, &mut out);
    out
}

/// HTML of a single element's subtree with ids injected on interactive
/// elements.
pub fn element_html(tree: &DomTree, id: NodeId, config: &CleanConfig) -> String {
    let mut out = String::new();
    if let Ok(node) = tree.node(id) {
        write_node(tree, node, Some(config), &mut out);
    }
    out.trim_start().to_string()
}

/// HTML with `id="<node id>"` injected as the first attribute of every
/// interactive element, each of which starts on its own line. Page-supplied
/// `id` attributes are not emitted, so every `id` in the output is a node id.
pub fn observation_html(tree: &DomTree, config: &CleanConfig) -> String {
    let mut out = String::new();
    write_node(tree, tree.root(), Some(config), &mut out);
    out.trim_start().to_string()
}

fn write_node(tree: &DomTree, node: &DomNode, inject: Option<&CleanConfig>, out: &mut String) {
    let interactive = inject.is_some_and(|config| is_interactive(node, config));
    if interactive {
        out.push('\n');
    }
    out.push('<');
    out.push_str(&node.tag);
    if interactive {
        let _ = write!(out, " id=\"{}\"", node.id);
    }
    for (name, value) in &node.attributes {
        if inject.is_some() && name == "id" {
            continue;
        }
        out.push(' ');
        out.push_str(name);
        out.push_str("=\"");
        escape_into(value, true, out);
        out.push('"');
    }
    out.push('>');
    if VOID_TAGS.contains(&node.tag.as_str()) {
        return;
    }
    if let Some(text) = &node.text {
        escape_into(text, false, out);
    }
    for &child in &node.children {
        write_node(tree, tree.node(child).expect("child ids are valid"), inject, out);
    }
    out.push_str("</");
    out.push_str(&node.tag);
    out.push('>');
}

fn escape_into(text: &str, attribute: bool, out: &mut String) {
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' if attribute => out.push_str("&quot;"),
            '\u{a0}' => out.push_str("&nbsp;"),
            _ => out.push(c),
        }
    }
}

/// The model input for one step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FormattedObservation {
    pub system_text: String,
    pub html_text: String,
    pub history_lines: Vec<String>,
    pub instruction: String,
}

impl FormattedObservation {
    /// The user turn: observation, optional action history, instruction.
    pub fn user_text(&self) -> String {
        let mut out = format!("Observation (Cleaned HTML):\n{}\n", self.html_text);
        if !self.history_lines.is_empty() {
            out.push_str("\nPrevious Actions:\n");
            for line in &self.history_lines {
                out.push_str(line);
                out.push('\n');
            }
        }
        let _ = write!(out, "\nCurrent Instruction:\n\"{}\"", self.instruction);
        out
    }

    /// ChatML rendering up to and including the assistant header.
    pub fn to_chatml(&self) -> String {
        format!(
            "<|im_start|>system\n{}\n<|im_end|>\n<|im_start|>user\n{}\n<|im_end|>\n<|im_start|>assistant\n",
            self.system_text,
            self.user_text()
        )
    }
}

pub fn format_observation(
    tree: &DomTree,
    instruction: &str,
    history: &[Action],
    config: &CleanConfig,
) -> FormattedObservation {
    FormattedObservation {
        system_text: SYSTEM_PROMPT.to_string(),
        html_text: observation_html(tree, config),
        history_lines: history
            .iter()
            .enumerate()
            .map(|(i, action)| format!("{}. {}", i + 1, action.history_line()))
            .collect(),
        instruction: instruction.to_string(),
    }
}
