//! In-memory DOM model.
//!
//! Documents are parsed with a browser-grade HTML5 parser and flattened into an
//! arena of element nodes. Node ids are assigned in pre-order starting at 0, so
//! the subtree of any node occupies a contiguous id range. Text is not modelled
//! as separate nodes: each element carries the whitespace-collapsed
//! concatenation of its direct text children.

use std::fmt;

use html5ever::tendril::TendrilSink;
use indexmap::IndexMap;
use markup5ever_rcdom::{Handle, NodeData, RcDom};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pre-order position of an element inside its [`DomTree`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomError {
    #[error("document has no element content")]
    Unparseable,
    #[error("node {0} does not exist in this tree")]
    UnknownNode(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomNode {
    pub id: NodeId,
    /// Lowercase tag name, never empty.
    pub tag: String,
    /// Attribute name (lowercase) to value, in source order.
    pub attributes: IndexMap<String, String>,
    /// Collapsed direct text content; `None` when the element has none.
    pub text: Option<String>,
    pub children: Vec<NodeId>,
    pub parent: Option<NodeId>,
}

impl DomNode {
    pub fn attr(&self, name: &str) -> Option<&str> {
        self.attributes.get(name).map(String::as_str)
    }

    pub fn has_attr(&self, name: &str) -> bool {
        self.attributes.contains_key(name)
    }
}

/// Owned, recursive element description used to build trees.
///
/// Both the parser and the cleaner produce a `NodeSpec` first and then number
/// it through [`DomTree::from_spec`], which is the only place ids are assigned.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NodeSpec {
    pub tag: String,
    pub attributes: IndexMap<String, String>,
    pub text: Option<String>,
    pub children: Vec<NodeSpec>,
}

impl NodeSpec {
    pub fn new(tag: impl Into<String>) -> Self {
        NodeSpec {
            tag: tag.into().to_ascii_lowercase(),
            ..Default::default()
        }
    }

    pub fn attr(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.attributes
            .insert(name.into().to_ascii_lowercase(), value.into());
        self
    }

    pub fn text(mut self, text: impl AsRef<str>) -> Self {
        self.text = collapse_whitespace(text.as_ref());
        self
    }

    pub fn child(mut self, child: NodeSpec) -> Self {
        self.children.push(child);
        self
    }

    pub fn children(mut self, children: impl IntoIterator<Item = NodeSpec>) -> Self {
        self.children.extend(children);
        self
    }
}

/// A parsed document. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DomTree {
    nodes: Vec<DomNode>,
    /// One past the last pre-order id of each node's subtree.
    subtree_end: Vec<usize>,
    pub source_url: Option<String>,
}

impl DomTree {
    pub fn from_spec(spec: NodeSpec) -> DomTree {
        let mut tree = DomTree {
            nodes: Vec::new(),
            subtree_end: Vec::new(),
            source_url: None,
        };
        tree.push_spec(spec, None);
        tree
    }

    fn push_spec(&mut self, spec: NodeSpec, parent: Option<NodeId>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(DomNode {
            id,
            tag: spec.tag,
            attributes: spec.attributes,
            text: spec.text,
            children: Vec::with_capacity(spec.children.len()),
            parent,
        });
        self.subtree_end.push(0);
        for child in spec.children {
            let child_id = self.push_spec(child, Some(id));
            self.nodes[id.0].children.push(child_id);
        }
        self.subtree_end[id.0] = self.nodes.len();
        id
    }

    pub fn with_url(mut self, url: impl Into<String>) -> Self {
        self.source_url = Some(url.into());
        self
    }

    pub fn root(&self) -> &DomNode {
        &self.nodes[0]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node(&self, id: NodeId) -> Result<&DomNode, DomError> {
        self.nodes.get(id.0).ok_or(DomError::UnknownNode(id))
    }

    pub fn contains(&self, id: NodeId) -> bool {
        id.0 < self.nodes.len()
    }

    /// All nodes in document (pre-order) order.
    pub fn nodes(&self) -> impl Iterator<Item = &DomNode> {
        self.nodes.iter()
    }

    /// The subtree rooted at `id`, in pre-order, including `id` itself.
    pub fn subtree(&self, id: NodeId) -> Result<&[DomNode], DomError> {
        self.node(id)?;
        Ok(&self.nodes[id.0..self.subtree_end[id.0]])
    }

    pub fn subtree_size(&self, id: NodeId) -> Result<usize, DomError> {
        self.node(id)?;
        Ok(self.subtree_end[id.0] - id.0)
    }

    pub fn is_ancestor(&self, ancestor: NodeId, node: NodeId) -> bool {
        ancestor.0 < node.0 && node.0 < self.subtree_end.get(ancestor.0).copied().unwrap_or(0)
    }

    /// Rebuilds the owned description of the subtree at `id`.
    pub fn to_spec(&self, id: NodeId) -> Result<NodeSpec, DomError> {
        let node = self.node(id)?;
        Ok(NodeSpec {
            tag: node.tag.clone(),
            attributes: node.attributes.clone(),
            text: node.text.clone(),
            children: node
                .children
                .iter()
                .map(|&c| self.to_spec(c))
                .collect::<Result<_, _>>()?,
        })
    }

    pub fn node_path(&self, id: NodeId) -> Result<DomPath, DomError> {
        let mut steps = Vec::new();
        let mut current = self.node(id)?;
        loop {
            let sibling_index = match current.parent {
                Some(parent) => self.nodes[parent.0]
                    .children
                    .iter()
                    .take_while(|&&c| c != current.id)
                    .filter(|&&c| self.nodes[c.0].tag == current.tag)
                    .count(),
                None => 0,
            };
            steps.push(PathStep {
                tag: current.tag.clone(),
                sibling_index,
            });
            match current.parent {
                Some(parent) => current = &self.nodes[parent.0],
                None => break,
            }
        }
        steps.reverse();
        Ok(DomPath { steps })
    }
}

/// One step of a root-to-node path: the tag and the zero-based index among
/// preceding siblings sharing that tag.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PathStep {
    pub tag: String,
    pub sibling_index: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DomPath {
    pub steps: Vec<PathStep>,
}

impl DomPath {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Walks the path from the root of `tree`.
    pub fn resolve(&self, tree: &DomTree) -> Option<NodeId> {
        let (first, rest) = self.steps.split_first()?;
        let root = tree.root();
        if root.tag != first.tag || first.sibling_index != 0 {
            return None;
        }
        let mut current = root;
        for step in rest {
            let next = current
                .children
                .iter()
                .map(|&c| &tree.nodes[c.0])
                .filter(|n| n.tag == step.tag)
                .nth(step.sibling_index)?;
            current = next;
        }
        Some(current.id)
    }
}

impl fmt::Display for DomPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, step) in self.steps.iter().enumerate() {
            if i > 0 {
                f.write_str("/")?;
            }
            write!(f, "{}[{}]", step.tag, step.sibling_index)?;
        }
        Ok(())
    }
}

/// Collapses runs of whitespace to single spaces and trims. Returns `None`
/// for all-whitespace input.
pub fn collapse_whitespace(text: &str) -> Option<String> {
    let collapsed = text.split_whitespace().collect::<Vec<_>>().join(" ");
    (!collapsed.is_empty()).then_some(collapsed)
}

/// Parses UTF-8 bytes, replacing invalid sequences with U+FFFD.
pub fn parse_html_bytes(source: &[u8]) -> Result<DomTree, DomError> {
    parse_html(&String::from_utf8_lossy(source))
}

/// Parses an HTML document with HTML5 error recovery.
///
/// When the source is a bare fragment (no `<html>`, `<head>` or `<body>` tag)
/// whose body holds exactly one element and no loose text, the implied
/// document wrappers are dropped and that element becomes the root.
pub fn parse_html(source: &str) -> Result<DomTree, DomError> {
    if source.trim().is_empty() {
        return Err(DomError::Unparseable);
    }
    let dom = html5ever::parse_document(RcDom::default(), Default::default()).one(source);
    let html = dom
        .document
        .children
        .borrow()
        .iter()
        .find(|h| matches!(h.data, NodeData::Element { .. }))
        .cloned()
        .ok_or(DomError::Unparseable)?;
    let spec = convert(&html);

    let has_content = spec
        .children
        .iter()
        .any(|section| !section.children.is_empty());
    if !has_content {
        return Err(DomError::Unparseable);
    }

    let spec = if is_bare_fragment(source) {
        unwrap_fragment(spec)
    } else {
        spec
    };
    Ok(DomTree::from_spec(spec))
}

fn is_bare_fragment(source: &str) -> bool {
    let lower = source.to_ascii_lowercase();
    !["<html", "<head", "<body"].iter().any(|t| lower.contains(t))
}

fn unwrap_fragment(html: NodeSpec) -> NodeSpec {
    let head_empty = html
        .children
        .iter()
        .filter(|c| c.tag == "head")
        .all(|h| h.children.is_empty() && h.text.is_none());
    let single_body_child = html
        .children
        .iter()
        .find(|c| c.tag == "body")
        .filter(|b| b.children.len() == 1 && b.text.is_none());
    match single_body_child {
        Some(body) if head_empty => body.children[0].clone(),
        _ => html,
    }
}

fn convert(handle: &Handle) -> NodeSpec {
    let NodeData::Element { name, attrs, .. } = &handle.data else {
        unreachable!("convert is only called on elements");
    };
    let mut spec = NodeSpec::new(name.local.as_ref());
    for attr in attrs.borrow().iter() {
        let key = attr.name.local.as_ref().to_ascii_lowercase();
        spec.attributes
            .entry(key)
            .or_insert_with(|| attr.value.to_string());
    }
    let mut text = String::new();
    for child in handle.children.borrow().iter() {
        match &child.data {
            NodeData::Text { contents } => {
                text.push(' ');
                text.push_str(&contents.borrow());
            }
            NodeData::Element { .. } => spec.children.push(convert(child)),
            _ => {}
        }
    }
    spec.text = collapse_whitespace(&text);
    spec
}
