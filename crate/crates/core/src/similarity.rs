//! Structural and attribute similarity between elements.
//!
//! The hybrid score of a candidate against a target is
//! `lambda * s_topo + (1 - lambda) * s_attr`, where `s_topo` is one minus the
//! normalized tree edit distance of the two element subtrees and `s_attr` is
//! the Jaccard index of their attribute token sets.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dom::{DomError, DomNode, DomTree, NodeId};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimilarityError {
    #[error(transparent)]
    Dom(#[from] DomError),
    #[error("candidate and target are the same node {0}")]
    SameNode(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilarityWeights {
    /// Weight of the structural term, in `[0, 1]`.
    pub lambda: f64,
    /// Also draw attribute tokens from `role`.
    pub include_role_tokens: bool,
}

impl Default for SimilarityWeights {
    fn default() -> Self {
        SimilarityWeights {
            lambda: 0.6,
            include_role_tokens: false,
        }
    }
}

impl SimilarityWeights {
    pub fn combine(&self, s_topo: f64, s_attr: f64) -> f64 {
        self.lambda * s_topo + (1.0 - self.lambda) * s_attr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub candidate_id: NodeId,
    pub s_topo: f64,
    pub s_attr: f64,
    pub s_total: f64,
}

/// An ordered tree flattened in post-order, the layout Zhang–Shasha works on.
#[derive(Debug, Clone)]
pub struct PostorderTree<L> {
    labels: Vec<L>,
    /// Post-order index of each node's leftmost leaf descendant.
    leftmost: Vec<usize>,
}

impl<L: PartialEq> PostorderTree<L> {
    /// Flattens any tree given a root handle and accessors.
    pub fn build<N, FL, FC>(root: N, label: FL, children: FC) -> Self
    where
        FL: Fn(&N) -> L,
        FC: Fn(&N) -> Vec<N>,
    {
        let mut tree = PostorderTree {
            labels: Vec::new(),
            leftmost: Vec::new(),
        };
        tree.visit(root, &label, &children);
        tree
    }

    fn visit<N>(&mut self, node: N, label: &impl Fn(&N) -> L, children: &impl Fn(&N) -> Vec<N>) -> usize {
        let mut first_leaf = None;
        for child in children(&node) {
            let child_index = self.visit(child, label, children);
            first_leaf.get_or_insert(self.leftmost[child_index]);
        }
        let index = self.labels.len();
        self.labels.push(label(&node));
        self.leftmost.push(first_leaf.unwrap_or(index));
        index
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Nodes that are the highest node sharing their leftmost leaf, ascending.
    fn keyroots(&self) -> Vec<usize> {
        let mut highest = vec![None; self.len()];
        for (node, &leaf) in self.leftmost.iter().enumerate() {
            highest[leaf] = Some(node);
        }
        let mut roots: Vec<usize> = highest.into_iter().flatten().collect();
        roots.sort_unstable();
        roots
    }
}

/// Unit-cost ordered tree edit distance (Zhang & Shasha, 1989).
///
/// Insertions and deletions cost 1; relabeling costs 0 for equal labels and 1
/// otherwise.
pub fn zhang_shasha<L: PartialEq>(a: &PostorderTree<L>, b: &PostorderTree<L>) -> usize {
    if a.is_empty() || b.is_empty() {
        return a.len() + b.len();
    }
    let mut tree_dist = vec![vec![0usize; b.len()]; a.len()];
    let b_keyroots = b.keyroots();
    for i in a.keyroots() {
        for &j in &b_keyroots {
            forest_distance(a, b, i, j, &mut tree_dist);
        }
    }
    tree_dist[a.len() - 1][b.len() - 1]
}

fn forest_distance<L: PartialEq>(
    a: &PostorderTree<L>,
    b: &PostorderTree<L>,
    i: usize,
    j: usize,
    tree_dist: &mut [Vec<usize>],
) {
    let (li, lj) = (a.leftmost[i], b.leftmost[j]);
    let rows = i - li + 2;
    let cols = j - lj + 2;
    let mut fd = vec![vec![0usize; cols]; rows];
    for x in 1..rows {
        fd[x][0] = fd[x - 1][0] + 1;
    }
    for y in 1..cols {
        fd[0][y] = fd[0][y - 1] + 1;
    }
    for x in 1..rows {
        let an = li + x - 1;
        for y in 1..cols {
            let bn = lj + y - 1;
            let del = fd[x - 1][y] + 1;
            let ins = fd[x][y - 1] + 1;
            if a.leftmost[an] == li && b.leftmost[bn] == lj {
                let relabel = fd[x - 1][y - 1] + usize::from(a.labels[an] != b.labels[bn]);
                fd[x][y] = del.min(ins).min(relabel);
                tree_dist[an][bn] = fd[x][y];
            } else {
                let p = a.leftmost[an] - li;
                let q = b.leftmost[bn] - lj;
                fd[x][y] = del.min(ins).min(fd[p][q] + tree_dist[an][bn]);
            }
        }
    }
}

fn dom_postorder(tree: &DomTree, root: NodeId) -> Result<PostorderTree<String>, DomError> {
    tree.node(root)?;
    Ok(PostorderTree::build(
        root,
        |&id| tree.node(id).expect("checked").tag.clone(),
        |&id| tree.node(id).expect("checked").children.clone(),
    ))
}

/// Edit distance between two element subtrees, labelled by tag name.
pub fn tree_edit_distance(
    tree_a: &DomTree,
    a: NodeId,
    tree_b: &DomTree,
    b: NodeId,
) -> Result<usize, DomError> {
    Ok(zhang_shasha(&dom_postorder(tree_a, a)?, &dom_postorder(tree_b, b)?))
}

pub fn topo_similarity(tree: &DomTree, e_i: NodeId, e_plus: NodeId) -> Result<f64, DomError> {
    let ted = tree_edit_distance(tree, e_i, tree, e_plus)?;
    let size = tree.subtree_size(e_i)?.max(tree.subtree_size(e_plus)?);
    Ok((1.0 - ted as f64 / size as f64).max(0.0))
}

/// Lowercased tokens from `class`, `id`, `aria-label` and the element's text.
pub fn attribute_tokens(node: &DomNode, include_role: bool) -> BTreeSet<String> {
    let mut sources = vec![node.attr("class"), node.attr("id"), node.attr("aria-label")];
    if include_role {
        sources.push(node.attr("role"));
    }
    sources.push(node.text.as_deref());
    sources
        .into_iter()
        .flatten()
        .flat_map(str::split_whitespace)
        .map(str::to_lowercase)
        .collect()
}

/// Jaccard index; two empty sets are identical.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

pub fn attr_similarity(
    tree: &DomTree,
    e_i: NodeId,
    e_plus: NodeId,
    include_role: bool,
) -> Result<f64, DomError> {
    let a = attribute_tokens(tree.node(e_i)?, include_role);
    let b = attribute_tokens(tree.node(e_plus)?, include_role);
    Ok(jaccard(&a, &b))
}

pub fn hybrid_score(
    tree: &DomTree,
    e_i: NodeId,
    e_plus: NodeId,
    weights: &SimilarityWeights,
) -> Result<SimilarityScore, SimilarityError> {
    if e_i == e_plus {
        return Err(SimilarityError::SameNode(e_i));
    }
    let s_topo = topo_similarity(tree, e_i, e_plus)?;
    let s_attr = attr_similarity(tree, e_i, e_plus, weights.include_role_tokens)?;
    Ok(SimilarityScore {
        candidate_id: e_i,
        s_topo,
        s_attr,
        s_total: weights.combine(s_topo, s_attr),
    })
}
