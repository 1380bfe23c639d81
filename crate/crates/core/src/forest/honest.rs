//! Honest leaf filling.
//!
//! Tree structure comes from sample A only; this pass routes sample B rows
//! through the finished rules and stores per-arm honest row lists on each
//! leaf. A leaf arm with no honest rows borrows the nearest ancestor's
//! honest rows of that arm, so every leaf can serve every treatment.

use super::{Node, NodeKind};
use crate::data::Sample;

pub(crate) fn fill_honest(nodes: &mut [Node], sample: &Sample, b_rows: &[u32], arms: usize) {
    // Route honest rows to leaves; ascending row order keeps lists sorted.
    let mut own: Vec<Vec<Vec<u32>>> = vec![Vec::new(); nodes.len()];
    for node_own in &mut own {
        *node_own = vec![Vec::new(); arms];
    }
    for &r in b_rows {
        let leaf = route_row(nodes, sample, r);
        own[leaf][sample.d[r as usize] as usize].push(r);
    }

    let parent = parents(nodes);
    let leaf_ids: Vec<usize> = (0..nodes.len())
        .filter(|&i| matches!(nodes[i].kind, NodeKind::Leaf(_)))
        .collect();

    for leaf_id in leaf_ids {
        let mut rows: Vec<Vec<u32>> = Vec::with_capacity(arms);
        for d in 0..arms {
            if own[leaf_id][d].is_empty() {
                rows.push(borrow_arm(nodes, &own, &parent, leaf_id, d));
            } else {
                rows.push(own[leaf_id][d].clone());
            }
        }
        let prop_count = propensity_counts(nodes, &own, &parent, leaf_id, arms);
        if let NodeKind::Leaf(leaf) = &mut nodes[leaf_id].kind {
            leaf.rows = rows;
            leaf.prop_count = prop_count;
        }
    }
}

fn route_row(nodes: &[Node], sample: &Sample, row: u32) -> usize {
    let mut node = 0usize;
    loop {
        match &nodes[node].kind {
            NodeKind::Leaf(_) => return node,
            NodeKind::Split { rule, left, right } => {
                let value = sample.x[rule.feature()][row as usize];
                node = if rule.goes_left(value) { *left as usize } else { *right as usize };
            }
        }
    }
}

fn parents(nodes: &[Node]) -> Vec<usize> {
    let mut parent = vec![usize::MAX; nodes.len()];
    for (i, node) in nodes.iter().enumerate() {
        if let NodeKind::Split { left, right, .. } = &node.kind {
            parent[*left as usize] = i;
            parent[*right as usize] = i;
        }
    }
    parent
}

/// Honest rows of arm `d` under `node`, collected from leaf own-lists.
fn subtree_rows(nodes: &[Node], own: &[Vec<Vec<u32>>], node: usize, d: usize) -> Vec<u32> {
    let mut out = Vec::new();
    let mut stack = vec![node];
    while let Some(i) = stack.pop() {
        match &nodes[i].kind {
            NodeKind::Leaf(_) => out.extend_from_slice(&own[i][d]),
            NodeKind::Split { left, right, .. } => {
                stack.push(*left as usize);
                stack.push(*right as usize);
            }
        }
    }
    out.sort_unstable();
    out
}

/// Nearest ancestor whose subtree holds >= 1 honest row of arm `d`. The
/// root always qualifies because the half split keeps every arm populated.
fn borrow_arm(
    nodes: &[Node],
    own: &[Vec<Vec<u32>>],
    parent: &[usize],
    leaf: usize,
    d: usize,
) -> Vec<u32> {
    let mut node = leaf;
    while parent[node] != usize::MAX {
        node = parent[node];
        let rows = subtree_rows(nodes, own, node, d);
        if !rows.is_empty() {
            return rows;
        }
    }
    subtree_rows(nodes, own, node, d)
}

/// Counts behind the leaf's treatment-share estimate: the leaf's own honest
/// counts, or the nearest non-empty ancestor's subtree counts when the leaf
/// received no honest rows at all.
fn propensity_counts(
    nodes: &[Node],
    own: &[Vec<Vec<u32>>],
    parent: &[usize],
    leaf: usize,
    arms: usize,
) -> Vec<u32> {
    let own_counts: Vec<u32> = (0..arms).map(|d| own[leaf][d].len() as u32).collect();
    if own_counts.iter().any(|&c| c > 0) {
        return own_counts;
    }
    let mut node = leaf;
    while parent[node] != usize::MAX {
        node = parent[node];
        let counts: Vec<u32> = (0..arms)
            .map(|d| subtree_rows(nodes, own, node, d).len() as u32)
            .collect();
        if counts.iter().any(|&c| c > 0) {
            return counts;
        }
    }
    own_counts
}
