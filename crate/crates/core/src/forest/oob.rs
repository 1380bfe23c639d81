//! Out-of-bag selection among forest configurations.
//!
//! Each candidate is scored with its own split criterion: tree-building
//! rows left out of a tree's subsample are routed through that tree, and
//! every leaf is evaluated with its grow-time arm means against the
//! out-of-bag outcomes (and matched outcomes for the cross-arm criterion).
//! Leaf values are weighted by out-of-bag leaf counts, averaged over trees,
//! and the candidate with the smallest average wins.

use super::{build_forest, draw_subsample, Forest, ForestConfig, NodeKind, TreeArms};
use crate::criterion::Variant;
use crate::data::Sample;
use crate::matching::{feature_scales, match_outcomes, MatchedOutcomes};
use crate::{Error, Result};

pub fn tune_oob(sample: &Sample, candidates: &[ForestConfig]) -> Result<ForestConfig> {
    if candidates.is_empty() {
        return Err(Error::Config("need at least one tuning candidate".into()));
    }
    let mut best = 0usize;
    let mut best_score = f64::INFINITY;
    for (i, candidate) in candidates.iter().enumerate() {
        let score = oob_score(sample, candidate)?;
        if score < best_score {
            best_score = score;
            best = i;
        }
    }
    Ok(candidates[best].clone())
}

/// Average out-of-bag objective of a (tree-capped) forest for `cfg`.
pub fn oob_score(sample: &Sample, cfg: &ForestConfig) -> Result<f64> {
    let mut capped = cfg.clone();
    capped.n_trees = cfg.n_trees.min(50);
    let forest = build_forest(sample, &capped)?;

    let matched = if forest.criterion.tracks_pairs() {
        let scales = feature_scales(sample, &forest.assignment.a)?;
        Some(match_outcomes(sample, &forest.assignment.a, &scales)?)
    } else {
        None
    };

    let basic = forest.criterion.variant == Variant::Basic;
    let m = forest.n_arms();
    let arm_sources: Vec<Vec<u32>> = if basic {
        (0..m)
            .map(|d| {
                forest
                    .assignment
                    .a
                    .iter()
                    .copied()
                    .filter(|&r| sample.d[r as usize] as usize == d)
                    .collect()
            })
            .collect()
    } else {
        vec![forest.assignment.a.clone()]
    };

    let mut total = 0.0;
    let mut trees_scored = 0usize;
    for tree in &forest.trees {
        let source = match tree.arm {
            Some(a) => &arm_sources[a as usize],
            None => &arm_sources[0],
        };
        let picked = draw_subsample(source.len(), forest.config.subsample_share_a, tree.subsample_seed);
        let mut in_bag = vec![false; source.len()];
        for i in picked {
            in_bag[i] = true;
        }
        let oob: Vec<u32> = source
            .iter()
            .enumerate()
            .filter(|(i, _)| !in_bag[*i])
            .map(|(_, &r)| r)
            .collect();
        if oob.is_empty() {
            continue;
        }
        total += tree_oob_value(&forest, tree, sample, matched.as_ref(), &oob);
        trees_scored += 1;
    }
    if trees_scored == 0 {
        return Ok(f64::INFINITY);
    }
    Ok(total / trees_scored as f64)
}

struct LeafAcc {
    count: Vec<u32>,
    sqdev: Vec<f64>,
    pair_n: Vec<u32>,
    pair_sum: Vec<f64>,
}

fn tree_oob_value(
    forest: &Forest,
    tree: &super::Tree,
    sample: &Sample,
    matched: Option<&MatchedOutcomes>,
    oob: &[u32],
) -> f64 {
    let arms = if tree.arm.is_some() {
        TreeArms::Single
    } else {
        TreeArms::All { arms: forest.n_arms() }
    };
    let stat_arms = arms.stat_arms();
    let n_pairs = stat_arms * (stat_arms - 1) / 2;

    let mut accs: Vec<Option<LeafAcc>> = Vec::new();
    accs.resize_with(tree.nodes.len(), || None);
    for &r in oob {
        let leaf_id = tree.route(|f| sample.x[f][r as usize]);
        let node = &tree.nodes[leaf_id];
        let leaf = match &node.kind {
            NodeKind::Leaf(l) => l,
            NodeKind::Split { .. } => unreachable!(),
        };
        let acc = accs[leaf_id].get_or_insert_with(|| LeafAcc {
            count: vec![0; stat_arms],
            sqdev: vec![0.0; stat_arms],
            pair_n: vec![0; n_pairs],
            pair_sum: vec![0.0; n_pairs],
        });
        let d = arms.stat_index(sample.d[r as usize]);
        acc.count[d] += 1;
        if node.train_count[d] > 0 {
            let dev = sample.y[r as usize] - leaf.train_mean[d];
            acc.sqdev[d] += dev * dev;
        }
        if let Some(matched) = matched {
            let yt = matched.row_values(r);
            let mut pair = 0usize;
            for a in 0..stat_arms {
                for b in (a + 1)..stat_arms {
                    if (d == a || d == b) && node.train_count[a] > 0 && node.train_count[b] > 0 {
                        let pa = leaf.train_mean[a] - yt[a];
                        let pb = leaf.train_mean[b] - yt[b];
                        acc.pair_sum[pair] += pa * pb;
                        acc.pair_n[pair] += 1;
                    }
                    pair += 1;
                }
            }
        }
    }

    let n_oob = oob.len() as f64;
    let mut value = 0.0;
    for (leaf_id, acc) in accs.iter().enumerate() {
        let Some(acc) = acc else { continue };
        let node = &tree.nodes[leaf_id];
        let leaf = match &node.kind {
            NodeKind::Leaf(l) => l,
            NodeKind::Split { .. } => unreachable!(),
        };
        let leaf_total: u32 = acc.count.iter().sum();
        let mse = |d: usize| -> f64 {
            if acc.count[d] > 0 && node.train_count[d] > 0 {
                acc.sqdev[d] / acc.count[d] as f64
            } else {
                0.0
            }
        };
        let leaf_value = match forest.criterion.variant {
            Variant::Basic | Variant::OneF => (0..stat_arms).map(mse).sum(),
            Variant::OneFMce => {
                let mse_sum: f64 = (0..stat_arms).map(mse).sum();
                let mut mce_sum = 0.0;
                for (pair, (&n, &s)) in acc.pair_n.iter().zip(&acc.pair_sum).enumerate() {
                    let _ = pair;
                    if n > 0 {
                        mce_sum += s / n as f64;
                    }
                }
                (stat_arms as f64 - 1.0) * mse_sum - 2.0 * mce_sum
            }
            Variant::OneFVarT => {
                let mut het = 0.0;
                for a in 0..stat_arms {
                    for b in (a + 1)..stat_arms {
                        if node.train_count[a] > 0 && node.train_count[b] > 0 {
                            let diff = leaf.train_mean[a] - leaf.train_mean[b];
                            het += diff * diff;
                        }
                    }
                }
                -het
            }
        };
        value += leaf_total as f64 / n_oob * leaf_value;
    }
    value
}
