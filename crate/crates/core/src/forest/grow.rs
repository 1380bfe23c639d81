//! Recursive partitioning on a tree-building subsample.

use super::{GrowSettings, Leaf, Node, NodeKind, SplitRule, TreeArms};
use crate::criterion::{split_objective, LeafStats, ResolvedCriterion};
use crate::data::Sample;
use crate::matching::MatchedOutcomes;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

/// Grows one tree. `rows` must be sorted ascending; for single-arm trees
/// they must all carry that tree's treatment. Never fails: nodes without a
/// valid split become leaves.
pub(crate) fn grow_tree(
    sample: &Sample,
    matched: Option<&MatchedOutcomes>,
    rows: Vec<u32>,
    arms: TreeArms,
    crit: &ResolvedCriterion,
    settings: &GrowSettings,
    rng: &mut ChaCha8Rng,
) -> Vec<Node> {
    let matched = if crit.tracks_pairs() { matched } else { None };
    debug_assert!(
        !crit.tracks_pairs() || matched.is_some(),
        "cross-arm criterion needs matched outcomes"
    );
    let mut nodes = vec![placeholder(arms.stat_arms())];
    let mut work = vec![(0usize, rows)];
    while let Some((node_id, node_rows)) = work.pop() {
        let stats = collect_stats(sample, matched, &node_rows, arms, crit);
        nodes[node_id].train_count = (0..arms.stat_arms()).map(|d| stats.count(d)).collect();
        let best = if stop_here(&stats, settings) {
            None
        } else {
            best_split(sample, matched, &node_rows, &stats, arms, crit, settings, rng)
        };
        match best {
            None => {
                nodes[node_id].kind = NodeKind::Leaf(leaf_from(&stats));
            }
            Some(rule) => {
                let (left_rows, right_rows) = partition(sample, &node_rows, &rule);
                let left_id = nodes.len();
                nodes.push(placeholder(arms.stat_arms()));
                let right_id = nodes.len();
                nodes.push(placeholder(arms.stat_arms()));
                nodes[node_id].kind = NodeKind::Split {
                    rule,
                    left: left_id as u32,
                    right: right_id as u32,
                };
                work.push((right_id, right_rows));
                work.push((left_id, left_rows));
            }
        }
    }
    nodes
}

fn placeholder(stat_arms: usize) -> Node {
    Node {
        kind: NodeKind::Leaf(Leaf {
            train_mean: vec![0.0; stat_arms],
            rows: Vec::new(),
            prop_count: Vec::new(),
        }),
        train_count: vec![0; stat_arms],
    }
}

fn leaf_from(stats: &LeafStats) -> Leaf {
    let train_mean = (0..stats.arms())
        .map(|d| if stats.count(d) > 0 { stats.mean(d) } else { 0.0 })
        .collect();
    Leaf {
        train_mean,
        rows: Vec::new(),
        prop_count: Vec::new(),
    }
}

fn collect_stats(
    sample: &Sample,
    matched: Option<&MatchedOutcomes>,
    rows: &[u32],
    arms: TreeArms,
    crit: &ResolvedCriterion,
) -> LeafStats {
    let mut stats = LeafStats::new(arms.stat_arms(), crit.tracks_pairs());
    for &r in rows {
        let d = arms.stat_index(sample.d[r as usize]);
        stats.add(d, sample.y[r as usize], matched.map(|m| m.row_values(r)));
    }
    stats
}

/// A node stops when any treatment falls under 2k - 1 observations.
fn stop_here(stats: &LeafStats, settings: &GrowSettings) -> bool {
    let need = 2 * settings.min_leaf_per_arm - 1;
    (0..stats.arms()).any(|d| stats.count(d) < need)
}

/// Both daughters must keep, for every treatment, at least
/// max(k, ceil(alpha * node arm count)) rows, and at least min_leaf_total
/// rows overall.
fn daughters_ok(node: &LeafStats, left: &LeafStats, settings: &GrowSettings) -> bool {
    if left.n < settings.min_leaf_total || node.n - left.n < settings.min_leaf_total {
        return false;
    }
    for d in 0..node.arms() {
        let parent = node.count(d);
        let floor = settings
            .min_leaf_per_arm
            .max((settings.alpha * parent as f64).ceil() as u32);
        let lc = left.count(d);
        if lc < floor || parent - lc < floor {
            return false;
        }
    }
    true
}

struct Best {
    objective: f64,
    rule: Option<SplitRule>,
}

impl Best {
    fn offer(&mut self, objective: f64, rule: impl FnOnce() -> SplitRule) {
        if objective < self.objective {
            self.objective = objective;
            self.rule = Some(rule());
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn best_split(
    sample: &Sample,
    matched: Option<&MatchedOutcomes>,
    rows: &[u32],
    node_stats: &LeafStats,
    arms: TreeArms,
    crit: &ResolvedCriterion,
    settings: &GrowSettings,
    rng: &mut ChaCha8Rng,
) -> Option<SplitRule> {
    let p = sample.n_features();
    let v = draw_feature_count(p, settings.feature_draw_mean, rng);
    let mut features: Vec<usize> = rand::seq::index::sample(rng, p, v).into_vec();
    // Candidates are scanned in ascending feature order with a strict
    // improvement rule, so the chosen split does not depend on draw order.
    features.sort_unstable();

    let mut best = Best {
        objective: f64::INFINITY,
        rule: None,
    };
    let mut left = LeafStats::new(arms.stat_arms(), crit.tracks_pairs());
    let mut right = node_stats.clone();
    for &f in &features {
        if sample.features[f].is_unordered() {
            scan_categorical(
                sample, matched, rows, node_stats, arms, crit, settings, f, &mut best, &mut left,
                &mut right,
            );
        } else {
            scan_ordered(
                sample, matched, rows, node_stats, arms, crit, settings, f, &mut best, &mut left,
                &mut right,
            );
        }
    }
    best.rule
}

fn draw_feature_count(p: usize, mean: f64, rng: &mut ChaCha8Rng) -> usize {
    let extra = if mean > 0.0 {
        Poisson::new(mean).map(|d| d.sample(rng) as usize).unwrap_or(0)
    } else {
        0
    };
    (1 + extra).min(p)
}

#[allow(clippy::too_many_arguments)]
fn scan_ordered(
    sample: &Sample,
    matched: Option<&MatchedOutcomes>,
    rows: &[u32],
    node_stats: &LeafStats,
    arms: TreeArms,
    crit: &ResolvedCriterion,
    settings: &GrowSettings,
    f: usize,
    best: &mut Best,
    left: &mut LeafStats,
    right: &mut LeafStats,
) {
    let col = &sample.x[f];
    let mut order: Vec<u32> = rows.to_vec();
    order.sort_by(|&a, &b| {
        col[a as usize]
            .partial_cmp(&col[b as usize])
            .unwrap()
            .then(a.cmp(&b))
    });

    left.reset();
    let mut i = 0usize;
    while i < order.len() {
        let value = col[order[i] as usize];
        // Consume the whole group of equal values.
        while i < order.len() && col[order[i] as usize] == value {
            let r = order[i];
            let d = arms.stat_index(sample.d[r as usize]);
            left.add(d, sample.y[r as usize], matched.map(|m| m.row_values(r)));
            i += 1;
        }
        if i == order.len() {
            break;
        }
        let next = col[order[i] as usize];
        let threshold = 0.5 * (value + next);
        // Guard against floating-point collapse: the midpoint must separate
        // the two groups under the x < threshold rule.
        if !(threshold > value && threshold <= next) {
            continue;
        }
        if !daughters_ok(node_stats, left, settings) {
            continue;
        }
        right.clone_from(node_stats);
        right.sub_assign(left);
        let objective = split_objective(left, right, crit);
        best.offer(objective, || SplitRule::Ordered { feature: f, threshold });
    }
}

#[allow(clippy::too_many_arguments)]
fn scan_categorical(
    sample: &Sample,
    matched: Option<&MatchedOutcomes>,
    rows: &[u32],
    node_stats: &LeafStats,
    arms: TreeArms,
    crit: &ResolvedCriterion,
    settings: &GrowSettings,
    f: usize,
    best: &mut Best,
    left: &mut LeafStats,
    right: &mut LeafStats,
) {
    let col = &sample.x[f];
    let n_cats = sample.features[f].n_categories();
    // Per-category stats and pooled outcome means over the node's rows.
    let mut cat_stats: Vec<Option<LeafStats>> = vec![None; n_cats];
    for &r in rows {
        let code = col[r as usize] as usize;
        let stats = cat_stats[code]
            .get_or_insert_with(|| LeafStats::new(arms.stat_arms(), crit.tracks_pairs()));
        let d = arms.stat_index(sample.d[r as usize]);
        stats.add(d, sample.y[r as usize], matched.map(|m| m.row_values(r)));
    }
    let mut present: Vec<(f64, u16)> = Vec::new();
    for (code, stats) in cat_stats.iter().enumerate() {
        if let Some(s) = stats {
            present.push((s.pooled_mean(), code as u16));
        }
    }
    if present.len() < 2 {
        return;
    }
    // Order categories by pooled mean outcome, ties by code, then split on
    // prefixes of that order.
    present.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));

    left.reset();
    let mut prefix: Vec<u16> = Vec::new();
    for j in 0..present.len() - 1 {
        let code = present[j].1;
        left.merge(cat_stats[code as usize].as_ref().unwrap());
        prefix.push(code);
        if !daughters_ok(node_stats, left, settings) {
            continue;
        }
        right.clone_from(node_stats);
        right.sub_assign(left);
        let objective = split_objective(left, right, crit);
        best.offer(objective, || {
            let mut left_cats = prefix.clone();
            left_cats.sort_unstable();
            SplitRule::Categorical { feature: f, left_cats }
        });
    }
}

fn partition(sample: &Sample, rows: &[u32], rule: &SplitRule) -> (Vec<u32>, Vec<u32>) {
    let f = rule.feature();
    let mut left = Vec::new();
    let mut right = Vec::new();
    for &r in rows {
        if rule.goes_left(sample.x[f][r as usize]) {
            left.push(r);
        } else {
            right.push(r);
        }
    }
    (left, right)
}
