//! Honest forest growing, filling, and weight prediction.
//!
//! Trees are grown on subsamples of the tree-building half (sample A) and
//! their leaves are filled with outcomes from the honest half (sample B).
//! Predictions are derived from per-arm observation weights, never from
//! stored leaf values, so every downstream estimate shares one code path.

pub(crate) mod grow;
mod honest;
mod oob;
mod predict;

pub use oob::{oob_score, tune_oob};
pub(crate) use predict::validate_query;
pub use predict::{predict_iate, predict_weights, HonestView, WeightSet};

use crate::criterion::{CriterionConfig, ResolvedCriterion, Variant};
use crate::data::{FeatureMeta, Sample, SplitAssignment};
use crate::matching::{feature_scales, match_outcomes, MatchedOutcomes};
use crate::{rng, Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Forest-level settings. `feature_draw_mean` is the mean of the Poisson
/// part of the per-node feature draw V = min(p, 1 + Poisson(mean)); when
/// unset it defaults to max(1, 2p/3) at build time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: u32,
    pub subsample_share_a: f64,
    pub min_leaf_per_arm: u32,
    pub min_leaf_total: u32,
    pub alpha: f64,
    pub feature_draw_mean: Option<f64>,
    pub criterion: CriterionConfig,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 1000,
            subsample_share_a: 0.5,
            min_leaf_per_arm: 2,
            min_leaf_total: 5,
            alpha: 0.05,
            feature_draw_mean: None,
            criterion: CriterionConfig::default(),
            seed: 0,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Config("n_trees must be >= 1".into()));
        }
        if !(self.subsample_share_a > 0.0 && self.subsample_share_a <= 1.0) {
            return Err(Error::Config(format!(
                "subsample share must be in (0, 1], got {}",
                self.subsample_share_a
            )));
        }
        if self.min_leaf_per_arm == 0 {
            return Err(Error::Config("min_leaf_per_arm must be >= 1".into()));
        }
        if self.min_leaf_total == 0 {
            return Err(Error::Config("min_leaf_total must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 0.5) {
            return Err(Error::Config(format!(
                "alpha must be in (0, 0.5], got {}",
                self.alpha
            )));
        }
        if let Some(m) = self.feature_draw_mean {
            if !m.is_finite() || m < 0.0 {
                return Err(Error::Config("feature_draw_mean must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Split rules route a feature vector to exactly one child.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SplitRule {
    /// x[feature] < threshold goes left; ties at the threshold go right.
    Ordered { feature: usize, threshold: f64 },
    /// Category code in `left_cats` (sorted) goes left; anything else,
    /// including categories absent from the growing node, goes right.
    Categorical { feature: usize, left_cats: Vec<u16> },
}

impl SplitRule {
    pub fn goes_left(&self, value: f64) -> bool {
        match self {
            SplitRule::Ordered { threshold, .. } => value < *threshold,
            SplitRule::Categorical { left_cats, .. } => {
                left_cats.binary_search(&(value as u16)).is_ok()
            }
        }
    }

    pub fn feature(&self) -> usize {
        match self {
            SplitRule::Ordered { feature, .. } => *feature,
            SplitRule::Categorical { feature, .. } => *feature,
        }
    }
}

/// Honest leaf payload. `rows` holds per-treatment honest row ids after
/// empty arms were resolved to the nearest populated ancestor; `prop_count`
/// holds the counts used for forest propensities (own rows, or the nearest
/// populated ancestor's when the leaf received no honest rows at all).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub train_mean: Vec<f64>,
    pub rows: Vec<Vec<u32>>,
    pub prop_count: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NodeKind {
    Split { rule: SplitRule, left: u32, right: u32 },
    Leaf(Leaf),
}

/// One tree node. `train_count` keeps the per-arm tree-building counts (in
/// the tree's own arm space) for regularity audits and OOB evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub kind: NodeKind,
    pub train_count: Vec<u32>,
}

/// One grown and honest-filled tree. `arm` is set for single-arm trees of
/// the basic variant; `subsample_seed` regenerates the exact subsample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub index: u32,
    pub arm: Option<u16>,
    pub subsample_seed: u64,
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn serves(&self, d: u16) -> bool {
        self.arm.map_or(true, |a| a == d)
    }

    /// Leaf node index for a feature vector.
    pub fn route<F: Fn(usize) -> f64>(&self, value_at: F) -> usize {
        let mut node = 0usize;
        loop {
            match &self.nodes[node].kind {
                NodeKind::Leaf(_) => return node,
                NodeKind::Split { rule, left, right } => {
                    node = if rule.goes_left(value_at(rule.feature())) {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }
}

/// A complete honest forest plus everything needed to reproduce it and to
/// encode new feature vectors consistently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub config: ForestConfig,
    pub criterion: ResolvedCriterion,
    pub assignment: SplitAssignment,
    pub features: Vec<FeatureMeta>,
    pub n_treatments: usize,
    pub trees: Vec<Tree>,
    pub matched_fingerprint: Option<String>,
}

impl Forest {
    pub fn n_arms(&self) -> usize {
        self.n_treatments
    }

    /// Trees used for arm `d`, in fixed index order. Pooled forests serve
    /// every arm with every tree; basic forests serve each arm with its own
    /// block of trees.
    pub fn serving_trees(&self, d: u16) -> Vec<&Tree> {
        let mut trees: Vec<&Tree> = self.trees.iter().filter(|t| t.serves(d)).collect();
        trees.sort_by_key(|t| t.index);
        trees
    }
}

/// Arm bookkeeping for a tree: pooled trees keep the full treatment space,
/// single-arm trees collapse their one treatment to stat index 0.
#[derive(Debug, Clone, Copy)]
pub(crate) enum TreeArms {
    All { arms: usize },
    Single,
}

impl TreeArms {
    pub(crate) fn stat_arms(&self) -> usize {
        match self {
            TreeArms::All { arms } => *arms,
            TreeArms::Single => 1,
        }
    }

    pub(crate) fn stat_index(&self, d: u16) -> usize {
        match self {
            TreeArms::All { .. } => d as usize,
            TreeArms::Single => 0,
        }
    }
}

/// Resolved per-node growing knobs.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GrowSettings {
    pub min_leaf_per_arm: u32,
    pub min_leaf_total: u32,
    pub alpha: f64,
    pub feature_draw_mean: f64,
}

/// Sorted local positions of one tree's subsample, regenerated from the
/// recorded per-tree seed.
pub(crate) fn draw_subsample(n_source: usize, share: f64, key: u64) -> Vec<usize> {
    let count = ((share * n_source as f64).round() as usize).clamp(1, n_source);
    let mut rng = rng::from_key(key);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, n_source, count).into_vec();
    picked.sort_unstable();
    picked
}

pub fn build_forest(sample: &Sample, cfg: &ForestConfig) -> Result<Forest> {
    let assignment = crate::data::split_halves(sample, cfg.seed)?;
    build_forest_with_assignment(sample, cfg, assignment)
}

/// Builds on a precomputed half split so outcome transformations (local
/// centering) and the forest share the same halves.
pub fn build_forest_with_assignment(
    sample: &Sample,
    cfg: &ForestConfig,
    assignment: SplitAssignment,
) -> Result<Forest> {
    cfg.validate()?;
    let p = sample.x.len();
    if p == 0 {
        return Err(Error::Config("forest needs at least one feature".into()));
    }
    let m = sample.n_treatments as usize;
    let a_rows = &assignment.a;

    let var_y = population_variance(&a_rows.iter().map(|&r| sample.y[r as usize]).collect::<Vec<_>>());
    let resolved = cfg.criterion.resolve(var_y)?;
    let stamped_criterion = stamp_criterion(&cfg.criterion, var_y);

    let matched = if resolved.tracks_pairs() {
        let scales = feature_scales(sample, a_rows)?;
        Some(match_outcomes(sample, a_rows, &scales)?)
    } else {
        None
    };

    let feature_draw_mean = cfg
        .feature_draw_mean
        .unwrap_or_else(|| (2.0 * p as f64 / 3.0).max(1.0));
    let grow = GrowSettings {
        min_leaf_per_arm: cfg.min_leaf_per_arm,
        min_leaf_total: cfg.min_leaf_total,
        alpha: cfg.alpha,
        feature_draw_mean,
    };

    // One source row list per tree block: all of A for pooled variants, the
    // per-arm slices of A for the basic variant.
    let basic = cfg.criterion.variant == Variant::Basic;
    let arm_sources: Vec<Vec<u32>> = if basic {
        (0..m)
            .map(|d| {
                a_rows
                    .iter()
                    .copied()
                    .filter(|&r| sample.d[r as usize] as usize == d)
                    .collect()
            })
            .collect()
    } else {
        vec![a_rows.clone()]
    };
    let total_trees = cfg.n_trees as usize * arm_sources.len();

    let trees: Vec<Tree> = (0..total_trees)
        .into_par_iter()
        .map(|t| {
            let (arm, source) = if basic {
                let block = t / cfg.n_trees as usize;
                (Some(block as u16), &arm_sources[block])
            } else {
                (None, &arm_sources[0])
            };
            let tree_arms = if basic {
                TreeArms::Single
            } else {
                TreeArms::All { arms: m }
            };
            let subsample_seed = rng::derive_key(cfg.seed, rng::stream::SUBSAMPLE, t as u64);
            let rows: Vec<u32> = draw_subsample(source.len(), cfg.subsample_share_a, subsample_seed)
                .into_iter()
                .map(|i| source[i])
                .collect();
            let mut rng_grow = rng::derive(cfg.seed, rng::stream::TREE, t as u64);
            let mut nodes = grow::grow_tree(
                sample,
                matched.as_ref(),
                rows,
                tree_arms,
                &resolved,
                &grow,
                &mut rng_grow,
            );
            honest::fill_honest(&mut nodes, sample, &assignment.b, m);
            Tree {
                index: t as u32,
                arm,
                subsample_seed,
                nodes,
            }
        })
        .collect();

    let mut stamped = cfg.clone();
    stamped.feature_draw_mean = Some(feature_draw_mean);
    stamped.criterion = stamped_criterion;

    Ok(Forest {
        config: stamped,
        criterion: resolved,
        assignment,
        features: sample.features.clone(),
        n_treatments: sample.n_treatments,
        trees,
        matched_fingerprint: matched.as_ref().map(fingerprint),
    })
}

fn stamp_criterion(cfg: &CriterionConfig, var_y: f64) -> CriterionConfig {
    let mut out = cfg.clone();
    out.lambda = Some(cfg.lambda.unwrap_or(var_y));
    out.lambda_multiplier = Some(cfg.lambda_multiplier.unwrap_or(match cfg.variant {
        Variant::OneFVarT => 100.0,
        _ => 1.0,
    }));
    out
}

pub(crate) fn population_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

fn fingerprint(matched: &MatchedOutcomes) -> String {
    let mut hasher = Sha256::new();
    for &row in &matched.rows {
        hasher.update(row.to_le_bytes());
        for &v in matched.row_values(row) {
            hasher.update(v.to_le_bytes());
        }
    }
    format!("{:x}", hasher.finalize())
}
