//! Cross-fitted local centering of outcomes.
//!
//! Outcomes are replaced by residuals against a nuisance estimate of
//! E(Y | X) before the causal forest is built. Sample A is split into K
//! folds; each fold's rows are predicted by a pooled regression forest
//! grown on the other K - 1 folds, so no observation's outcome enters the
//! model that predicts it. Sample B rows take the average of the K fold
//! forests. The finite-sample correlation this induces between arms is
//! ignored.

use crate::criterion::{CriterionConfig, Variant};
use crate::data::{Sample, SplitAssignment};
use crate::forest::{draw_subsample, ForestConfig, GrowSettings, NodeKind, Tree, TreeArms};
use crate::{rng, Error, Result};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Local-centering settings. `forest` configures the pooled nuisance
/// regression forests; its criterion is ignored and replaced by plain MSE
/// splitting on the single pooled arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteringConfig {
    pub folds: usize,
    pub forest: ForestConfig,
    pub seed: u64,
}

impl Default for CenteringConfig {
    fn default() -> Self {
        CenteringConfig {
            folds: 2,
            forest: ForestConfig::default(),
            seed: 0,
        }
    }
}

/// One fold's nuisance forest: trained on every A row outside the fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldForest {
    pub fold: usize,
    pub members: Vec<u32>,
    pub training: Vec<u32>,
    pub trees: Vec<Tree>,
}

impl FoldForest {
    /// Mean leaf prediction over this fold's trees.
    pub fn predict(&self, x: impl Fn(usize) -> f64 + Copy) -> f64 {
        let mut sum = 0.0;
        for tree in &self.trees {
            let leaf = tree.route(x);
            match &tree.nodes[leaf].kind {
                NodeKind::Leaf(l) => sum += l.train_mean[0],
                NodeKind::Split { .. } => unreachable!(),
            }
        }
        sum / self.trees.len() as f64
    }
}

/// Cross-fitted nuisance model plus the bookkeeping needed to undo the
/// centering exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenteringModel {
    pub config: CenteringConfig,
    pub folds: Vec<FoldForest>,
    /// Per-row nuisance prediction: own-fold forest for A rows, fold
    /// average for B rows.
    pub predictions: Vec<f64>,
    /// Outcomes before centering; subtraction is not bit-invertible, so
    /// the round trip restores these.
    pub original_y: Vec<f64>,
}

impl CenteringModel {
    /// E(Y | X) estimate for a new feature vector: average over all folds.
    pub fn predict(&self, x: &[f64]) -> f64 {
        let sum: f64 = self.folds.iter().map(|f| f.predict(|j| x[j])).sum();
        sum / self.folds.len() as f64
    }

    /// Original outcomes, bit-exact.
    pub fn uncenter(&self) -> Vec<f64> {
        self.original_y.clone()
    }
}

/// Replaces outcomes with cross-fitted residuals in both halves and
/// returns the centered sample with the model that produced it.
pub fn center_outcomes(
    sample: &Sample,
    split: &SplitAssignment,
    cfg: &CenteringConfig,
) -> Result<(Sample, CenteringModel)> {
    if cfg.folds < 2 {
        return Err(Error::Config(format!(
            "centering needs at least 2 folds, got {}",
            cfg.folds
        )));
    }
    if cfg.folds > split.a.len() {
        return Err(Error::Config(format!(
            "{} folds exceed the {} tree-building rows",
            cfg.folds,
            split.a.len()
        )));
    }
    cfg.forest.validate()?;

    // Random equal parts of A, then canonical ascending order per fold.
    let mut shuffled = split.a.clone();
    shuffled.shuffle(&mut rng::derive(cfg.seed, rng::stream::CENTERING, 0));
    let base = shuffled.len() / cfg.folds;
    let extra = shuffled.len() % cfg.folds;
    let mut fold_members: Vec<Vec<u32>> = Vec::with_capacity(cfg.folds);
    let mut start = 0usize;
    for k in 0..cfg.folds {
        let len = base + usize::from(k < extra);
        let mut members = shuffled[start..start + len].to_vec();
        members.sort_unstable();
        fold_members.push(members);
        start += len;
    }

    let criterion = CriterionConfig {
        variant: Variant::OneF,
        penalty_on: false,
        lambda: Some(1.0),
        lambda_multiplier: Some(1.0),
    }
    .resolve(1.0)?;
    let p = sample.n_features();
    let grow = GrowSettings {
        min_leaf_per_arm: cfg.forest.min_leaf_per_arm,
        min_leaf_total: cfg.forest.min_leaf_total,
        alpha: cfg.forest.alpha,
        feature_draw_mean: cfg
            .forest
            .feature_draw_mean
            .unwrap_or_else(|| (2.0 * p as f64 / 3.0).max(1.0)),
    };
    let n_trees = cfg.forest.n_trees as usize;

    let folds: Vec<FoldForest> = fold_members
        .par_iter()
        .enumerate()
        .map(|(k, members)| {
            let training: Vec<u32> = split
                .a
                .iter()
                .copied()
                .filter(|r| members.binary_search(r).is_err())
                .collect();
            let trees: Vec<Tree> = (0..n_trees)
                .into_par_iter()
                .map(|t| {
                    let index = (k * n_trees + t) as u64;
                    let subsample_seed =
                        rng::derive_key(cfg.seed, rng::stream::CENTERING_SUBSAMPLE, index);
                    let rows: Vec<u32> = draw_subsample(
                        training.len(),
                        cfg.forest.subsample_share_a,
                        subsample_seed,
                    )
                    .into_iter()
                    .map(|i| training[i])
                    .collect();
                    let mut rng_grow =
                        rng::derive(cfg.seed, rng::stream::CENTERING_TREE, index);
                    let nodes = crate::forest::grow::grow_tree(
                        sample,
                        None,
                        rows,
                        TreeArms::Single,
                        &criterion,
                        &grow,
                        &mut rng_grow,
                    );
                    Tree {
                        index: index as u32,
                        arm: None,
                        subsample_seed,
                        nodes,
                    }
                })
                .collect();
            FoldForest {
                fold: k,
                members: members.clone(),
                training,
                trees,
            }
        })
        .collect();

    let mut predictions = vec![0.0f64; sample.n_rows()];
    for fold in &folds {
        for &r in &fold.members {
            predictions[r as usize] = fold.predict(|j| sample.x[j][r as usize]);
        }
    }
    for &r in &split.b {
        let sum: f64 = folds
            .iter()
            .map(|f| f.predict(|j| sample.x[j][r as usize]))
            .sum();
        predictions[r as usize] = sum / folds.len() as f64;
    }

    let centered_y: Vec<f64> = sample
        .y
        .iter()
        .zip(&predictions)
        .map(|(y, p)| y - p)
        .collect();
    let centered = Sample::from_parts(
        centered_y,
        sample.d.clone(),
        sample.x.clone(),
        sample.features.clone(),
        sample.groups.clone(),
        sample.n_treatments,
    )?;
    let model = CenteringModel {
        config: cfg.clone(),
        folds,
        predictions,
        original_y: sample.y.clone(),
    };
    Ok((centered, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_halves, FeatureKind, FeatureMeta};
    use rand::Rng;

    fn sample_with(y: Vec<f64>, x: Vec<f64>) -> Sample {
        let n = y.len();
        let d: Vec<u16> = (0..n).map(|i| (i % 2) as u16).collect();
        Sample::from_parts(
            y,
            d,
            vec![x],
            vec![FeatureMeta {
                name: "x1".into(),
                kind: FeatureKind::Ordered,
            }],
            vec![],
            2,
        )
        .unwrap()
    }

    fn small_cfg(n_trees: u32, seed: u64) -> CenteringConfig {
        CenteringConfig {
            folds: 2,
            forest: ForestConfig {
                n_trees,
                ..ForestConfig::default()
            },
            seed,
        }
    }

    #[test]
    fn constant_outcome_centers_to_exact_zero() {
        let n = 40;
        let x: Vec<f64> = (0..n).map(|i| i as f64 * 0.37).collect();
        let sample = sample_with(vec![7.0; n], x);
        let split = split_halves(&sample, 1).unwrap();
        let (centered, model) = center_outcomes(&sample, &split, &small_cfg(6, 2)).unwrap();
        for (i, &cy) in centered.y.iter().enumerate() {
            assert_eq!(cy, 0.0, "row {}", i);
            assert_eq!(model.predictions[i], 7.0);
        }
    }

    #[test]
    fn fold_bookkeeping_never_self_predicts() {
        let n = 60;
        let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.61).sin() * 3.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        let sample = sample_with(y, x);
        let split = split_halves(&sample, 3).unwrap();
        let cfg = CenteringConfig {
            folds: 3,
            ..small_cfg(4, 9)
        };
        let (_, model) = center_outcomes(&sample, &split, &cfg).unwrap();
        assert_eq!(model.folds.len(), 3);
        let mut all_members: Vec<u32> = Vec::new();
        for fold in &model.folds {
            all_members.extend_from_slice(&fold.members);
            for r in &fold.members {
                assert!(
                    fold.training.binary_search(r).is_err(),
                    "row {} appears in its own fold's training set",
                    r
                );
            }
            // Every tree's subsample must come from the recorded training
            // rows: positions regenerate inside the training list.
            for tree in &fold.trees {
                let picked = draw_subsample(
                    fold.training.len(),
                    cfg.forest.subsample_share_a,
                    tree.subsample_seed,
                );
                assert!(picked.iter().all(|&i| i < fold.training.len()));
            }
        }
        all_members.sort_unstable();
        assert_eq!(all_members, split.a);
    }

    #[test]
    fn round_trip_restores_original_outcomes_bit_exactly() {
        let n = 50;
        let mut rng = crate::rng::derive(4, crate::rng::stream::POPULATION, 0);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| v * v + 0.3).collect();
        let sample = sample_with(y.clone(), x);
        let split = split_halves(&sample, 5).unwrap();
        let (_, model) = center_outcomes(&sample, &split, &small_cfg(5, 6)).unwrap();
        assert_eq!(model.uncenter(), y);
    }

    #[test]
    fn residual_means_are_near_zero_for_k2_and_k5() {
        let n = 400;
        let mut rng = crate::rng::derive(8, crate::rng::stream::POPULATION, 1);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|v| 2.0 * v + 1.0 + rng.gen_range(-0.5..0.5))
            .collect();
        let sample = sample_with(y, x);
        let split = split_halves(&sample, 7).unwrap();
        for folds in [2usize, 5] {
            let cfg = CenteringConfig {
                folds,
                ..small_cfg(25, 11)
            };
            let (centered, _) = center_outcomes(&sample, &split, &cfg).unwrap();
            let mean = centered.y.iter().sum::<f64>() / n as f64;
            let var = centered.y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (n as f64 - 1.0);
            let se = (var / n as f64).sqrt();
            assert!(
                mean.abs() < 3.0 * se.max(0.02),
                "K={}: residual mean {} vs SE {}",
                folds,
                mean,
                se
            );
        }
    }

    #[test]
    fn too_many_folds_is_an_error() {
        let sample = sample_with(vec![1.0; 10], (0..10).map(|i| i as f64).collect());
        let split = split_halves(&sample, 1).unwrap();
        let cfg = CenteringConfig {
            folds: 9,
            ..small_cfg(2, 0)
        };
        assert!(center_outcomes(&sample, &split, &cfg).is_err());
    }

    #[test]
    fn centering_leaves_features_and_treatments_alone() {
        let n = 30;
        let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let y: Vec<f64> = (0..n).map(|i| (i % 4) as f64).collect();
        let sample = sample_with(y, x);
        let split = split_halves(&sample, 2).unwrap();
        let (centered, _) = center_outcomes(&sample, &split, &small_cfg(3, 1)).unwrap();
        assert_eq!(centered.d, sample.d);
        assert_eq!(centered.x, sample.x);
        assert_eq!(centered.features, sample.features);
    }
}
