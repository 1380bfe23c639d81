//! Forest weights and point predictions.

use super::{Forest, NodeKind};
use crate::data::{FeatureKind, Sample};
use crate::{Error, Result};

/// Per-arm observation weights over the honest half for one query point.
/// `arms[d]` is indexed by position in the honest row list; each arm sums
/// to one and is supported only on rows with that treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub arms: Vec<Vec<f64>>,
}

impl WeightSet {
    pub fn arm(&self, d: usize) -> &[f64] {
        &self.arms[d]
    }
}

/// Precomputed honest-half lookup shared across query points: honest row
/// ids, a global-row -> honest-position map, and honest outcomes.
#[derive(Debug, Clone)]
pub struct HonestView {
    pub rows: Vec<u32>,
    pub pos: Vec<u32>,
    pub y: Vec<f64>,
    pub d: Vec<u16>,
}

impl HonestView {
    pub fn new(forest: &Forest, sample: &Sample) -> HonestView {
        let rows = forest.assignment.b.clone();
        let mut pos = vec![u32::MAX; sample.n_rows()];
        for (i, &r) in rows.iter().enumerate() {
            pos[r as usize] = i as u32;
        }
        let y = rows.iter().map(|&r| sample.y[r as usize]).collect();
        let d = rows.iter().map(|&r| sample.d[r as usize]).collect();
        HonestView { rows, pos, y, d }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Checks that `x` is encodable under the forest's feature encoding.
pub(crate) fn validate_query(forest: &Forest, x: &[f64]) -> Result<()> {
    if x.len() != forest.features.len() {
        return Err(Error::Config(format!(
            "query has {} features, forest expects {}",
            x.len(),
            forest.features.len()
        )));
    }
    for (f, meta) in forest.features.iter().enumerate() {
        if let FeatureKind::Unordered { categories } = &meta.kind {
            let code = x[f];
            if !(code.fract() == 0.0 && code >= 0.0 && (code as usize) < categories.len()) {
                return Err(Error::UnseenCategory {
                    feature: meta.name.clone(),
                    value: format!("{}", code),
                });
            }
        }
    }
    Ok(())
}

/// Observation weights for one query point: per serving tree, honest rows
/// of arm `d` in the query's leaf get 1/(leaf arm count); the forest weight
/// is the mean over serving trees, accumulated in tree-index order.
pub fn predict_weights(forest: &Forest, view: &HonestView, x: &[f64]) -> Result<WeightSet> {
    validate_query(forest, x)?;
    let arms = forest.n_arms();
    let mut weights = vec![vec![0.0f64; view.len()]; arms];
    let mut serving = vec![0u32; arms];
    let mut order: Vec<&super::Tree> = forest.trees.iter().collect();
    order.sort_by_key(|t| t.index);
    for tree in order {
        let leaf = tree.route(|f| x[f]);
        let leaf = match &tree.nodes[leaf].kind {
            NodeKind::Leaf(l) => l,
            NodeKind::Split { .. } => unreachable!("route returns a leaf"),
        };
        for d in 0..arms {
            if !tree.serves(d as u16) {
                continue;
            }
            serving[d] += 1;
            let rows = &leaf.rows[d];
            let w = 1.0 / rows.len() as f64;
            for &r in rows {
                weights[d][view.pos[r as usize] as usize] += w;
            }
        }
    }
    for d in 0..arms {
        debug_assert!(serving[d] > 0);
        let inv = 1.0 / serving[d] as f64;
        for w in &mut weights[d] {
            *w *= inv;
        }
    }
    Ok(WeightSet { arms: weights })
}

/// Point estimate of the effect of treatment `m` against `l` at `x`.
pub fn predict_iate(
    forest: &Forest,
    view: &HonestView,
    x: &[f64],
    m: usize,
    l: usize,
) -> Result<f64> {
    if m == l {
        return Err(Error::Config(format!(
            "treatment contrast needs two distinct arms, got {} and {}",
            m, l
        )));
    }
    let arms = forest.n_arms();
    if m >= arms || l >= arms {
        return Err(Error::Config(format!(
            "treatment out of range: {} vs {} with {} arms",
            m, l, arms
        )));
    }
    let weights = predict_weights(forest, view, x)?;
    let mean = |d: usize| -> f64 {
        weights.arms[d]
            .iter()
            .zip(&view.y)
            .map(|(w, y)| w * y)
            .sum::<f64>()
    };
    Ok(mean(m) - mean(l))
}
