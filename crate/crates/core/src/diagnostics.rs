//! Common-support trimming and covariate-balance reporting.
//!
//! Propensity scores are read off the trees of the already estimated
//! outcome forest: each tree contributes its leaf's honest treatment
//! shares, the forest averages them. Rows whose score for any arm leaves
//! the support interval are trimmed. Balance is reported twice per
//! feature: the raw standardized difference between treatment arms, and
//! the forest-weighted difference obtained by running the feature through
//! the estimated weights as a pseudo-outcome.

use crate::forest::{validate_query, Forest, NodeKind, Tree};
use crate::inference::{Aggregates, EffectsEngine};
use crate::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Support interval for propensity scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportRule {
    pub q_low: f64,
    pub q_high: f64,
}

impl Default for SupportRule {
    fn default() -> SupportRule {
        SupportRule {
            q_low: 0.05,
            q_high: 0.95,
        }
    }
}

impl SupportRule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.q_low)
            || !(0.0..=1.0).contains(&self.q_high)
            || self.q_low >= self.q_high
        {
            return Err(Error::Config(format!(
                "support bounds need 0 <= low < high <= 1, got [{}, {}]",
                self.q_low, self.q_high
            )));
        }
        Ok(())
    }

    fn violates(&self, share: f64) -> bool {
        share < self.q_low || share > self.q_high
    }
}

/// Forest-implied propensity scores at `x`: per tree the honest treatment
/// shares of x's leaf, averaged over trees. Components sum to one.
pub fn forest_propensity(forest: &Forest, x: &[f64]) -> Result<Vec<f64>> {
    validate_query(forest, x)?;
    let arms = forest.n_arms();
    let mut order: Vec<&Tree> = forest.trees.iter().collect();
    order.sort_by_key(|t| t.index);
    let mut shares = vec![0.0f64; arms];
    for tree in &order {
        let leaf = tree.route(|f| x[f]);
        let leaf = match &tree.nodes[leaf].kind {
            NodeKind::Leaf(l) => l,
            NodeKind::Split { .. } => unreachable!("route returns a leaf"),
        };
        let total: u32 = leaf.prop_count.iter().sum();
        debug_assert!(total > 0, "honest filling leaves no empty propensity counts");
        for d in 0..arms {
            shares[d] += leaf.prop_count[d] as f64 / total as f64;
        }
    }
    let inv = 1.0 / order.len() as f64;
    for s in &mut shares {
        *s *= inv;
    }
    Ok(shares)
}

/// Propensity scores for a set of sample rows, parallel across rows.
pub fn propensities_for_rows(
    forest: &Forest,
    sample: &crate::data::Sample,
    rows: &[u32],
) -> Result<Vec<Vec<f64>>> {
    rows.par_iter()
        .map(|&r| forest_propensity(forest, &sample.row(r as usize)))
        .collect()
}

/// Outcome of common-support trimming.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrimReport {
    pub kept: Vec<u32>,
    pub dropped: Vec<u32>,
    pub drop_share: f64,
    /// Per arm, how many dropped rows violated that arm's bounds. A row
    /// violating several arms counts in each of them.
    pub arm_violations: Vec<u32>,
}

impl TrimReport {
    pub fn summary(&self) -> String {
        let total = self.kept.len() + self.dropped.len();
        format!(
            "dropped {} of {} rows ({:.1}%) outside common support",
            self.dropped.len(),
            total,
            100.0 * self.drop_share
        )
    }
}

/// Drops every row whose propensity for any arm falls outside the rule's
/// interval.
pub fn trim_support(
    rows: &[u32],
    propensities: &[Vec<f64>],
    rule: &SupportRule,
) -> Result<TrimReport> {
    rule.validate()?;
    if rows.len() != propensities.len() {
        return Err(Error::Config(
            "row ids and propensity rows differ in length".into(),
        ));
    }
    if rows.is_empty() {
        return Err(Error::Sample("support check on an empty row set".into()));
    }
    let arms = propensities[0].len();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut arm_violations = vec![0u32; arms];
    for (&row, p) in rows.iter().zip(propensities) {
        let mut violated = false;
        for (d, &share) in p.iter().enumerate() {
            if rule.violates(share) {
                arm_violations[d] += 1;
                violated = true;
            }
        }
        if violated {
            dropped.push(row);
        } else {
            kept.push(row);
        }
    }
    if kept.is_empty() {
        return Err(Error::Sample(
            "support empty: every row violates the propensity bounds".into(),
        ));
    }
    let drop_share = dropped.len() as f64 / rows.len() as f64;
    Ok(TrimReport {
        kept,
        dropped,
        drop_share,
        arm_violations,
    })
}

fn mean_and_sample_var(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Standardized difference in percent:
/// 100 |mean1 - mean0| / sqrt((var1 + var0) / 2), sample variances.
/// Both arms degenerate with unequal means yields +infinity.
pub fn standardized_diff(arm1: &[f64], arm0: &[f64]) -> Result<f64> {
    if arm1.len() < 2 || arm0.len() < 2 {
        return Err(Error::Config(
            "standardized difference needs at least two rows per arm".into(),
        ));
    }
    let (m1, v1) = mean_and_sample_var(arm1);
    let (m0, v0) = mean_and_sample_var(arm0);
    let diff = (m1 - m0).abs();
    let denom = ((v1 + v0) / 2.0).sqrt();
    if denom == 0.0 {
        return Ok(if diff == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(100.0 * diff / denom)
}

/// Weighted arm difference of a feature used as pseudo-outcome, with a
/// signed weight vector in paper normalization over the same rows.
pub fn post_balance(signed_weights: &[f64], feature: &[f64]) -> Result<f64> {
    if signed_weights.len() != feature.len() {
        return Err(Error::Config(
            "weights and feature column differ in length".into(),
        ));
    }
    let n = signed_weights.len() as f64;
    Ok(signed_weights
        .iter()
        .zip(feature)
        .map(|(w, x)| w * x)
        .sum::<f64>()
        / n)
}

/// One feature's balance line: raw arm means and standardized difference
/// over the honest rows, plus the forest-weighted difference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    pub feature: String,
    pub pre_mean_m: f64,
    pub pre_mean_l: f64,
    pub pre_stand_diff: f64,
    pub post_diff: f64,
}

/// Balance report for the (m, l) contrast over every feature.
pub fn balance_report(
    engine: &EffectsEngine,
    agg: &Aggregates,
    m: u16,
    l: u16,
) -> Result<Vec<BalanceRow>> {
    let signed = agg.global.signed_mean(m, l)?;
    let mut out = Vec::with_capacity(engine.forest.features.len());
    for (f, meta) in engine.forest.features.iter().enumerate() {
        let column = &engine.sample.x[f];
        let honest: Vec<f64> = engine
            .view
            .rows
            .iter()
            .map(|&r| column[r as usize])
            .collect();
        let arm_m: Vec<f64> = honest
            .iter()
            .zip(&engine.view.d)
            .filter(|(_, &d)| d == m)
            .map(|(v, _)| *v)
            .collect();
        let arm_l: Vec<f64> = honest
            .iter()
            .zip(&engine.view.d)
            .filter(|(_, &d)| d == l)
            .map(|(v, _)| *v)
            .collect();
        let pre_mean_m = arm_m.iter().sum::<f64>() / arm_m.len() as f64;
        let pre_mean_l = arm_l.iter().sum::<f64>() / arm_l.len() as f64;
        let pre_stand_diff = standardized_diff(&arm_m, &arm_l)?;
        let post_diff = post_balance(&signed, &honest)?;
        out.push(BalanceRow {
            feature: meta.name.clone(),
            pre_mean_m,
            pre_mean_l,
            pre_stand_diff,
            post_diff,
        });
    }
    Ok(out)
}
