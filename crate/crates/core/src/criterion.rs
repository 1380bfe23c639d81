//! Leaf statistics and splitting objectives.
//!
//! Every splitting rule reduces to sufficient statistics per leaf: per-arm
//! counts, outcome sums and sums of squares, and (for the cross-arm
//! criterion) per-pair accumulators of matched outcomes. Stats stream
//! incrementally through candidate thresholds, so all objectives are exact
//! functions of the accumulators, never of raw row lists.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Splitting criterion family. `Basic` grows one single-arm forest per
/// treatment; the pooled families grow one forest over all arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Basic,
    OneF,
    OneFMce,
    OneFVarT,
}

impl Variant {
    pub fn cli_name(self) -> &'static str {
        match self {
            Variant::Basic => "basic",
            Variant::OneF => "one_f",
            Variant::OneFMce => "one_f_mce",
            Variant::OneFVarT => "one_f_vart",
        }
    }

    pub fn from_cli_name(name: &str) -> Result<Variant> {
        match name {
            "basic" => Ok(Variant::Basic),
            "one_f" => Ok(Variant::OneF),
            "one_f_mce" => Ok(Variant::OneFMce),
            "one_f_vart" => Ok(Variant::OneFVarT),
            other => Err(Error::Config(format!("unknown variant '{}'", other))),
        }
    }
}

/// Criterion settings before data-dependent defaults are resolved.
/// `lambda` defaults to Var(Y) on the tree-building sample;
/// `lambda_multiplier` defaults to 1 (100 for the VarT variant).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionConfig {
    pub variant: Variant,
    pub penalty_on: bool,
    pub lambda: Option<f64>,
    pub lambda_multiplier: Option<f64>,
}

impl Default for CriterionConfig {
    fn default() -> Self {
        CriterionConfig {
            variant: Variant::OneFMce,
            penalty_on: false,
            lambda: None,
            lambda_multiplier: None,
        }
    }
}

impl CriterionConfig {
    /// Fixes the data-dependent defaults. `var_y` is the outcome variance
    /// of the tree-building sample.
    pub fn resolve(&self, var_y: f64) -> Result<ResolvedCriterion> {
        let lambda = self.lambda.unwrap_or(var_y);
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", lambda)));
        }
        let multiplier = self.lambda_multiplier.unwrap_or(match self.variant {
            Variant::OneFVarT => 100.0,
            _ => 1.0,
        });
        if !multiplier.is_finite() || multiplier < 0.0 {
            return Err(Error::Config("lambda multiplier must be >= 0".into()));
        }
        if self.variant == Variant::Basic && self.penalty_on {
            return Err(Error::Config(
                "the basic variant grows single-arm trees; the penalty needs all arms".into(),
            ));
        }
        Ok(ResolvedCriterion {
            variant: self.variant,
            penalty_on: self.penalty_on,
            lambda_eff: lambda * multiplier,
        })
    }
}

/// Criterion with all defaults resolved to numbers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResolvedCriterion {
    pub variant: Variant,
    pub penalty_on: bool,
    pub lambda_eff: f64,
}

impl ResolvedCriterion {
    /// Whether leaf stats must carry the matched-outcome pair accumulators.
    pub fn tracks_pairs(&self) -> bool {
        self.variant == Variant::OneFMce
    }
}

fn pair_index(m: usize, l: usize, arms: usize) -> usize {
    debug_assert!(m < l && l < arms);
    m * (2 * arms - m - 1) / 2 + (l - m - 1)
}

/// Per-pair accumulators over rows with d in {m, l}:
/// sums of the two matched outcomes and of their product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PairAcc {
    sa: f64,
    sb: f64,
    sab: f64,
}

/// Sufficient statistics of one leaf (or one side of a candidate split).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeafStats {
    arms: usize,
    pub n: u32,
    count: Vec<u32>,
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    pairs: Option<Vec<PairAcc>>,
}

impl LeafStats {
    pub fn new(arms: usize, track_pairs: bool) -> LeafStats {
        LeafStats {
            arms,
            n: 0,
            count: vec![0; arms],
            sum: vec![0.0; arms],
            sumsq: vec![0.0; arms],
            pairs: track_pairs.then(|| {
                vec![
                    PairAcc {
                        sa: 0.0,
                        sb: 0.0,
                        sab: 0.0
                    };
                    arms * (arms - 1) / 2
                ]
            }),
        }
    }

    pub fn arms(&self) -> usize {
        self.arms
    }

    pub fn count(&self, d: usize) -> u32 {
        self.count[d]
    }

    /// Arm mean; the leaf-level μ̂_d.
    pub fn mean(&self, d: usize) -> f64 {
        self.sum[d] / self.count[d] as f64
    }

    /// Adds one row. `ytilde` holds the row's matched outcome per arm and
    /// is required when pair accumulators are tracked.
    pub fn add(&mut self, d: usize, y: f64, ytilde: Option<&[f64]>) {
        self.n += 1;
        self.count[d] += 1;
        self.sum[d] += y;
        self.sumsq[d] += y * y;
        if let Some(pairs) = &mut self.pairs {
            let yt = ytilde.expect("pair tracking needs matched outcomes");
            for m in 0..self.arms {
                for l in (m + 1)..self.arms {
                    if d == m || d == l {
                        let acc = &mut pairs[pair_index(m, l, self.arms)];
                        acc.sa += yt[m];
                        acc.sb += yt[l];
                        acc.sab += yt[m] * yt[l];
                    }
                }
            }
        }
    }

    pub fn merge(&mut self, other: &LeafStats) {
        debug_assert_eq!(self.arms, other.arms);
        self.n += other.n;
        for d in 0..self.arms {
            self.count[d] += other.count[d];
            self.sum[d] += other.sum[d];
            self.sumsq[d] += other.sumsq[d];
        }
        match (&mut self.pairs, &other.pairs) {
            (Some(a), Some(b)) => {
                for (pa, pb) in a.iter_mut().zip(b) {
                    pa.sa += pb.sa;
                    pa.sb += pb.sb;
                    pa.sab += pb.sab;
                }
            }
            (None, None) => {}
            _ => panic!("pair tracking mismatch in merge"),
        }
    }

    /// In-place subtraction of a subset accumulated from the same rows.
    /// The split scan derives the right daughter as node stats minus the
    /// left scan without allocating.
    pub fn sub_assign(&mut self, other: &LeafStats) {
        debug_assert_eq!(self.arms, other.arms);
        self.n -= other.n;
        for d in 0..self.arms {
            self.count[d] -= other.count[d];
            self.sum[d] -= other.sum[d];
            self.sumsq[d] -= other.sumsq[d];
        }
        if let (Some(a), Some(b)) = (&mut self.pairs, &other.pairs) {
            for (pa, pb) in a.iter_mut().zip(b) {
                pa.sa -= pb.sa;
                pa.sb -= pb.sb;
                pa.sab -= pb.sab;
            }
        }
    }

    /// Streaming complement: stats of (self minus other).
    pub fn minus(&self, other: &LeafStats) -> LeafStats {
        let mut out = self.clone();
        out.sub_assign(other);
        out
    }

    /// Clears all accumulators, keeping the arm layout.
    pub fn reset(&mut self) {
        self.n = 0;
        self.count.fill(0);
        self.sum.fill(0.0);
        self.sumsq.fill(0.0);
        if let Some(pairs) = &mut self.pairs {
            for p in pairs {
                p.sa = 0.0;
                p.sb = 0.0;
                p.sab = 0.0;
            }
        }
    }

    /// Outcome mean pooled over all arms.
    pub fn pooled_mean(&self) -> f64 {
        self.sum.iter().sum::<f64>() / self.n as f64
    }
}

/// Within-leaf, within-arm mean squared deviation from the arm mean (the
/// biased within-arm variance). Caller guarantees the arm is populated.
pub fn leaf_mse(stats: &LeafStats, d: usize) -> f64 {
    let n = stats.count[d] as f64;
    debug_assert!(n >= 1.0);
    let mean = stats.sum[d] / n;
    (stats.sumsq[d] / n - mean * mean).max(0.0)
}

/// Average over rows with d in {m, l} of the product of arm-mean residuals
/// against matched outcomes:
/// (1/(n_m+n_l)) Σ (μ̂_m − ỹ_(i,m)) (μ̂_l − ỹ_(i,l)).
pub fn leaf_mce(stats: &LeafStats, m: usize, l: usize) -> f64 {
    let pairs = stats.pairs.as_ref().expect("MCE needs pair accumulators");
    let acc = &pairs[pair_index(m, l, stats.arms)];
    let n_ml = (stats.count[m] + stats.count[l]) as f64;
    debug_assert!(stats.count[m] >= 1 && stats.count[l] >= 1);
    let mu_m = stats.mean(m);
    let mu_l = stats.mean(l);
    (n_ml * mu_m * mu_l - mu_m * acc.sb - mu_l * acc.sa + acc.sab) / n_ml
}

/// Per-leaf value of the variant's objective; lower is better for every
/// variant (heterogeneity enters negated).
pub fn leaf_effect_objective(stats: &LeafStats, cfg: &ResolvedCriterion) -> f64 {
    let arms = stats.arms;
    match cfg.variant {
        // Basic trees carry a single pseudo-arm, so the sum collapses to
        // that arm's MSE.
        Variant::Basic | Variant::OneF => (0..arms).map(|d| leaf_mse(stats, d)).sum(),
        Variant::OneFMce => {
            let mse: f64 = (0..arms).map(|d| leaf_mse(stats, d)).sum();
            let mut mce = 0.0;
            for m in 0..arms {
                for l in (m + 1)..arms {
                    mce += leaf_mce(stats, m, l);
                }
            }
            (arms as f64 - 1.0) * mse - 2.0 * mce
        }
        Variant::OneFVarT => {
            let mut het = 0.0;
            for m in 0..arms {
                for l in (m + 1)..arms {
                    let diff = stats.mean(m) - stats.mean(l);
                    het += diff * diff;
                }
            }
            -het
        }
    }
}

/// λ { 1 − (1/M) Σ_d [P(D=d | left) − P(D=d | right)]² }. Zero when the
/// split separates treatments perfectly (M=2), λ when the daughters have
/// identical shares.
pub fn penalty(left: &LeafStats, right: &LeafStats, lambda: f64) -> f64 {
    debug_assert!(left.n > 0 && right.n > 0);
    let arms = left.arms;
    let nl = left.n as f64;
    let nr = right.n as f64;
    let mut sum_sq = 0.0;
    for d in 0..arms {
        let diff = left.count[d] as f64 / nl - right.count[d] as f64 / nr;
        sum_sq += diff * diff;
    }
    lambda * (1.0 - sum_sq / arms as f64)
}

/// Candidate-split value: count-weighted daughter objectives plus the
/// propensity-heterogeneity penalty. Lower is better.
pub fn split_objective(left: &LeafStats, right: &LeafStats, cfg: &ResolvedCriterion) -> f64 {
    let mut value = left.n as f64 * leaf_effect_objective(left, cfg)
        + right.n as f64 * leaf_effect_objective(right, cfg);
    if cfg.penalty_on {
        value += penalty(left, right, cfg.lambda_eff);
    }
    value
}
