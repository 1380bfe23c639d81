//! Weight-based effect estimates and their standard errors.
//!
//! Every estimand is a weighted sum of honest outcomes. Points use the
//! paper normalization (per-arm weights summing to the honest sample size
//! N2, signed contrasts summing to zero); variances come from k-NN
//! conditional moments of the outcome given the weight value. Aggregation
//! to group and population effects averages the individual weight vectors,
//! so the algebraic identities (group effect = mean of member effects,
//! share-weighted groups = population effect) hold by construction.

use crate::data::{GroupColumn, Sample};
use crate::forest::{predict_weights, Forest, HonestView, WeightSet};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

/// What an estimate refers to. Contrasts read "m versus l".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Estimand {
    Iate { m: u16, l: u16 },
    Gate { m: u16, l: u16, column: String, label: String },
    Ate { m: u16, l: u16 },
    PoLevel { d: u16 },
}

impl Estimand {
    /// True for contrasts whose weight vectors carry both signs.
    fn signed(&self) -> bool {
        !matches!(self, Estimand::PoLevel { .. })
    }
}

impl std::fmt::Display for Estimand {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Estimand::Iate { m, l } => write!(f, "IATE({},{})", m, l),
            Estimand::Gate { m, l, column, label } => {
                write!(f, "GATE({},{};{}={})", m, l, column, label)
            }
            Estimand::Ate { m, l } => write!(f, "ATE({},{})", m, l),
            Estimand::PoLevel { d } => write!(f, "PO({})", d),
        }
    }
}

/// One estimate: point, normal-approximation inference, and the weight
/// vector that produced it (paper normalization, over honest rows).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectEstimate {
    pub estimand: Estimand,
    pub point: f64,
    pub std_error: f64,
    pub p_value: f64,
    /// Set when some side of the contrast rests on at most one honest row.
    pub unreliable: bool,
    pub weights: Vec<f64>,
}

/// Default neighbor count for conditional moments.
pub fn default_knn(n2: usize) -> usize {
    ((2.0 * (n2 as f64).sqrt()).ceil() as usize).clamp(2, n2)
}

/// k-NN conditional moments of `y` given the weight value. For each row,
/// the neighbors are the k rows (including itself) with the smallest
/// |w_j - w_i|, ties broken by the lower row id. Returns the neighbor mean
/// and the neighbor variance (divided by k).
pub fn knn_conditional_moments(
    w: &[f64],
    y: &[f64],
    k: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = w.len();
    if y.len() != n {
        return Err(Error::Config("weights and outcomes differ in length".into()));
    }
    if k < 2 {
        return Err(Error::Config("conditional moments need k >= 2".into()));
    }
    if k > n {
        return Err(Error::Config(format!(
            "k = {} exceeds the {} honest rows",
            k, n
        )));
    }

    // Sort positions by (weight, row id); equal weights stay id-ascending.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| w[a].partial_cmp(&w[b]).unwrap().then(a.cmp(&b)));
    let sw: Vec<f64> = order.iter().map(|&i| w[i]).collect();

    let mut mu = vec![0.0f64; n];
    let mut sigma2 = vec![0.0f64; n];
    for (pos, &row) in order.iter().enumerate() {
        let wi = sw[pos];
        // Pass 1: k-th smallest distance via two-pointer expansion.
        let mut l = pos;
        let mut r = pos;
        let mut dk = 0.0f64;
        for _ in 1..k {
            let dl = if l > 0 { wi - sw[l - 1] } else { f64::INFINITY };
            let dr = if r + 1 < n { sw[r + 1] - wi } else { f64::INFINITY };
            if dl <= dr {
                l -= 1;
                dk = dl;
            } else {
                r += 1;
                dk = dr;
            }
        }
        // Pass 2: take every row strictly closer than dk, then fill the
        // remaining slots from the distance-dk ties in row-id order. The
        // candidate range is the final window from pass 1 extended through
        // any equal-distance runs at both edges.
        let mut lo = l;
        while lo > 0 && wi - sw[lo - 1] <= dk {
            lo -= 1;
        }
        let mut hi = r;
        while hi + 1 < n && sw[hi + 1] - wi <= dk {
            hi += 1;
        }
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        let mut taken = 0usize;
        let mut ties: Vec<usize> = Vec::new();
        for p in lo..=hi {
            let dist = (sw[p] - wi).abs();
            if dist < dk {
                let v = y[order[p]];
                sum += v;
                sumsq += v * v;
                taken += 1;
            } else if dist == dk {
                ties.push(order[p]);
            }
        }
        ties.sort_unstable();
        for &row_id in ties.iter().take(k - taken) {
            let v = y[row_id];
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / k as f64;
        mu[row] = mean;
        sigma2[row] = (sumsq / k as f64 - mean * mean).max(0.0);
    }
    Ok((mu, sigma2))
}

/// Variance of a weighted-sum estimator, exactly as displayed:
/// (1/N2^2) sum w_i^2 sigma2_i + (1/(N2(N2-1))) sum (w_i mu_i - mean)^2.
pub fn weights_variance(w: &[f64], y: &[f64], k: usize) -> Result<f64> {
    let (mu, sigma2) = knn_conditional_moments(w, y, k)?;
    Ok(variance_from_moments(w, &mu, &sigma2))
}

fn variance_from_moments(w: &[f64], mu: &[f64], sigma2: &[f64]) -> f64 {
    let n = w.len() as f64;
    let term1: f64 = w
        .iter()
        .zip(sigma2)
        .map(|(wi, s2)| wi * wi * s2)
        .sum::<f64>()
        / (n * n);
    let wm: Vec<f64> = w.iter().zip(mu).map(|(wi, mi)| wi * mi).collect();
    let mean = wm.iter().sum::<f64>() / n;
    let term2: f64 = wm.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n * (n - 1.0));
    term1 + term2
}

/// Point, standard error, and two-sided normal p-value for a weight vector
/// in paper normalization.
pub fn estimate_effect(
    estimand: Estimand,
    weights: Vec<f64>,
    y: &[f64],
    k: usize,
) -> Result<EffectEstimate> {
    let n2 = y.len();
    if weights.len() != n2 {
        return Err(Error::Config("weight vector does not match honest rows".into()));
    }
    let point = weights.iter().zip(y).map(|(w, yi)| w * yi).sum::<f64>() / n2 as f64;
    let variance = weights_variance(&weights, y, k)?;
    let std_error = variance.sqrt();
    let p_value = two_sided_p(point, std_error);
    let unreliable = if estimand.signed() {
        let pos = weights.iter().filter(|&&w| w > 0.0).count();
        let neg = weights.iter().filter(|&&w| w < 0.0).count();
        pos <= 1 || neg <= 1
    } else {
        weights.iter().filter(|&&w| w != 0.0).count() <= 1
    };
    Ok(EffectEstimate {
        estimand,
        point,
        std_error,
        p_value,
        unreliable,
        weights,
    })
}

fn two_sided_p(point: f64, std_error: f64) -> f64 {
    if std_error > 0.0 {
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        2.0 * normal.cdf(-(point / std_error).abs())
    } else if point == 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Signed contrast weights in paper normalization: N2 * (w_m - w_l).
pub fn signed_contrast(ws: &WeightSet, m: u16, l: u16) -> Result<Vec<f64>> {
    if m == l {
        return Err(Error::Config("contrast needs two distinct arms".into()));
    }
    let wm = ws.arm(m as usize);
    let wl = ws.arm(l as usize);
    let n2 = wm.len() as f64;
    Ok(wm.iter().zip(wl).map(|(a, b)| n2 * (a - b)).collect())
}

/// Point estimate and inference for a single query point's weights.
pub fn estimate_iate(ws: &WeightSet, y: &[f64], m: u16, l: u16, k: usize) -> Result<EffectEstimate> {
    let weights = signed_contrast(ws, m, l)?;
    estimate_effect(Estimand::Iate { m, l }, weights, y, k)
}

/// Wald test outcome for joint equality of group effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldTest {
    pub statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    /// Set when the contrast covariance was singular and a pseudo-inverse
    /// with rank-adjusted degrees of freedom was used.
    pub rank_deficient: bool,
}

/// Tests H0: all group effects equal, via contrasts against the last group.
/// The covariance matrix extends the variance display bilinearly:
/// Cov(a,b) = (1/N2^2) sum w_a w_b (sigma2_a + sigma2_b)/2
///          + (1/(N2(N2-1))) sum (w_a mu_a - mean_a)(w_b mu_b - mean_b),
/// with conditional moments computed per contrast on its own weights.
pub fn wald_gate_equality(gate_weights: &[Vec<f64>], y: &[f64], k: usize) -> Result<WaldTest> {
    let g = gate_weights.len();
    if g < 2 {
        return Err(Error::Config("Wald test needs at least two groups".into()));
    }
    let n2 = y.len();
    let nf = n2 as f64;
    let last = &gate_weights[g - 1];
    let contrasts: Vec<Vec<f64>> = gate_weights[..g - 1]
        .iter()
        .map(|w| w.iter().zip(last).map(|(a, b)| a - b).collect())
        .collect();
    let dof = g - 1;
    // Group weight means that agree to rounding leave contrasts of pure
    // accumulation noise; anything below n2 * eps relative to the weight
    // scale counts as an exact zero.
    let scale = gate_weights
        .iter()
        .flat_map(|w| w.iter())
        .fold(0.0f64, |m, &v| m.max(v.abs()));
    let tol = 2.0 * nf * f64::EPSILON * scale;
    if contrasts
        .iter()
        .all(|c| c.iter().all(|&v| v.abs() <= tol))
    {
        return Ok(WaldTest {
            statistic: 0.0,
            dof,
            p_value: 1.0,
            rank_deficient: false,
        });
    }

    let mut deltas = Vec::with_capacity(dof);
    let mut mus = Vec::with_capacity(dof);
    let mut sigmas = Vec::with_capacity(dof);
    let mut dev: Vec<Vec<f64>> = Vec::with_capacity(dof);
    for c in &contrasts {
        deltas.push(c.iter().zip(y).map(|(w, yi)| w * yi).sum::<f64>() / nf);
        let (mu, sigma2) = knn_conditional_moments(c, y, k)?;
        let wm: Vec<f64> = c.iter().zip(&mu).map(|(w, m)| w * m).collect();
        let mean = wm.iter().sum::<f64>() / nf;
        dev.push(wm.iter().map(|v| v - mean).collect());
        mus.push(mu);
        sigmas.push(sigma2);
    }

    let mut v = DMatrix::<f64>::zeros(dof, dof);
    for a in 0..dof {
        for b in a..dof {
            let mut term1 = 0.0;
            for i in 0..n2 {
                term1 += contrasts[a][i] * contrasts[b][i] * 0.5 * (sigmas[a][i] + sigmas[b][i]);
            }
            term1 /= nf * nf;
            let term2: f64 =
                dev[a].iter().zip(&dev[b]).map(|(x, z)| x * z).sum::<f64>() / (nf * (nf - 1.0));
            let cov = term1 + term2;
            v[(a, b)] = cov;
            v[(b, a)] = cov;
        }
    }

    let delta = DVector::from_vec(deltas);
    let (statistic, eff_dof, rank_deficient) = match v.clone().cholesky() {
        Some(chol) => {
            let solved = chol.solve(&delta);
            ((delta.transpose() * solved)[(0, 0)], dof, false)
        }
        None => {
            let svd = v.svd(true, true);
            let max_sv = svd.singular_values.iter().cloned().fold(0.0f64, f64::max);
            let tol = max_sv * dof as f64 * f64::EPSILON;
            let rank = svd.singular_values.iter().filter(|&&s| s > tol).count();
            let pinv = svd
                .pseudo_inverse(tol)
                .map_err(|e| Error::Numerical(format!("covariance pseudo-inverse: {}", e)))?;
            ((delta.transpose() * pinv * delta)[(0, 0)], rank, true)
        }
    };
    let statistic = statistic.max(0.0);
    let p_value = if eff_dof == 0 {
        1.0
    } else {
        let chi = ChiSquared::new(eff_dof as f64)
            .map_err(|e| Error::Numerical(format!("chi-square dof: {}", e)))?;
        1.0 - chi.cdf(statistic)
    };
    Ok(WaldTest {
        statistic,
        dof: eff_dof,
        p_value,
        rank_deficient,
    })
}

/// Per-arm weight-vector sums over a set of prediction points, enough to
/// reconstruct every pairwise contrast and potential-outcome level.
#[derive(Debug, Clone)]
pub struct ArmWeightSums {
    pub count: usize,
    pub sums: Vec<Vec<f64>>,
}

impl ArmWeightSums {
    fn new(arms: usize, n2: usize) -> ArmWeightSums {
        ArmWeightSums {
            count: 0,
            sums: vec![vec![0.0; n2]; arms],
        }
    }

    fn absorb(&mut self, ws: &WeightSet) {
        self.count += 1;
        for (acc, arm) in self.sums.iter_mut().zip(&ws.arms) {
            for (a, w) in acc.iter_mut().zip(arm) {
                *a += w;
            }
        }
    }

    fn merge(&mut self, other: &ArmWeightSums) {
        self.count += other.count;
        for (acc, arm) in self.sums.iter_mut().zip(&other.sums) {
            for (a, w) in acc.iter_mut().zip(arm) {
                *a += w;
            }
        }
    }

    /// Mean signed contrast vector in paper normalization.
    pub fn signed_mean(&self, m: u16, l: u16) -> Result<Vec<f64>> {
        if m == l {
            return Err(Error::Config("contrast needs two distinct arms".into()));
        }
        if self.count == 0 {
            return Err(Error::Config("empty aggregation set".into()));
        }
        let n2 = self.sums[0].len() as f64;
        let c = self.count as f64;
        Ok(self.sums[m as usize]
            .iter()
            .zip(&self.sums[l as usize])
            .map(|(a, b)| n2 * (a - b) / c)
            .collect())
    }

    /// Mean unsigned arm vector in paper normalization.
    pub fn arm_mean(&self, d: u16) -> Result<Vec<f64>> {
        if self.count == 0 {
            return Err(Error::Config("empty aggregation set".into()));
        }
        let n2 = self.sums[0].len() as f64;
        let c = self.count as f64;
        Ok(self.sums[d as usize].iter().map(|a| n2 * a / c).collect())
    }
}

/// Group effects for one grouping column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateTable {
    pub column: String,
    pub estimates: Vec<EffectEstimate>,
    pub wald: WaldTest,
}

/// Orchestrates weight extraction and aggregation for one built forest.
/// The conditioning set `delta` restricts which honest rows' feature
/// vectors enter group and population averages.
pub struct EffectsEngine<'a> {
    pub forest: &'a Forest,
    pub sample: &'a Sample,
    pub view: HonestView,
    pub k: usize,
    pub delta: Vec<u16>,
}

impl<'a> EffectsEngine<'a> {
    pub fn new(
        forest: &'a Forest,
        sample: &'a Sample,
        k: Option<usize>,
        delta: Option<Vec<u16>>,
    ) -> Result<EffectsEngine<'a>> {
        let view = HonestView::new(forest, sample);
        let n2 = view.len();
        let k = k.unwrap_or_else(|| default_knn(n2));
        if k < 2 || k > n2 {
            return Err(Error::Config(format!(
                "neighbor count {} outside [2, {}]",
                k, n2
            )));
        }
        let mut delta = delta.unwrap_or_else(|| (0..forest.n_arms() as u16).collect());
        delta.sort_unstable();
        delta.dedup();
        if delta.is_empty() || delta.iter().any(|&d| d as usize >= forest.n_arms()) {
            return Err(Error::Config("conditioning treatment set out of range".into()));
        }
        Ok(EffectsEngine {
            forest,
            sample,
            view,
            k,
            delta,
        })
    }

    pub fn n2(&self) -> usize {
        self.view.len()
    }

    /// All (m, l) contrasts with m > l.
    pub fn pairs(&self) -> Vec<(u16, u16)> {
        let arms = self.forest.n_arms() as u16;
        let mut out = Vec::new();
        for m in 1..arms {
            for l in 0..m {
                out.push((m, l));
            }
        }
        out
    }

    pub fn weights_at(&self, x: &[f64]) -> Result<WeightSet> {
        predict_weights(self.forest, &self.view, x)
    }

    pub fn iate_at(&self, x: &[f64], m: u16, l: u16) -> Result<EffectEstimate> {
        let ws = self.weights_at(x)?;
        estimate_iate(&ws, &self.view.y, m, l, self.k)
    }

    /// Weight sums over the honest rows in the conditioning set, globally
    /// and per group of each grouping column.
    pub fn aggregate(&self, columns: &[GroupColumn]) -> Result<Aggregates> {
        let arms = self.forest.n_arms();
        let n2 = self.n2();
        let members: Vec<usize> = (0..n2)
            .filter(|&j| self.delta.contains(&self.view.d[j]))
            .collect();
        if members.is_empty() {
            return Err(Error::Config(
                "no honest rows carry a treatment in the conditioning set".into(),
            ));
        }
        let partials: Vec<(usize, WeightSet)> = members
            .par_iter()
            .map(|&j| {
                let row = self.view.rows[j] as usize;
                let x = self.sample.row(row);
                self.weights_at(&x).map(|ws| (j, ws))
            })
            .collect::<Result<Vec<_>>>()?;

        let mut global = ArmWeightSums::new(arms, n2);
        let mut per_column: Vec<Vec<ArmWeightSums>> = columns
            .iter()
            .map(|c| (0..c.labels.len()).map(|_| ArmWeightSums::new(arms, n2)).collect())
            .collect();
        for (j, ws) in &partials {
            global.absorb(ws);
            let row = self.view.rows[*j] as usize;
            for (ci, column) in columns.iter().enumerate() {
                let gid = column.ids[row] as usize;
                per_column[ci][gid].absorb(ws);
            }
        }
        Ok(Aggregates {
            global,
            columns: columns
                .iter()
                .zip(per_column)
                .map(|(c, sums)| (c.clone(), sums))
                .collect(),
        })
    }

    pub fn ate(&self, agg: &Aggregates, m: u16, l: u16) -> Result<EffectEstimate> {
        let weights = agg.global.signed_mean(m, l)?;
        estimate_effect(Estimand::Ate { m, l }, weights, &self.view.y, self.k)
    }

    pub fn po_level(&self, agg: &Aggregates, d: u16) -> Result<EffectEstimate> {
        let weights = agg.global.arm_mean(d)?;
        estimate_effect(Estimand::PoLevel { d }, weights, &self.view.y, self.k)
    }

    /// Group effects plus the joint equality test for one column. A
    /// single-group column is trivially equal (statistic 0, dof 0, p 1).
    pub fn gates(&self, agg: &Aggregates, column_index: usize, m: u16, l: u16) -> Result<GateTable> {
        let (column, sums) = &agg.columns[column_index];
        let mut estimates = Vec::with_capacity(sums.len());
        let mut vectors = Vec::with_capacity(sums.len());
        for (gid, group_sums) in sums.iter().enumerate() {
            if group_sums.count == 0 {
                return Err(Error::Config(format!(
                    "group {}={} has no honest rows in the conditioning set",
                    column.name, column.labels[gid]
                )));
            }
            let weights = group_sums.signed_mean(m, l)?;
            vectors.push(weights.clone());
            estimates.push(estimate_effect(
                Estimand::Gate {
                    m,
                    l,
                    column: column.name.clone(),
                    label: column.labels[gid].clone(),
                },
                weights,
                &self.view.y,
                self.k,
            )?);
        }
        let wald = if vectors.len() < 2 {
            WaldTest {
                statistic: 0.0,
                dof: 0,
                p_value: 1.0,
                rank_deficient: false,
            }
        } else {
            wald_gate_equality(&vectors, &self.view.y, self.k)?
        };
        Ok(GateTable {
            column: column.name.clone(),
            estimates,
            wald,
        })
    }
}

/// Aggregated weight sums: global (conditioning set only) and per group.
pub struct Aggregates {
    pub global: ArmWeightSums,
    pub columns: Vec<(GroupColumn, Vec<ArmWeightSums>)>,
}

impl Aggregates {
    /// Share-weighted merge check target: merging all groups of a column
    /// must reproduce the global sums.
    pub fn merged_column(&self, column_index: usize) -> ArmWeightSums {
        let (_, sums) = &self.columns[column_index];
        let arms = self.global.sums.len();
        let n2 = self.global.sums[0].len();
        let mut merged = ArmWeightSums::new(arms, n2);
        for s in sums {
            merged.merge(s);
        }
        merged
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FeatureKind, FeatureMeta};
    use crate::forest::{build_forest, ForestConfig};
    use rand::Rng;

    #[test]
    fn knn_constant_outcome() {
        let w = [0.3, -0.2, 0.9, 0.0, -0.5];
        let y = [4.0; 5];
        let (mu, s2) = knn_conditional_moments(&w, &y, 3).unwrap();
        assert!(mu.iter().all(|&m| m == 4.0));
        assert!(s2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn knn_global_window_is_grand_mean() {
        let w = [1.0, 5.0, -2.0, 0.5];
        let y = [1.0, 2.0, 3.0, 4.0];
        let (mu, _) = knn_conditional_moments(&w, &y, 4).unwrap();
        for m in mu {
            assert!((m - 2.5).abs() < 1e-15);
        }
    }

    #[test]
    fn knn_ties_resolve_by_row_id() {
        // Row 3 (w = 1) has rows 0 and 1 at distance 1 on one side and
        // rows 4, 5 at distance 1 on the other; with k = 3 it must take
        // itself plus the two lowest tied ids, rows 0 and 1.
        let w = [0.0, 0.0, 5.0, 1.0, 2.0, 2.0];
        let y = [10.0, 20.0, 999.0, 30.0, 40.0, 50.0];
        let (mu, _) = knn_conditional_moments(&w, &y, 3).unwrap();
        assert!((mu[3] - (10.0 + 20.0 + 30.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn knn_equal_weights_pick_lowest_ids_for_everyone() {
        let w = [1.0; 5];
        let y = [2.0, 4.0, 6.0, 8.0, 10.0];
        let (mu, s2) = knn_conditional_moments(&w, &y, 2).unwrap();
        // Neighbor set is {0, 1} for every row.
        for m in mu {
            assert_eq!(m, 3.0);
        }
        for v in s2 {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn knn_recovers_outcome_variance_when_independent() {
        let mut rng = crate::rng::derive(12, crate::rng::stream::POPULATION, 5);
        let n = 4000;
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let k = default_knn(n);
        let (_, s2) = knn_conditional_moments(&w, &y, k).unwrap();
        let mean_s2 = s2.iter().sum::<f64>() / n as f64;
        let var_y = {
            let m = y.iter().sum::<f64>() / n as f64;
            y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64
        };
        assert!(
            (mean_s2 - var_y).abs() < 0.1 * var_y,
            "mean sigma2 {} vs var {}",
            mean_s2,
            var_y
        );
    }

    #[test]
    fn knn_rejects_bad_k() {
        let w = [1.0, 2.0, 3.0];
        let y = [1.0, 2.0, 3.0];
        assert!(knn_conditional_moments(&w, &y, 1).is_err());
        assert!(knn_conditional_moments(&w, &y, 4).is_err());
    }

    #[test]
    fn variance_matches_hand_evaluation_on_four_rows() {
        let w = [2.0, -1.0, 1.0, -2.0];
        let y = [1.0, 2.0, 3.0, 4.0];
        let v = weights_variance(&w, &y, 2).unwrap();
        // Neighbor sets (k = 2, ties by id): row 0 with row 2, row 1 with
        // row 3, row 2 with row 0, row 3 with row 1. All sigma2 = 1.
        // term1 = (4 + 1 + 1 + 4) / 16 = 0.625.
        // w*mu: 4, -3, 2, -6; mean -0.75; squared deviations sum 62.75.
        let expect = 0.625 + 62.75 / 12.0;
        assert!((v - expect).abs() < 1e-12, "{} vs {}", v, expect);
    }

    #[test]
    fn variance_is_zero_for_all_zero_outcomes() {
        let w = [2.0, -1.0, 1.0, -2.0];
        let y = [0.0; 4];
        assert_eq!(weights_variance(&w, &y, 2).unwrap(), 0.0);
    }

    #[test]
    fn variance_with_unit_weights_matches_display_on_five_rows() {
        let w = [1.0; 5];
        let y = [2.0, 4.0, 6.0, 8.0, 10.0];
        // Every neighbor set is {0, 1}: mu_i = 3, sigma2_i = 1.
        // term1 = 5 / 25 = 0.2; w*mu constant -> term2 = 0.
        let v = weights_variance(&w, &y, 2).unwrap();
        assert!((v - 0.2).abs() < 1e-15);
    }

    #[test]
    fn estimate_point_is_difference_of_arm_means_on_uniform_leaf() {
        let ws = WeightSet {
            arms: vec![
                vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            ],
        };
        let y = [1.0, 2.0, 3.0, 10.0, 20.0, 30.0];
        let est = estimate_iate(&ws, &y, 1, 0, 3).unwrap();
        assert!((est.point - 18.0).abs() < 1e-12);
        assert!(!est.unreliable);
        // Paper normalization: signed weights sum to zero.
        let sum: f64 = est.weights.iter().sum();
        assert!(sum.abs() < 1e-12);
    }

    #[test]
    fn constant_outcomes_give_zero_point() {
        let ws = WeightSet {
            arms: vec![
                vec![0.5, 0.25, 0.25, 0.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.0, 0.2, 0.3, 0.5],
            ],
        };
        let y = [5.5; 6];
        let est = estimate_iate(&ws, &y, 1, 0, 2).unwrap();
        assert!(est.point.abs() < 1e-10);
    }

    #[test]
    fn scaling_outcomes_scales_point_and_se() {
        let ws = WeightSet {
            arms: vec![
                vec![0.5, 0.25, 0.25, 0.0, 0.0, 0.0],
                vec![0.0, 0.0, 0.0, 0.2, 0.3, 0.5],
            ],
        };
        let y = [1.0, -2.0, 3.5, 0.5, 4.0, -1.0];
        let scaled: Vec<f64> = y.iter().map(|v| -2.0 * v).collect();
        let a = estimate_iate(&ws, &y, 1, 0, 2).unwrap();
        let b = estimate_iate(&ws, &scaled, 1, 0, 2).unwrap();
        assert!((b.point + 2.0 * a.point).abs() < 1e-12);
        assert!((b.std_error - 2.0 * a.std_error).abs() < 1e-12);
    }

    #[test]
    fn single_row_arm_is_flagged_unreliable() {
        let ws = WeightSet {
            arms: vec![
                vec![1.0, 0.0, 0.0, 0.0],
                vec![0.0, 0.5, 0.25, 0.25],
            ],
        };
        let y = [1.0, 2.0, 3.0, 4.0];
        let est = estimate_iate(&ws, &y, 1, 0, 2).unwrap();
        assert!(est.unreliable);
    }

    #[test]
    fn wald_identical_vectors_give_zero_statistic() {
        let w = vec![vec![1.0, -1.0, 0.5, -0.5]; 3];
        let y = [1.0, 2.0, 3.0, 4.0];
        let t = wald_gate_equality(&w, &y, 2).unwrap();
        assert_eq!(t.statistic, 0.0);
        assert_eq!(t.dof, 2);
        assert_eq!(t.p_value, 1.0);
    }

    #[test]
    fn wald_two_groups_equals_squared_t() {
        let wa = vec![2.0, -1.0, 1.5, -2.5, 0.0, 0.0];
        let wb = vec![0.0, -0.5, 2.0, -1.0, 1.0, -1.5];
        let y = [1.0, 4.0, 2.0, 8.0, 3.0, 5.0];
        let k = 3;
        let wald = wald_gate_equality(&[wa.clone(), wb.clone()], &y, k).unwrap();
        let contrast: Vec<f64> = wa.iter().zip(&wb).map(|(a, b)| a - b).collect();
        let est = estimate_effect(Estimand::Ate { m: 1, l: 0 }, contrast, &y, k).unwrap();
        let t2 = (est.point / est.std_error).powi(2);
        assert!((wald.statistic - t2).abs() < 1e-8, "{} vs {}", wald.statistic, t2);
    }

    #[test]
    fn wald_treats_rounding_noise_contrasts_as_equal() {
        // Two groups whose weight means differ only in the last few ulps
        // must not reject: the contrast is accumulation noise, not signal.
        let wa: Vec<f64> = vec![2.0, -1.0, 1.5, -2.5, 0.0, 0.0];
        let wb: Vec<f64> = wa.iter().map(|&v| v + v.abs() * 1e-16).collect();
        let y = [1.0, 4.0, 2.0, 8.0, 3.0, 5.0];
        let wald = wald_gate_equality(&[wa, wb], &y, 3).unwrap();
        assert_eq!(wald.statistic, 0.0);
        assert_eq!(wald.p_value, 1.0);
    }

    #[test]
    fn wald_rejection_rate_is_calibrated_under_the_null() {
        // Fixed weight patterns per replication, fresh outcomes: the true
        // group effects are all zero, so rejections at 5% must stay near
        // nominal. Slight conservatism from the level term is expected.
        let n = 200;
        let reps = 500;
        let k = default_knn(n);
        let mut rejections = 0usize;
        for rep in 0..reps {
            let mut rng = crate::rng::derive(99, crate::rng::stream::REPLICATION, rep);
            let mut groups: Vec<Vec<f64>> = Vec::new();
            for _ in 0..3 {
                // Signed weights: positive mass on even rows (arm m),
                // negative on odd rows (arm l), each side summing to n.
                let mut pos: Vec<f64> = (0..n / 2).map(|_| rng.gen_range(0.1..1.0)).collect();
                let mut neg: Vec<f64> = (0..n / 2).map(|_| rng.gen_range(0.1..1.0)).collect();
                let ps: f64 = pos.iter().sum();
                let ns: f64 = neg.iter().sum();
                pos.iter_mut().for_each(|v| *v *= n as f64 / 2.0 / ps);
                neg.iter_mut().for_each(|v| *v *= n as f64 / 2.0 / ns);
                let mut w = vec![0.0f64; n];
                for i in 0..n / 2 {
                    w[2 * i] = pos[i];
                    w[2 * i + 1] = -neg[i];
                }
                groups.push(w);
            }
            let y: Vec<f64> = (0..n)
                .map(|_| {
                    let u: f64 = rng.gen_range(0.0f64..1.0);
                    let v: f64 = rng.gen_range(0.0f64..1.0);
                    (-2.0 * u.max(1e-12).ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
                })
                .collect();
            let wald = wald_gate_equality(&groups, &y, k).unwrap();
            if wald.p_value < 0.05 {
                rejections += 1;
            }
        }
        let rate = rejections as f64 / reps as f64;
        assert!(
            (0.02..=0.09).contains(&rate),
            "rejection rate {} outside [0.02, 0.09]",
            rate
        );
    }

    fn toy_sample(n: usize) -> Sample {
        let mut rng = crate::rng::derive(3, crate::rng::stream::POPULATION, 8);
        let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let d: Vec<u16> = (0..n).map(|i| (i % 2) as u16).collect();
        let y: Vec<f64> = x
            .iter()
            .zip(&d)
            .map(|(xi, di)| xi + *di as f64 * (1.0 + xi) + rng.gen_range(-0.2..0.2))
            .collect();
        let group = GroupColumn {
            name: "g".into(),
            labels: vec!["low".into(), "high".into()],
            ids: x.iter().map(|&v| u32::from(v > 0.0)).collect(),
        };
        Sample::from_parts(
            y,
            d,
            vec![x],
            vec![FeatureMeta {
                name: "x1".into(),
                kind: FeatureKind::Ordered,
            }],
            vec![group],
            2,
        )
        .unwrap()
    }

    #[test]
    fn aggregation_identities_hold() {
        let sample = toy_sample(120);
        let cfg = ForestConfig {
            n_trees: 20,
            seed: 7,
            ..ForestConfig::default()
        };
        let forest = build_forest(&sample, &cfg).unwrap();
        let engine = EffectsEngine::new(&forest, &sample, None, None).unwrap();
        let agg = engine.aggregate(&sample.groups).unwrap();

        // Share-weighted GATE weights must reproduce the ATE weights.
        let merged = agg.merged_column(0);
        let ate_w = agg.global.signed_mean(1, 0).unwrap();
        let (_, group_sums) = &agg.columns[0];
        let mut share_weighted = vec![0.0f64; engine.n2()];
        for sums in group_sums {
            let share = sums.count as f64 / agg.global.count as f64;
            for (acc, w) in share_weighted.iter_mut().zip(sums.signed_mean(1, 0).unwrap()) {
                *acc += share * w;
            }
        }
        for (a, b) in share_weighted.iter().zip(&ate_w) {
            assert!((a - b).abs() < 1e-10);
        }
        assert_eq!(merged.count, agg.global.count);

        // GATE point equals the mean of member IATE points.
        let gate = engine.gates(&agg, 0, 1, 0).unwrap();
        let members: Vec<usize> = (0..engine.n2())
            .filter(|&j| {
                let row = engine.view.rows[j] as usize;
                sample.groups[0].ids[row] == 0
            })
            .collect();
        let mut mean_iate = 0.0;
        for &j in &members {
            let row = engine.view.rows[j] as usize;
            let x = sample.row(row);
            mean_iate += engine.iate_at(&x, 1, 0).unwrap().point;
        }
        mean_iate /= members.len() as f64;
        assert!(
            (gate.estimates[0].point - mean_iate).abs() < 1e-10,
            "{} vs {}",
            gate.estimates[0].point,
            mean_iate
        );

        // ATE equals the share-weighted mean of the GATEs.
        let ate = engine.ate(&agg, 1, 0).unwrap();
        let mut share_gate = 0.0;
        for (est, sums) in gate.estimates.iter().zip(group_sums) {
            share_gate += est.point * sums.count as f64 / agg.global.count as f64;
        }
        assert!((ate.point - share_gate).abs() < 1e-10);
    }

    #[test]
    fn everyone_group_gate_equals_ate_with_trivial_wald() {
        let mut sample = toy_sample(80);
        sample.groups = vec![GroupColumn {
            name: "all".into(),
            labels: vec!["all".into()],
            ids: vec![0; sample.n_rows()],
        }];
        let cfg = ForestConfig {
            n_trees: 10,
            seed: 5,
            ..ForestConfig::default()
        };
        let forest = build_forest(&sample, &cfg).unwrap();
        let engine = EffectsEngine::new(&forest, &sample, None, None).unwrap();
        let agg = engine.aggregate(&sample.groups).unwrap();
        let ate = engine.ate(&agg, 1, 0).unwrap();
        let gate = engine.gates(&agg, 0, 1, 0).unwrap();
        assert_eq!(gate.estimates.len(), 1);
        assert!((gate.estimates[0].point - ate.point).abs() < 1e-12);
        assert_eq!(gate.wald.statistic, 0.0);
        assert_eq!(gate.wald.dof, 0);
        assert_eq!(gate.wald.p_value, 1.0);
    }

    #[test]
    fn singleton_group_matches_its_iate() {
        let sample = toy_sample(60);
        let cfg = ForestConfig {
            n_trees: 10,
            seed: 13,
            ..ForestConfig::default()
        };
        let forest = build_forest(&sample, &cfg).unwrap();
        let engine = EffectsEngine::new(&forest, &sample, None, None).unwrap();
        // Grouping column: first honest row alone, everyone else together.
        let first_honest = forest.assignment.b[0] as usize;
        let column = GroupColumn {
            name: "one".into(),
            labels: vec!["solo".into(), "rest".into()],
            ids: (0..sample.n_rows())
                .map(|r| u32::from(r != first_honest))
                .collect(),
        };
        let agg = engine.aggregate(std::slice::from_ref(&column)).unwrap();
        let gate = engine.gates(&agg, 0, 1, 0).unwrap();
        let x = sample.row(first_honest);
        let iate = engine.iate_at(&x, 1, 0).unwrap();
        assert!((gate.estimates[0].point - iate.point).abs() < 1e-12);
        assert!((gate.estimates[0].std_error - iate.std_error).abs() < 1e-12);
    }

    #[test]
    fn shift_of_outcomes_leaves_contrast_points_unchanged() {
        let sample = toy_sample(80);
        let cfg = ForestConfig {
            n_trees: 12,
            seed: 21,
            ..ForestConfig::default()
        };
        let forest = build_forest(&sample, &cfg).unwrap();
        let engine = EffectsEngine::new(&forest, &sample, None, None).unwrap();
        let agg = engine.aggregate(&[]).unwrap();
        let ate = engine.ate(&agg, 1, 0).unwrap();

        let shifted_y: Vec<f64> = sample.y.iter().map(|v| v + 1000.0).collect();
        let shifted = Sample::from_parts(
            shifted_y,
            sample.d.clone(),
            sample.x.clone(),
            sample.features.clone(),
            sample.groups.clone(),
            2,
        )
        .unwrap();
        // Shifting y by a constant changes no split objective ranking, so
        // the rebuilt forest has identical structure and the signed points
        // agree up to floating-point accumulation.
        let forest2 = build_forest(&shifted, &cfg).unwrap();
        let engine2 = EffectsEngine::new(&forest2, &shifted, None, None).unwrap();
        let agg2 = engine2.aggregate(&[]).unwrap();
        let ate2 = engine2.ate(&agg2, 1, 0).unwrap();
        assert!(
            (ate.point - ate2.point).abs() < 1e-6,
            "{} vs {}",
            ate.point,
            ate2.point
        );
    }

    #[test]
    fn po_levels_bracket_arm_means() {
        let sample = toy_sample(100);
        let cfg = ForestConfig {
            n_trees: 15,
            seed: 2,
            ..ForestConfig::default()
        };
        let forest = build_forest(&sample, &cfg).unwrap();
        let engine = EffectsEngine::new(&forest, &sample, None, None).unwrap();
        let agg = engine.aggregate(&[]).unwrap();
        let po0 = engine.po_level(&agg, 0).unwrap();
        let po1 = engine.po_level(&agg, 1).unwrap();
        let ate = engine.ate(&agg, 1, 0).unwrap();
        assert!((po1.point - po0.point - ate.point).abs() < 1e-10);
        assert!(po0.std_error > 0.0 && po1.std_error > 0.0);
    }

    #[test]
    fn delta_restriction_changes_membership() {
        let sample = toy_sample(80);
        let cfg = ForestConfig {
            n_trees: 8,
            seed: 31,
            ..ForestConfig::default()
        };
        let forest = build_forest(&sample, &cfg).unwrap();
        let all = EffectsEngine::new(&forest, &sample, None, None).unwrap();
        let treated_only = EffectsEngine::new(&forest, &sample, None, Some(vec![1])).unwrap();
        let agg_all = all.aggregate(&[]).unwrap();
        let agg_t = treated_only.aggregate(&[]).unwrap();
        assert!(agg_t.global.count < agg_all.global.count);
        let ate = all.ate(&agg_all, 1, 0).unwrap();
        let atet = treated_only.ate(&agg_t, 1, 0).unwrap();
        assert_ne!(ate.point, atet.point);
    }
}
