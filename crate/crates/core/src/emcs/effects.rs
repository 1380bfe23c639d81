//! True effect generation: smooth IATE surfaces on the population and the
//! integer-valued individual effects built on top of them.

use super::population::{logistic, Population};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Shape of the true effect surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EffectKind {
    /// No effect anywhere; forces ITE identically zero.
    Zero,
    /// xi = sin(1.25 pi p(x) / max p), standardized.
    SineOfPropensity,
    /// xi = a chosen covariate column, standardized.
    LinearCovariate,
}

/// Effect specification: kind, scale delta, and the covariate column for
/// the linear kind. In-population the IATE has mean 0 and SD delta.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSpec {
    pub kind: EffectKind,
    pub delta: f64,
    pub covariate: Option<usize>,
}

impl EffectSpec {
    pub fn zero() -> EffectSpec {
        EffectSpec {
            kind: EffectKind::Zero,
            delta: 0.0,
            covariate: None,
        }
    }

    pub fn sine(delta: f64) -> EffectSpec {
        EffectSpec {
            kind: EffectKind::SineOfPropensity,
            delta,
            covariate: None,
        }
    }

    pub fn linear(delta: f64, covariate: usize) -> EffectSpec {
        EffectSpec {
            kind: EffectKind::LinearCovariate,
            delta,
            covariate: Some(covariate),
        }
    }

    fn validate(&self, population: &Population) -> Result<()> {
        if !self.delta.is_finite() || self.delta < 0.0 {
            return Err(Error::Config("effect delta must be nonnegative".into()));
        }
        if self.kind == EffectKind::LinearCovariate {
            match self.covariate {
                Some(c) if c < population.x.len() => {}
                _ => {
                    return Err(Error::Config(
                        "linear effect kind needs a valid covariate column".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Unit-level integer effects: the zero kind bypasses the stochastic
    /// construction entirely, everything else runs through `gen_ite`.
    pub fn generate_ite(&self, iate: &[f64], seed: u64) -> Vec<f64> {
        if self.kind == EffectKind::Zero {
            return vec![0.0; iate.len()];
        }
        gen_ite(iate, seed)
    }
}

/// True IATE surface for the population: the raw shape xi is standardized
/// so that in-population mean(IATE) = 0 and SD(IATE) = delta exactly
/// (population moments).
pub fn spec_iate(population: &Population, spec: &EffectSpec) -> Result<Vec<f64>> {
    spec.validate(population)?;
    let n = population.size();
    if spec.kind == EffectKind::Zero || spec.delta == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let xi: Vec<f64> = match spec.kind {
        EffectKind::Zero => unreachable!("handled above"),
        EffectKind::SineOfPropensity => {
            let max_p = population
                .propensity
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            population
                .propensity
                .iter()
                .map(|&p| (1.25 * std::f64::consts::PI * p / max_p).sin())
                .collect()
        }
        EffectKind::LinearCovariate => population.x[spec.covariate.unwrap()].clone(),
    };
    let mean = xi.iter().sum::<f64>() / n as f64;
    let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    // A constant shape leaves variance of pure summation rounding, not an
    // exact zero; standardizing that would scale noise up to delta.
    let scale = xi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 2.0 * n as f64 * f64::EPSILON * scale;
    if var <= tol * tol {
        return Err(Error::Numerical(
            "effect shape is constant; cannot standardize".into(),
        ));
    }
    let sd = var.sqrt();
    Ok(xi.iter().map(|v| spec.delta * (v - mean) / sd).collect())
}

/// Integer-valued individual effects around the IATE surface. Per row:
/// u ~ Poisson(1), v* ~ Uniform[0,1], vdiff = frac(IATE + u),
/// v = -vdiff if v* > vdiff else 1 - vdiff, ITE = IATE + (1 - u) + v.
/// The construction is integer-valued with E[ITE] = IATE; rounding only
/// removes float residue.
pub fn gen_ite(iate: &[f64], seed: u64) -> Vec<f64> {
    iate.par_iter()
        .enumerate()
        .map(|(i, &a)| {
            let mut rng = crate::rng::derive(seed, crate::rng::stream::ITE, i as u64);
            let u: f64 = Poisson::new(1.0).expect("unit Poisson").sample(&mut rng);
            let v_star: f64 = rng.gen_range(0.0..1.0);
            let v_diff = (a + u) - (a + u).floor();
            let v = if v_star > v_diff { -v_diff } else { 1.0 - v_diff };
            let ite = a + (1.0 - u) + v;
            debug_assert!((ite - ite.round()).abs() < 1e-9);
            ite.round()
        })
        .collect()
}

/// Shifts propensities on the logit scale so their mean hits `target`:
/// bisection on the offset c with mean(logistic(logit(p) + c)) = target
/// within 1e-6.
pub fn shift_propensity(p: &[f64], target: f64) -> Result<Vec<f64>> {
    if p.is_empty() {
        return Err(Error::Config("no propensities to shift".into()));
    }
    if p.iter().any(|&v| v <= 0.0 || v >= 1.0) {
        return Err(Error::Config(
            "propensities must lie strictly inside (0, 1)".into(),
        ));
    }
    if target <= 0.0 || target >= 1.0 {
        return Err(Error::Config(format!(
            "target share {} unattainable by a logit shift",
            target
        )));
    }
    let logits: Vec<f64> = p.iter().map(|&v| (v / (1.0 - v)).ln()).collect();
    let mean_at = |c: f64| -> f64 {
        logits.iter().map(|&z| logistic(z + c)).sum::<f64>() / logits.len() as f64
    };
    let mut lo = -40.0;
    let mut hi = 40.0;
    if mean_at(lo) > target || mean_at(hi) < target {
        return Err(Error::Numerical(format!(
            "target share {} outside the reachable range",
            target
        )));
    }
    let mut c = 0.0;
    for _ in 0..200 {
        c = 0.5 * (lo + hi);
        let m = mean_at(c);
        if (m - target).abs() <= 1e-6 {
            break;
        }
        if m < target {
            lo = c;
        } else {
            hi = c;
        }
    }
    if (mean_at(c) - target).abs() > 1e-6 {
        return Err(Error::Numerical(
            "propensity shift did not converge to the target share".into(),
        ));
    }
    Ok(logits.iter().map(|&z| logistic(z + c)).collect())
}
