//! Synthetic base population: features, true propensities, and baseline
//! outcomes shaped like integer months of employment in [0, 33].

use crate::data::{FeatureKind, FeatureMeta, GroupColumn, Sample};
use crate::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

/// Number of categories in the age-style grouping feature.
pub const AGE_CATEGORIES: usize = 32;

/// Share of ones in the binary grouping feature.
const BINARY_GROUP_SHARE: f64 = 0.56;

/// Configuration of the generated base population. Feature columns are
/// laid out continuous first, then binary, then one age-style category
/// column; both index coefficient vectors follow that layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationConfig {
    pub size: usize,
    pub n_continuous: usize,
    pub n_binary: usize,
    /// Propensity index: logistic(intercept + coefficients . x).
    pub index_intercept: f64,
    pub index_coefficients: Vec<f64>,
    /// Baseline outcome index feeding the bounded month count.
    pub outcome_intercept: f64,
    pub outcome_coefficients: Vec<f64>,
    pub outcome_noise_sd: f64,
    pub seed: u64,
}

impl PopulationConfig {
    pub fn n_features(&self) -> usize {
        self.n_continuous + self.n_binary + 1
    }

    fn validate(&self) -> Result<()> {
        if self.size < 4 {
            return Err(Error::Config("population needs at least 4 rows".into()));
        }
        let p = self.n_features();
        if self.index_coefficients.len() != p || self.outcome_coefficients.len() != p {
            return Err(Error::Config(format!(
                "coefficient vectors must cover all {} features (continuous, binary, age)",
                p
            )));
        }
        if !self.outcome_noise_sd.is_finite() || self.outcome_noise_sd < 0.0 {
            return Err(Error::Config("outcome noise SD must be nonnegative".into()));
        }
        Ok(())
    }
}

impl Default for PopulationConfig {
    fn default() -> PopulationConfig {
        PopulationConfig {
            size: 20_000,
            n_continuous: 3,
            n_binary: 2,
            index_intercept: -1.0,
            index_coefficients: vec![0.8, -0.4, 0.0, 0.3, 0.0, 0.02],
            outcome_intercept: 0.2,
            outcome_coefficients: vec![0.9, 0.5, -0.3, -0.4, 0.0, -0.015],
            outcome_noise_sd: 0.8,
            seed: 0,
        }
    }
}

/// A generated base population. Feature columns mirror `Sample` layout;
/// `groups` carries the two GATE groupings (the binary feature and the
/// age-style category feature).
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub config: PopulationConfig,
    pub x: Vec<Vec<f64>>,
    pub features: Vec<FeatureMeta>,
    pub groups: Vec<GroupColumn>,
    /// True propensity logistic(index), strictly inside (0, 1).
    pub propensity: Vec<f64>,
    /// Baseline outcome: integer months in [0, 33], stored as f64.
    pub y0: Vec<f64>,
}

impl Population {
    pub fn size(&self) -> usize {
        self.y0.len()
    }

    /// Feature vector of one row.
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.iter().map(|col| col[i]).collect()
    }

    /// Builds an estimation sample from a row subset with assigned
    /// treatments and observed outcomes.
    pub fn sample_for_rows(&self, rows: &[usize], d: Vec<u16>, y: Vec<f64>) -> Result<Sample> {
        let x = self
            .x
            .iter()
            .map(|col| rows.iter().map(|&r| col[r]).collect())
            .collect();
        let groups = self
            .groups
            .iter()
            .map(|g| GroupColumn {
                name: g.name.clone(),
                labels: g.labels.clone(),
                ids: rows.iter().map(|&r| g.ids[r]).collect(),
            })
            .collect();
        Sample::from_parts(y, d, x, self.features.clone(), groups, 2)
    }
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Age-category probabilities: sizes proportional to (2C - c), strictly
/// decreasing in the category code and bounded away from zero.
fn age_probabilities() -> Vec<f64> {
    let c = AGE_CATEGORIES as f64;
    let total: f64 = (0..AGE_CATEGORIES).map(|k| 2.0 * c - k as f64).sum();
    (0..AGE_CATEGORIES)
        .map(|k| (2.0 * c - k as f64) / total)
        .collect()
}

/// Draws the base population: continuous features standard normal,
/// binaries Bernoulli (the first with the grouping share), an age-style
/// category with decreasing sizes; true propensity logistic(index);
/// Y0 = clamp(round(33 * logistic(outcome index + noise)), 0, 33).
pub fn gen_population(cfg: &PopulationConfig) -> Result<Population> {
    cfg.validate()?;
    let n = cfg.size;
    let p = cfg.n_features();
    let mut rng = crate::rng::derive(cfg.seed, crate::rng::stream::POPULATION, 0);
    let noise = Normal::new(0.0, cfg.outcome_noise_sd)
        .map_err(|e| Error::Config(format!("outcome noise: {}", e)))?;
    let age_p = age_probabilities();

    let mut x: Vec<Vec<f64>> = vec![Vec::with_capacity(n); p];
    let mut propensity = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    for _ in 0..n {
        let mut row = Vec::with_capacity(p);
        for _ in 0..cfg.n_continuous {
            let z: f64 = StandardNormal.sample(&mut rng);
            row.push(z);
        }
        for b in 0..cfg.n_binary {
            let share = if b == 0 { BINARY_GROUP_SHARE } else { 0.5 };
            row.push(f64::from(rng.gen_bool(share)));
        }
        let u: f64 = rng.gen_range(0.0..1.0);
        let mut acc = 0.0;
        let mut age = AGE_CATEGORIES - 1;
        for (k, pk) in age_p.iter().enumerate() {
            acc += pk;
            if u < acc {
                age = k;
                break;
            }
        }
        row.push(age as f64);

        let index: f64 = cfg.index_intercept
            + cfg
                .index_coefficients
                .iter()
                .zip(&row)
                .map(|(c, v)| c * v)
                .sum::<f64>();
        propensity.push(logistic(index));
        let out_index: f64 = cfg.outcome_intercept
            + cfg
                .outcome_coefficients
                .iter()
                .zip(&row)
                .map(|(c, v)| c * v)
                .sum::<f64>()
            + noise.sample(&mut rng);
        y0.push((33.0 * logistic(out_index)).round().clamp(0.0, 33.0));
        for (col, v) in x.iter_mut().zip(row) {
            col.push(v);
        }
    }

    let mut features = Vec::with_capacity(p);
    for j in 0..cfg.n_continuous {
        features.push(FeatureMeta {
            name: format!("c{}", j),
            kind: FeatureKind::Ordered,
        });
    }
    for j in 0..cfg.n_binary {
        features.push(FeatureMeta {
            name: format!("b{}", j),
            kind: FeatureKind::Ordered,
        });
    }
    features.push(FeatureMeta {
        name: "age".into(),
        kind: FeatureKind::Ordered,
    });

    let binary_col = cfg.n_continuous;
    let age_col = p - 1;
    let groups = vec![
        GroupColumn {
            name: "b0".into(),
            labels: vec!["0".into(), "1".into()],
            ids: x[binary_col].iter().map(|&v| v as u32).collect(),
        },
        GroupColumn {
            name: "age".into(),
            labels: (0..AGE_CATEGORIES).map(|k| k.to_string()).collect(),
            ids: x[age_col].iter().map(|&v| v as u32).collect(),
        },
    ];

    Ok(Population {
        config: cfg.clone(),
        x,
        features,
        groups,
        propensity,
        y0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg(size: usize) -> PopulationConfig {
        PopulationConfig {
            size,
            ..PopulationConfig::default()
        }
    }

    #[test]
    fn zero_index_gives_uniform_propensity() {
        let cfg = PopulationConfig {
            size: 500,
            index_intercept: 0.0,
            index_coefficients: vec![0.0; 6],
            ..PopulationConfig::default()
        };
        let pop = gen_population(&cfg).unwrap();
        assert!(pop.propensity.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn fixed_seed_reproduces_the_population() {
        let cfg = small_cfg(300);
        let a = gen_population(&cfg).unwrap();
        let b = gen_population(&cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn baseline_outcomes_are_integer_months_in_range() {
        let pop = gen_population(&small_cfg(100_000)).unwrap();
        for &y in &pop.y0 {
            assert!(y >= 0.0 && y <= 33.0);
            assert_eq!(y, y.round());
        }
        // The logistic index model must actually spread the outcome.
        let mean = pop.y0.iter().sum::<f64>() / pop.size() as f64;
        assert!(mean > 5.0 && mean < 28.0, "mean {}", mean);
    }

    #[test]
    fn propensities_stay_inside_the_open_interval() {
        let pop = gen_population(&small_cfg(50_000)).unwrap();
        assert!(pop.propensity.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn grouping_columns_mirror_their_features() {
        let pop = gen_population(&small_cfg(5_000)).unwrap();
        let binary_col = pop.config.n_continuous;
        for (i, &id) in pop.groups[0].ids.iter().enumerate() {
            assert_eq!(id as f64, pop.x[binary_col][i]);
        }
        let ones = pop.groups[0].ids.iter().filter(|&&v| v == 1).count() as f64;
        let share = ones / pop.size() as f64;
        assert!((share - 0.56).abs() < 0.03, "share {}", share);
    }

    #[test]
    fn age_categories_shrink_with_the_code() {
        let pop = gen_population(&small_cfg(80_000)).unwrap();
        let mut counts = vec![0u32; AGE_CATEGORIES];
        for &id in &pop.groups[1].ids {
            counts[id as usize] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0));
        // Monotone sizes up to sampling noise: compare quartile blocks.
        let block = |lo: usize, hi: usize| -> u32 { counts[lo..hi].iter().sum() };
        let q1 = block(0, 8);
        let q2 = block(8, 16);
        let q3 = block(16, 24);
        let q4 = block(24, 32);
        assert!(q1 > q2 && q2 > q3 && q3 > q4, "{} {} {} {}", q1, q2, q3, q4);
    }

    #[test]
    fn coefficient_length_mismatch_is_rejected() {
        let cfg = PopulationConfig {
            index_coefficients: vec![1.0],
            ..PopulationConfig::default()
        };
        assert!(gen_population(&cfg).is_err());
    }

    #[test]
    fn sample_for_rows_subsets_consistently() {
        let pop = gen_population(&small_cfg(200)).unwrap();
        let rows = vec![3usize, 10, 11, 50, 51, 120];
        let d = vec![0u16, 1, 0, 1, 0, 1];
        let y: Vec<f64> = rows.iter().map(|&r| pop.y0[r]).collect();
        let sample = pop.sample_for_rows(&rows, d, y).unwrap();
        assert_eq!(sample.n_rows(), 6);
        for (j, col) in sample.x.iter().enumerate() {
            for (i, &r) in rows.iter().enumerate() {
                assert_eq!(col[i], pop.x[j][r]);
            }
        }
        assert_eq!(sample.groups.len(), 2);
        assert_eq!(sample.groups[1].ids[2], pop.groups[1].ids[11]);
    }
}
