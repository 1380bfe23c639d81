//! Synthetic Monte Carlo engine: a generated base population with known
//! propensities and baseline outcomes, true effect surfaces layered on
//! top, and a replication harness that scores estimators on the usual
//! quality-measure grid (bias, MSE, normality shape, SE calibration,
//! coverage).

pub mod effects;
pub mod metrics;
pub mod population;
pub mod study;

pub use effects::{gen_ite, shift_propensity, spec_iate, EffectKind, EffectSpec};
pub use metrics::{jb_stat, render_csv, MetricsRow, Moments, CSV_HEADER};
pub use population::{gen_population, Population, PopulationConfig, AGE_CATEGORIES};
pub use study::{
    run_study, EstimatorKind, EstimatorSpec, Selection, StudyConfig, StudyResult, Truths, Z90,
};

use crate::centering::CenteringConfig;
use crate::criterion::Variant;
use crate::forest::ForestConfig;
use crate::{Error, Result};

/// A parsed study description: population, effect surface, and harness
/// settings.
#[derive(Debug, Clone, PartialEq)]
pub struct StudyFile {
    pub population: PopulationConfig,
    pub effect: EffectSpec,
    pub study: StudyConfig,
}

fn parse_val<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{}' for key '{}'", value, key)))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse_val::<f64>(key, s))
        .collect()
}

fn parse_names(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect()
}

fn parse_estimator(name: &str, value: &str) -> Result<EstimatorSpec> {
    let mut tokens = value.split_whitespace();
    let kind = tokens
        .next()
        .ok_or_else(|| Error::Config(format!("estimator '{}' has no kind", name)))?;
    let mut pairs = Vec::new();
    for token in tokens {
        let (k, v) = token.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "estimator '{}': expected key=value, got '{}'",
                name, token
            ))
        })?;
        pairs.push((k, v));
    }
    let kind = match kind {
        "oracle" => {
            if !pairs.is_empty() {
                return Err(Error::Config(format!(
                    "estimator '{}': oracle takes no settings",
                    name
                )));
            }
            EstimatorKind::Oracle
        }
        "noisy" => {
            let mut sd = None;
            for (k, v) in pairs {
                match k {
                    "sd" => sd = Some(parse_val::<f64>(k, v)?),
                    other => {
                        return Err(Error::Config(format!(
                            "estimator '{}': unknown setting '{}'",
                            name, other
                        )))
                    }
                }
            }
            EstimatorKind::NoisyOracle {
                sd: sd.ok_or_else(|| {
                    Error::Config(format!("estimator '{}': noisy needs sd=", name))
                })?,
            }
        }
        "forest" => {
            let mut forest = ForestConfig::default();
            let mut center_folds: Option<usize> = None;
            let mut center_trees: Option<u32> = None;
            for (k, v) in pairs {
                match k {
                    "variant" => forest.criterion.variant = Variant::from_cli_name(v)?,
                    "penalty" => {
                        forest.criterion.penalty_on = match v {
                            "on" => true,
                            "off" => false,
                            other => {
                                return Err(Error::Config(format!(
                                    "estimator '{}': penalty must be on or off, got '{}'",
                                    name, other
                                )))
                            }
                        }
                    }
                    "lambda" => forest.criterion.lambda = Some(parse_val(k, v)?),
                    "lambda_multiplier" => {
                        forest.criterion.lambda_multiplier = Some(parse_val(k, v)?)
                    }
                    "trees" => forest.n_trees = parse_val(k, v)?,
                    "min_leaf" => forest.min_leaf_per_arm = parse_val(k, v)?,
                    "min_leaf_total" => forest.min_leaf_total = parse_val(k, v)?,
                    "alpha" => forest.alpha = parse_val(k, v)?,
                    "share" => forest.subsample_share_a = parse_val(k, v)?,
                    "feature_mean" => forest.feature_draw_mean = Some(parse_val(k, v)?),
                    "center_folds" => center_folds = Some(parse_val(k, v)?),
                    "center_trees" => center_trees = Some(parse_val(k, v)?),
                    other => {
                        return Err(Error::Config(format!(
                            "estimator '{}': unknown setting '{}'",
                            name, other
                        )))
                    }
                }
            }
            let centering = center_folds.map(|folds| CenteringConfig {
                folds,
                forest: ForestConfig {
                    n_trees: center_trees.unwrap_or(forest.n_trees),
                    criterion: Default::default(),
                    ..forest.clone()
                },
                seed: 0,
            });
            EstimatorKind::Forest { forest, centering }
        }
        other => {
            return Err(Error::Config(format!(
                "estimator '{}': unknown kind '{}' (oracle, noisy, forest)",
                name, other
            )))
        }
    };
    Ok(EstimatorSpec {
        name: name.to_string(),
        kind,
    })
}

/// Parses a key-value study file. Lines are `key = value`; `#` starts a
/// comment; estimators are declared as `estimator.<name> = <kind> ...` and
/// keep their file order.
pub fn parse_study_file(text: &str) -> Result<StudyFile> {
    let mut population = PopulationConfig::default();
    let mut effect = EffectSpec::zero();
    let mut study = StudyConfig {
        training_n: 1000,
        replications: 10,
        validation_n: 5000,
        selection: Selection::Rct,
        estimators: Vec::new(),
        gate_columns: Vec::new(),
        seed: 0,
    };

    for (idx, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value'", idx + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "population.size" => population.size = parse_val(key, value)?,
            "population.continuous" => population.n_continuous = parse_val(key, value)?,
            "population.binary" => population.n_binary = parse_val(key, value)?,
            "population.index_intercept" => population.index_intercept = parse_val(key, value)?,
            "population.index_coefficients" => {
                population.index_coefficients = parse_list(key, value)?
            }
            "population.outcome_intercept" => {
                population.outcome_intercept = parse_val(key, value)?
            }
            "population.outcome_coefficients" => {
                population.outcome_coefficients = parse_list(key, value)?
            }
            "population.outcome_noise_sd" => population.outcome_noise_sd = parse_val(key, value)?,
            "population.seed" => population.seed = parse_val(key, value)?,
            "effect.kind" => {
                effect.kind = match value {
                    "zero" => EffectKind::Zero,
                    "sine" => EffectKind::SineOfPropensity,
                    "linear" => EffectKind::LinearCovariate,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown effect kind '{}' (zero, sine, linear)",
                            other
                        )))
                    }
                }
            }
            "effect.delta" => effect.delta = parse_val(key, value)?,
            "effect.covariate" => effect.covariate = Some(parse_val(key, value)?),
            "study.training_n" => study.training_n = parse_val(key, value)?,
            "study.replications" => study.replications = parse_val(key, value)?,
            "study.validation_n" => study.validation_n = parse_val(key, value)?,
            "study.selection" => {
                study.selection = if value == "rct" {
                    Selection::Rct
                } else if let Some(t) = value.strip_prefix("logit:") {
                    Selection::LogitShifted {
                        target: parse_val(key, t)?,
                    }
                } else {
                    return Err(Error::Config(format!(
                        "unknown selection '{}' (rct or logit:<share>)",
                        value
                    )));
                }
            }
            "study.gate_columns" => study.gate_columns = parse_names(value),
            "study.seed" => study.seed = parse_val(key, value)?,
            _ => {
                if let Some(name) = key.strip_prefix("estimator.") {
                    study.estimators.push(parse_estimator(name, value)?);
                } else {
                    return Err(Error::Config(format!(
                        "line {}: unknown key '{}'",
                        idx + 1,
                        key
                    )));
                }
            }
        }
    }
    if study.estimators.is_empty() {
        return Err(Error::Config("study file declares no estimators".into()));
    }
    Ok(StudyFile {
        population,
        effect,
        study,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const FILE: &str = "\
# a small comparison
population.size = 4000
population.seed = 3
effect.kind = sine
effect.delta = 2.0
study.training_n = 500
study.replications = 4
study.validation_n = 200
study.selection = logit:0.5
study.gate_columns = b0, age
study.seed = 17
estimator.mcf = forest variant=one_f_mce trees=50 min_leaf=2
estimator.mcf_pen = forest variant=one_f_mce penalty=on trees=50
estimator.lc = forest trees=40 center_folds=2 center_trees=20
estimator.truth = oracle
estimator.noise = noisy sd=0.4
";

    #[test]
    fn full_file_round_trips_into_configs() {
        let parsed = parse_study_file(FILE).unwrap();
        assert_eq!(parsed.population.size, 4000);
        assert_eq!(parsed.effect.kind, EffectKind::SineOfPropensity);
        assert_eq!(parsed.effect.delta, 2.0);
        assert_eq!(parsed.study.training_n, 500);
        assert_eq!(
            parsed.study.selection,
            Selection::LogitShifted { target: 0.5 }
        );
        assert_eq!(parsed.study.gate_columns, vec!["b0", "age"]);
        assert_eq!(parsed.study.estimators.len(), 5);
        match &parsed.study.estimators[1].kind {
            EstimatorKind::Forest { forest, centering } => {
                assert!(forest.criterion.penalty_on);
                assert_eq!(forest.n_trees, 50);
                assert!(centering.is_none());
            }
            other => panic!("expected forest, got {:?}", other),
        }
        match &parsed.study.estimators[2].kind {
            EstimatorKind::Forest { centering, .. } => {
                let c = centering.as_ref().unwrap();
                assert_eq!(c.folds, 2);
                assert_eq!(c.forest.n_trees, 20);
            }
            other => panic!("expected forest, got {:?}", other),
        }
        match &parsed.study.estimators[4].kind {
            EstimatorKind::NoisyOracle { sd } => assert_eq!(*sd, 0.4),
            other => panic!("expected noisy, got {:?}", other),
        }
    }

    #[test]
    fn unknown_keys_and_malformed_lines_fail() {
        assert!(parse_study_file("bogus.key = 1\nestimator.x = oracle").is_err());
        assert!(parse_study_file("study.seed 4\nestimator.x = oracle").is_err());
        assert!(parse_study_file("estimator.x = forest magic=1").is_err());
        assert!(parse_study_file("study.seed = 4").is_err());
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let text = "\n  # only a comment\nestimator.x = oracle # trailing\n";
        let parsed = parse_study_file(text).unwrap();
        assert_eq!(parsed.study.estimators.len(), 1);
    }
}
