//! Replication harness: draws training samples from a fixed population,
//! assigns treatments, runs each estimator, and reduces the estimates to
//! the metric grid. Truths come from aggregating the population IATE
//! surface over a validation sample that is disjoint from the training
//! pool.

use super::effects::{shift_propensity, spec_iate, EffectSpec};
use super::metrics::{MetricsRow, Moments};
use super::population::{gen_population, Population, PopulationConfig};
use crate::centering::{center_outcomes, CenteringConfig};
use crate::data::{split_halves, GroupColumn, Sample};
use crate::forest::{build_forest_with_assignment, ForestConfig};
use crate::inference::EffectsEngine;
use crate::rng::{derive, derive_key, from_key, stream};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Two-sided 90% confidence interval half-width in standard-error units.
pub const Z90: f64 = 1.6448536269514722;

/// Stream purposes inside one replication key.
const SUB_DRAW: u64 = 1;
const SUB_ASSIGN: u64 = 2;
const SUB_FOREST: u64 = 3;
const SUB_NOISE: u64 = 4;
const SUB_CENTER: u64 = 5;

/// How treatments are assigned in a replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Selection {
    /// Bernoulli(1/2) everywhere.
    Rct,
    /// Bernoulli(p) with the population propensities shifted on the logit
    /// scale to hit the target mean share.
    LogitShifted { target: f64 },
}

/// One estimator entry in the comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub name: String,
    pub kind: EstimatorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EstimatorKind {
    /// The forest pipeline; seeds are overridden per replication.
    Forest {
        forest: ForestConfig,
        centering: Option<CenteringConfig>,
    },
    /// Returns the truth with zero standard error (harness self-test).
    Oracle,
    /// Returns truth + N(0, sd^2) noise and reports SE = sd, so coverage
    /// must be nominal (harness self-test).
    NoisyOracle { sd: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub training_n: usize,
    pub replications: u32,
    pub validation_n: usize,
    pub selection: Selection,
    pub estimators: Vec<EstimatorSpec>,
    /// Population group columns to aggregate GATEs over.
    pub gate_columns: Vec<String>,
    pub seed: u64,
}

impl StudyConfig {
    fn validate(&self) -> Result<()> {
        if self.training_n < 10 {
            return Err(Error::Config("training sample too small".into()));
        }
        if self.validation_n < 2 {
            return Err(Error::Config("validation sample needs at least 2 rows".into()));
        }
        if self.replications == 0 {
            return Err(Error::Config("study needs at least one replication".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::Config("study needs at least one estimator".into()));
        }
        let mut names: Vec<&str> = self.estimators.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.estimators.len() {
            return Err(Error::Config("estimator names must be unique".into()));
        }
        if let Selection::LogitShifted { target } = self.selection {
            if target <= 0.0 || target >= 1.0 {
                return Err(Error::Config("selection target share must be in (0, 1)".into()));
            }
        }
        Ok(())
    }
}

/// True effects aggregated once on the validation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Truths {
    pub validation_rows: Vec<usize>,
    /// Per validation row.
    pub iate: Vec<f64>,
    pub ate: f64,
    /// Per gate column, per group label.
    pub gates: Vec<Vec<f64>>,
    /// Validation member counts matching `gates`.
    pub gate_counts: Vec<Vec<u32>>,
}

impl Truths {
    fn build(
        population: &Population,
        iate_all: &[f64],
        validation_rows: &[usize],
        gate_columns: &[GroupColumn],
    ) -> Result<Truths> {
        let iate: Vec<f64> = validation_rows.iter().map(|&r| iate_all[r]).collect();
        let ate = iate.iter().sum::<f64>() / iate.len() as f64;
        let mut gates = Vec::with_capacity(gate_columns.len());
        let mut gate_counts = Vec::with_capacity(gate_columns.len());
        for column in gate_columns {
            let g = column.labels.len();
            let mut sums = vec![0.0f64; g];
            let mut counts = vec![0u32; g];
            for (&row, &effect) in validation_rows.iter().zip(&iate) {
                let gid = column.ids[row] as usize;
                sums[gid] += effect;
                counts[gid] += 1;
            }
            for (gid, &c) in counts.iter().enumerate() {
                if c == 0 {
                    return Err(Error::Config(format!(
                        "gate column '{}' group '{}' has no validation rows; raise validation_n",
                        column.name, column.labels[gid]
                    )));
                }
            }
            gates.push(
                sums.iter()
                    .zip(&counts)
                    .map(|(s, &c)| s / f64::from(c))
                    .collect(),
            );
            gate_counts.push(counts);
        }
        let _ = population;
        Ok(Truths {
            validation_rows: validation_rows.to_vec(),
            iate,
            ate,
            gates,
            gate_counts,
        })
    }
}

/// Point and standard error for every estimand of one replication.
#[derive(Debug, Clone)]
struct RepEffects {
    ate: (f64, f64),
    gates: Vec<Vec<(f64, f64)>>,
    iates: Vec<(f64, f64)>,
}

/// Study output: the metric grid plus the raw per-replication ATE series
/// (None where the estimator failed) for paired comparisons.
#[derive(Debug, Clone)]
pub struct StudyResult {
    pub truths: Truths,
    pub metrics: Vec<MetricsRow>,
    /// Indexed [estimator][replication]; (estimate, standard error).
    pub per_rep_ate: Vec<Vec<Option<(f64, f64)>>>,
    pub failures: Vec<String>,
}

/// Splits row ids into a validation sample and the training pool, both
/// sorted, disjoint by construction.
pub(crate) fn split_validation(
    n: usize,
    validation_n: usize,
    seed: u64,
) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut derive(seed, stream::POPULATION, 1));
    let mut validation = order[..validation_n].to_vec();
    let mut pool = order[validation_n..].to_vec();
    validation.sort_unstable();
    pool.sort_unstable();
    (validation, pool)
}

pub fn run_study(
    study: &StudyConfig,
    pop_cfg: &PopulationConfig,
    spec: &EffectSpec,
) -> Result<StudyResult> {
    study.validate()?;
    let population = gen_population(pop_cfg)?;
    if study.validation_n + study.training_n > population.size() {
        return Err(Error::Config(format!(
            "population of {} cannot hold validation {} plus training {}",
            population.size(),
            study.validation_n,
            study.training_n
        )));
    }
    let gate_columns: Vec<GroupColumn> = study
        .gate_columns
        .iter()
        .map(|name| {
            population
                .groups
                .iter()
                .find(|g| &g.name == name)
                .cloned()
                .ok_or_else(|| Error::Config(format!("unknown gate column '{}'", name)))
        })
        .collect::<Result<_>>()?;

    let iate_all = spec_iate(&population, spec)?;
    let ite_all = spec.generate_ite(&iate_all, study.seed);
    let assign_p: Vec<f64> = match study.selection {
        Selection::Rct => vec![0.5; population.size()],
        Selection::LogitShifted { target } => shift_propensity(&population.propensity, target)?,
    };
    let (validation_rows, pool) =
        split_validation(population.size(), study.validation_n, study.seed);
    let truths = Truths::build(&population, &iate_all, &validation_rows, &gate_columns)?;
    let validation_x: Vec<Vec<f64>> = validation_rows
        .iter()
        .map(|&r| population.row(r))
        .collect();

    let outputs: Vec<Vec<std::result::Result<RepEffects, String>>> = (0..study.replications)
        .into_par_iter()
        .map(|r| {
            run_replication(
                r,
                study,
                &population,
                &pool,
                &assign_p,
                &ite_all,
                &truths,
                &validation_x,
            )
        })
        .collect();

    Ok(reduce(study, &truths, outputs))
}

#[allow(clippy::too_many_arguments)]
fn run_replication(
    rep: u32,
    study: &StudyConfig,
    population: &Population,
    pool: &[usize],
    assign_p: &[f64],
    ite_all: &[f64],
    truths: &Truths,
    validation_x: &[Vec<f64>],
) -> Vec<std::result::Result<RepEffects, String>> {
    let rep_key = derive_key(study.seed, stream::REPLICATION, u64::from(rep));
    let fail_all = |msg: String| -> Vec<std::result::Result<RepEffects, String>> {
        study
            .estimators
            .iter()
            .map(|e| Err(format!("rep {} estimator {}: {}", rep, e.name, msg)))
            .collect()
    };

    let mut draw_rng = from_key(derive_key(rep_key, SUB_DRAW, 0));
    let picks = rand::seq::index::sample(&mut draw_rng, pool.len(), study.training_n);
    let mut rows: Vec<usize> = picks.iter().map(|i| pool[i]).collect();
    rows.sort_unstable();
    let mut assign_rng = from_key(derive_key(rep_key, SUB_ASSIGN, 0));
    let d: Vec<u16> = rows
        .iter()
        .map(|&row| u16::from(assign_rng.gen_bool(assign_p[row])))
        .collect();
    let y: Vec<f64> = rows
        .iter()
        .zip(&d)
        .map(|(&row, &di)| population.y0[row] + f64::from(di) * ite_all[row])
        .collect();
    let sample = match population.sample_for_rows(&rows, d, y) {
        Ok(s) => s,
        Err(e) => return fail_all(e.to_string()),
    };

    study
        .estimators
        .iter()
        .enumerate()
        .map(|(e, est)| {
            run_estimator(est, e as u64, rep_key, study, &sample, truths, validation_x)
                .map_err(|err| format!("rep {} estimator {}: {}", rep, est.name, err))
        })
        .collect()
}

fn run_estimator(
    est: &EstimatorSpec,
    est_index: u64,
    rep_key: u64,
    study: &StudyConfig,
    sample: &Sample,
    truths: &Truths,
    validation_x: &[Vec<f64>],
) -> Result<RepEffects> {
    match &est.kind {
        EstimatorKind::Oracle => Ok(RepEffects {
            ate: (truths.ate, 0.0),
            gates: truths
                .gates
                .iter()
                .map(|col| col.iter().map(|&t| (t, 0.0)).collect())
                .collect(),
            iates: truths.iate.iter().map(|&t| (t, 0.0)).collect(),
        }),
        EstimatorKind::NoisyOracle { sd } => {
            let mut rng = from_key(derive_key(rep_key, SUB_NOISE, est_index));
            let mut draw = |truth: f64| -> (f64, f64) {
                let z: f64 = StandardNormal.sample(&mut rng);
                (truth + sd * z, *sd)
            };
            let ate = draw(truths.ate);
            let gates = truths
                .gates
                .iter()
                .map(|col| col.iter().map(|&t| draw(t)).collect())
                .collect();
            let iates = truths.iate.iter().map(|&t| draw(t)).collect();
            Ok(RepEffects { ate, gates, iates })
        }
        EstimatorKind::Forest { forest, centering } => {
            let mut fcfg = forest.clone();
            fcfg.seed = derive_key(rep_key, SUB_FOREST, est_index);
            let split = split_halves(sample, fcfg.seed)?;
            let centered = match centering {
                Some(base) => {
                    let mut ccfg = base.clone();
                    ccfg.seed = derive_key(rep_key, SUB_CENTER, est_index);
                    Some(center_outcomes(sample, &split, &ccfg)?.0)
                }
                None => None,
            };
            let work = centered.as_ref().unwrap_or(sample);
            let forest = build_forest_with_assignment(work, &fcfg, split)?;
            let engine = EffectsEngine::new(&forest, work, None, None)?;
            let gate_cols: Vec<GroupColumn> = study
                .gate_columns
                .iter()
                .map(|name| {
                    work.groups
                        .iter()
                        .find(|g| &g.name == name)
                        .cloned()
                        .expect("sample carries population group columns")
                })
                .collect();
            let agg = engine.aggregate(&gate_cols)?;
            let ate = engine.ate(&agg, 1, 0)?;
            let mut gates = Vec::with_capacity(gate_cols.len());
            for ci in 0..gate_cols.len() {
                let table = engine.gates(&agg, ci, 1, 0)?;
                gates.push(
                    table
                        .estimates
                        .iter()
                        .map(|e| (e.point, e.std_error))
                        .collect(),
                );
            }
            let iates: Vec<(f64, f64)> = validation_x
                .par_iter()
                .map(|x| {
                    engine
                        .iate_at(x, 1, 0)
                        .map(|e| (e.point, e.std_error))
                })
                .collect::<Result<_>>()?;
            Ok(RepEffects {
                ate: (ate.point, ate.std_error),
                gates,
                iates,
            })
        }
    }
}

/// Per-parameter accumulator across replications.
struct ParamAccum {
    truth: f64,
    m: Moments,
    se_sum: f64,
    covered: u64,
}

impl ParamAccum {
    fn new(truth: f64) -> ParamAccum {
        ParamAccum {
            truth,
            m: Moments::default(),
            se_sum: 0.0,
            covered: 0,
        }
    }

    fn push(&mut self, est: f64, se: f64) {
        self.m.push(est);
        self.se_sum += se;
        if (est - self.truth).abs() <= Z90 * se {
            self.covered += 1;
        }
    }

    fn n(&self) -> f64 {
        self.m.count() as f64
    }

    fn bias(&self) -> f64 {
        self.m.mean() - self.truth
    }

    fn mse(&self) -> f64 {
        let b = self.bias();
        self.m.variance() + b * b
    }

    fn mean_se(&self) -> f64 {
        self.se_sum / self.n()
    }

    fn covp(&self) -> f64 {
        self.covered as f64 / self.n()
    }

    fn skewness(&self) -> f64 {
        if self.m.count() >= 3 && self.m.variance() > 0.0 {
            self.m.skewness()
        } else {
            f64::NAN
        }
    }

    fn kurtosis(&self) -> f64 {
        if self.m.count() >= 4 && self.m.variance() > 0.0 {
            self.m.kurtosis()
        } else {
            f64::NAN
        }
    }
}

fn mean_finite(values: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        if v.is_finite() {
            sum += v;
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn mean_jb(accs: &[ParamAccum]) -> Option<f64> {
    let defined: Vec<f64> = accs.iter().filter_map(|a| a.m.jb()).collect();
    if defined.is_empty() {
        None
    } else {
        Some(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

fn xsec_sd(values: impl Iterator<Item = f64>) -> f64 {
    let mut m = Moments::default();
    for v in values {
        m.push(v);
    }
    m.sample_sd()
}

/// Metrics row over a parameter family: average absolute bias, averaged
/// shape statistics, and the cross-sectional SD columns.
fn family_row(
    estimator: &str,
    parameter: &str,
    accs: &[ParamAccum],
    xsec_est_sum: f64,
    n_success: u64,
    failed: u32,
) -> MetricsRow {
    let g = accs.len() as f64;
    let bias = accs.iter().map(|a| a.bias().abs()).sum::<f64>() / g;
    let mse = accs.iter().map(|a| a.mse()).sum::<f64>() / g;
    let mc_sd = accs.iter().map(|a| a.m.sample_sd()).sum::<f64>() / g;
    let mean_se = accs.iter().map(|a| a.mean_se()).sum::<f64>() / g;
    let covp = accs.iter().map(|a| a.covp()).sum::<f64>() / g;
    let sd_true = xsec_sd(accs.iter().map(|a| a.truth));
    MetricsRow {
        estimator: estimator.into(),
        parameter: parameter.into(),
        bias,
        sd_true,
        sd_est: if n_success > 0 {
            xsec_est_sum / n_success as f64
        } else {
            f64::NAN
        },
        mse,
        mc_sd,
        skewness: mean_finite(accs.iter().map(|a| a.skewness())),
        kurtosis: mean_finite(accs.iter().map(|a| a.kurtosis())),
        jb: mean_jb(accs),
        mean_se,
        se_bias: mean_se - mc_sd,
        covp90: covp,
        failed_reps: failed,
    }
}

fn reduce(
    study: &StudyConfig,
    truths: &Truths,
    outputs: Vec<Vec<std::result::Result<RepEffects, String>>>,
) -> StudyResult {
    let n_est = study.estimators.len();
    let mut metrics = Vec::new();
    let mut per_rep_ate = vec![Vec::with_capacity(outputs.len()); n_est];
    let mut failures = Vec::new();

    for (e, est) in study.estimators.iter().enumerate() {
        let mut ate_acc = ParamAccum::new(truths.ate);
        let mut gate_accs: Vec<Vec<ParamAccum>> = truths
            .gates
            .iter()
            .map(|col| col.iter().map(|&t| ParamAccum::new(t)).collect())
            .collect();
        let mut iate_accs: Vec<ParamAccum> =
            truths.iate.iter().map(|&t| ParamAccum::new(t)).collect();
        let mut gate_xsec_sum = vec![0.0f64; truths.gates.len()];
        let mut iate_xsec_sum = 0.0f64;
        let mut n_success = 0u64;

        for rep_out in &outputs {
            match &rep_out[e] {
                Err(msg) => {
                    per_rep_ate[e].push(None);
                    failures.push(msg.clone());
                }
                Ok(eff) => {
                    n_success += 1;
                    per_rep_ate[e].push(Some(eff.ate));
                    ate_acc.push(eff.ate.0, eff.ate.1);
                    for (ci, col) in eff.gates.iter().enumerate() {
                        for (acc, &(est_v, se)) in gate_accs[ci].iter_mut().zip(col) {
                            acc.push(est_v, se);
                        }
                        gate_xsec_sum[ci] += xsec_sd(col.iter().map(|&(v, _)| v));
                    }
                    for (acc, &(est_v, se)) in iate_accs.iter_mut().zip(&eff.iates) {
                        acc.push(est_v, se);
                    }
                    iate_xsec_sum += xsec_sd(eff.iates.iter().map(|&(v, _)| v));
                }
            }
        }

        let failed = (outputs.len() as u64 - n_success) as u32;
        if n_success == 0 {
            metrics.push(MetricsRow {
                estimator: est.name.clone(),
                parameter: "ATE".into(),
                bias: f64::NAN,
                sd_true: 0.0,
                sd_est: 0.0,
                mse: f64::NAN,
                mc_sd: f64::NAN,
                skewness: f64::NAN,
                kurtosis: f64::NAN,
                jb: None,
                mean_se: f64::NAN,
                se_bias: f64::NAN,
                covp90: f64::NAN,
                failed_reps: failed,
            });
            continue;
        }

        metrics.push(MetricsRow {
            estimator: est.name.clone(),
            parameter: "ATE".into(),
            bias: ate_acc.bias(),
            sd_true: 0.0,
            sd_est: 0.0,
            mse: ate_acc.mse(),
            mc_sd: ate_acc.m.sample_sd(),
            skewness: ate_acc.skewness(),
            kurtosis: ate_acc.kurtosis(),
            jb: ate_acc.m.jb(),
            mean_se: ate_acc.mean_se(),
            se_bias: ate_acc.mean_se() - ate_acc.m.sample_sd(),
            covp90: ate_acc.covp(),
            failed_reps: failed,
        });
        for (ci, accs) in gate_accs.iter().enumerate() {
            metrics.push(family_row(
                &est.name,
                &format!("GATE:{}", study.gate_columns[ci]),
                accs,
                gate_xsec_sum[ci],
                n_success,
                failed,
            ));
        }
        metrics.push(family_row(
            &est.name,
            "IATE",
            &iate_accs,
            iate_xsec_sum,
            n_success,
            failed,
        ));
    }

    StudyResult {
        truths: truths.clone(),
        metrics,
        per_rep_ate,
        failures,
    }
}
