//! Scratch calibration runs for the acceptance-study parameters.

use cforest::criterion::{CriterionConfig, Variant};
use cforest::emcs::{
    run_study, EffectSpec, EstimatorKind, EstimatorSpec, PopulationConfig, Selection, StudyConfig,
};
use cforest::forest::ForestConfig;

fn forest_spec(
    name: &str,
    penalty: bool,
    center: bool,
    trees: u32,
    multiplier: Option<f64>,
) -> EstimatorSpec {
    let forest = ForestConfig {
        n_trees: trees,
        criterion: CriterionConfig {
            variant: Variant::OneFMce,
            penalty_on: penalty,
            lambda: None,
            lambda_multiplier: multiplier,
        },
        ..ForestConfig::default()
    };
    let centering = center.then(|| cforest::centering::CenteringConfig {
        folds: 2,
        forest: ForestConfig {
            criterion: CriterionConfig::default(),
            ..forest.clone()
        },
        seed: 0,
    });
    EstimatorSpec {
        name: name.into(),
        kind: EstimatorKind::Forest { forest, centering },
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let scenario = args.get(1).map(String::as_str).unwrap_or("sel");
    let reps: u32 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let trees: u32 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(60);
    let training: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let multiplier: Option<f64> = args.get(5).and_then(|s| s.parse().ok());

    match scenario {
        "rct" => rct(reps, trees, training, 1.0),
        "rct0" => rct(reps, trees, training, 0.0),
        "rct4" => rct(reps, trees, training, 0.25),
        "null" => null_loop(reps, trees, training),
        name => selection(name, reps, trees, training, multiplier),
    }
}

// Hand-rolled zero-mean null design: x ~ N(0,1)^3, d ~ Bern(1/2),
// y ~ N(0,1), no effect anywhere.
fn null_loop(reps: u32, trees: u32, training: usize) {
    use cforest::data::{FeatureKind, FeatureMeta, Sample};
    use cforest::forest::build_forest;
    use cforest::inference::EffectsEngine;
    use rand_distr::{Distribution, StandardNormal};

    let seed = 4242u64;
    let t0 = std::time::Instant::now();
    let results: Vec<(f64, f64)> = (0..reps)
        .map(|rep| {
            let rep_key = cforest::rng::derive_key(seed, cforest::rng::stream::REPLICATION, rep as u64);
            let mut rng = cforest::rng::from_key(rep_key);
            let x: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..training).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let d: Vec<u16> = (0..training).map(|_| u16::from(rand::Rng::gen_bool(&mut rng, 0.5))).collect();
            let y: Vec<f64> = (0..training).map(|_| StandardNormal.sample(&mut rng)).collect();
            let features = (0..3)
                .map(|i| FeatureMeta {
                    name: format!("x{}", i),
                    kind: FeatureKind::Ordered,
                })
                .collect();
            let sample = Sample::from_parts(y, d, x, features, vec![], 2).unwrap();
            let cfg = cforest::forest::ForestConfig {
                n_trees: trees,
                criterion: CriterionConfig {
                    variant: Variant::OneFMce,
                    penalty_on: false,
                    lambda: None,
                    lambda_multiplier: None,
                },
                seed: rep_key,
                ..cforest::forest::ForestConfig::default()
            };
            let forest = build_forest(&sample, &cfg).unwrap();
            let engine = EffectsEngine::new(&forest, &sample, None, None).unwrap();
            let agg = engine.aggregate(&[]).unwrap();
            let ate = engine.ate(&agg, 1, 0).unwrap();
            (ate.point, ate.std_error)
        })
        .collect();

    let z90 = cforest::emcs::Z90;
    let n = results.len() as f64;
    let mean = results.iter().map(|r| r.0).sum::<f64>() / n;
    let var = results.iter().map(|r| (r.0 - mean) * (r.0 - mean)).sum::<f64>() / (n - 1.0);
    let mc_sd = var.sqrt();
    let mean_se = results.iter().map(|r| r.1).sum::<f64>() / n;
    let covered = results.iter().filter(|r| r.0.abs() <= z90 * r.1).count();
    let m3 = results.iter().map(|r| (r.0 - mean).powi(3)).sum::<f64>() / n;
    let m2 = results.iter().map(|r| (r.0 - mean).powi(2)).sum::<f64>() / n;
    let m4 = results.iter().map(|r| (r.0 - mean).powi(4)).sum::<f64>() / n;
    let skew = m3 / m2.powf(1.5);
    let kurt = m4 / (m2 * m2);
    let jb = n / 6.0 * (skew * skew + (kurt - 3.0) * (kurt - 3.0) / 4.0);
    println!(
        "null: reps={} trees={} n={} bias={:+.5} mc_sd={:.5} mc_se={:.5} mean_se={:.5} se_ratio={:.3} covp={:.3} skew={:+.3} kurt={:.3} jb={:.2} elapsed={:.1}s",
        reps, trees, training, mean, mc_sd, mc_sd / n.sqrt(), mean_se, mean_se / mc_sd,
        covered as f64 / n, skew, kurt, jb, t0.elapsed().as_secs_f64()
    );
}

fn rct(reps: u32, trees: u32, training: usize, coef_scale: f64) {
    let study = StudyConfig {
        training_n: training,
        replications: reps,
        validation_n: 100,
        selection: Selection::Rct,
        estimators: vec![forest_spec("mce", false, false, trees, None)],
        gate_columns: vec![],
        seed: 424,
    };
    let base = PopulationConfig::default();
    let pop = PopulationConfig {
        size: 4000,
        seed: 41,
        outcome_coefficients: base
            .outcome_coefficients
            .iter()
            .map(|c| c * coef_scale)
            .collect(),
        ..base
    };
    let t0 = std::time::Instant::now();
    let result = run_study(&study, &pop, &EffectSpec::zero()).unwrap();
    let ate = &result.metrics[0];
    let mc_se = ate.mc_sd / (reps as f64).sqrt();
    println!(
        "rct: reps={} trees={} n={} bias={:.5} mc_sd={:.5} mc_se={:.5} covp={:.3} skew={:.3} kurt={:.3} jb={:.2} mean_se={:.5} elapsed={:.1}s",
        reps,
        trees,
        training,
        ate.bias,
        ate.mc_sd,
        mc_se,
        ate.covp90,
        ate.skewness,
        ate.kurtosis,
        ate.jb.unwrap_or(f64::NAN),
        ate.mean_se,
        t0.elapsed().as_secs_f64()
    );
    println!("failures: {}", result.failures.len());
}

fn selection(name: &str, reps: u32, trees: u32, training: usize, multiplier: Option<f64>) {
    let pop = match name {
        "sel" => PopulationConfig {
            size: 20_000,
            seed: 52,
            ..PopulationConfig::default()
        },
        "part" => PopulationConfig {
            size: 20_000,
            seed: 52,
            index_intercept: -2.5,
            index_coefficients: vec![0.6, -0.3, 0.0, 0.25, 0.0, 0.015],
            ..PopulationConfig::default()
        },
        "strong" => PopulationConfig {
            size: 20_000,
            seed: 52,
            index_intercept: -1.0,
            index_coefficients: vec![1.6, -0.8, 0.0, 0.6, 0.0, 0.04],
            outcome_noise_sd: 1.2,
            ..PopulationConfig::default()
        },
        "align" => PopulationConfig {
            size: 20_000,
            seed: 52,
            outcome_coefficients: vec![0.9, -0.5, 0.3, 0.4, 0.0, 0.02],
            ..PopulationConfig::default()
        },
        other => panic!("unknown scenario {}", other),
    };
    let study = StudyConfig {
        training_n: training,
        replications: reps,
        validation_n: 150,
        selection: Selection::LogitShifted { target: 0.5 },
        estimators: vec![
            forest_spec("mce", false, false, trees, None),
            forest_spec("pen", true, false, trees, multiplier),
            forest_spec("lc2", false, true, trees, None),
        ],
        gate_columns: vec![],
        seed: 1000,
    };
    let t0 = std::time::Instant::now();
    let result = run_study(&study, &pop, &EffectSpec::sine(2.0)).unwrap();
    println!(
        "scenario={} reps={} trees={} n={} truth.ate={:.5} elapsed={:.1}s failures={}",
        name,
        reps,
        trees,
        training,
        result.truths.ate,
        t0.elapsed().as_secs_f64(),
        result.failures.len()
    );
    for row in &result.metrics {
        if row.parameter == "ATE" || row.parameter == "IATE" {
            println!(
                "  {:>4} {:>5}: bias={:+.5} mc_sd={:.5} mc_se={:.5} mean_se={:.5} se_ratio={:.3} covp={:.3}",
                row.estimator,
                row.parameter,
                row.bias,
                row.mc_sd,
                row.mc_sd / (reps as f64).sqrt(),
                row.mean_se,
                row.mean_se / row.mc_sd,
                row.covp90
            );
        }
    }
    // Paired gap between the plain and penalty estimators.
    let a = &result.per_rep_ate[0];
    let b = &result.per_rep_ate[1];
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .filter_map(|(x, y)| match (x, y) {
            (Some((xa, _)), Some((yb, _))) => Some(xa - yb),
            _ => None,
        })
        .collect();
    let n = diffs.len() as f64;
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
    let se = (var / n).sqrt();
    println!(
        "  paired mce-pen gap: mean={:+.5} se={:.5} t={:+.2}",
        mean,
        se,
        mean / se
    );
}
