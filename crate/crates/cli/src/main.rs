//! Command-line front end for the cforest library.
//!
//! Four subcommands cover the pipeline: `train` fits an honest forest and
//! writes a self-contained model file, `effects` turns a model into ATE,
//! GATE, and IATE tables with weights-based standard errors, `diagnose`
//! reports common support and covariate balance, and `simulate` runs a
//! Monte Carlo study from a key-value config file.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use cforest::centering::{center_outcomes, CenteringConfig, CenteringModel};
use cforest::criterion::{CriterionConfig, Variant};
use cforest::data::{
    load_csv, split_halves, FeatureKind, FeatureMeta, GroupColumn, Sample, Schema,
};
use cforest::diagnostics::{
    balance_report, propensities_for_rows, trim_support, SupportRule,
};
use cforest::emcs::{parse_study_file, render_csv};
use cforest::forest::{
    build_forest_with_assignment, oob_score, Forest, ForestConfig,
};
use cforest::inference::{estimate_effect, EffectEstimate, EffectsEngine, Estimand};
use cforest::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const FORMAT_VERSION: u32 = 1;
const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser)]
#[command(name = "cforest", version, about = "Honest causal forests for multiple treatments")]
struct Cli {
    /// Worker threads for parallel sections (0 keeps the library default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a forest and write a self-contained model file
    Train(TrainArgs),
    /// Effect tables (ATE, GATEs, IATEs) from a trained model
    Effects(EffectsArgs),
    /// Common-support and covariate-balance diagnostics for a model
    Diagnose(DiagnoseArgs),
    /// Run a Monte Carlo study from a config file
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Training data CSV
    #[arg(long)]
    data: PathBuf,

    /// Schema file describing outcome, treatment, features, and groups
    #[arg(long)]
    schema: PathBuf,

    /// Output directory for model.json and train.log
    #[arg(long)]
    out: PathBuf,

    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// Split criterion: basic, one_f, one_f_mce, one_f_vart
    #[arg(long, default_value = "one_f_mce")]
    variant: String,

    /// Add the propensity-heterogeneity penalty to the split criterion
    #[arg(long)]
    penalty: bool,

    /// Penalty weight (default: outcome variance on the tree-building half)
    #[arg(long)]
    lambda: Option<f64>,

    /// Cross-fitting folds for local centering (omit to train on raw outcomes)
    #[arg(long)]
    center_folds: Option<usize>,

    /// Number of trees
    #[arg(long, default_value_t = 1000)]
    trees: u32,

    /// Minimum observations per treatment arm in a leaf
    #[arg(long, default_value_t = 2)]
    min_leaf: u32,

    /// Regularity fraction: each split keeps at least this share of every arm
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,

    /// Pick the per-split feature draw mean by out-of-bag error
    #[arg(long)]
    tune: bool,
}

#[derive(Args)]
struct EffectsArgs {
    /// Model file written by `train`
    #[arg(long)]
    model: PathBuf,

    /// Output directory for effects.csv, wald.csv, iate.csv, summary.txt
    #[arg(long)]
    out: PathBuf,

    /// Feature CSV of prediction points for the IATE table
    /// (default: the model's honest rows)
    #[arg(long)]
    predict: Option<PathBuf>,

    /// Comma-separated group columns for GATEs (default: all in the model)
    #[arg(long)]
    groups: Option<String>,

    /// Comma-separated conditioning treatments for aggregation
    /// (default: all arms)
    #[arg(long)]
    delta_set: Option<String>,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Model file written by `train`
    #[arg(long)]
    model: PathBuf,

    /// Output directory for support.csv and balance.csv
    #[arg(long)]
    out: PathBuf,

    /// Lower propensity bound of the common-support rule
    #[arg(long, default_value_t = 0.05)]
    support_low: f64,

    /// Upper propensity bound of the common-support rule
    #[arg(long, default_value_t = 0.95)]
    support_high: f64,
}

#[derive(Args)]
struct SimulateArgs {
    /// Study config file (key = value lines)
    #[arg(long)]
    study: PathBuf,

    /// Output directory for metrics.csv
    #[arg(long)]
    out: PathBuf,

    /// Override the study file's seed
    #[arg(long)]
    seed: Option<u64>,
}

/// Everything `effects` and `diagnose` need, so a model file works without
/// re-supplying the training data. The stored sample is the one the forest
/// indexes (centered outcomes when centering was on).
#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    tool_version: String,
    seed: u64,
    config_hash: String,
    /// Digest of the raw training data (outcomes before centering).
    data_fingerprint: String,
    schema: Schema,
    sample: Sample,
    forest: Forest,
    centering: Option<CenteringModel>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests land here too; only real usage
            // errors exit nonzero.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Effects(args) => cmd_effects(args),
        Command::Diagnose(args) => cmd_diagnose(args),
        Command::Simulate(args) => cmd_simulate(args),
    }
}

fn short_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Digest of the raw inputs: outcome bits, treatments, feature bits in
/// column order. Bit-exact reruns of the same CSV give the same value.
fn data_fingerprint(sample: &Sample) -> String {
    let mut hasher = Sha256::new();
    for v in &sample.y {
        hasher.update(v.to_bits().to_le_bytes());
    }
    for d in &sample.d {
        hasher.update(d.to_le_bytes());
    }
    for column in &sample.x {
        for v in column {
            hasher.update(v.to_bits().to_le_bytes());
        }
    }
    let digest = hasher.finalize();
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

fn config_digest(cfg: &ForestConfig, centering: Option<&CenteringConfig>) -> Result<String> {
    let blob = serde_json::to_string(&(cfg, centering))
        .map_err(|e| Error::Model(format!("config serialization: {e}")))?;
    Ok(short_digest(blob.as_bytes()))
}

fn provenance(seed: u64, config_hash: &str) -> String {
    format!("# cforest {TOOL_VERSION} seed={seed} config={config_hash}")
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    fs::write(path, content)?;
    Ok(())
}

fn read_model(path: &Path) -> Result<ModelFile> {
    let text = fs::read_to_string(path)?;
    let model: ModelFile = serde_json::from_str(&text)
        .map_err(|e| Error::Model(format!("{}: {e}", path.display())))?;
    if model.format_version != FORMAT_VERSION {
        return Err(Error::Model(format!(
            "model format {} unsupported (expected {})",
            model.format_version, FORMAT_VERSION
        )));
    }
    Ok(model)
}

fn parse_u16_list(text: &str, what: &str) -> Result<Vec<u16>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<u16>()
                .map_err(|_| Error::Config(format!("{what}: '{t}' is not a treatment index")))
        })
        .collect()
}

fn contrast_label(m: u16, l: u16) -> String {
    format!("{m}-{l}")
}

// ---------------------------------------------------------------- train

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let schema = Schema::parse_file(&args.schema)?;
    let sample = load_csv(&args.data, &schema)?;

    let mut cfg = ForestConfig {
        n_trees: args.trees,
        min_leaf_per_arm: args.min_leaf,
        min_leaf_total: 2 * args.min_leaf + 1,
        alpha: args.alpha,
        criterion: CriterionConfig {
            variant: Variant::from_cli_name(&args.variant)?,
            penalty_on: args.penalty,
            lambda: args.lambda,
            lambda_multiplier: None,
        },
        seed: args.seed,
        ..ForestConfig::default()
    };

    let mut log = String::new();
    let _ = writeln!(log, "cforest {TOOL_VERSION} train");
    let _ = writeln!(log, "data = {}", args.data.display());
    let _ = writeln!(
        log,
        "rows = {}, features = {}, treatments = {}",
        sample.n_rows(),
        sample.n_features(),
        sample.n_treatments
    );
    let _ = writeln!(log, "seed = {}", args.seed);

    if args.tune {
        let p = sample.n_features() as f64;
        let mut candidates = vec![(p / 10.0).max(1.0), (2.0 * p / 3.0).max(1.0)];
        candidates.dedup();
        let mut best: Option<(f64, f64)> = None;
        for &mean in &candidates {
            // Scoring runs on a capped forest; the chosen mean carries over
            // to the full-size build.
            let probe = ForestConfig {
                n_trees: cfg.n_trees.min(50),
                feature_draw_mean: Some(mean),
                ..cfg.clone()
            };
            let score = oob_score(&sample, &probe)?;
            let _ = writeln!(log, "oob feature_mean = {mean} -> {score}");
            if best.map_or(true, |(s, _)| score < s) {
                best = Some((score, mean));
            }
        }
        let (_, winner) = best.expect("at least one tuning candidate");
        cfg.feature_draw_mean = Some(winner);
        let _ = writeln!(log, "tuned feature_mean = {winner}");
    }

    let split = split_halves(&sample, args.seed)?;
    let _ = writeln!(
        log,
        "split: tree half = {}, honest half = {}",
        split.a.len(),
        split.b.len()
    );

    let centering_cfg = args.center_folds.map(|folds| CenteringConfig {
        folds,
        forest: ForestConfig {
            criterion: CriterionConfig::default(),
            ..cfg.clone()
        },
        seed: args.seed,
    });
    let (work, centering_model) = match &centering_cfg {
        Some(ccfg) => {
            let (work, model) = center_outcomes(&sample, &split, ccfg)?;
            let _ = writeln!(log, "local centering: {} folds", ccfg.folds);
            (work, Some(model))
        }
        None => (sample.clone(), None),
    };

    let forest = build_forest_with_assignment(&work, &cfg, split)?;
    let _ = writeln!(
        log,
        "criterion = {}, penalty = {}, lambda_eff = {}",
        cfg.criterion.variant.cli_name(),
        forest.criterion.penalty_on,
        forest.criterion.lambda_eff
    );
    let _ = writeln!(log, "trees = {}", forest.trees.len());

    let config_hash = config_digest(&cfg, centering_cfg.as_ref())?;
    let _ = writeln!(log, "config hash = {config_hash}");
    let fingerprint = data_fingerprint(&sample);
    let _ = writeln!(log, "data fingerprint = {fingerprint}");

    let model = ModelFile {
        format_version: FORMAT_VERSION,
        tool_version: TOOL_VERSION.to_string(),
        seed: args.seed,
        config_hash,
        data_fingerprint: fingerprint,
        schema,
        sample: work,
        forest,
        centering: centering_model,
    };
    fs::create_dir_all(&args.out)?;
    let model_path = args.out.join("model.json");
    let blob = serde_json::to_string(&model)
        .map_err(|e| Error::Model(format!("model serialization: {e}")))?;
    write_text(&model_path, &blob)?;
    write_text(&args.out.join("train.log"), &log)?;
    println!("wrote {}", model_path.display());
    Ok(())
}

// -------------------------------------------------------------- effects

fn cmd_effects(args: &EffectsArgs) -> Result<()> {
    let model = read_model(&args.model)?;
    let delta = match &args.delta_set {
        Some(text) => Some(parse_u16_list(text, "--delta-set")?),
        None => None,
    };
    let engine = EffectsEngine::new(&model.forest, &model.sample, None, delta)?;

    let columns: Vec<GroupColumn> = match &args.groups {
        Some(list) => list
            .split(',')
            .map(|name| {
                let name = name.trim();
                model
                    .sample
                    .groups
                    .iter()
                    .find(|g| g.name == name)
                    .cloned()
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "group column '{}' not in model (available: {})",
                            name,
                            model
                                .sample
                                .groups
                                .iter()
                                .map(|g| g.name.as_str())
                                .collect::<Vec<_>>()
                                .join(", ")
                        ))
                    })
            })
            .collect::<Result<_>>()?,
        None => model.sample.groups.clone(),
    };
    let agg = engine.aggregate(&columns)?;
    let pairs = engine.pairs();
    let header = provenance(model.seed, &model.config_hash);

    let mut effects_csv = format!("{header}\nkind,contrast,column,group,estimate,std_error,p_value,unreliable\n");
    let mut wald_csv = format!("{header}\ncolumn,contrast,statistic,dof,p_value,rank_deficient\n");
    let mut summary = format!(
        "cforest {TOOL_VERSION} effects\nseed = {}, config = {}\n",
        model.seed, model.config_hash
    );
    let _ = writeln!(
        summary,
        "honest rows = {}, neighbors k = {}, conditioning treatments = {}",
        engine.n2(),
        engine.k,
        engine
            .delta
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join(",")
    );

    let push_effect = |csv: &mut String, kind: &str, contrast: &str, column: &str, group: &str, e: &EffectEstimate| {
        let _ = writeln!(
            csv,
            "{kind},{contrast},{column},{group},{},{},{},{}",
            e.point, e.std_error, e.p_value, e.unreliable
        );
    };

    let _ = writeln!(summary, "\nATE");
    for &(m, l) in &pairs {
        let est = engine.ate(&agg, m, l)?;
        push_effect(&mut effects_csv, "ate", &contrast_label(m, l), "", "", &est);
        let _ = writeln!(
            summary,
            "  {}: {:.6} (se {:.6}, p {:.4})",
            contrast_label(m, l),
            est.point,
            est.std_error,
            est.p_value
        );
    }

    for (ci, column) in columns.iter().enumerate() {
        for &(m, l) in &pairs {
            let table = engine.gates(&agg, ci, m, l)?;
            let _ = writeln!(
                summary,
                "\nGATE by {} (contrast {})",
                column.name,
                contrast_label(m, l)
            );
            for est in &table.estimates {
                let label = match &est.estimand {
                    Estimand::Gate { label, .. } => label.clone(),
                    other => other.to_string(),
                };
                push_effect(
                    &mut effects_csv,
                    "gate",
                    &contrast_label(m, l),
                    &column.name,
                    &label,
                    est,
                );
                let _ = writeln!(
                    summary,
                    "  {}: {:.6} (se {:.6}, p {:.4})",
                    label, est.point, est.std_error, est.p_value
                );
            }
            // Adjacent-group differences: subtracting two GATE weight
            // vectors gives a signed estimand with its own standard error.
            // Differences at the level of accumulated rounding are exact
            // zeros, matching the Wald test's treatment.
            for g in 1..table.estimates.len() {
                let hi = &table.estimates[g];
                let lo = &table.estimates[g - 1];
                let mut weights: Vec<f64> = hi
                    .weights
                    .iter()
                    .zip(&lo.weights)
                    .map(|(a, b)| a - b)
                    .collect();
                let scale = hi
                    .weights
                    .iter()
                    .chain(&lo.weights)
                    .fold(0.0f64, |m, &v| m.max(v.abs()));
                let tol = 2.0 * weights.len() as f64 * f64::EPSILON * scale;
                if weights.iter().all(|v| v.abs() <= tol) {
                    weights.iter_mut().for_each(|v| *v = 0.0);
                }
                let label = format!(
                    "{} - {}",
                    column.labels[g],
                    column.labels[g - 1]
                );
                let est = estimate_effect(
                    Estimand::Gate {
                        m,
                        l,
                        column: column.name.clone(),
                        label: label.clone(),
                    },
                    weights,
                    &engine.view.y,
                    engine.k,
                )?;
                push_effect(
                    &mut effects_csv,
                    "gate_diff",
                    &contrast_label(m, l),
                    &column.name,
                    &label,
                    &est,
                );
                let _ = writeln!(
                    summary,
                    "  {}: {:.6} (se {:.6}, p {:.4})",
                    label, est.point, est.std_error, est.p_value
                );
            }
            let _ = writeln!(
                wald_csv,
                "{},{},{},{},{},{}",
                column.name,
                contrast_label(m, l),
                table.wald.statistic,
                table.wald.dof,
                table.wald.p_value,
                table.wald.rank_deficient
            );
            let _ = writeln!(
                summary,
                "  Wald equality: chi2 {:.4}, dof {}, p {:.4}",
                table.wald.statistic, table.wald.dof, table.wald.p_value
            );
        }
    }

    // IATE panel: either supplied prediction points or the honest rows.
    let points: Vec<Vec<f64>> = match &args.predict {
        Some(path) => read_feature_frame(path, &model.forest.features)?,
        None => engine
            .view
            .rows
            .iter()
            .map(|&r| model.sample.row(r as usize))
            .collect(),
    };
    let mut iate_csv = format!("{header}\npoint,contrast,estimate,std_error,p_value\n");
    for &(m, l) in &pairs {
        use rayon::prelude::*;
        let estimates: Vec<EffectEstimate> = points
            .par_iter()
            .map(|x| engine.iate_at(x, m, l))
            .collect::<Result<_>>()?;
        let n = estimates.len() as f64;
        let mean = estimates.iter().map(|e| e.point).sum::<f64>() / n;
        let sd = if estimates.len() > 1 {
            (estimates
                .iter()
                .map(|e| (e.point - mean) * (e.point - mean))
                .sum::<f64>()
                / (n - 1.0))
                .sqrt()
        } else {
            0.0
        };
        let below = estimates.iter().filter(|e| e.point < 0.0).count() as f64 / n;
        let above = estimates.iter().filter(|e| e.point > 0.0).count() as f64 / n;
        let mean_se = estimates.iter().map(|e| e.std_error).sum::<f64>() / n;
        let significant = estimates.iter().filter(|e| e.p_value < 0.05).count() as f64 / n;
        let _ = writeln!(
            summary,
            "\nIATE (contrast {}, {} points)\n  mean {:.6}, sd {:.6}, share<0 {:.4}, share>0 {:.4}, mean se {:.6}, share p<0.05 {:.4}",
            contrast_label(m, l),
            estimates.len(),
            mean,
            sd,
            below,
            above,
            mean_se,
            significant
        );
        for (i, est) in estimates.iter().enumerate() {
            let _ = writeln!(
                iate_csv,
                "{i},{},{},{},{}",
                contrast_label(m, l),
                est.point,
                est.std_error,
                est.p_value
            );
        }
    }

    fs::create_dir_all(&args.out)?;
    write_text(&args.out.join("effects.csv"), &effects_csv)?;
    write_text(&args.out.join("wald.csv"), &wald_csv)?;
    write_text(&args.out.join("iate.csv"), &iate_csv)?;
    write_text(&args.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

/// Reads feature columns from a CSV against a stored encoding. Unordered
/// values must match a training-time category.
fn read_feature_frame(path: &Path, metas: &[FeatureMeta]) -> Result<Vec<Vec<f64>>> {
    let path_str = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Csv {
            path: path_str.clone(),
            message: e.to_string(),
        })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: path_str.clone(),
            message: e.to_string(),
        })?
        .clone();
    let cols: Vec<usize> = metas
        .iter()
        .map(|meta| {
            headers
                .iter()
                .position(|h| h == meta.name)
                .ok_or_else(|| Error::Schema(format!("column '{}' not in CSV header", meta.name)))
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv {
            path: path_str.clone(),
            message: e.to_string(),
        })?;
        let row_no = row_idx + 1;
        let mut row = Vec::with_capacity(metas.len());
        for (meta, &col) in metas.iter().zip(&cols) {
            let raw = record.get(col).unwrap_or("");
            if raw.is_empty() {
                return Err(Error::Data {
                    row: row_no,
                    column: meta.name.clone(),
                    message: "empty cell".into(),
                });
            }
            let value = match &meta.kind {
                FeatureKind::Ordered => raw.parse::<f64>().map_err(|_| Error::Data {
                    row: row_no,
                    column: meta.name.clone(),
                    message: format!("unparseable value '{raw}'"),
                })?,
                FeatureKind::Unordered { categories } => categories
                    .iter()
                    .position(|c| c == raw)
                    .ok_or_else(|| Error::UnseenCategory {
                        feature: meta.name.clone(),
                        value: raw.to_string(),
                    })? as f64,
            };
            row.push(value);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Csv {
            path: path_str,
            message: "no data rows".into(),
        });
    }
    Ok(rows)
}

// ------------------------------------------------------------- diagnose

fn cmd_diagnose(args: &DiagnoseArgs) -> Result<()> {
    let model = read_model(&args.model)?;
    let rule = SupportRule {
        q_low: args.support_low,
        q_high: args.support_high,
    };
    rule.validate()?;

    let rows: Vec<u32> = (0..model.sample.n_rows() as u32).collect();
    let propensities = propensities_for_rows(&model.forest, &model.sample, &rows)?;
    let report = trim_support(&rows, &propensities, &rule)?;

    let header = provenance(model.seed, &model.config_hash);
    let arms = model.sample.n_treatments;
    let mut support_csv = format!("{header}\nrow");
    for d in 0..arms {
        let _ = write!(support_csv, ",p{d}");
    }
    support_csv.push_str(",kept\n");
    let kept: std::collections::HashSet<u32> = report.kept.iter().copied().collect();
    for (&row, p) in rows.iter().zip(&propensities) {
        let _ = write!(support_csv, "{row}");
        for v in p {
            let _ = write!(support_csv, ",{v}");
        }
        let _ = writeln!(support_csv, ",{}", kept.contains(&row));
    }

    let engine = EffectsEngine::new(&model.forest, &model.sample, None, None)?;
    let agg = engine.aggregate(&[])?;
    let mut balance_csv =
        format!("{header}\ncontrast,feature,mean_m,mean_l,stand_diff_pct,post_diff\n");
    for (m, l) in engine.pairs() {
        for row in balance_report(&engine, &agg, m, l)? {
            let _ = writeln!(
                balance_csv,
                "{},{},{},{},{},{}",
                contrast_label(m, l),
                row.feature,
                row.pre_mean_m,
                row.pre_mean_l,
                row.pre_stand_diff,
                row.post_diff
            );
        }
    }

    fs::create_dir_all(&args.out)?;
    write_text(&args.out.join("support.csv"), &support_csv)?;
    write_text(&args.out.join("balance.csv"), &balance_csv)?;
    println!("{}", report.summary());
    let violations = report
        .arm_violations
        .iter()
        .enumerate()
        .map(|(d, n)| format!("arm {d}: {n}"))
        .collect::<Vec<_>>()
        .join(", ");
    println!("bound violations by arm: {violations}");
    Ok(())
}

// ------------------------------------------------------------- simulate

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let text = fs::read_to_string(&args.study)?;
    let mut file = parse_study_file(&text)?;
    if let Some(seed) = args.seed {
        file.study.seed = seed;
    }
    let result = cforest::emcs::run_study(&file.study, &file.population, &file.effect)?;

    fs::create_dir_all(&args.out)?;
    let header = provenance(file.study.seed, &short_digest(text.as_bytes()));
    let csv = format!("{header}\n{}", render_csv(&result.metrics));
    write_text(&args.out.join("metrics.csv"), &csv)?;
    for failure in &result.failures {
        eprintln!("warning: {failure}");
    }
    println!(
        "wrote {} ({} rows, {} failed replications)",
        args.out.join("metrics.csv").display(),
        result.metrics.len(),
        result.failures.len()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fingerprint_tracks_content() {
        let features = vec![FeatureMeta {
            name: "x0".into(),
            kind: FeatureKind::Ordered,
        }];
        let a = Sample::from_parts(
            vec![1.0, 2.0, 3.0, 4.0],
            vec![0, 1, 0, 1],
            vec![vec![0.0, 1.0, 2.0, 3.0]],
            features.clone(),
            vec![],
            2,
        )
        .unwrap();
        let mut b = a.clone();
        assert_eq!(data_fingerprint(&a), data_fingerprint(&b));
        b.y[0] = 1.5;
        assert_ne!(data_fingerprint(&a), data_fingerprint(&b));
    }

    #[test]
    fn delta_list_parses_and_rejects() {
        assert_eq!(parse_u16_list("0, 2", "--delta-set").unwrap(), vec![0, 2]);
        assert!(parse_u16_list("0,x", "--delta-set").is_err());
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Config("bad".into())), 1);
        assert_eq!(exit_code(&Error::Sample("bad".into())), 2);
        assert_eq!(exit_code(&Error::Numerical("bad".into())), 3);
        assert_eq!(
            exit_code(&Error::UnseenCategory {
                feature: "f".into(),
                value: "v".into()
            }),
            2
        );
    }

    #[test]
    fn feature_frame_reads_ordered_and_unordered() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("points.csv");
        fs::write(&path, "x0,sector\n1.5,services\n2.0,industry\n").unwrap();
        let metas = vec![
            FeatureMeta {
                name: "x0".into(),
                kind: FeatureKind::Ordered,
            },
            FeatureMeta {
                name: "sector".into(),
                kind: FeatureKind::Unordered {
                    categories: vec!["industry".into(), "services".into()],
                },
            },
        ];
        let rows = read_feature_frame(&path, &metas).unwrap();
        assert_eq!(rows, vec![vec![1.5, 1.0], vec![2.0, 0.0]]);

        fs::write(&path, "x0,sector\n1.5,farming\n").unwrap();
        let err = read_feature_frame(&path, &metas).unwrap_err();
        assert!(matches!(err, Error::UnseenCategory { .. }));
    }
}
