//! Dataset model, schema-driven CSV ingestion, and the random half-split
//! into tree-building and honest samples.

use crate::rng::{self, stream};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// How a feature enters split search and the matching metric.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    Ordered,
    /// Categories are stored in first-appearance order; the stored list is
    /// the prediction-time encoding.
    Unordered { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMeta {
    pub name: String,
    pub kind: FeatureKind,
}

impl FeatureMeta {
    pub fn is_unordered(&self) -> bool {
        matches!(self.kind, FeatureKind::Unordered { .. })
    }

    pub fn n_categories(&self) -> usize {
        match &self.kind {
            FeatureKind::Ordered => 0,
            FeatureKind::Unordered { categories } => categories.len(),
        }
    }
}

/// Column roles declared by the schema file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub outcome: String,
    pub treatment: String,
    pub n_treatments: usize,
    /// (name, unordered?) in declaration order.
    pub features: Vec<(String, bool)>,
    pub groups: Vec<String>,
}

impl Schema {
    /// Parses the key-value schema format:
    ///
    /// ```text
    /// # comment
    /// outcome = y
    /// treatment = d
    /// treatments = 3
    /// feature = age, ordered
    /// feature = sector, unordered
    /// group = region
    /// ```
    pub fn parse(text: &str) -> Result<Schema> {
        let mut outcome = None;
        let mut treatment = None;
        let mut n_treatments = None;
        let mut features = Vec::new();
        let mut groups = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Schema(format!("line {}: expected 'key = value'", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            match key {
                "outcome" => outcome = Some(value.to_string()),
                "treatment" => treatment = Some(value.to_string()),
                "treatments" => {
                    let m: usize = value.parse().map_err(|_| {
                        Error::Schema(format!("line {}: treatments must be an integer", lineno + 1))
                    })?;
                    n_treatments = Some(m);
                }
                "feature" => {
                    let (name, kind) = value.split_once(',').ok_or_else(|| {
                        Error::Schema(format!("line {}: expected 'feature = name, kind'", lineno + 1))
                    })?;
                    let unordered = match kind.trim() {
                        "ordered" => false,
                        "unordered" => true,
                        other => {
                            return Err(Error::Schema(format!(
                                "line {}: unknown feature kind '{}'",
                                lineno + 1,
                                other
                            )))
                        }
                    };
                    features.push((name.trim().to_string(), unordered));
                }
                "group" => groups.push(value.to_string()),
                other => {
                    return Err(Error::Schema(format!(
                        "line {}: unknown key '{}'",
                        lineno + 1,
                        other
                    )))
                }
            }
        }
        let outcome = outcome.ok_or_else(|| Error::Schema("missing 'outcome'".into()))?;
        let treatment = treatment.ok_or_else(|| Error::Schema("missing 'treatment'".into()))?;
        let n_treatments =
            n_treatments.ok_or_else(|| Error::Schema("missing 'treatments'".into()))?;
        if n_treatments < 2 {
            return Err(Error::Schema("treatments must be >= 2".into()));
        }
        if features.is_empty() {
            return Err(Error::Schema("at least one feature required".into()));
        }
        let mut names: Vec<&str> = features.iter().map(|(n, _)| n.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != features.len() {
            return Err(Error::Schema("duplicate feature names".into()));
        }
        Ok(Schema {
            outcome,
            treatment,
            n_treatments,
            features,
            groups,
        })
    }

    pub fn parse_file(path: &Path) -> Result<Schema> {
        let text = std::fs::read_to_string(path)?;
        Schema::parse(&text)
    }
}

/// Optional discrete label column used for group effects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupColumn {
    pub name: String,
    /// Distinct labels in first-appearance order.
    pub labels: Vec<String>,
    /// Per-row label index.
    pub ids: Vec<u32>,
}

/// An in-memory estimation sample. Features are stored column-major;
/// unordered features hold category indices as exact small floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub y: Vec<f64>,
    pub d: Vec<u16>,
    pub x: Vec<Vec<f64>>,
    pub features: Vec<FeatureMeta>,
    pub groups: Vec<GroupColumn>,
    pub n_treatments: usize,
}

impl Sample {
    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    /// Builds a sample from columns and validates the invariants: no NaN,
    /// treatments in range with every arm present, N >= 2M.
    pub fn from_parts(
        y: Vec<f64>,
        d: Vec<u16>,
        x: Vec<Vec<f64>>,
        features: Vec<FeatureMeta>,
        groups: Vec<GroupColumn>,
        n_treatments: usize,
    ) -> Result<Sample> {
        let n = y.len();
        if d.len() != n || x.iter().any(|col| col.len() != n) {
            return Err(Error::Sample("column lengths differ".into()));
        }
        if x.len() != features.len() {
            return Err(Error::Sample("feature metadata does not match columns".into()));
        }
        if n_treatments < 2 {
            return Err(Error::Sample("need at least two treatments".into()));
        }
        if n < 2 * n_treatments {
            return Err(Error::Sample(format!(
                "need at least {} rows for {} treatments, got {}",
                2 * n_treatments,
                n_treatments,
                n
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Sample("non-finite outcome".into()));
        }
        if x.iter().any(|col| col.iter().any(|v| !v.is_finite())) {
            return Err(Error::Sample("non-finite feature value".into()));
        }
        let mut seen = vec![false; n_treatments];
        for &di in &d {
            let di = di as usize;
            if di >= n_treatments {
                return Err(Error::Sample(format!(
                    "treatment out of range: {} with {} treatments",
                    di, n_treatments
                )));
            }
            seen[di] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Sample(format!("treatment arm {} absent", missing)));
        }
        Ok(Sample {
            y,
            d,
            x,
            features,
            groups,
            n_treatments,
        })
    }

    /// Per-arm row counts.
    pub fn arm_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_treatments];
        for &di in &self.d {
            counts[di as usize] += 1;
        }
        counts
    }

    /// One row's feature vector (category indices for unordered features).
    pub fn row(&self, i: usize) -> Vec<f64> {
        self.x.iter().map(|col| col[i]).collect()
    }
}

/// The honest split: `a` grows trees, `b` fills leaves and carries every
/// downstream weight. Both id lists are kept sorted (canonical ordering).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub a: Vec<u32>,
    pub b: Vec<u32>,
    pub seed: u64,
}

/// Loads a CSV against a schema, discovering unordered categories in file
/// order. Extra CSV columns are ignored.
pub fn load_csv(path: &Path, schema: &Schema) -> Result<Sample> {
    load_csv_with_features(path, schema, None)
}

/// Like [`load_csv`] but reuses a stored feature encoding (prediction-time
/// consistency). A category absent from the stored encoding is an error.
pub fn load_csv_with_features(
    path: &Path,
    schema: &Schema,
    existing: Option<&[FeatureMeta]>,
) -> Result<Sample> {
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
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column '{}' not in CSV header", name)))
    };

    let y_col = col_index(&schema.outcome)?;
    let d_col = col_index(&schema.treatment)?;
    let feat_cols: Vec<usize> = schema
        .features
        .iter()
        .map(|(name, _)| col_index(name))
        .collect::<Result<_>>()?;
    let group_cols: Vec<usize> = schema
        .groups
        .iter()
        .map(|name| col_index(name))
        .collect::<Result<_>>()?;

    if let Some(metas) = existing {
        if metas.len() != schema.features.len() {
            return Err(Error::Schema(
                "stored feature encoding does not match schema".into(),
            ));
        }
    }

    let mut features: Vec<FeatureMeta> = schema
        .features
        .iter()
        .map(|(name, unordered)| FeatureMeta {
            name: name.clone(),
            kind: if *unordered {
                FeatureKind::Unordered { categories: Vec::new() }
            } else {
                FeatureKind::Ordered
            },
        })
        .collect();

    let mut y = Vec::new();
    let mut d = Vec::new();
    let mut x: Vec<Vec<f64>> = vec![Vec::new(); feat_cols.len()];
    let mut groups: Vec<GroupColumn> = schema
        .groups
        .iter()
        .map(|name| GroupColumn {
            name: name.clone(),
            labels: Vec::new(),
            ids: Vec::new(),
        })
        .collect();

    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv {
            path: path_str.clone(),
            message: e.to_string(),
        })?;
        // Rows are reported 1-based, excluding the header.
        let row_no = row_idx + 1;
        let cell = |col: usize, name: &str| -> Result<&str> {
            let v = record.get(col).unwrap_or("");
            if v.is_empty() {
                Err(Error::Data {
                    row: row_no,
                    column: name.to_string(),
                    message: "empty cell".into(),
                })
            } else {
                Ok(v)
            }
        };

        let y_raw = cell(y_col, &schema.outcome)?;
        let y_val: f64 = y_raw.parse().map_err(|_| Error::Data {
            row: row_no,
            column: schema.outcome.clone(),
            message: format!("unparseable outcome '{}'", y_raw),
        })?;
        y.push(y_val);

        let d_raw = cell(d_col, &schema.treatment)?;
        let d_val: i64 = d_raw.parse().map_err(|_| Error::Data {
            row: row_no,
            column: schema.treatment.clone(),
            message: format!("unparseable treatment '{}'", d_raw),
        })?;
        if d_val < 0 || d_val as usize >= schema.n_treatments {
            return Err(Error::Data {
                row: row_no,
                column: schema.treatment.clone(),
                message: format!(
                    "treatment out of range: {} with {} treatments",
                    d_val, schema.n_treatments
                ),
            });
        }
        d.push(d_val as u16);

        for (fi, (&col, (name, unordered))) in
            feat_cols.iter().zip(schema.features.iter()).enumerate()
        {
            let raw = cell(col, name)?;
            if *unordered {
                let code = match existing {
                    Some(metas) => match &metas[fi].kind {
                        FeatureKind::Unordered { categories } => categories
                            .iter()
                            .position(|c| c == raw)
                            .ok_or_else(|| Error::UnseenCategory {
                                feature: name.clone(),
                                value: raw.to_string(),
                            })?,
                        FeatureKind::Ordered => {
                            return Err(Error::Schema(format!(
                                "stored encoding says '{}' is ordered",
                                name
                            )))
                        }
                    },
                    None => {
                        let FeatureKind::Unordered { categories } = &mut features[fi].kind else {
                            unreachable!()
                        };
                        match categories.iter().position(|c| c == raw) {
                            Some(idx) => idx,
                            None => {
                                categories.push(raw.to_string());
                                categories.len() - 1
                            }
                        }
                    }
                };
                x[fi].push(code as f64);
            } else {
                let v: f64 = raw.parse().map_err(|_| Error::Data {
                    row: row_no,
                    column: name.clone(),
                    message: format!("unparseable number '{}'", raw),
                })?;
                x[fi].push(v);
            }
        }

        for (gi, &col) in group_cols.iter().enumerate() {
            let raw = cell(col, &schema.groups[gi])?;
            let g = &mut groups[gi];
            let id = match g.labels.iter().position(|l| l == raw) {
                Some(idx) => idx,
                None => {
                    g.labels.push(raw.to_string());
                    g.labels.len() - 1
                }
            };
            g.ids.push(id as u32);
        }
    }

    let features = match existing {
        Some(metas) => metas.to_vec(),
        None => {
            for meta in &features {
                if meta.is_unordered() && meta.n_categories() < 2 {
                    return Err(Error::Schema(format!(
                        "unordered feature '{}' has fewer than 2 categories",
                        meta.name
                    )));
                }
            }
            features
        }
    };

    Sample::from_parts(y, d, x, features, groups, schema.n_treatments)
}

/// Splits the sample into equal-sized tree-building (`a`) and honest (`b`)
/// halves, stratified by treatment so every arm appears on both sides. Odd
/// arm counts put the extra row in the tree-building half.
pub fn split_halves(sample: &Sample, seed: u64) -> Result<SplitAssignment> {
    let counts = sample.arm_counts();
    if let Some(arm) = counts.iter().position(|&c| c < 2) {
        return Err(Error::Sample(format!(
            "treatment {} has fewer than 2 rows; cannot split",
            arm
        )));
    }
    let mut rng = rng::derive(seed, stream::SPLIT, 0);
    let mut a = Vec::with_capacity(sample.n_rows() / 2 + sample.n_treatments);
    let mut b = Vec::with_capacity(sample.n_rows() / 2 + sample.n_treatments);
    for arm in 0..sample.n_treatments {
        let mut ids: Vec<u32> = (0..sample.n_rows() as u32)
            .filter(|&i| sample.d[i as usize] as usize == arm)
            .collect();
        ids.shuffle(&mut rng);
        let take = ids.len().div_ceil(2);
        a.extend_from_slice(&ids[..take]);
        b.extend_from_slice(&ids[take..]);
    }
    a.sort_unstable();
    b.sort_unstable();
    Ok(SplitAssignment { a, b, seed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn schema_text() -> &'static str {
        "outcome = y\ntreatment = d\ntreatments = 2\nfeature = x1, ordered\nfeature = x2, unordered\n"
    }

    fn write_temp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_schema() {
        let s = Schema::parse(schema_text()).unwrap();
        assert_eq!(s.outcome, "y");
        assert_eq!(s.n_treatments, 2);
        assert_eq!(s.features.len(), 2);
        assert!(s.features[1].1);
    }

    #[test]
    fn schema_rejects_single_treatment() {
        let text = "outcome = y\ntreatment = d\ntreatments = 1\nfeature = x, ordered\n";
        assert!(Schema::parse(text).is_err());
    }

    #[test]
    fn loads_small_file() {
        let schema = Schema::parse(schema_text()).unwrap();
        let csv = write_temp("y,d,x1,x2\n1.5,0,0.2,a\n2.0,1,0.4,b\n0.5,0,0.9,a\n3.0,1,0.1,b\n");
        let sample = load_csv(csv.path(), &schema).unwrap();
        assert_eq!(sample.n_rows(), 4);
        assert_eq!(sample.n_features(), 2);
        assert_eq!(sample.x[1], vec![0.0, 1.0, 0.0, 1.0]);
        match &sample.features[1].kind {
            FeatureKind::Unordered { categories } => assert_eq!(categories, &["a", "b"]),
            _ => panic!("expected unordered"),
        }
    }

    #[test]
    fn treatment_out_of_range_is_an_error() {
        let schema = Schema::parse(schema_text()).unwrap();
        let csv = write_temp("y,d,x1,x2\n1.0,0,0.2,a\n2.0,3,0.4,b\n0.5,0,0.9,a\n3.0,1,0.1,b\n");
        let err = load_csv(csv.path(), &schema).unwrap_err();
        assert!(err.to_string().contains("treatment out of range"));
    }

    #[test]
    fn empty_cell_names_row_and_column() {
        let schema = Schema::parse(schema_text()).unwrap();
        let csv = write_temp("y,d,x1,x2\n1.0,0,0.2,a\n,1,0.4,b\n0.5,0,0.9,a\n3.0,1,0.1,b\n");
        let err = load_csv(csv.path(), &schema).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("row 2"), "{msg}");
        assert!(msg.contains('y'), "{msg}");
    }

    #[test]
    fn unseen_category_with_stored_encoding() {
        let schema = Schema::parse(schema_text()).unwrap();
        let train = write_temp("y,d,x1,x2\n1.0,0,0.2,a\n2.0,1,0.4,b\n0.5,0,0.9,a\n3.0,1,0.1,b\n");
        let sample = load_csv(train.path(), &schema).unwrap();
        let pred = write_temp("y,d,x1,x2\n1.0,0,0.2,c\n2.0,1,0.4,b\n0.5,0,0.9,a\n3.0,1,0.1,b\n");
        let err = load_csv_with_features(pred.path(), &schema, Some(&sample.features)).unwrap_err();
        assert!(matches!(err, Error::UnseenCategory { .. }));
    }

    #[test]
    fn sample_round_trips_through_json() {
        let schema = Schema::parse(schema_text()).unwrap();
        let csv = write_temp("y,d,x1,x2\n1.5,0,0.25,a\n2.0,1,0.4,b\n0.5,0,0.9,a\n3.0,1,0.125,b\n");
        let sample = load_csv(csv.path(), &schema).unwrap();
        let json = serde_json::to_string(&sample).unwrap();
        let back: Sample = serde_json::from_str(&json).unwrap();
        assert_eq!(sample, back);
    }

    fn balanced_sample(n: usize) -> Sample {
        let y: Vec<f64> = (0..n).map(|i| i as f64 * 0.5).collect();
        let d: Vec<u16> = (0..n).map(|i| (i % 2) as u16).collect();
        let x = vec![(0..n).map(|i| (i as f64).sin()).collect()];
        Sample::from_parts(
            y,
            d,
            x,
            vec![FeatureMeta {
                name: "x1".into(),
                kind: FeatureKind::Ordered,
            }],
            vec![],
            2,
        )
        .unwrap()
    }

    #[test]
    fn split_is_balanced_and_stratified() {
        let sample = balanced_sample(100);
        let split = split_halves(&sample, 7).unwrap();
        assert_eq!(split.a.len(), 50);
        assert_eq!(split.b.len(), 50);
        for ids in [&split.a, &split.b] {
            let arms: Vec<usize> = ids.iter().map(|&i| sample.d[i as usize] as usize).collect();
            assert!(arms.contains(&0) && arms.contains(&1));
        }
        let mut all: Vec<u32> = split.a.iter().chain(split.b.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<u32>>());
    }

    #[test]
    fn split_is_deterministic() {
        let sample = balanced_sample(100);
        assert_eq!(split_halves(&sample, 7).unwrap(), split_halves(&sample, 7).unwrap());
        assert_ne!(split_halves(&sample, 7).unwrap(), split_halves(&sample, 8).unwrap());
    }

    #[test]
    fn odd_sample_splits_into_50_51() {
        let sample = balanced_sample(101);
        let split = split_halves(&sample, 3).unwrap();
        let mut sizes = [split.a.len(), split.b.len()];
        sizes.sort_unstable();
        assert_eq!(sizes, [50, 51]);
    }

    #[test]
    fn per_arm_imbalance_stays_within_one() {
        // 7 treated, 13 controls: each arm must split ceil/floor.
        let y: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let d: Vec<u16> = (0..20).map(|i| u16::from(i < 7)).collect();
        let x = vec![(0..20).map(|i| i as f64).collect()];
        let sample = Sample::from_parts(
            y,
            d,
            x,
            vec![FeatureMeta {
                name: "x1".into(),
                kind: FeatureKind::Ordered,
            }],
            vec![],
            2,
        )
        .unwrap();
        let split = split_halves(&sample, 1).unwrap();
        let count = |ids: &[u32], arm: u16| ids.iter().filter(|&&i| sample.d[i as usize] == arm).count();
        assert_eq!(count(&split.a, 1), 4);
        assert_eq!(count(&split.b, 1), 3);
        assert_eq!(count(&split.a, 0), 7);
        assert_eq!(count(&split.b, 0), 6);
    }
}
