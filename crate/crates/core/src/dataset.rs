//! Labelled examples, 0/1 loss, deterministic splitting, CSV ingestion and a
//! synthetic generator with planted per-group structure.
//!
//! Feature values are stored as `f64`. Categorical features hold their level
//! code (`0..arity`) as an integral float so that every predictor in the DSL
//! can read a row as a plain `&[f64]`.

use std::collections::{BTreeSet, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::predictor::{Classifier, Predictor};
use crate::Label;

/// Tolerance used when checking that split fractions sum to one.
pub const FRACTION_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("label column `{0}` not found in header")]
    MissingLabelColumn(String),
    #[error("line {line}: label value `{value}` is not 0 or 1")]
    NonBinaryLabel { line: usize, value: String },
    #[error("line {line}: expected {expected} fields, found {found}")]
    RowArity {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: value `{value}` is not a level of categorical column `{column}`")]
    UnknownCategory {
        line: usize,
        column: String,
        value: String,
    },
    #[error("line {line}: value `{value}` in numeric column `{column}` is not a number")]
    InvalidNumber {
        line: usize,
        column: String,
        value: String,
    },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("row {row}: {reason}")]
    InvalidRow { row: usize, reason: String },
    #[error("invalid split fractions: {0}")]
    InvalidFractions(String),
    #[error("conditional loss is undefined on an empty group")]
    EmptyGroup,
    #[error("predictor reads feature index {required} but schema has {available} features")]
    SchemaMismatch { required: usize, available: usize },
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    /// Levels are coded `0..arity`. `levels` optionally carries the text of
    /// each code as it appears in CSV files; when empty the code itself is
    /// the text.
    Categorical {
        arity: u32,
        #[serde(default, skip_serializing_if = "Vec::is_empty")]
        levels: Vec<String>,
    },
}

impl FeatureKind {
    pub fn categorical(arity: u32) -> Self {
        FeatureKind::Categorical {
            arity,
            levels: Vec::new(),
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, FeatureKind::Numeric)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
}

/// Ordered feature list shared by a dataset and every predictor evaluated on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemaDoc", into = "SchemaDoc")]
pub struct FeatureSchema {
    features: Vec<Feature>,
}

#[derive(Serialize, Deserialize)]
struct SchemaDoc {
    features: Vec<Feature>,
}

impl TryFrom<SchemaDoc> for FeatureSchema {
    type Error = DatasetError;

    fn try_from(doc: SchemaDoc) -> Result<Self> {
        FeatureSchema::new(doc.features)
    }
}

impl From<FeatureSchema> for SchemaDoc {
    fn from(schema: FeatureSchema) -> Self {
        SchemaDoc {
            features: schema.features,
        }
    }
}

impl FeatureSchema {
    pub fn new(features: Vec<Feature>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for f in &features {
            if f.name.is_empty() {
                return Err(DatasetError::InvalidSchema("empty feature name".into()));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(DatasetError::InvalidSchema(format!(
                    "duplicate feature name `{}`",
                    f.name
                )));
            }
            if let FeatureKind::Categorical { arity, levels } = &f.kind {
                if *arity < 2 {
                    return Err(DatasetError::InvalidSchema(format!(
                        "categorical feature `{}` has arity {arity} < 2",
                        f.name
                    )));
                }
                if !levels.is_empty() && levels.len() != *arity as usize {
                    return Err(DatasetError::InvalidSchema(format!(
                        "categorical feature `{}` lists {} levels for arity {arity}",
                        f.name,
                        levels.len()
                    )));
                }
            }
        }
        Ok(FeatureSchema { features })
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("schema serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    fn check_value(&self, column: usize, value: f64) -> std::result::Result<(), String> {
        match &self.features[column].kind {
            FeatureKind::Numeric if value.is_finite() => Ok(()),
            FeatureKind::Numeric => Err(format!("non-finite value in `{}`", self.features[column].name)),
            FeatureKind::Categorical { arity, .. } => {
                if value.fract() == 0.0 && value >= 0.0 && value < f64::from(*arity) {
                    Ok(())
                } else {
                    Err(format!(
                        "categorical value {value} out of range for `{}` (arity {arity})",
                        self.features[column].name
                    ))
                }
            }
        }
    }
}

/// An immutable table of feature rows with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    schema: Arc<FeatureSchema>,
    values: Vec<f64>,
    labels: Vec<Label>,
}

impl LabeledDataset {
    pub fn new(schema: FeatureSchema, rows: Vec<Vec<f64>>, labels: Vec<Label>) -> Result<Self> {
        Self::with_shared_schema(Arc::new(schema), rows, labels)
    }

    pub fn with_shared_schema(
        schema: Arc<FeatureSchema>,
        rows: Vec<Vec<f64>>,
        labels: Vec<Label>,
    ) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(DatasetError::InvalidRow {
                row: rows.len().min(labels.len()),
                reason: format!("{} rows but {} labels", rows.len(), labels.len()),
            });
        }
        let width = schema.len();
        let mut values = Vec::with_capacity(rows.len() * width);
        for (i, (row, &label)) in rows.iter().zip(&labels).enumerate() {
            if row.len() != width {
                return Err(DatasetError::InvalidRow {
                    row: i,
                    reason: format!("expected {width} values, found {}", row.len()),
                });
            }
            if label > 1 {
                return Err(DatasetError::InvalidRow {
                    row: i,
                    reason: format!("label {label} is not binary"),
                });
            }
            for (c, &v) in row.iter().enumerate() {
                schema
                    .check_value(c, v)
                    .map_err(|reason| DatasetError::InvalidRow { row: i, reason })?;
            }
            values.extend_from_slice(row);
        }
        Ok(LabeledDataset {
            schema,
            values,
            labels,
        })
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn shared_schema(&self) -> Arc<FeatureSchema> {
        Arc::clone(&self.schema)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.schema.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.width();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn label(&self, i: usize) -> Label {
        self.labels[i]
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    /// Iterates `(row, label)` pairs in order.
    pub fn iter(&self) -> impl ExactSizeIterator<Item = (&[f64], Label)> + '_ {
        (0..self.len()).map(move |i| (self.row(i), self.labels[i]))
    }

    /// Rows at `indices`, in the given order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let w = self.width();
        let mut values = Vec::with_capacity(indices.len() * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            values.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset {
            schema: Arc::clone(&self.schema),
            values,
            labels,
        }
    }

    /// Same rows with replaced labels.
    pub fn relabeled(&self, labels: Vec<Label>) -> Result<LabeledDataset> {
        if labels.len() != self.len() || labels.iter().any(|&l| l > 1) {
            return Err(DatasetError::InvalidRow {
                row: 0,
                reason: "relabeling must supply one binary label per row".into(),
            });
        }
        Ok(LabeledDataset {
            schema: Arc::clone(&self.schema),
            values: self.values.clone(),
            labels,
        })
    }

    /// Writes the dataset as CSV with the label as the last column.
    pub fn write_csv<W: Write>(&self, writer: W, label_column: &str) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.schema.features.iter().map(|f| f.name.as_str()).collect();
        header.push(label_column);
        out.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for (row, label) in self.iter() {
            record.clear();
            for (feature, &v) in self.schema.features.iter().zip(row) {
                record.push(format_value(&feature.kind, v));
            }
            record.push(label.to_string());
            out.write_record(&record)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self, label_column: &str) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf, label_column)
            .expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

fn format_value(kind: &FeatureKind, v: f64) -> String {
    match kind {
        FeatureKind::Numeric => format!("{v}"),
        FeatureKind::Categorical { levels, .. } => {
            let code = v as usize;
            levels.get(code).cloned().unwrap_or_else(|| code.to_string())
        }
    }
}

pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: &str,
    schema_hint: Option<&FeatureSchema>,
) -> Result<LabeledDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file, label_column, schema_hint)
}

/// Parses CSV text. Without a hint, a column is numeric iff every non-empty
/// value parses as a number; otherwise it is categorical over the sorted
/// distinct values observed.
pub fn read_csv<R: Read>(
    reader: R,
    label_column: &str,
    schema_hint: Option<&FeatureSchema>,
) -> Result<LabeledDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| DatasetError::MissingLabelColumn(label_column.to_owned()))?;

    let mut raw: Vec<Vec<String>> = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        if rec.len() != header.len() {
            return Err(DatasetError::RowArity {
                line,
                expected: header.len(),
                found: rec.len(),
            });
        }
        let label_text = &rec[label_idx];
        let label = match label_text.trim().parse::<f64>() {
            Ok(0.0) => 0,
            Ok(1.0) => 1,
            _ => {
                return Err(DatasetError::NonBinaryLabel {
                    line,
                    value: label_text.to_owned(),
                })
            }
        };
        labels.push(label);
        raw.push(
            rec.iter()
                .enumerate()
                .filter(|&(c, _)| c != label_idx)
                .map(|(_, v)| v.to_owned())
                .collect(),
        );
    }
    let names: Vec<&String> = header
        .iter()
        .enumerate()
        .filter(|&(c, _)| c != label_idx)
        .map(|(_, h)| h)
        .collect();

    let schema = match schema_hint {
        Some(hint) => {
            if hint.len() != names.len()
                || hint.features.iter().zip(&names).any(|(f, n)| &f.name != *n)
            {
                return Err(DatasetError::InvalidSchema(
                    "hinted schema does not match the CSV header".into(),
                ));
            }
            hint.clone()
        }
        None => infer_schema(&names, &raw)?,
    };

    let lookups: Vec<Option<HashMap<String, usize>>> = schema
        .features
        .iter()
        .map(|f| match &f.kind {
            FeatureKind::Numeric => None,
            FeatureKind::Categorical { arity, levels } => Some(if levels.is_empty() {
                (0..*arity as usize).map(|c| (c.to_string(), c)).collect()
            } else {
                levels.iter().enumerate().map(|(c, l)| (l.clone(), c)).collect()
            }),
        })
        .collect();

    let mut rows = Vec::with_capacity(raw.len());
    for (i, texts) in raw.into_iter().enumerate() {
        let line = i + 2;
        let mut row = Vec::with_capacity(texts.len());
        for (c, text) in texts.into_iter().enumerate() {
            let feature = &schema.features[c];
            let v = match &lookups[c] {
                None => text.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    DatasetError::InvalidNumber {
                        line,
                        column: feature.name.clone(),
                        value: text.clone(),
                    }
                })?,
                Some(map) => *map.get(&text).ok_or_else(|| DatasetError::UnknownCategory {
                    line,
                    column: feature.name.clone(),
                    value: text.clone(),
                })? as f64,
            };
            row.push(v);
        }
        rows.push(row);
    }
    LabeledDataset::new(schema, rows, labels)
}

fn infer_schema(names: &[&String], raw: &[Vec<String>]) -> Result<FeatureSchema> {
    let mut features = Vec::with_capacity(names.len());
    for (c, name) in names.iter().enumerate() {
        let numeric = raw
            .iter()
            .map(|r| r[c].trim())
            .filter(|v| !v.is_empty())
            .all(|v| v.parse::<f64>().map(f64::is_finite).unwrap_or(false));
        let kind = if numeric {
            FeatureKind::Numeric
        } else {
            let mut levels: Vec<String> = raw
                .iter()
                .map(|r| r[c].clone())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            if levels.len() < 2 {
                levels.push(format!("__unseen_{}", levels.len()));
            }
            FeatureKind::Categorical {
                arity: levels.len() as u32,
                levels,
            }
        };
        features.push(Feature {
            name: (*name).clone(),
            kind,
        });
    }
    FeatureSchema::new(features)
}

/// Part sizes: `floor(n * fraction)` for every part, then the remaining rows
/// are handed out one at a time to the earliest parts with positive fraction.
pub fn split_sizes(n: usize, fractions: &[f64]) -> Result<Vec<usize>> {
    if fractions.is_empty() {
        return Err(DatasetError::InvalidFractions("no fractions given".into()));
    }
    if fractions.iter().any(|f| !f.is_finite() || *f < 0.0) {
        return Err(DatasetError::InvalidFractions(
            "fractions must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > FRACTION_SUM_TOLERANCE {
        return Err(DatasetError::InvalidFractions(format!(
            "fractions sum to {total}, not 1"
        )));
    }
    let mut sizes: Vec<usize> = fractions
        .iter()
        .map(|f| {
            let exact = n as f64 * f;
            // absorb representation error such as 0.7 * 10 = 6.999...
            (exact + 1e-9 * (n as f64).max(1.0)).floor() as usize
        })
        .collect();
    let assigned: usize = sizes.iter().sum();
    if assigned > n {
        return Err(DatasetError::InvalidFractions(
            "fractions over-allocate rows".into(),
        ));
    }
    let mut remainder = n - assigned;
    while remainder > 0 {
        for (size, f) in sizes.iter_mut().zip(fractions) {
            if remainder == 0 {
                break;
            }
            if *f > 0.0 {
                *size += 1;
                remainder -= 1;
            }
        }
    }
    Ok(sizes)
}

/// Seed-keyed permutation of `0..n` (ChaCha8 stream, Fisher-Yates).
pub fn seeded_permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx
}

/// Deterministic disjoint, exhaustive partition. Rows inside each part keep
/// their original relative order.
pub fn split(data: &LabeledDataset, fractions: &[f64], seed: u64) -> Result<Vec<LabeledDataset>> {
    let sizes = split_sizes(data.len(), fractions)?;
    Ok(partition_indices(data.len(), &sizes, seed)
        .into_iter()
        .map(|idx| data.subset(&idx))
        .collect())
}

pub(crate) fn partition_indices(n: usize, sizes: &[usize], seed: u64) -> Vec<Vec<usize>> {
    let perm = seeded_permutation(n, seed);
    let mut parts = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &size in sizes {
        let mut part = perm[start..start + size].to_vec();
        part.sort_unstable();
        parts.push(part);
        start += size;
    }
    parts
}

pub fn zero_one_loss(predicted: Label, actual: Label) -> f64 {
    if predicted == actual {
        0.0
    } else {
        1.0
    }
}

pub(crate) fn check_width<C: Classifier + ?Sized>(schema: &FeatureSchema, c: &C) -> Result<()> {
    let required = c.required_width();
    if required > schema.len() {
        Err(DatasetError::SchemaMismatch {
            required: required - 1,
            available: schema.len(),
        })
    } else {
        Ok(())
    }
}

/// Empirical mass of the group `g` on `data`.
pub fn group_mass<G: Classifier + ?Sized>(data: &LabeledDataset, g: &G) -> Result<f64> {
    check_width(data.schema(), g)?;
    if data.is_empty() {
        return Ok(0.0);
    }
    let members = data.iter().filter(|(x, _)| g.predict(x) == 1).count();
    Ok(members as f64 / data.len() as f64)
}

/// Mean 0/1 loss of `f`, optionally conditioned on membership in `g`.
pub fn loss_on<F, G>(data: &LabeledDataset, f: &F, g: Option<&G>) -> Result<f64>
where
    F: Classifier + ?Sized,
    G: Classifier + ?Sized,
{
    check_width(data.schema(), f)?;
    if let Some(g) = g {
        check_width(data.schema(), g)?;
    }
    let mut members = 0usize;
    let mut errors = 0usize;
    for (x, y) in data.iter() {
        if g.is_none_or(|g| g.predict(x) == 1) {
            members += 1;
            if f.predict(x) != y {
                errors += 1;
            }
        }
    }
    if members == 0 {
        return Err(DatasetError::EmptyGroup);
    }
    Ok(errors as f64 / members as f64)
}

/// Overall loss without a conditioning group.
pub fn overall_loss<F: Classifier + ?Sized>(data: &LabeledDataset, f: &F) -> Result<f64> {
    loss_on::<F, Predictor>(data, f, None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFeature {
    pub name: String,
    pub arity: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRule {
    /// One level code per group feature.
    pub group: Vec<u32>,
    /// Labelling rule over the numeric columns (full-row feature indices).
    pub rule: Predictor,
    pub noise_rate: f64,
}

/// Recipe for a synthetic dataset. Columns are laid out as the group
/// features first, then `numeric_feature_count` numeric columns `x0, x1, ...`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub group_features: Vec<GroupFeature>,
    pub numeric_feature_count: usize,
    pub group_rules: Vec<GroupRule>,
    pub row_count: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn schema(&self) -> Result<FeatureSchema> {
        let mut features: Vec<Feature> = self
            .group_features
            .iter()
            .map(|g| Feature {
                name: g.name.clone(),
                kind: FeatureKind::categorical(g.arity),
            })
            .collect();
        features.extend((0..self.numeric_feature_count).map(|i| Feature {
            name: format!("x{i}"),
            kind: FeatureKind::Numeric,
        }));
        FeatureSchema::new(features)
    }

    fn rule_table(&self) -> Result<HashMap<Vec<u32>, &GroupRule>> {
        let k = self.group_features.len();
        let mut table = HashMap::new();
        for rule in &self.group_rules {
            if rule.group.len() != k {
                return Err(DatasetError::InvalidSpec(format!(
                    "group key {:?} has {} codes for {k} group features",
                    rule.group,
                    rule.group.len()
                )));
            }
            for (code, gf) in rule.group.iter().zip(&self.group_features) {
                if *code >= gf.arity {
                    return Err(DatasetError::InvalidSpec(format!(
                        "code {code} out of range for `{}`",
                        gf.name
                    )));
                }
            }
            if !(0.0..0.5).contains(&rule.noise_rate) {
                return Err(DatasetError::InvalidSpec(format!(
                    "noise rate {} outside [0, 0.5)",
                    rule.noise_rate
                )));
            }
            if rule.rule.feature_indices().any(|f| f < k || f >= k + self.numeric_feature_count) {
                return Err(DatasetError::InvalidSpec(
                    "labelling rules may only read numeric columns".into(),
                ));
            }
            if table.insert(rule.group.clone(), rule).is_some() {
                return Err(DatasetError::InvalidSpec(format!(
                    "duplicate rule for group {:?}",
                    rule.group
                )));
            }
        }
        let combos: usize = self.group_features.iter().map(|g| g.arity as usize).product();
        if table.len() != combos {
            return Err(DatasetError::InvalidSpec(format!(
                "{} of {combos} group combinations have rules",
                table.len()
            )));
        }
        Ok(table)
    }
}

/// Draws rows uniformly over group combinations with numerics uniform in
/// `[0, 1)`; the label is the group's rule flipped with its noise rate, so the
/// Bayes error inside each planted group equals that rate in expectation.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    let schema = spec.schema()?;
    let table = spec.rule_table()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut rows = Vec::with_capacity(spec.row_count);
    let mut labels = Vec::with_capacity(spec.row_count);
    let mut key = vec![0u32; spec.group_features.len()];
    for _ in 0..spec.row_count {
        let mut row = Vec::with_capacity(schema.len());
        for (slot, gf) in key.iter_mut().zip(&spec.group_features) {
            *slot = rng.random_range(0..gf.arity);
            row.push(f64::from(*slot));
        }
        for _ in 0..spec.numeric_feature_count {
            row.push(rng.random::<f64>());
        }
        let rule = table[&key];
        let clean = rule.rule.predict(&row);
        let flip = rng.random::<f64>() < rule.noise_rate;
        labels.push(if flip { 1 - clean } else { clean });
        rows.push(row);
    }
    LabeledDataset::new(schema, rows, labels)
}
