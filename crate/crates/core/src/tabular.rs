//! Typed heterogeneous tabular data: schemas, CSV ingestion, normalization
//! statistics and slice filtering.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("cannot parse `{token}` at row {row}, column `{column}`")]
    Parse {
        row: usize,
        column: String,
        token: String,
    },
    #[error("unknown class label `{label}` at row {row}")]
    UnknownClassLabel { row: usize, label: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("bad predicate: {0}")]
    BadPredicate(String),
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, TabularError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Categorical,
    Numerical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// Enumerated tokens; when present the feature is strict and rejects others.
    #[serde(
        rename = "values",
        default,
        skip_serializing_if = "Option::is_none",
        deserialize_with = "de_opt_tokens"
    )]
    pub allowed_values: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<(f64, f64)>,
}

impl FeatureSpec {
    pub fn categorical(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Categorical,
            allowed_values: None,
            bounds: None,
        }
    }

    pub fn numerical(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FeatureKind::Numerical,
            allowed_values: None,
            bounds: None,
        }
    }

    pub fn is_categorical(&self) -> bool {
        self.kind == FeatureKind::Categorical
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Binary,
    Multiclass,
    Regression,
}

impl Task {
    pub fn is_classification(self) -> bool {
        self != Task::Regression
    }
}

/// Favorable outcome as declared in a schema or on the command line: a class
/// label, or a closed prediction range with optional open ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Favorable {
    Range {
        #[serde(default)]
        min: Option<f64>,
        #[serde(default)]
        max: Option<f64>,
    },
    Class(#[serde(deserialize_with = "de_token")] String),
}

impl std::str::FromStr for Favorable {
    type Err = TabularError;

    /// `lo:hi` (either side may be empty) for ranges, anything else is a class.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some((lo, hi)) => {
                let parse = |t: &str| -> Result<Option<f64>> {
                    let t = t.trim();
                    if t.is_empty() {
                        return Ok(None);
                    }
                    t.parse::<f64>().map(Some).map_err(|_| {
                        TabularError::InvalidSchema(format!("bad favorable range bound `{t}`"))
                    })
                };
                Ok(Favorable::Range {
                    min: parse(lo)?,
                    max: parse(hi)?,
                })
            }
            None => Ok(Favorable::Class(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub name: String,
    pub task: Task,
    #[serde(
        default,
        skip_serializing_if = "Vec::is_empty",
        deserialize_with = "de_tokens"
    )]
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub favorable: Option<Favorable>,
}

impl TargetSpec {
    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }

    /// Class whose score drives signed attributions: the declared favorable
    /// class, or the last class for binary tasks.
    pub fn reference_class(&self) -> Option<usize> {
        match (&self.favorable, self.task) {
            (Some(Favorable::Class(c)), _) => self.class_index(c),
            (_, Task::Binary) => Some(1),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub features: Vec<FeatureSpec>,
    pub target: TargetSpec,
    #[serde(default)]
    pub protected: Vec<String>,
}

impl Schema {
    pub fn new(
        features: Vec<FeatureSpec>,
        target: TargetSpec,
        protected: Vec<String>,
    ) -> Result<Self> {
        let schema = Self {
            features,
            target,
            protected,
        };
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let schema: Schema = serde_json::from_str(s)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut s = String::new();
        File::open(path)?.read_to_string(&mut s)?;
        Self::from_json_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TabularError::InvalidSchema(msg));
        if self.features.is_empty() {
            return bad("schema declares no features".into());
        }
        let mut seen = HashSet::new();
        for f in &self.features {
            if !seen.insert(f.name.as_str()) {
                return bad(format!("duplicate feature `{}`", f.name));
            }
            match f.kind {
                FeatureKind::Categorical if f.bounds.is_some() => {
                    return bad(format!("categorical feature `{}` has bounds", f.name))
                }
                FeatureKind::Numerical if f.allowed_values.is_some() => {
                    return bad(format!("numerical feature `{}` has values", f.name))
                }
                _ => {}
            }
            if let Some((lo, hi)) = f.bounds {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return bad(format!("feature `{}` has ill-ordered bounds", f.name));
                }
            }
        }
        if seen.contains(self.target.name.as_str()) {
            return bad(format!("target `{}` is also a feature", self.target.name));
        }
        let n_classes = self.target.classes.len();
        match self.target.task {
            Task::Binary if n_classes != 2 => {
                return bad("binary target needs exactly 2 classes".into())
            }
            Task::Multiclass if n_classes < 3 => {
                return bad("multiclass target needs at least 3 classes".into())
            }
            Task::Regression if n_classes != 0 => {
                return bad("regression target declares classes".into())
            }
            _ => {}
        }
        let distinct: HashSet<_> = self.target.classes.iter().collect();
        if distinct.len() != n_classes {
            return bad("duplicate class labels".into());
        }
        match (&self.target.favorable, self.target.task) {
            (Some(Favorable::Class(c)), t) if t.is_classification() => {
                if self.target.class_index(c).is_none() {
                    return bad(format!("favorable class `{c}` is not a declared class"));
                }
            }
            (Some(Favorable::Range { .. }), Task::Regression) | (None, _) => {}
            (Some(_), _) => return bad("favorable outcome does not match the task".into()),
        }
        for p in &self.protected {
            match self.feature_index(p) {
                None => return bad(format!("protected attribute `{p}` is not a feature")),
                Some(j) if !self.features[j].is_categorical() => {
                    return bad(format!("protected attribute `{p}` must be categorical"))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn task(&self) -> Task {
        self.target.task
    }

    /// Checks an instance against the schema, coercing JSON-style values:
    /// numbers given for categorical features become tokens, numeric strings
    /// given for numerical features are parsed.
    pub fn conform(&self, instance: Instance) -> Result<Instance> {
        if instance.len() != self.len() {
            return Err(TabularError::SchemaViolation(format!(
                "expected {} values, got {}",
                self.len(),
                instance.len()
            )));
        }
        let values = instance
            .0
            .into_iter()
            .zip(&self.features)
            .map(|(v, f)| conform_value(v, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(Instance(values))
    }

    /// Builds an instance from a `{feature: value}` map; every feature is required.
    pub fn instance_from_map(
        &self,
        map: &serde_json::Map<String, serde_json::Value>,
    ) -> Result<Instance> {
        for key in map.keys() {
            if self.feature_index(key).is_none() {
                return Err(TabularError::SchemaViolation(format!(
                    "unknown feature `{key}`"
                )));
            }
        }
        let values = self
            .features
            .iter()
            .map(|f| {
                let raw = map.get(&f.name).ok_or_else(|| {
                    TabularError::SchemaViolation(format!("missing feature `{}`", f.name))
                })?;
                let v: Value = serde_json::from_value(raw.clone()).map_err(|_| {
                    TabularError::SchemaViolation(format!("bad value for `{}`", f.name))
                })?;
                conform_value(v, f)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Instance(values))
    }
}

fn conform_value(v: Value, f: &FeatureSpec) -> Result<Value> {
    let violation = |msg: String| Err(TabularError::SchemaViolation(msg));
    match (f.kind, v) {
        (FeatureKind::Numerical, Value::Num(x)) if x.is_finite() => Ok(Value::Num(x)),
        (FeatureKind::Numerical, Value::Num(_)) => {
            violation(format!("`{}` must be finite", f.name))
        }
        (FeatureKind::Numerical, Value::Cat(s)) => match s.trim().parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(Value::Num(x)),
            _ => violation(format!("`{}` expects a number, got `{s}`", f.name)),
        },
        (FeatureKind::Categorical, v) => {
            let token = match v {
                Value::Cat(s) => s,
                Value::Num(x) => format_number(x),
            };
            if token.is_empty() {
                return violation(format!("`{}` has an empty category", f.name));
            }
            if let Some(allowed) = &f.allowed_values {
                if !allowed.contains(&token) {
                    return violation(format!("`{token}` is not an allowed value of `{}`", f.name));
                }
            }
            Ok(Value::Cat(token))
        }
    }
}

/// Shortest round-tripping decimal form, without a trailing `.0` for integers.
pub fn format_number(x: f64) -> String {
    format!("{x}")
}

/// One cell: a category token or a finite real.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Num(f64),
    Cat(String),
}

impl Value {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            Value::Num(x) => Some(*x),
            Value::Cat(_) => None,
        }
    }

    pub fn as_cat(&self) -> Option<&str> {
        match self {
            Value::Cat(s) => Some(s),
            Value::Num(_) => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Num(x) => write!(f, "{x}"),
            Value::Cat(s) => f.write_str(s),
        }
    }
}

impl From<f64> for Value {
    fn from(x: f64) -> Self {
        Value::Num(x)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Cat(s.to_string())
    }
}

/// Feature vector aligned to `Schema::features`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Instance(pub Vec<Value>);

impl Instance {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[Value] {
        &self.0
    }

    /// Hashable identity for exact-duplicate detection.
    pub fn key(&self) -> Vec<KeyPart<'_>> {
        self.0
            .iter()
            .map(|v| match v {
                Value::Num(x) => KeyPart::Num((*x + 0.0).to_bits()),
                Value::Cat(s) => KeyPart::Cat(s),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum KeyPart<'a> {
    Num(u64),
    Cat(&'a str),
}

impl std::ops::Index<usize> for Instance {
    type Output = Value;

    fn index(&self, j: usize) -> &Value {
        &self.0[j]
    }
}

/// Ground-truth or predicted target value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Real(f64),
    Class(String),
}

impl Label {
    pub fn as_real(&self) -> Option<f64> {
        match self {
            Label::Real(x) => Some(*x),
            Label::Class(_) => None,
        }
    }

    pub fn as_class(&self) -> Option<&str> {
        match self {
            Label::Class(s) => Some(s),
            Label::Real(_) => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Label::Real(x) => write!(f, "{x}"),
            Label::Class(s) => f.write_str(s),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub schema: Arc<Schema>,
    pub rows: Vec<Instance>,
    pub labels: Vec<Label>,
}

impl Dataset {
    pub fn new(schema: Arc<Schema>, rows: Vec<Instance>, labels: Vec<Label>) -> Result<Self> {
        if rows.len() != labels.len() {
            return Err(TabularError::SchemaViolation(format!(
                "{} rows but {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let rows = rows
            .into_iter()
            .map(|r| schema.conform(r))
            .collect::<Result<Vec<_>>>()?;
        for (i, label) in labels.iter().enumerate() {
            check_label(&schema.target, label, i + 1)?;
        }
        Ok(Self {
            schema,
            rows,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            schema: self.schema.clone(),
            rows: indices.iter().map(|&i| self.rows[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i].clone()).collect(),
        }
    }

    /// Numerical column `j`; panics on a categorical feature.
    pub fn numeric_column(&self, j: usize) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| r[j].as_num().expect("numerical column"))
            .collect()
    }

    /// Population standard deviation of a regression target.
    pub fn target_std(&self) -> Option<f64> {
        let ys: Vec<f64> = self.labels.iter().filter_map(Label::as_real).collect();
        if ys.is_empty() || ys.len() != self.labels.len() {
            return None;
        }
        Some(population_std(&ys))
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self
            .schema
            .features
            .iter()
            .map(|f| f.name.as_str())
            .collect();
        header.push(&self.schema.target.name);
        w.write_record(&header)?;
        for (row, label) in self.rows.iter().zip(&self.labels) {
            let mut record: Vec<String> = row.0.iter().map(Value::to_string).collect();
            record.push(label.to_string());
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(File::create(path)?)
    }
}

fn check_label(target: &TargetSpec, label: &Label, row: usize) -> Result<()> {
    match (target.task, label) {
        (Task::Regression, Label::Real(y)) if y.is_finite() => Ok(()),
        (Task::Regression, other) => Err(TabularError::Parse {
            row,
            column: target.name.clone(),
            token: other.to_string(),
        }),
        (_, Label::Class(c)) if target.class_index(c).is_some() => Ok(()),
        (_, other) => Err(TabularError::UnknownClassLabel {
            row,
            label: other.to_string(),
        }),
    }
}

/// Reads a CSV whose header names every schema feature and the target, in any
/// column order. Row numbers in errors count data rows from 1.
pub fn load_csv(path: impl AsRef<Path>, schema: Arc<Schema>) -> Result<Dataset> {
    read_csv(File::open(path)?, schema)
}

pub fn read_csv<R: Read>(reader: R, schema: Arc<Schema>) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(reader);
    let header: HashMap<String, usize> = rdr
        .headers()?
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim().to_string(), i))
        .collect();
    let column = |name: &str| {
        header
            .get(name)
            .copied()
            .ok_or_else(|| TabularError::MissingColumn(name.to_string()))
    };
    let feature_cols = schema
        .features
        .iter()
        .map(|f| column(&f.name))
        .collect::<Result<Vec<_>>>()?;
    let target_col = column(&schema.target.name)?;

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let row = i + 1;
        let cell = |c: usize| record.get(c).unwrap_or("").trim();
        let values = schema
            .features
            .iter()
            .zip(&feature_cols)
            .map(|(f, &c)| {
                let token = cell(c);
                let parse_err = || TabularError::Parse {
                    row,
                    column: f.name.clone(),
                    token: token.to_string(),
                };
                match f.kind {
                    FeatureKind::Numerical => match token.parse::<f64>() {
                        Ok(x) if x.is_finite() => Ok(Value::Num(x)),
                        _ => Err(parse_err()),
                    },
                    FeatureKind::Categorical if token.is_empty() => Err(parse_err()),
                    FeatureKind::Categorical => {
                        if let Some(allowed) = &f.allowed_values {
                            if !allowed.iter().any(|a| a == token) {
                                return Err(parse_err());
                            }
                        }
                        Ok(Value::Cat(token.to_string()))
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let token = cell(target_col);
        let label = match schema.target.task {
            Task::Regression => match token.parse::<f64>() {
                Ok(y) if y.is_finite() => Label::Real(y),
                _ => {
                    return Err(TabularError::Parse {
                        row,
                        column: schema.target.name.clone(),
                        token: token.to_string(),
                    })
                }
            },
            _ => {
                let label = Label::Class(token.to_string());
                check_label(&schema.target, &label, row)?;
                label
            }
        };
        rows.push(Instance(values));
        labels.push(label);
    }
    Ok(Dataset {
        schema,
        rows,
        labels,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NormMethod {
    #[default]
    Range,
    Std,
    Mad,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub range: f64,
    pub std: f64,
    pub mad: f64,
}

/// Per-feature spread statistics of the training split; `None` for categorical slots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub method: NormMethod,
    pub stats: Vec<Option<FeatureStats>>,
}

impl NormStats {
    /// The normalizer η for feature `j` under the selected method.
    pub fn normalizer(&self, j: usize) -> Option<f64> {
        self.stats[j].map(|s| match self.method {
            NormMethod::Range => s.range,
            NormMethod::Std => s.std,
            NormMethod::Mad => s.mad,
        })
    }

    pub fn with_method(&self, method: NormMethod) -> NormStats {
        NormStats {
            method,
            stats: self.stats.clone(),
        }
    }
}

pub fn compute_norm_stats(train: &Dataset, method: NormMethod) -> Result<NormStats> {
    if train.is_empty() {
        return Err(TabularError::EmptyDataset);
    }
    let stats = train
        .schema
        .features
        .iter()
        .enumerate()
        .map(|(j, f)| match f.kind {
            FeatureKind::Categorical => None,
            FeatureKind::Numerical => Some(feature_stats(&train.numeric_column(j))),
        })
        .collect();
    Ok(NormStats { method, stats })
}

fn feature_stats(xs: &[f64]) -> FeatureStats {
    let (lo, hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(x), hi.max(x))
        });
    let mean = mean(xs);
    let mad = xs.iter().map(|x| (x - mean).abs()).sum::<f64>() / xs.len() as f64;
    FeatureStats {
        range: hi - lo,
        std: population_std(xs),
        mad,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn population_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    In,
}

impl SliceOp {
    fn is_ordering(self) -> bool {
        matches!(self, SliceOp::Lt | SliceOp::Le | SliceOp::Gt | SliceOp::Ge)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PredicateValue {
    Many(Vec<Value>),
    One(Value),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub feature: String,
    pub op: SliceOp,
    pub value: PredicateValue,
}

impl Predicate {
    pub fn new(feature: impl Into<String>, op: SliceOp, value: impl Into<Value>) -> Self {
        Self {
            feature: feature.into(),
            op,
            value: PredicateValue::One(value.into()),
        }
    }
}

/// Conjunction of predicates; the empty query selects everything.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SliceQuery {
    #[serde(default)]
    pub predicates: Vec<Predicate>,
}

impl SliceQuery {
    pub fn and(mut self, other: SliceQuery) -> SliceQuery {
        self.predicates.extend(other.predicates);
        self
    }
}

struct CompiledPredicate {
    feature: usize,
    op: SliceOp,
    values: Vec<Value>,
}

impl CompiledPredicate {
    fn matches(&self, row: &Instance) -> bool {
        let cell = &row[self.feature];
        let first = &self.values[0];
        match self.op {
            SliceOp::Eq => cell == first,
            SliceOp::Ne => cell != first,
            SliceOp::In => self.values.contains(cell),
            op => {
                let (x, t) = (cell.as_num().unwrap(), first.as_num().unwrap());
                match op {
                    SliceOp::Lt => x < t,
                    SliceOp::Le => x <= t,
                    SliceOp::Gt => x > t,
                    _ => x >= t,
                }
            }
        }
    }
}

fn compile(schema: &Schema, query: &SliceQuery) -> Result<Vec<CompiledPredicate>> {
    query
        .predicates
        .iter()
        .map(|p| {
            let j = schema.feature_index(&p.feature).ok_or_else(|| {
                TabularError::BadPredicate(format!("unknown feature `{}`", p.feature))
            })?;
            let spec = &schema.features[j];
            if p.op.is_ordering() && spec.is_categorical() {
                return Err(TabularError::BadPredicate(format!(
                    "ordering comparison on categorical feature `{}`",
                    p.feature
                )));
            }
            let raw = match (&p.value, p.op) {
                (PredicateValue::Many(vs), SliceOp::In) => vs.clone(),
                (PredicateValue::One(v), SliceOp::In) => vec![v.clone()],
                (PredicateValue::One(v), _) => vec![v.clone()],
                (PredicateValue::Many(_), _) => {
                    return Err(TabularError::BadPredicate(format!(
                        "a value list is only valid with `in` (feature `{}`)",
                        p.feature
                    )))
                }
            };
            if raw.is_empty() {
                return Err(TabularError::BadPredicate("empty `in` list".into()));
            }
            // Strictness on allowed values does not apply to query constants.
            let lenient = FeatureSpec {
                allowed_values: None,
                ..spec.clone()
            };
            let values = raw
                .into_iter()
                .map(|v| {
                    conform_value(v, &lenient)
                        .map_err(|e| TabularError::BadPredicate(e.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CompiledPredicate {
                feature: j,
                op: p.op,
                values,
            })
        })
        .collect()
}

/// Row indices satisfying every predicate, in dataset order.
pub fn slice_indices(data: &Dataset, query: &SliceQuery) -> Result<Vec<usize>> {
    let preds = compile(&data.schema, query)?;
    Ok(data
        .rows
        .iter()
        .enumerate()
        .filter(|(_, row)| preds.iter().all(|p| p.matches(row)))
        .map(|(i, _)| i)
        .collect())
}

pub fn slice_filter(data: &Dataset, query: &SliceQuery) -> Result<Dataset> {
    let idx = slice_indices(data, query)?;
    Ok(data.subset(&idx))
}

/// Renders a JSON label token (string or number) as a class token.
pub fn json_token(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => n.as_f64().map(format_number),
        serde_json::Value::Bool(b) => Some(b.to_string()),
        _ => None,
    }
}

fn de_token<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<String, D::Error> {
    let v = serde_json::Value::deserialize(d)?;
    json_token(&v).ok_or_else(|| serde::de::Error::custom("expected a string or number token"))
}

fn de_tokens<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Vec<String>, D::Error> {
    let vs = Vec::<serde_json::Value>::deserialize(d)?;
    vs.iter()
        .map(|v| {
            json_token(v)
                .ok_or_else(|| serde::de::Error::custom("expected a string or number token"))
        })
        .collect()
}

fn de_opt_tokens<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<Option<Vec<String>>, D::Error> {
    de_tokens(d).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn two_feature_schema() -> Arc<Schema> {
        Arc::new(
            Schema::new(
                vec![
                    FeatureSpec::numerical("age"),
                    FeatureSpec::categorical("job"),
                ],
                TargetSpec {
                    name: "y".into(),
                    task: Task::Binary,
                    classes: vec!["0".into(), "1".into()],
                    favorable: None,
                },
                vec!["job".into()],
            )
            .unwrap(),
        )
    }

    #[test]
    fn loads_rows_in_schema_order() {
        let csv = "job,y,age\nprivate,1,30\nbusiness,0,45.5\n";
        let d = read_csv(csv.as_bytes(), two_feature_schema()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(
            d.rows[1],
            Instance(vec![Value::Num(45.5), "business".into()])
        );
        assert_eq!(d.labels[0], Label::Class("1".into()));
    }

    #[test]
    fn missing_target_column() {
        let csv = "age,job\n30,private\n";
        match read_csv(csv.as_bytes(), two_feature_schema()) {
            Err(TabularError::MissingColumn(c)) => assert_eq!(c, "y"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_reports_row_and_column() {
        let mut csv = String::from("age,job,y\n");
        for _ in 0..6 {
            csv.push_str("30,private,1\n");
        }
        csv.push_str("abc,private,1\n");
        match read_csv(csv.as_bytes(), two_feature_schema()) {
            Err(TabularError::Parse { row, column, token }) => {
                assert_eq!((row, column.as_str(), token.as_str()), (7, "age", "abc"))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_class_label() {
        let csv = "age,job,y\n30,private,2\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), two_feature_schema()),
            Err(TabularError::UnknownClassLabel { row: 1, .. })
        ));
    }

    #[test]
    fn empty_cell_is_rejected() {
        let csv = "age,job,y\n,private,1\n";
        assert!(matches!(
            read_csv(csv.as_bytes(), two_feature_schema()),
            Err(TabularError::Parse { row: 1, .. })
        ));
    }

    fn single_numeric(values: &[f64]) -> Dataset {
        let schema = Arc::new(
            Schema::new(
                vec![FeatureSpec::numerical("x")],
                TargetSpec {
                    name: "y".into(),
                    task: Task::Regression,
                    classes: vec![],
                    favorable: None,
                },
                vec![],
            )
            .unwrap(),
        );
        let rows = values
            .iter()
            .map(|&x| Instance(vec![Value::Num(x)]))
            .collect();
        let labels = values.iter().map(|&x| Label::Real(x)).collect();
        Dataset::new(schema, rows, labels).unwrap()
    }

    #[test]
    fn norm_stats_direct() {
        let s =
            compute_norm_stats(&single_numeric(&[1.0, 2.0, 3.0, 4.0]), NormMethod::Range).unwrap();
        let f = s.stats[0].unwrap();
        assert_abs_diff_eq!(f.range, 3.0);
        assert_abs_diff_eq!(f.std, 1.25f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(f.mad, 1.0);
    }

    #[test]
    fn norm_stats_degenerate() {
        for vals in [&[5.0, 5.0, 5.0][..], &[7.0][..]] {
            let f = compute_norm_stats(&single_numeric(vals), NormMethod::Mad)
                .unwrap()
                .stats[0]
                .unwrap();
            assert_eq!((f.range, f.std, f.mad), (0.0, 0.0, 0.0));
        }
        assert!(matches!(
            compute_norm_stats(&single_numeric(&[]), NormMethod::Std),
            Err(TabularError::EmptyDataset)
        ));
    }

    #[test]
    fn slices() {
        let d = single_numeric(&[20.0, 45.0, 90.0]);
        assert_eq!(slice_filter(&d, &SliceQuery::default()).unwrap(), d);
        let q = SliceQuery {
            predicates: vec![Predicate::new("x", SliceOp::Ge, 200.0)],
        };
        assert_eq!(slice_filter(&d, &q).unwrap().len(), 0);
        let q = SliceQuery {
            predicates: vec![Predicate::new("x", SliceOp::Lt, 50.0)],
        };
        assert_eq!(slice_indices(&d, &q).unwrap(), vec![0, 1]);
    }

    #[test]
    fn ordering_on_categorical_is_rejected() {
        let d = read_csv("age,job,y\n30,private,1\n".as_bytes(), two_feature_schema()).unwrap();
        let q = SliceQuery {
            predicates: vec![Predicate::new("job", SliceOp::Lt, "x")],
        };
        assert!(matches!(
            slice_filter(&d, &q),
            Err(TabularError::BadPredicate(_))
        ));
        let q = SliceQuery {
            predicates: vec![Predicate::new("nope", SliceOp::Eq, "x")],
        };
        assert!(matches!(
            slice_filter(&d, &q),
            Err(TabularError::BadPredicate(_))
        ));
    }

    #[test]
    fn numeric_constant_matches_categorical_token() {
        let d = read_csv(
            "age,job,y\n30,0,1\n31,1,0\n".as_bytes(),
            two_feature_schema(),
        )
        .unwrap();
        let q: SliceQuery =
            serde_json::from_str(r#"{"predicates":[{"feature":"job","op":"eq","value":0}]}"#)
                .unwrap();
        assert_eq!(slice_indices(&d, &q).unwrap(), vec![0]);
        let q: SliceQuery = serde_json::from_str(
            r#"{"predicates":[{"feature":"job","op":"in","value":["1", 0]}]}"#,
        )
        .unwrap();
        assert_eq!(slice_indices(&d, &q).unwrap(), vec![0, 1]);
    }

    #[test]
    fn schema_json_shape() {
        let s = Schema::from_json_str(
            r#"{"features":[{"name":"a","kind":"numerical","bounds":[0,10]},
                {"name":"b","kind":"categorical","values":["x","y"]}],
                "target":{"name":"t","task":"multiclass","classes":[0,1,2],"favorable":2},
                "protected":["b"]}"#,
        )
        .unwrap();
        assert_eq!(s.target.classes, vec!["0", "1", "2"]);
        assert_eq!(s.target.favorable, Some(Favorable::Class("2".into())));
        assert_eq!(s.features[0].bounds, Some((0.0, 10.0)));

        let bad = r#"{"features":[{"name":"a","kind":"numerical"}],
            "target":{"name":"t","task":"binary","classes":["0","1"]},"protected":["a"]}"#;
        assert!(Schema::from_json_str(bad).is_err());
        let bad = r#"{"features":[{"name":"a","kind":"numerical"}],
            "target":{"name":"t","task":"multiclass","classes":["0","1"]}}"#;
        assert!(Schema::from_json_str(bad).is_err());
    }

    #[test]
    fn favorable_parsing() {
        assert_eq!(
            "50000:".parse::<Favorable>().unwrap(),
            Favorable::Range {
                min: Some(50000.0),
                max: None
            }
        );
        assert_eq!(
            "yes".parse::<Favorable>().unwrap(),
            Favorable::Class("yes".into())
        );
    }
}
