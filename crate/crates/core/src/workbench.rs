//! Scan orchestration, policy gate, What-If evaluation and slice reports.
//!
//! A [`Session`] holds everything the interactive operations need: the loaded
//! datasets, the model handle, the cached training predictions and the
//! validation predictions. [`Session::scan`] runs the full audit pipeline.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::drift::{oot_drift, DriftError, DriftReport, DEFAULT_THRESHOLD};
use crate::fairness::{
    fairness_audit, FairnessError, FairnessMode, FairnessOptions, FlipTestReport,
};
use crate::heom::{Aggregation, DistanceConfig};
use crate::model::{BridgeOptions, Hyper, ModelError, ModelHandle, ModelSelector, Prediction};
use crate::nice::{
    explain_batch, generate_counterfactual, nearest_unlike_neighbor, CounterfactualResult,
    NiceConfig, NiceError, RewardMode, Tolerance, TrainCache,
};
use crate::scores::{
    feature_importance, performance_score, robustness_from_results, AttributionVector, Component,
    ExplainabilityConfig, ExplainabilityHistogram, MetricWeights, PerformanceReport,
    RobustnessReport, ScoreCard, ScoreError, TrustWeights,
};
use crate::tabular::{
    compute_norm_stats, load_csv, slice_indices, Dataset, Favorable, Instance, Label, NormMethod,
    NormStats, Schema, SliceQuery, TabularError, Task, Value,
};

pub const REPORT_FORMAT: u32 = 1;
pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const DEFAULT_OUT: &str = "complai_report.json";
pub const DEFAULT_LOW_SUPPORT: usize = 30;
pub const TRAIN_PREDICTIONS_FILE: &str = "train_predictions.json";
pub const COUNTERFACTUALS_FILE: &str = "counterfactuals.jsonl";

/// Pipeline step an error came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Config,
    Load,
    Model,
    Counterfactuals,
    Explainability,
    Attribution,
    Robustness,
    Performance,
    Drift,
    Fairness,
    Slice,
    Whatif,
    Persist,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("stage serializes");
        f.write_str(s.as_str().unwrap_or("unknown"))
    }
}

#[derive(Debug, Error)]
pub enum WorkbenchError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("referenced file does not exist: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("malformed report: {0}")]
    MalformedReport(String),
    #[error("malformed policy: {0}")]
    MalformedPolicy(String),
    #[error("slice selects no rows (support 0)")]
    EmptySlice,
    #[error("{stage}: {source}")]
    Tabular {
        stage: Stage,
        #[source]
        source: TabularError,
    },
    #[error("{stage}: {source}")]
    Model {
        stage: Stage,
        #[source]
        source: ModelError,
    },
    #[error("{stage}: {source}")]
    Nice {
        stage: Stage,
        #[source]
        source: NiceError,
    },
    #[error("{stage}: {source}")]
    Score {
        stage: Stage,
        #[source]
        source: ScoreError,
    },
    #[error("{stage}: {source}")]
    Drift {
        stage: Stage,
        #[source]
        source: DriftError,
    },
    #[error("{stage}: {source}")]
    Fairness {
        stage: Stage,
        #[source]
        source: FairnessError,
    },
    #[error("{stage}: i/o error on {}: {source}", path.display())]
    Io {
        stage: Stage,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, WorkbenchError>;

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T>;
}

macro_rules! at_stage {
    ($err:ty, $variant:ident) => {
        impl<T> AtStage<T> for std::result::Result<T, $err> {
            fn at(self, stage: Stage) -> Result<T> {
                self.map_err(|source| WorkbenchError::$variant { stage, source })
            }
        }
    };
}

at_stage!(TabularError, Tabular);
at_stage!(ModelError, Model);
at_stage!(NiceError, Nice);
at_stage!(ScoreError, Score);
at_stage!(DriftError, Drift);
at_stage!(FairnessError, Fairness);

fn io_err(stage: Stage, path: &Path) -> impl FnOnce(std::io::Error) -> WorkbenchError + '_ {
    move |source| WorkbenchError::Io {
        stage,
        path: path.to_path_buf(),
        source,
    }
}

fn tabular_code(e: &TabularError) -> &'static str {
    match e {
        TabularError::MissingColumn(_) => "MissingColumn",
        TabularError::Parse { .. } => "ParseError",
        TabularError::UnknownClassLabel { .. } => "UnknownClassLabel",
        TabularError::EmptyDataset => "EmptyDataset",
        TabularError::BadPredicate(_) => "BadPredicate",
        TabularError::InvalidSchema(_) => "InvalidSchema",
        TabularError::SchemaViolation(_) => "SchemaViolation",
        TabularError::Io(_) => "IoError",
        TabularError::Csv(_) => "CsvError",
        TabularError::Json(_) => "JsonError",
    }
}

fn model_code(e: &ModelError) -> &'static str {
    match e {
        ModelError::BridgeFailure { .. } => "BridgeFailure",
        ModelError::ShapeMismatch { .. } => "ShapeMismatch",
        ModelError::IncompatibleTask { .. } => "IncompatibleTask",
        ModelError::DegenerateData(_) => "DegenerateData",
        ModelError::InvalidSelector(_) => "InvalidSelector",
    }
}

fn nice_code(e: &NiceError) -> &'static str {
    match e {
        NiceError::MissingTolerance => "MissingTolerance",
        NiceError::NoUnlikeNeighbor => "NoUnlikeNeighbor",
        NiceError::QueryBudgetExceeded { .. } => "QueryBudgetExceeded",
        NiceError::Nondeterministic => "Nondeterministic",
        NiceError::Model(m) => model_code(m),
    }
}

fn score_code(e: &ScoreError) -> &'static str {
    match e {
        ScoreError::EmptyResults => "EmptyResults",
        ScoreError::IncompatibleMetric(_) => "IncompatibleMetric",
        ScoreError::AdjR2Undefined { .. } => "AdjR2Undefined",
        ScoreError::TooFewRows(_) => "TooFewRows",
        ScoreError::LengthMismatch { .. } => "LengthMismatch",
        ScoreError::InvalidWeights(_) => "InvalidWeights",
        ScoreError::NoApplicableScores => "NoApplicableScores",
    }
}

impl WorkbenchError {
    /// Machine-readable code naming the underlying module error.
    pub fn code(&self) -> &'static str {
        match self {
            WorkbenchError::Config(_) => "InvalidConfig",
            WorkbenchError::MissingFile(_) => "MissingFile",
            WorkbenchError::MalformedReport(_) => "MalformedReport",
            WorkbenchError::MalformedPolicy(_) => "MalformedPolicy",
            WorkbenchError::EmptySlice => "EmptySlice",
            WorkbenchError::Tabular { source, .. } => tabular_code(source),
            WorkbenchError::Model { source, .. } => model_code(source),
            WorkbenchError::Nice { source, .. } => nice_code(source),
            WorkbenchError::Score { source, .. } => score_code(source),
            WorkbenchError::Drift { source, .. } => match source {
                DriftError::FeatureSetMismatch => "FeatureSetMismatch",
                DriftError::ZeroTrainAttribution => "ZeroTrainAttribution",
                DriftError::EmptyWindow => "EmptyWindow",
                DriftError::NoCounterfactuals(_) => "NoCounterfactuals",
                DriftError::Model(m) => model_code(m),
                DriftError::Nice(n) => nice_code(n),
                DriftError::Score(s) => score_code(s),
            },
            WorkbenchError::Fairness { source, .. } => match source {
                FairnessError::NotProtected(_) => "NotProtected",
                FairnessError::EmptySubgroup(_) => "EmptySubgroup",
                FairnessError::EmptyAlternateGroup(_) => "EmptyAlternateGroup",
                FairnessError::UndefinedRate(_) => "UndefinedRate",
                FairnessError::UnknownClass(_) => "UnknownClass",
                FairnessError::EmptyRange => "EmptyRange",
                FairnessError::MissingFavorable => "MissingFavorable",
                FairnessError::AllCellsEmpty => "AllCellsEmpty",
                FairnessError::NoAttributes => "NoAttributes",
                FairnessError::Model(m) => model_code(m),
                FairnessError::Nice(n) => nice_code(n),
                FairnessError::Tabular(t) => tabular_code(t),
            },
            WorkbenchError::Io { .. } => "IoError",
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            WorkbenchError::Tabular { stage, .. }
            | WorkbenchError::Model { stage, .. }
            | WorkbenchError::Nice { stage, .. }
            | WorkbenchError::Score { stage, .. }
            | WorkbenchError::Drift { stage, .. }
            | WorkbenchError::Fairness { stage, .. }
            | WorkbenchError::Io { stage, .. } => Some(*stage),
            WorkbenchError::Config(_) => Some(Stage::Config),
            WorkbenchError::EmptySlice => Some(Stage::Slice),
            _ => None,
        }
    }

    /// Errors caused by the request rather than the engine or its environment.
    pub fn is_client_error(&self) -> bool {
        matches!(
            self.code(),
            "SchemaViolation"
                | "BadPredicate"
                | "EmptySlice"
                | "NoUnlikeNeighbor"
                | "QueryBudgetExceeded"
                | "InvalidWeights"
                | "IncompatibleMetric"
                | "TooFewRows"
                | "AdjR2Undefined"
                | "MalformedPolicy"
                | "MalformedReport"
        )
    }
}

/// Distance settings; the normalization statistics come from the training split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistanceSettings {
    pub normalizer: NormMethod,
    pub aggregation: Aggregation,
    pub clamp_numeric: bool,
}

impl Default for DistanceSettings {
    fn default() -> Self {
        Self {
            normalizer: NormMethod::Range,
            aggregation: Aggregation::Euclidean,
            clamp_numeric: false,
        }
    }
}

impl DistanceSettings {
    pub fn build(&self, stats: &NormStats) -> DistanceConfig {
        DistanceConfig {
            norm_stats: stats.with_method(self.normalizer),
            aggregation: self.aggregation,
            clamp_numeric: self.clamp_numeric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NiceSettings {
    pub reward: RewardMode,
    pub max_queries: u64,
    pub require_correct_neighbor: bool,
}

impl Default for NiceSettings {
    fn default() -> Self {
        Self {
            reward: RewardMode::Sparsity,
            max_queries: 100_000,
            require_correct_neighbor: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedSlice {
    pub name: String,
    #[serde(flatten)]
    pub query: SliceQuery,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

fn default_out() -> PathBuf {
    PathBuf::from(DEFAULT_OUT)
}

fn default_workers() -> usize {
    1
}

fn default_low_support() -> usize {
    DEFAULT_LOW_SUPPORT
}

/// Scan configuration as read from JSON. Relative paths are resolved against
/// the directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub schema: PathBuf,
    pub train: PathBuf,
    pub validation: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oot: Option<PathBuf>,
    pub model: ModelSelector,
    #[serde(default)]
    pub model_params: Hyper,
    #[serde(default)]
    pub bridge: BridgeOptions,
    /// Regression tolerance band; ignored for classification.
    #[serde(default)]
    pub tolerance: Tolerance,
    #[serde(default)]
    pub distance: DistanceSettings,
    #[serde(default)]
    pub nice: NiceSettings,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric_weights: Option<MetricWeights>,
    #[serde(default)]
    pub trust_weights: TrustWeights,
    #[serde(default)]
    pub explainability_weights: ExplainabilityConfig,
    #[serde(default = "default_threshold")]
    pub drift_threshold: f64,
    /// Attributes to audit for fairness; defaults to the schema's protected list.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protected: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub favorable: Option<Favorable>,
    #[serde(default)]
    pub fairness_mode: FairnessMode,
    #[serde(default)]
    pub intersectional: bool,
    #[serde(default)]
    pub slices: Vec<NamedSlice>,
    #[serde(default = "default_low_support")]
    pub low_support_floor: usize,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Artifacts directory; defaults to `<out stem>_artifacts` beside the report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifacts: Option<PathBuf>,
}

impl ScanConfig {
    pub fn new(schema: PathBuf, train: PathBuf, validation: PathBuf, model: ModelSelector) -> Self {
        Self {
            schema,
            train,
            validation,
            oot: None,
            model,
            model_params: Hyper::new(),
            bridge: BridgeOptions::default(),
            tolerance: Tolerance::default(),
            distance: DistanceSettings::default(),
            nice: NiceSettings::default(),
            metric_weights: None,
            trust_weights: TrustWeights::default(),
            explainability_weights: ExplainabilityConfig::default(),
            drift_threshold: DEFAULT_THRESHOLD,
            protected: None,
            favorable: None,
            fairness_mode: FairnessMode::default(),
            intersectional: false,
            slices: Vec::new(),
            low_support_floor: DEFAULT_LOW_SUPPORT,
            workers: 1,
            out: default_out(),
            artifacts: None,
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| WorkbenchError::Config(e.to_string()))
    }

    /// Reads a config file and resolves its relative paths against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => WorkbenchError::MissingFile(path.to_path_buf()),
            _ => WorkbenchError::Io {
                stage: Stage::Config,
                path: path.to_path_buf(),
                source: e,
            },
        })?;
        let mut cfg = Self::from_json_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.schema);
        fix(&mut self.train);
        fix(&mut self.validation);
        if let Some(p) = self.oot.as_mut() {
            fix(p);
        }
        fix(&mut self.out);
        if let Some(p) = self.artifacts.as_mut() {
            fix(p);
        }
    }

    pub fn artifacts_dir(&self) -> PathBuf {
        self.artifacts.clone().unwrap_or_else(|| {
            let stem = self
                .out
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("complai_report");
            self.out.with_file_name(format!("{stem}_artifacts"))
        })
    }

    pub fn validate(&self) -> Result<()> {
        for p in [&self.schema, &self.train, &self.validation]
            .into_iter()
            .chain(self.oot.as_ref())
        {
            if !p.is_file() {
                return Err(WorkbenchError::MissingFile(p.clone()));
            }
        }
        self.explainability_weights.validate().at(Stage::Config)?;
        if let Some(w) = &self.metric_weights {
            w.normalized().at(Stage::Config)?;
        }
        for (c, w) in &self.trust_weights.0 {
            if !w.is_finite() || *w < 0.0 {
                return Err(WorkbenchError::Config(format!(
                    "trust weight for {c:?} must be a nonnegative number"
                )));
            }
        }
        if !self.trust_weights.0.values().any(|w| *w > 0.0) {
            return Err(WorkbenchError::Config(
                "trust weights must not all be zero".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.drift_threshold) {
            return Err(WorkbenchError::Config(
                "drift_threshold must lie in [0, 1]".into(),
            ));
        }
        let t = &self.tolerance;
        if !(t.lambda_lower.is_finite()
            && t.lambda_upper.is_finite()
            && t.lambda_lower >= 0.0
            && t.lambda_upper >= 0.0)
        {
            return Err(WorkbenchError::Config(
                "tolerance lambdas must be nonnegative".into(),
            ));
        }
        if self.nice.max_queries == 0 {
            return Err(WorkbenchError::Config(
                "nice.max_queries must be positive".into(),
            ));
        }
        if self.workers == 0 {
            return Err(WorkbenchError::Config("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Config as echoed into the report: run-specific fields are left out so
    /// that reports compare equal across worker counts and output locations.
    fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            for k in ["workers", "out", "artifacts"] {
                obj.remove(k);
            }
        }
        v
    }
}

/// One row of a Table 2 style explanation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeRow {
    pub feature: String,
    pub original: Value,
    pub counterfactual: Value,
}

fn diff_rows(schema: &Schema, r: &CounterfactualResult) -> Vec<ChangeRow> {
    r.changed_features
        .iter()
        .map(|&j| ChangeRow {
            feature: schema.features[j].name.clone(),
            original: r.original[j].clone(),
            counterfactual: r.counterfactual[j].clone(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualDigest {
    pub row: usize,
    pub prediction: Label,
    pub counterfactual_prediction: Label,
    pub changes: Vec<ChangeRow>,
    pub distance: f64,
    pub query_count: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SkipCounts {
    pub no_unlike_neighbor: usize,
    pub budget_exceeded: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainabilityReport {
    pub score: f64,
    pub histogram: ExplainabilityHistogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub query: SliceQuery,
    /// Evaluation rows in the slice.
    pub support: usize,
    /// Training rows in the slice.
    pub train_support: usize,
    pub performance: Option<PerformanceReport>,
    pub low_support: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTotals {
    /// Every prediction the model served during the scan.
    pub model: u64,
    /// Predictions spent on counterfactual search for evaluation rows.
    pub counterfactual: u64,
}

/// Run metadata that differs between otherwise identical scans.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub started_at: u64,
    pub elapsed_ms: u64,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanReport {
    pub format: u32,
    pub engine_version: String,
    pub task: Task,
    pub config: serde_json::Value,
    pub rows: RowCounts,
    pub scorecard: ScoreCard,
    pub explainability: Option<ExplainabilityReport>,
    pub attribution: Option<AttributionVector>,
    pub robustness: Option<RobustnessReport>,
    pub performance: Option<PerformanceReport>,
    pub drift: Option<DriftReport>,
    pub fairness: Option<FlipTestReport>,
    #[serde(default)]
    pub slices: Vec<SliceReport>,
    pub counterfactuals: Vec<CounterfactualDigest>,
    pub skipped: SkipCounts,
    pub queries: QueryTotals,
    /// Why a component is not applicable or was not computed.
    #[serde(default)]
    pub notes: BTreeMap<Component, String>,
    pub run: RunInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowCounts {
    pub train: usize,
    pub validation: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oot: Option<usize>,
}

impl ScanReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// JSON with the run metadata removed, for reproducibility comparisons.
    pub fn to_stable_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("run");
        }
        serde_json::to_string_pretty(&v).expect("report serializes")
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let report: ScanReport =
            serde_json::from_str(s).map_err(|e| WorkbenchError::MalformedReport(e.to_string()))?;
        if report.format != REPORT_FORMAT {
            return Err(WorkbenchError::MalformedReport(format!(
                "unsupported report format {}",
                report.format
            )));
        }
        Ok(report)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(Stage::Load, path))?;
        Self::from_json_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(Stage::Persist, dir))?;
        }
        fs::write(path, self.to_json() + "\n").map_err(io_err(Stage::Persist, path))
    }
}

/// Minimum score per component and optionally for the trust factor; absent
/// entries are unconstrained.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Policy {
    #[serde(default)]
    pub min_scores: BTreeMap<Component, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_trust: Option<f64>,
}

impl Policy {
    pub fn validate(&self) -> Result<()> {
        for (c, t) in &self.min_scores {
            if !(0.0..=100.0).contains(t) {
                return Err(WorkbenchError::MalformedPolicy(format!(
                    "threshold for {c:?} must lie in [0, 100], got {t}"
                )));
            }
        }
        if let Some(t) = self.min_trust.filter(|t| !(0.0..=100.0).contains(t)) {
            return Err(WorkbenchError::MalformedPolicy(format!(
                "trust threshold must lie in [0, 100], got {t}"
            )));
        }
        Ok(())
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let p: Policy =
            serde_json::from_str(s).map_err(|e| WorkbenchError::MalformedPolicy(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(Stage::Config, path))?;
        Self::from_json_str(&text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub component: Component,
    pub score: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub violations: Vec<Violation>,
    /// Components with a threshold but no score (not applicable in this scan).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub unscored: Vec<Component>,
    /// Trust factor and threshold when the trust factor falls short.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trust_violation: Option<TrustViolation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrustViolation {
    pub score: f64,
    pub threshold: f64,
}

/// Fails iff some scored component, or the trust factor, is below its threshold.
pub fn gate(card: &ScoreCard, policy: &Policy) -> Verdict {
    let mut violations = Vec::new();
    let mut unscored = Vec::new();
    for (&component, &threshold) in &policy.min_scores {
        match card.component(component) {
            Some(score) if score < threshold => violations.push(Violation {
                component,
                score,
                threshold,
            }),
            Some(_) => {}
            None => unscored.push(component),
        }
    }
    let trust_violation = match (policy.min_trust, card.trust) {
        (Some(threshold), Some(score)) if score < threshold => {
            Some(TrustViolation { score, threshold })
        }
        _ => None,
    };
    Verdict {
        pass: violations.is_empty() && trust_violation.is_none(),
        violations,
        unscored,
        trust_violation,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDelta {
    pub feature: String,
    pub original: Value,
    pub neighbor: Value,
    /// Change in the tracked output when only this feature takes the neighbour's value.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalAttribution {
    /// What the deltas measure: a class score or the regression output.
    pub tracked: String,
    pub neighbor_row: usize,
    /// One entry per feature, in schema order.
    pub deltas: Vec<FeatureDelta>,
    /// Features with positive delta, largest |delta| first.
    pub positive: Vec<String>,
    /// Features with negative delta, largest |delta| first.
    pub negative: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhatIfResponse {
    pub instance: Instance,
    pub prediction: Prediction,
    pub counterfactual: Instance,
    pub counterfactual_prediction: Prediction,
    pub diff: Vec<ChangeRow>,
    pub distance: f64,
    pub query_count: u64,
    pub attribution: LocalAttribution,
}

/// Loaded datasets, model and caches shared by scan, What-If and slice queries.
pub struct Session {
    pub config: ScanConfig,
    pub schema: Arc<Schema>,
    pub validation: Dataset,
    pub oot: Option<Dataset>,
    pub model: ModelHandle,
    pub cache: TrainCache,
    pub validation_predictions: Vec<Prediction>,
    pub norm_stats: NormStats,
    pub nice: NiceConfig,
}

impl Session {
    /// Loads the data, opens the model and predicts the training and
    /// validation splits. Training predictions come from the artifacts
    /// directory when a matching cache exists there.
    pub fn open(config: ScanConfig) -> Result<Self> {
        config.validate()?;
        let schema = Arc::new(Schema::from_json_file(&config.schema).at(Stage::Load)?);
        let train = load_csv(&config.train, schema.clone()).at(Stage::Load)?;
        let validation = load_csv(&config.validation, schema.clone()).at(Stage::Load)?;
        let oot = match &config.oot {
            Some(p) => Some(load_csv(p, schema.clone()).at(Stage::Load)?),
            None => None,
        };
        let norm_stats = compute_norm_stats(&train, config.distance.normalizer).at(Stage::Load)?;
        let model = config
            .model
            .open(&train, &config.model_params, &config.bridge)
            .at(Stage::Model)?;
        let cache = match read_cached_predictions(&config.artifacts_dir(), train.len()) {
            Some(preds) => TrainCache::from_parts(train, preds),
            None => TrainCache::build(train, &model).at(Stage::Model)?,
        };
        let validation_predictions = model.predict_batch(&validation.rows).at(Stage::Model)?;
        let nice = NiceConfig {
            reward: config.nice.reward,
            distance: config.distance.build(&norm_stats),
            max_queries: config.nice.max_queries,
            require_correct_neighbor: config.nice.require_correct_neighbor,
        };
        Ok(Self {
            config,
            schema,
            validation,
            oot,
            model,
            cache,
            validation_predictions,
            norm_stats,
            nice,
        })
    }

    fn tolerance(&self) -> Option<Tolerance> {
        Some(self.config.tolerance)
    }

    fn workers(&self) -> usize {
        self.config.workers.max(1)
    }

    /// Full audit pipeline over the validation split.
    pub fn scan(&self) -> Result<ScanReport> {
        let started = Instant::now();
        let started_at = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let queries_before = self.model.query_count();
        let schema = &self.schema;

        let outcomes = explain_batch(
            &self.validation.rows,
            &self.validation_predictions,
            &self.cache,
            &self.model,
            self.tolerance(),
            &self.nice,
            self.workers(),
        );
        let mut results = Vec::with_capacity(outcomes.len());
        let mut digests = Vec::with_capacity(outcomes.len());
        let mut skipped = SkipCounts::default();
        for (row, outcome) in outcomes.into_iter().enumerate() {
            match outcome {
                Ok(r) => {
                    digests.push(CounterfactualDigest {
                        row,
                        prediction: r.original_prediction.label.clone(),
                        counterfactual_prediction: r.counterfactual_prediction.label.clone(),
                        changes: diff_rows(schema, &r),
                        distance: r.distance,
                        query_count: r.query_count,
                    });
                    results.push(r);
                }
                Err(NiceError::NoUnlikeNeighbor) => {
                    skipped.no_unlike_neighbor += 1;
                    skipped.rows.push(row);
                }
                Err(NiceError::QueryBudgetExceeded { .. }) => {
                    skipped.budget_exceeded += 1;
                    skipped.rows.push(row);
                }
                Err(e) => return Err(e).at(Stage::Counterfactuals),
            }
        }
        if !skipped.rows.is_empty() {
            tracing::warn!(
                skipped = skipped.rows.len(),
                "rows without a counterfactual were excluded"
            );
        }
        let cf_queries: u64 = results.iter().map(|r| r.query_count).sum();
        let mut notes = BTreeMap::new();

        let (explainability, attribution, robustness) = if results.is_empty() {
            let why = "no counterfactual could be generated for any validation row".to_string();
            notes.insert(Component::Explainability, why.clone());
            notes.insert(Component::Robustness, why);
            (None, None, None)
        } else {
            let histogram =
                ExplainabilityHistogram::from_changes(results.iter().map(|r| r.n_changed()))
                    .at(Stage::Explainability)?;
            let score = histogram.score(&self.config.explainability_weights);
            let attribution = feature_importance(&results, schema).at(Stage::Attribution)?;
            let robustness = robustness_from_results(&results, schema, &self.norm_stats)
                .at(Stage::Robustness)?;
            (
                Some(ExplainabilityReport { score, histogram }),
                Some(attribution),
                Some(robustness),
            )
        };

        let performance =
            match self.performance_on(&(0..self.validation.len()).collect::<Vec<_>>(), None) {
                Ok(p) => Some(p),
                Err(e @ WorkbenchError::Score { .. }) if e.is_client_error() => {
                    notes.insert(Component::Performance, e.to_string());
                    None
                }
                Err(e) => return Err(e),
            };

        let drift = match &self.oot {
            Some(oot) => Some(
                oot_drift(
                    &self.model,
                    &self.cache,
                    oot,
                    self.tolerance(),
                    &self.nice,
                    self.config.drift_threshold,
                    self.workers(),
                )
                .at(Stage::Drift)?,
            ),
            None => {
                notes.insert(Component::Drift, "no out-of-time window supplied".into());
                None
            }
        };

        let attrs = self.protected_attributes();
        let fairness = if attrs.is_empty() {
            notes.insert(Component::Fairness, "no protected attributes".into());
            None
        } else {
            let opts = FairnessOptions {
                attributes: attrs,
                favorable: self.config.favorable.clone(),
                mode: self.config.fairness_mode,
                intersectional: self.config.intersectional,
                aggregation: self.config.distance.aggregation,
            };
            Some(
                fairness_audit(
                    &self.validation,
                    &opts,
                    &self.model,
                    &self.nice,
                    self.tolerance(),
                    self.workers(),
                )
                .at(Stage::Fairness)?,
            )
        };

        let mut slices = Vec::with_capacity(self.config.slices.len());
        for s in &self.config.slices {
            let mut report = match self.slice_report(&s.query, None) {
                Ok(r) => r,
                Err(WorkbenchError::EmptySlice) => SliceReport {
                    name: None,
                    query: s.query.clone(),
                    support: 0,
                    train_support: self.train_support(&s.query)?,
                    performance: None,
                    low_support: true,
                    warnings: vec!["slice selects no evaluation rows".into()],
                },
                Err(e) => return Err(e),
            };
            report.name = Some(s.name.clone());
            slices.push(report);
        }

        let card = ScoreCard {
            explainability: explainability.as_ref().map(|e| e.score),
            robustness: robustness.as_ref().map(|r| r.avg),
            robustness_min: robustness.as_ref().map(|r| r.min),
            per_class_robustness: robustness
                .as_ref()
                .map(|r| r.per_class.clone())
                .unwrap_or_default(),
            performance: performance.as_ref().map(|p| p.score),
            drift: drift.as_ref().map(|d| d.score * 100.0),
            fairness: fairness.as_ref().map(|f| f.score),
            trust_weights: self.config.trust_weights.clone(),
            trust: None,
        };
        let scorecard = card.with_trust().at(Stage::Performance)?;

        Ok(ScanReport {
            format: REPORT_FORMAT,
            engine_version: ENGINE_VERSION.to_string(),
            task: schema.task(),
            config: self.config.echo(),
            rows: RowCounts {
                train: self.cache.data.len(),
                validation: self.validation.len(),
                oot: self.oot.as_ref().map(Dataset::len),
            },
            scorecard,
            explainability,
            attribution,
            robustness,
            performance,
            drift,
            fairness,
            slices,
            counterfactuals: digests,
            skipped,
            queries: QueryTotals {
                model: self.model.query_count() - queries_before,
                counterfactual: cf_queries,
            },
            notes,
            run: RunInfo {
                started_at,
                elapsed_ms: started.elapsed().as_millis() as u64,
                workers: self.workers(),
            },
        })
    }

    pub fn protected_attributes(&self) -> Vec<String> {
        self.config
            .protected
            .clone()
            .unwrap_or_else(|| self.schema.protected.clone())
    }

    fn metric_weights(&self) -> MetricWeights {
        self.config
            .metric_weights
            .clone()
            .unwrap_or_else(|| MetricWeights::default_for(self.schema.task()))
    }

    fn performance_on(
        &self,
        rows: &[usize],
        weights: Option<&MetricWeights>,
    ) -> Result<PerformanceReport> {
        let weights = weights.cloned().unwrap_or_else(|| self.metric_weights());
        let preds: Vec<Prediction> = rows
            .iter()
            .map(|&i| self.validation_predictions[i].clone())
            .collect();
        let labels: Vec<Label> = rows
            .iter()
            .map(|&i| self.validation.labels[i].clone())
            .collect();
        performance_score(
            &preds,
            &labels,
            &weights,
            &self.schema.target,
            self.schema.len(),
        )
        .at(Stage::Performance)
    }

    fn train_support(&self, query: &SliceQuery) -> Result<usize> {
        Ok(slice_indices(&self.cache.data, query)
            .at(Stage::Slice)?
            .len())
    }

    /// Performance on the validation rows matching `query`.
    pub fn slice_report(
        &self,
        query: &SliceQuery,
        weights: Option<&MetricWeights>,
    ) -> Result<SliceReport> {
        let rows = slice_indices(&self.validation, query).at(Stage::Slice)?;
        if rows.is_empty() {
            return Err(WorkbenchError::EmptySlice);
        }
        let train_support = self.train_support(query)?;
        let floor = self.config.low_support_floor;
        let mut warnings = Vec::new();
        if rows.len() < floor {
            warnings.push(format!(
                "only {} evaluation rows (floor {floor})",
                rows.len()
            ));
        }
        if train_support < floor {
            warnings.push(format!(
                "only {train_support} training rows (floor {floor})"
            ));
        }
        let performance = match self.performance_on(&rows, weights) {
            Ok(p) => Some(p),
            Err(e @ WorkbenchError::Score { .. })
                if matches!(e.code(), "TooFewRows" | "AdjR2Undefined") =>
            {
                warnings.push(format!("metrics undefined: {e}"));
                None
            }
            Err(e) => return Err(e),
        };
        Ok(SliceReport {
            name: None,
            query: query.clone(),
            support: rows.len(),
            train_support,
            performance,
            low_support: !warnings.is_empty() && (rows.len() < floor || train_support < floor),
            warnings,
        })
    }

    /// Parses a What-If instance given as `{feature: value}` or as a value array.
    pub fn parse_instance(&self, body: &serde_json::Value) -> Result<Instance> {
        match body {
            serde_json::Value::Object(map) => {
                let inner = map.get("instance").filter(|_| map.len() == 1);
                match inner {
                    Some(v) => self.parse_instance(v),
                    None => self.schema.instance_from_map(map).at(Stage::Whatif),
                }
            }
            serde_json::Value::Array(_) => {
                let inst: Instance = serde_json::from_value(body.clone())
                    .map_err(|e| TabularError::SchemaViolation(e.to_string()))
                    .at(Stage::Whatif)?;
                self.schema.conform(inst).at(Stage::Whatif)
            }
            _ => Err(TabularError::SchemaViolation(
                "instance must be an object or an array".into(),
            ))
            .at(Stage::Whatif),
        }
    }

    /// Index of the class whose score the local attribution tracks: the
    /// favorable class when declared, else the reference class, else the
    /// predicted class.
    fn tracked_class(&self, pred: &Prediction) -> Option<usize> {
        let target = &self.schema.target;
        let declared = self.config.favorable.as_ref().or(target.favorable.as_ref());
        if let Some(Favorable::Class(c)) = declared {
            if let Some(i) = target.class_index(c) {
                return Some(i);
            }
        }
        target
            .reference_class()
            .or_else(|| pred.label.as_class().and_then(|c| target.class_index(c)))
    }

    fn tracked_output(&self, p: &Prediction, class: Option<usize>) -> f64 {
        match (&p.label, class) {
            (Label::Real(y), _) => *y,
            (Label::Class(c), Some(k)) => match &p.scores {
                Some(s) => s[k],
                None => f64::from(u8::from(self.schema.target.class_index(c) == Some(k))),
            },
            (Label::Class(_), None) => 0.0,
        }
    }

    pub fn whatif(&self, instance: Instance) -> Result<WhatIfResponse> {
        let x = self.schema.conform(instance).at(Stage::Whatif)?;
        let pred = self.model.predict_one(&x).at(Stage::Whatif)?;
        let region = self
            .cache
            .region_for(&pred, self.tolerance())
            .at(Stage::Whatif)?;
        let r = generate_counterfactual(&x, &pred, &self.cache, &self.model, &region, &self.nice)
            .at(Stage::Whatif)?;
        let nn_row =
            nearest_unlike_neighbor(&x, &self.cache, &region, &self.nice).at(Stage::Whatif)?;
        let nn = &self.cache.data.rows[nn_row];

        let class = self.tracked_class(&pred);
        let base = self.tracked_output(&pred, class);
        let mut probes = Vec::new();
        let mut probe_of = vec![None; x.len()];
        for j in 0..x.len() {
            if x[j] != nn[j] {
                let mut z = x.clone();
                z.0[j] = nn[j].clone();
                probe_of[j] = Some(probes.len());
                probes.push(z);
            }
        }
        let probe_preds = if probes.is_empty() {
            Vec::new()
        } else {
            self.model.predict_batch(&probes).at(Stage::Whatif)?
        };
        let deltas: Vec<FeatureDelta> = (0..x.len())
            .map(|j| FeatureDelta {
                feature: self.schema.features[j].name.clone(),
                original: x[j].clone(),
                neighbor: nn[j].clone(),
                delta: probe_of[j]
                    .map_or(0.0, |k| self.tracked_output(&probe_preds[k], class) - base),
            })
            .collect();
        let ranked = |positive: bool| -> Vec<String> {
            let mut v: Vec<&FeatureDelta> = deltas
                .iter()
                .filter(|d| {
                    if positive {
                        d.delta > 0.0
                    } else {
                        d.delta < 0.0
                    }
                })
                .collect();
            v.sort_by(|a, b| b.delta.abs().total_cmp(&a.delta.abs()));
            v.into_iter().map(|d| d.feature.clone()).collect()
        };
        let tracked = match (self.schema.task(), class) {
            (Task::Regression, _) => "prediction".to_string(),
            (_, Some(k)) => format!("score of class {}", self.schema.target.classes[k]),
            (_, None) => "none".to_string(),
        };
        let attribution = LocalAttribution {
            tracked,
            neighbor_row: nn_row,
            positive: ranked(true),
            negative: ranked(false),
            deltas,
        };
        Ok(WhatIfResponse {
            diff: diff_rows(&self.schema, &r),
            instance: x,
            prediction: pred,
            counterfactual: r.counterfactual,
            counterfactual_prediction: r.counterfactual_prediction,
            distance: r.distance,
            query_count: r.query_count,
            attribution,
        })
    }

    /// Writes the training prediction cache and the per-row counterfactual table.
    pub fn write_artifacts(&self, report: &ScanReport) -> Result<PathBuf> {
        let dir = self.config.artifacts_dir();
        fs::create_dir_all(&dir).map_err(io_err(Stage::Persist, &dir))?;
        let preds_path = dir.join(TRAIN_PREDICTIONS_FILE);
        let json = serde_json::to_string(&self.cache.predictions).expect("predictions serialize");
        fs::write(&preds_path, json).map_err(io_err(Stage::Persist, &preds_path))?;

        let cf_path = dir.join(COUNTERFACTUALS_FILE);
        let file = fs::File::create(&cf_path).map_err(io_err(Stage::Persist, &cf_path))?;
        let mut w = BufWriter::new(file);
        for d in &report.counterfactuals {
            let line = serde_json::to_string(d).expect("digest serializes");
            writeln!(w, "{line}").map_err(io_err(Stage::Persist, &cf_path))?;
        }
        w.flush().map_err(io_err(Stage::Persist, &cf_path))?;
        Ok(dir)
    }
}

fn read_cached_predictions(dir: &Path, expected: usize) -> Option<Vec<Prediction>> {
    let text = fs::read_to_string(dir.join(TRAIN_PREDICTIONS_FILE)).ok()?;
    let preds: Vec<Prediction> = serde_json::from_str(&text).ok()?;
    (preds.len() == expected).then_some(preds)
}

/// Opens a session, scans, and persists the report plus artifacts.
pub fn scan(config: ScanConfig) -> Result<ScanReport> {
    let out = config.out.clone();
    let session = Session::open(config)?;
    let report = session.scan()?;
    report.save(&out)?;
    session.write_artifacts(&report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn card(e: f64, r: f64, p: f64) -> ScoreCard {
        ScoreCard {
            explainability: Some(e),
            robustness: Some(r),
            robustness_min: Some(r),
            performance: Some(p),
            ..ScoreCard::default()
        }
    }

    #[test]
    fn gate_verdicts() {
        let c = card(80.0, 58.26, 90.0);
        let pass =
            Policy::from_json_str(r#"{"min_scores": {"explainability": 50, "performance": 85}}"#)
                .unwrap();
        assert!(gate(&c, &pass).pass);
        let fail = Policy::from_json_str(r#"{"min_scores": {"robustness": 60}}"#).unwrap();
        let v = gate(&c, &fail);
        assert!(!v.pass);
        assert_eq!(v.violations.len(), 1);
        assert_eq!(v.violations[0].component, Component::Robustness);
        assert!(gate(&c, &Policy::default()).pass);
        let na = Policy::from_json_str(r#"{"min_scores": {"fairness": 90}}"#).unwrap();
        let v = gate(&c, &na);
        assert!(v.pass);
        assert_eq!(v.unscored, vec![Component::Fairness]);
    }

    #[test]
    fn gate_on_trust() {
        let c = card(80.0, 58.26, 90.0).with_trust().unwrap();
        let mean = (80.0 + 58.26 + 90.0) / 3.0;
        let ok = Policy::from_json_str(&format!(r#"{{"min_trust": {}}}"#, mean - 0.01)).unwrap();
        assert!(gate(&c, &ok).pass);
        let v = gate(&c, &Policy::from_json_str(r#"{"min_trust": 80}"#).unwrap());
        assert!(!v.pass);
        assert!(v.violations.is_empty());
        let t = v.trust_violation.unwrap();
        assert!((t.score - mean).abs() < 1e-9 && t.threshold == 80.0);
    }

    #[test]
    fn malformed_policy() {
        for bad in [
            r#"{"min_scores": {"robustness": 120}}"#,
            r#"{"min_scores": {"speed": 10}}"#,
            r#"{"thresholds": {}}"#,
            r#"{"min_trust": -1}"#,
            "not json",
        ] {
            let e = Policy::from_json_str(bad).unwrap_err();
            assert_eq!(e.code(), "MalformedPolicy", "{bad}");
        }
    }

    #[test]
    fn config_defaults_and_paths() {
        let mut cfg = ScanConfig::from_json_str(
            r#"{"schema": "s.json", "train": "t.csv", "validation": "/abs/v.csv", "model": "builtin:logistic"}"#,
        )
        .unwrap();
        assert_eq!(cfg.out, PathBuf::from(DEFAULT_OUT));
        assert_eq!(cfg.drift_threshold, DEFAULT_THRESHOLD);
        assert_eq!(cfg.low_support_floor, 30);
        assert_eq!(cfg.workers, 1);
        cfg.resolve_paths(Path::new("/base"));
        assert_eq!(cfg.train, PathBuf::from("/base/t.csv"));
        assert_eq!(cfg.validation, PathBuf::from("/abs/v.csv"));
        assert_eq!(
            cfg.artifacts_dir(),
            PathBuf::from("/base/complai_report_artifacts")
        );
        assert!(matches!(
            cfg.validate(),
            Err(WorkbenchError::MissingFile(_))
        ));
        let e = ScanConfig::from_json_str(
            r#"{"schema": "s", "train": "t", "validation": "v", "model": "nope"}"#,
        )
        .unwrap_err();
        assert_eq!(e.code(), "InvalidConfig");
    }

    #[test]
    fn echo_drops_run_fields() {
        let mut cfg = ScanConfig::new(
            "s".into(),
            "t".into(),
            "v".into(),
            "builtin:knn".parse().unwrap(),
        );
        let a = cfg.echo();
        cfg.workers = 4;
        cfg.out = "elsewhere.json".into();
        assert_eq!(a, cfg.echo());
    }
}
