//! Per-aspect scores and their aggregation into the trust factor.
//!
//! All scores are percentages in `[0, 100]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heom::{DistanceConfig, Heom};
use crate::model::Prediction;
use crate::nice::CounterfactualResult;
use crate::tabular::{Label, NormStats, Schema, TargetSpec, Task};

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("no counterfactual results to score")]
    EmptyResults,
    #[error("metric `{0:?}` does not apply to this task")]
    IncompatibleMetric(Metric),
    #[error("adjusted R² needs more than {needed} rows, got {rows}")]
    AdjR2Undefined { rows: usize, needed: usize },
    #[error("at least two rows are needed, got {0}")]
    TooFewRows(usize),
    #[error("{preds} predictions for {labels} labels")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("no applicable component scores")]
    NoApplicableScores,
}

pub type Result<T> = std::result::Result<T, ScoreError>;

/// Bins cover one to five changed features, plus an overflow bin for more.
pub const EXPLAINABILITY_BINS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExplainabilityConfig {
    pub weights: [f64; EXPLAINABILITY_BINS],
}

impl Default for ExplainabilityConfig {
    fn default() -> Self {
        Self {
            weights: [1.0, 0.8, 0.6, 0.4, 0.2, 0.0],
        }
    }
}

impl ExplainabilityConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if w[0] > 1.0
            || w.iter().any(|x| !(0.0..=1.0).contains(x))
            || w.windows(2).any(|p| p[1] > p[0])
        {
            return Err(ScoreError::InvalidWeights(
                "bin weights must lie in [0, 1] and be non-increasing".into(),
            ));
        }
        Ok(())
    }
}

/// Occupancy of the changed-feature-count bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainabilityHistogram {
    pub counts: [usize; EXPLAINABILITY_BINS],
    pub percent: [f64; EXPLAINABILITY_BINS],
}

impl ExplainabilityHistogram {
    pub fn from_changes(n_changed: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut counts = [0usize; EXPLAINABILITY_BINS];
        for n in n_changed {
            counts[n.clamp(1, EXPLAINABILITY_BINS) - 1] += 1;
        }
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(ScoreError::EmptyResults);
        }
        let percent = counts.map(|c| 100.0 * c as f64 / total as f64);
        Ok(Self { counts, percent })
    }

    pub fn score(&self, cfg: &ExplainabilityConfig) -> f64 {
        let s: f64 = cfg
            .weights
            .iter()
            .zip(&self.percent)
            .map(|(w, p)| w * p)
            .sum();
        s.clamp(0.0, 100.0)
    }
}

pub fn explainability_score(
    results: &[CounterfactualResult],
    cfg: &ExplainabilityConfig,
) -> Result<f64> {
    Ok(
        ExplainabilityHistogram::from_changes(results.iter().map(CounterfactualResult::n_changed))?
            .score(cfg),
    )
}

/// How often each feature changes across counterfactuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionVector {
    pub features: Vec<String>,
    pub counts: Vec<f64>,
    pub shares: Vec<f64>,
    /// Feature names by descending share; ties keep declaration order.
    pub ranking: Vec<String>,
}

impl AttributionVector {
    pub fn from_counts(features: Vec<String>, counts: Vec<f64>) -> Self {
        let total: f64 = counts.iter().sum();
        let shares = counts
            .iter()
            .map(|c| if total > 0.0 { c / total } else { 0.0 })
            .collect::<Vec<_>>();
        let mut order: Vec<usize> = (0..features.len()).collect();
        order.sort_by(|&a, &b| shares[b].total_cmp(&shares[a]).then(a.cmp(&b)));
        let ranking = order.iter().map(|&i| features[i].clone()).collect();
        Self {
            features,
            counts,
            shares,
            ranking,
        }
    }

    pub fn share_of(&self, feature: &str) -> Option<f64> {
        self.features
            .iter()
            .position(|f| f == feature)
            .map(|i| self.shares[i])
    }

    pub fn top(&self) -> Option<&str> {
        self.ranking.first().map(String::as_str)
    }
}

pub fn feature_importance(
    results: &[CounterfactualResult],
    schema: &Schema,
) -> Result<AttributionVector> {
    if results.is_empty() {
        return Err(ScoreError::EmptyResults);
    }
    let mut counts = vec![0.0; schema.len()];
    for r in results {
        for &j in &r.changed_features {
            counts[j] += 1.0;
        }
    }
    Ok(AttributionVector::from_counts(
        schema.features.iter().map(|f| f.name.clone()).collect(),
        counts,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    /// Group key is the original predicted class, or `overall` for regression.
    pub per_class: BTreeMap<String, f64>,
    pub min: f64,
    pub avg: f64,
    /// Declared classes without any scored instance; excluded from `min`/`avg`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub empty_classes: Vec<String>,
}

/// Aggregates percentage-scale distances (already in `[0, 1]`) per group.
pub fn robustness_scores(
    groups: &BTreeMap<String, Vec<f64>>,
    declared: &[String],
) -> Result<RobustnessReport> {
    let per_class: BTreeMap<String, f64> = groups
        .iter()
        .filter(|(_, ds)| !ds.is_empty())
        .map(|(k, ds)| (k.clone(), 100.0 * ds.iter().sum::<f64>() / ds.len() as f64))
        .collect();
    if per_class.is_empty() {
        return Err(ScoreError::EmptyResults);
    }
    let empty_classes: Vec<String> = declared
        .iter()
        .filter(|c| !per_class.contains_key(*c))
        .cloned()
        .collect();
    for c in &empty_classes {
        tracing::warn!(class = %c, "no instances predicted in class; excluded from robustness");
    }
    let min = per_class.values().cloned().fold(f64::INFINITY, f64::min);
    let avg = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok(RobustnessReport {
        per_class,
        min,
        avg,
        empty_classes,
    })
}

pub const OVERALL_GROUP: &str = "overall";

/// Recomputes each original-to-counterfactual distance on the percentage scale
/// (range-normalized, clamped, mean over features) and groups by predicted class.
pub fn robustness_from_results(
    results: &[CounterfactualResult],
    schema: &Schema,
    train_stats: &NormStats,
) -> Result<RobustnessReport> {
    let metric = Heom::new(schema, &DistanceConfig::percentage_scale(train_stats));
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in results {
        let key = match &r.original_prediction.label {
            Label::Class(c) => c.clone(),
            Label::Real(_) => OVERALL_GROUP.to_string(),
        };
        groups
            .entry(key)
            .or_default()
            .push(metric.distance(&r.original, &r.counterfactual));
    }
    robustness_scores(&groups, &schema.target.classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    Precision,
    Recall,
    F1,
    R2,
    AdjustedR2,
}

impl Metric {
    pub fn applies_to(self, task: Task) -> bool {
        matches!(self, Metric::R2 | Metric::AdjustedR2) == (task == Task::Regression)
    }
}

/// User-chosen metrics with importance weights; normalized to sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MetricWeights(pub BTreeMap<Metric, f64>);

impl MetricWeights {
    pub fn single(metric: Metric) -> Self {
        Self(BTreeMap::from([(metric, 1.0)]))
    }

    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Regression => Self::single(Metric::AdjustedR2),
            _ => Self::single(Metric::F1),
        }
    }

    pub fn normalized(&self) -> Result<BTreeMap<Metric, f64>> {
        if self.0.values().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(ScoreError::InvalidWeights(
                "metric weights must be non-negative".into(),
            ));
        }
        let total: f64 = self.0.values().sum();
        if total <= 0.0 {
            return Err(ScoreError::InvalidWeights(
                "metric weights sum to zero".into(),
            ));
        }
        Ok(self.0.iter().map(|(m, w)| (*m, w / total)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub score: f64,
    /// Each chosen metric as a percentage.
    pub metrics: BTreeMap<Metric, f64>,
}

/// Raw metric values in `[0, 1]` (R² clamped at 0).
pub fn metric_values(
    preds: &[Prediction],
    labels: &[Label],
    metrics: impl IntoIterator<Item = Metric>,
    spec: &TargetSpec,
    m_features: usize,
) -> Result<BTreeMap<Metric, f64>> {
    if preds.len() != labels.len() {
        return Err(ScoreError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    let n = labels.len();
    if n < 2 {
        return Err(ScoreError::TooFewRows(n));
    }
    let mut out = BTreeMap::new();
    let mut confusion: Option<Confusion> = None;
    for metric in metrics {
        if !metric.applies_to(spec.task) {
            return Err(ScoreError::IncompatibleMetric(metric));
        }
        let v = match metric {
            Metric::R2 => r2(preds, labels).max(0.0),
            Metric::AdjustedR2 => {
                if n <= m_features + 1 {
                    return Err(ScoreError::AdjR2Undefined {
                        rows: n,
                        needed: m_features + 1,
                    });
                }
                let r2 = r2(preds, labels);
                let adj = 1.0 - (1.0 - r2) * (n - 1) as f64 / (n - m_features - 1) as f64;
                adj.max(0.0)
            }
            m => {
                let c = confusion.get_or_insert_with(|| Confusion::new(preds, labels, spec));
                c.metric(m, spec)
            }
        };
        out.insert(metric, v);
    }
    Ok(out)
}

pub fn performance_score(
    preds: &[Prediction],
    labels: &[Label],
    weights: &MetricWeights,
    spec: &TargetSpec,
    m_features: usize,
) -> Result<PerformanceReport> {
    let w = weights.normalized()?;
    let values = metric_values(preds, labels, w.keys().copied(), spec, m_features)?;
    let score = w
        .iter()
        .map(|(m, wi)| wi * values[m] * 100.0)
        .sum::<f64>()
        .clamp(0.0, 100.0);
    Ok(PerformanceReport {
        score,
        metrics: values.into_iter().map(|(m, v)| (m, v * 100.0)).collect(),
    })
}

fn r2(preds: &[Prediction], labels: &[Label]) -> f64 {
    let ys: Vec<f64> = labels
        .iter()
        .map(|l| l.as_real().unwrap_or(f64::NAN))
        .collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    let ss_tot: f64 = ys.iter().map(|y| (y - mean).powi(2)).sum();
    let ss_res: f64 = preds
        .iter()
        .zip(&ys)
        .map(|(p, y)| (y - p.value().unwrap_or(f64::NAN)).powi(2))
        .sum();
    if ss_tot == 0.0 {
        return if ss_res == 0.0 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

/// `matrix[truth][predicted]` over the declared classes.
struct Confusion {
    matrix: Vec<Vec<usize>>,
    n: usize,
}

impl Confusion {
    fn new(preds: &[Prediction], labels: &[Label], spec: &TargetSpec) -> Self {
        let k = spec.classes.len();
        let mut matrix = vec![vec![0usize; k]; k];
        let idx = |l: &Label| l.as_class().and_then(|c| spec.class_index(c));
        for (p, y) in preds.iter().zip(labels) {
            if let (Some(t), Some(q)) = (idx(y), idx(&p.label)) {
                matrix[t][q] += 1;
            }
        }
        Self {
            matrix,
            n: labels.len(),
        }
    }

    fn per_class(&self, c: usize) -> (f64, f64, f64) {
        let tp = self.matrix[c][c] as f64;
        let predicted: usize = self.matrix.iter().map(|row| row[c]).sum();
        let actual: usize = self.matrix[c].iter().sum();
        let precision = if predicted > 0 {
            tp / predicted as f64
        } else {
            0.0
        };
        let recall = if actual > 0 { tp / actual as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        (precision, recall, f1)
    }

    fn metric(&self, m: Metric, spec: &TargetSpec) -> f64 {
        if m == Metric::Accuracy {
            let correct: usize = (0..self.matrix.len()).map(|c| self.matrix[c][c]).sum();
            return correct as f64 / self.n as f64;
        }
        let pick = |(p, r, f): (f64, f64, f64)| match m {
            Metric::Precision => p,
            Metric::Recall => r,
            _ => f,
        };
        match spec.task {
            Task::Binary => pick(self.per_class(spec.reference_class().unwrap_or(1))),
            _ => {
                // Macro average over classes seen in truth or predictions.
                let k = self.matrix.len();
                let seen: Vec<usize> = (0..k)
                    .filter(|&c| {
                        self.matrix[c].iter().sum::<usize>()
                            + self.matrix.iter().map(|r| r[c]).sum::<usize>()
                            > 0
                    })
                    .collect();
                seen.iter().map(|&c| pick(self.per_class(c))).sum::<f64>()
                    / seen.len().max(1) as f64
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Explainability,
    Robustness,
    Performance,
    Drift,
    Fairness,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Explainability,
        Component::Robustness,
        Component::Performance,
        Component::Drift,
        Component::Fairness,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrustWeights(pub BTreeMap<Component, f64>);

impl Default for TrustWeights {
    fn default() -> Self {
        Self(Component::ALL.iter().map(|c| (*c, 1.0)).collect())
    }
}

impl TrustWeights {
    pub fn weight(&self, c: Component) -> f64 {
        self.0.get(&c).copied().unwrap_or(0.0)
    }
}

/// Component percentages; `None` marks a component as not applicable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ScoreCard {
    pub explainability: Option<f64>,
    /// Unweighted mean of the per-class robustness scores.
    pub robustness: Option<f64>,
    pub robustness_min: Option<f64>,
    #[serde(default)]
    pub per_class_robustness: BTreeMap<String, f64>,
    pub performance: Option<f64>,
    pub drift: Option<f64>,
    pub fairness: Option<f64>,
    #[serde(default)]
    pub trust_weights: TrustWeights,
    pub trust: Option<f64>,
}

impl ScoreCard {
    pub fn component(&self, c: Component) -> Option<f64> {
        match c {
            Component::Explainability => self.explainability,
            Component::Robustness => self.robustness,
            Component::Performance => self.performance,
            Component::Drift => self.drift,
            Component::Fairness => self.fairness,
        }
    }

    pub fn with_trust(mut self) -> Result<Self> {
        self.trust = Some(trust_factor(&self)?);
        Ok(self)
    }
}

/// Weighted mean over applicable components, weights renormalized over them.
pub fn trust_factor(card: &ScoreCard) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for c in Component::ALL {
        if let Some(s) = card.component(c) {
            let w = card.trust_weights.weight(c);
            if !w.is_finite() || w < 0.0 {
                return Err(ScoreError::InvalidWeights(format!(
                    "bad trust weight for {c:?}"
                )));
            }
            num += w * s;
            den += w;
        }
    }
    if den <= 0.0 {
        return Err(ScoreError::NoApplicableScores);
    }
    Ok(num / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn hist(counts: &[usize]) -> ExplainabilityHistogram {
        ExplainabilityHistogram::from_changes(
            counts
                .iter()
                .enumerate()
                .flat_map(|(bin, &c)| std::iter::repeat_n(bin + 1, c)),
        )
        .unwrap()
    }

    #[test]
    fn explainability_fixtures() {
        let cfg = ExplainabilityConfig::default();
        assert_eq!(hist(&[7]).score(&cfg), 100.0);
        assert_eq!(
            ExplainabilityHistogram::from_changes([6, 9, 12])
                .unwrap()
                .score(&cfg),
            0.0
        );
        assert_abs_diff_eq!(hist(&[5, 0, 5]).score(&cfg), 80.0, epsilon = 1e-9);
        assert_eq!(
            ExplainabilityHistogram::from_changes(std::iter::empty()),
            Err(ScoreError::EmptyResults)
        );
    }

    #[test]
    fn bin_weights_must_decrease() {
        let bad = ExplainabilityConfig {
            weights: [1.0, 0.5, 0.7, 0.2, 0.1, 0.0],
        };
        assert!(bad.validate().is_err());
        assert!(ExplainabilityConfig::default().validate().is_ok());
    }

    #[test]
    fn attribution_hand_count() {
        let a = AttributionVector::from_counts(
            vec!["A".into(), "B".into(), "C".into(), "D".into()],
            vec![2.0, 1.0, 1.0, 0.0],
        );
        assert_eq!(a.shares, vec![0.5, 0.25, 0.25, 0.0]);
        assert_eq!(a.ranking, vec!["A", "B", "C", "D"]);
    }

    #[test]
    fn robustness_aggregation() {
        let groups = BTreeMap::from([("1".to_string(), vec![0.5, 1.0])]);
        assert_eq!(
            robustness_scores(&groups, &[]).unwrap().per_class["1"],
            75.0
        );
        let groups = BTreeMap::from([("a".to_string(), vec![0.4]), ("b".to_string(), vec![0.6])]);
        let r = robustness_scores(&groups, &["a".into(), "b".into(), "c".into()]).unwrap();
        assert_abs_diff_eq!(r.min, 40.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.avg, 50.0, epsilon = 1e-9);
        assert_eq!(r.empty_classes, vec!["c"]);
        assert_eq!(
            robustness_scores(&BTreeMap::new(), &[]),
            Err(ScoreError::EmptyResults)
        );
    }

    fn cls(c: &str) -> Prediction {
        Prediction {
            label: Label::Class(c.into()),
            scores: None,
        }
    }

    fn binary() -> TargetSpec {
        TargetSpec {
            name: "y".into(),
            task: Task::Binary,
            classes: vec!["0".into(), "1".into()],
            favorable: None,
        }
    }

    #[test]
    fn confusion_fixture() {
        // TP=4, FP=1, FN=1, TN=4
        let pairs = [("1", "1"); 4]
            .into_iter()
            .chain([("1", "0")])
            .chain([("0", "1")])
            .chain([("0", "0"); 4]);
        let (preds, labels): (Vec<_>, Vec<_>) =
            pairs.map(|(p, y)| (cls(p), Label::Class(y.into()))).unzip();
        let all = [
            Metric::Accuracy,
            Metric::Precision,
            Metric::Recall,
            Metric::F1,
        ];
        let v = metric_values(&preds, &labels, all, &binary(), 3).unwrap();
        for m in all {
            assert_abs_diff_eq!(v[&m], 0.8, epsilon = 1e-12);
        }
        let w = MetricWeights(BTreeMap::from([
            (Metric::Precision, 0.3),
            (Metric::F1, 0.7),
        ]));
        assert_abs_diff_eq!(
            performance_score(&preds, &labels, &w, &binary(), 3)
                .unwrap()
                .score,
            80.0,
            epsilon = 1e-9
        );
        assert_eq!(
            metric_values(&preds, &labels, [Metric::R2], &binary(), 3),
            Err(ScoreError::IncompatibleMetric(Metric::R2))
        );
    }

    #[test]
    fn regression_metrics() {
        let spec = TargetSpec {
            name: "y".into(),
            task: Task::Regression,
            classes: vec![],
            favorable: None,
        };
        let ys = [1.0, 2.0, 4.0, 8.0, 3.0];
        let preds: Vec<_> = ys
            .iter()
            .map(|&y| Prediction {
                label: Label::Real(y),
                scores: None,
            })
            .collect();
        let labels: Vec<_> = ys.iter().map(|&y| Label::Real(y)).collect();
        let v = metric_values(&preds, &labels, [Metric::R2, Metric::AdjustedR2], &spec, 2).unwrap();
        assert_eq!((v[&Metric::R2], v[&Metric::AdjustedR2]), (1.0, 1.0));
        assert_eq!(
            metric_values(&preds, &labels, [Metric::AdjustedR2], &spec, 4),
            Err(ScoreError::AdjR2Undefined { rows: 5, needed: 5 })
        );
        // Anti-correlated predictions give negative R², clamped to 0.
        let bad: Vec<_> = ys
            .iter()
            .map(|&y| Prediction {
                label: Label::Real(-y),
                scores: None,
            })
            .collect();
        assert_eq!(
            metric_values(&bad, &labels, [Metric::R2], &spec, 1).unwrap()[&Metric::R2],
            0.0
        );
        assert_eq!(
            metric_values(&preds, &labels, [Metric::F1], &spec, 1),
            Err(ScoreError::IncompatibleMetric(Metric::F1))
        );
    }

    #[test]
    fn macro_average_multiclass() {
        let spec = TargetSpec {
            name: "y".into(),
            task: Task::Multiclass,
            classes: vec!["a".into(), "b".into(), "c".into()],
            favorable: None,
        };
        let preds = vec![cls("a"), cls("a"), cls("b"), cls("c")];
        let labels: Vec<_> = ["a", "b", "b", "c"]
            .iter()
            .map(|c| Label::Class(c.to_string()))
            .collect();
        let v = metric_values(
            &preds,
            &labels,
            [Metric::Precision, Metric::Recall],
            &spec,
            1,
        )
        .unwrap();
        // precision: a 1/2, b 1, c 1 ; recall: a 1, b 1/2, c 1
        assert_abs_diff_eq!(v[&Metric::Precision], 2.5 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[&Metric::Recall], 2.5 / 3.0, epsilon = 1e-12);
    }

    fn card(scores: [Option<f64>; 5]) -> ScoreCard {
        ScoreCard {
            explainability: scores[0],
            robustness: scores[1],
            performance: scores[2],
            drift: scores[3],
            fairness: scores[4],
            ..Default::default()
        }
    }

    #[test]
    fn trust_rows() {
        let boston = card([Some(73.45), Some(100.0), Some(68.58), Some(100.0), None]);
        assert!((trust_factor(&boston).unwrap() - 85.51).abs() <= 0.005);
        let wine = card([
            Some(84.29),
            Some(95.92),
            Some(75.64),
            Some(84.75),
            Some(97.01),
        ]);
        assert!((trust_factor(&wine).unwrap() - 87.52).abs() <= 0.005);
        assert_eq!(
            trust_factor(&card([None, None, Some(42.0), None, None])).unwrap(),
            42.0
        );
        assert_eq!(
            trust_factor(&card([None; 5])),
            Err(ScoreError::NoApplicableScores)
        );
    }

    proptest! {
        #[test]
        fn trust_is_bounded(scores in prop::array::uniform5(prop::option::of(0.0..=100.0f64)),
                            weights in prop::array::uniform5(0.01..5.0f64)) {
            let mut c = card(scores);
            c.trust_weights = TrustWeights(Component::ALL.iter().copied().zip(weights).collect());
            let applicable: Vec<f64> = scores.iter().flatten().copied().collect();
            match trust_factor(&c) {
                Ok(t) => {
                    let lo = applicable.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = applicable.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(t >= lo - 1e-9 && t <= hi + 1e-9);
                }
                Err(e) => {
                    prop_assert!(applicable.is_empty());
                    prop_assert_eq!(e, ScoreError::NoApplicableScores);
                }
            }
        }

        #[test]
        fn importance_shares_sum_to_one(counts in prop::collection::vec(0u32..20, 1..8)) {
            let names = (0..counts.len()).map(|i| format!("f{i}")).collect();
            let a = AttributionVector::from_counts(names, counts.iter().map(|&c| c as f64).collect());
            let total: f64 = a.shares.iter().sum();
            if counts.iter().any(|&c| c > 0) {
                prop_assert!((total - 1.0).abs() < 1e-9);
            } else {
                prop_assert_eq!(total, 0.0);
            }
        }
    }
}
