//! Nearest-counterfactual generation.
//!
//! For an instance `x` the search first picks its nearest unlike neighbour: the
//! closest pooled instance whose cached prediction already lies in the target
//! region. It then grows a hybrid from `x` by copying the neighbour's values one
//! feature at a time, choosing each round the substitution with the best
//! reward, and stops at the first hybrid that enters the region. Every value in
//! the result comes from `x` or the neighbour.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heom::{DistanceConfig, Heom};
use crate::model::{ModelError, ModelHandle, Prediction};
use crate::tabular::{Dataset, Instance, Label, TargetSpec, Task};

#[derive(Debug, Error)]
pub enum NiceError {
    #[error("regression target region needs a tolerance and a target standard deviation")]
    MissingTolerance,
    #[error("no training instance qualifies as an unlike neighbour")]
    NoUnlikeNeighbor,
    #[error("query budget of {budget} exhausted after {used} model calls")]
    QueryBudgetExceeded { used: u64, budget: u64 },
    #[error("model is not deterministic: the unlike neighbour was not re-predicted in region")]
    Nondeterministic,
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, NiceError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    #[default]
    Both,
    AboveOnly,
    BelowOnly,
}

/// Band half-widths in units of the target standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerance {
    pub lambda_lower: f64,
    pub lambda_upper: f64,
    pub side: Side,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            lambda_lower: 1.0,
            lambda_upper: 1.0,
            side: Side::Both,
        }
    }
}

impl Tolerance {
    pub fn symmetric(lambda: f64) -> Self {
        Self {
            lambda_lower: lambda,
            lambda_upper: lambda,
            side: Side::Both,
        }
    }
}

/// Outputs that qualify as counterfactual for one original prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetRegion {
    /// Any class other than `original`.
    OtherClass {
        original: String,
        original_index: usize,
    },
    /// Outside the closed band `[lower, upper]` around `center`.
    OutsideBand {
        center: f64,
        lower: f64,
        upper: f64,
        side: Side,
    },
}

impl TargetRegion {
    pub fn accepts_label(&self, label: &Label) -> bool {
        match (self, label) {
            (TargetRegion::OtherClass { original, .. }, Label::Class(c)) => c != original,
            (
                TargetRegion::OutsideBand {
                    lower, upper, side, ..
                },
                Label::Real(y),
            ) => match side {
                Side::Both => *y < *lower || *y > *upper,
                Side::AboveOnly => *y > *upper,
                Side::BelowOnly => *y < *lower,
            },
            _ => false,
        }
    }

    pub fn accepts(&self, p: &Prediction) -> bool {
        self.accepts_label(&p.label)
    }

    /// How far a prediction has moved toward the region; `None` when the model
    /// gives no signal beyond the label.
    fn progress(&self, p: &Prediction) -> Option<f64> {
        match self {
            TargetRegion::OtherClass { original_index, .. } => {
                p.scores.as_ref().map(|s| 1.0 - s[*original_index])
            }
            TargetRegion::OutsideBand { center, side, .. } => {
                let y = p.value()?;
                Some(match side {
                    Side::Both => (y - center).abs(),
                    Side::AboveOnly => y - center,
                    Side::BelowOnly => center - y,
                })
            }
        }
    }
}

pub fn target_region(
    pred_x0: &Prediction,
    spec: &TargetSpec,
    tolerance: Option<Tolerance>,
    sigma: Option<f64>,
) -> Result<TargetRegion> {
    match (spec.task, &pred_x0.label) {
        (Task::Regression, Label::Real(y0)) => {
            let (tol, sigma) = tolerance.zip(sigma).ok_or(NiceError::MissingTolerance)?;
            if tol.lambda_lower < 0.0 || tol.lambda_upper < 0.0 || sigma < 0.0 {
                return Err(NiceError::MissingTolerance);
            }
            Ok(TargetRegion::OutsideBand {
                center: *y0,
                lower: y0 - tol.lambda_lower * sigma,
                upper: y0 + tol.lambda_upper * sigma,
                side: tol.side,
            })
        }
        (_, Label::Class(c)) => Ok(TargetRegion::OtherClass {
            original: c.clone(),
            original_index: spec.class_index(c).unwrap_or(0),
        }),
        _ => Err(NiceError::Model(ModelError::BridgeFailure {
            reason: "prediction type does not match the task".into(),
            payload: String::new(),
        })),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Largest move toward the region per substituted feature.
    #[default]
    Sparsity,
    /// Move toward the region per unit of added distance.
    Proximity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NiceConfig {
    pub reward: RewardMode,
    pub distance: DistanceConfig,
    pub max_queries: u64,
    pub require_correct_neighbor: bool,
}

impl NiceConfig {
    pub fn new(distance: DistanceConfig) -> Self {
        Self {
            reward: RewardMode::Sparsity,
            distance,
            max_queries: 100_000,
            require_correct_neighbor: true,
        }
    }
}

/// Neighbour pool with its predictions, computed once per scan.
#[derive(Debug, Clone)]
pub struct TrainCache {
    pub data: Dataset,
    pub predictions: Vec<Prediction>,
    /// Population standard deviation of the pool's regression targets.
    pub target_std: Option<f64>,
}

impl TrainCache {
    pub fn build(data: Dataset, model: &ModelHandle) -> Result<Self> {
        let predictions = model.predict_batch(&data.rows)?;
        Ok(Self::from_parts(data, predictions))
    }

    pub fn from_parts(data: Dataset, predictions: Vec<Prediction>) -> Self {
        let target_std = data.target_std();
        Self {
            data,
            predictions,
            target_std,
        }
    }

    pub fn region_for(
        &self,
        pred: &Prediction,
        tolerance: Option<Tolerance>,
    ) -> Result<TargetRegion> {
        target_region(pred, &self.data.schema.target, tolerance, self.target_std)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualResult {
    pub original: Instance,
    pub counterfactual: Instance,
    /// Indices of the features whose value differs from `original`, ascending.
    pub changed_features: Vec<usize>,
    pub distance: f64,
    pub query_count: u64,
    pub neighbor: Instance,
    pub neighbor_row: usize,
    pub original_prediction: Prediction,
    pub counterfactual_prediction: Prediction,
}

impl CounterfactualResult {
    pub fn n_changed(&self) -> usize {
        self.changed_features.len()
    }
}

/// Row index of the closest pooled instance whose prediction lies in `region`.
/// With `require_correct_neighbor`, the row's true label must also lie in it.
pub fn nearest_unlike_neighbor(
    x: &Instance,
    cache: &TrainCache,
    region: &TargetRegion,
    cfg: &NiceConfig,
) -> Result<usize> {
    let metric = Heom::new(&cache.data.schema, &cfg.distance);
    nearest_unlike_with(x, cache, region, cfg, &metric)
}

fn nearest_unlike_with(
    x: &Instance,
    cache: &TrainCache,
    region: &TargetRegion,
    cfg: &NiceConfig,
    metric: &Heom,
) -> Result<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, (row, pred)) in cache.data.rows.iter().zip(&cache.predictions).enumerate() {
        if !region.accepts(pred) {
            continue;
        }
        if cfg.require_correct_neighbor {
            let truth = &cache.data.labels[i];
            let correct = match truth {
                Label::Class(_) => *truth == pred.label,
                Label::Real(_) => region.accepts_label(truth),
            };
            if !correct {
                continue;
            }
        }
        let d = metric.distance(x, row);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i).ok_or(NiceError::NoUnlikeNeighbor)
}

pub fn generate_counterfactual(
    x: &Instance,
    original_prediction: &Prediction,
    cache: &TrainCache,
    model: &ModelHandle,
    region: &TargetRegion,
    cfg: &NiceConfig,
) -> Result<CounterfactualResult> {
    let metric = Heom::new(&cache.data.schema, &cfg.distance);
    let nn_row = nearest_unlike_with(x, cache, region, cfg, &metric)?;
    let nn = &cache.data.rows[nn_row];

    let mut hybrid = x.clone();
    let mut pending: Vec<usize> = (0..x.len()).filter(|&j| x[j] != nn[j]).collect();
    let mut hybrid_dist = 0.0;
    let mut queries = 0u64;
    loop {
        if pending.is_empty() {
            return Err(NiceError::Nondeterministic);
        }
        if queries + pending.len() as u64 > cfg.max_queries {
            return Err(NiceError::QueryBudgetExceeded {
                used: queries,
                budget: cfg.max_queries,
            });
        }
        let candidates: Vec<Instance> = pending
            .iter()
            .map(|&j| {
                let mut c = hybrid.clone();
                c.0[j] = nn[j].clone();
                c
            })
            .collect();
        let preds = model.predict_batch(&candidates)?;
        queries += candidates.len() as u64;
        let dists: Vec<f64> = candidates.iter().map(|c| metric.distance(x, c)).collect();

        let any_in = preds.iter().any(|p| region.accepts(p));
        let mut pick: Option<(f64, usize)> = None;
        for (k, p) in preds.iter().enumerate() {
            if any_in && !region.accepts(p) {
                continue;
            }
            let reward = match (region.progress(p), cfg.reward) {
                (Some(g), RewardMode::Sparsity) => g,
                (Some(g), RewardMode::Proximity) => g / (dists[k] - hybrid_dist).max(1e-12),
                (None, _) => -dists[k],
            };
            if pick.is_none_or(|(best, _)| reward > best) {
                pick = Some((reward, k));
            }
        }
        let (_, k) = pick.expect("at least one candidate");
        let entered = region.accepts(&preds[k]);
        hybrid = candidates.into_iter().nth(k).unwrap();
        hybrid_dist = dists[k];
        pending.remove(k);
        if entered {
            let changed_features = (0..x.len()).filter(|&j| x[j] != hybrid[j]).collect();
            return Ok(CounterfactualResult {
                original: x.clone(),
                counterfactual: hybrid,
                changed_features,
                distance: hybrid_dist,
                query_count: queries,
                neighbor: nn.clone(),
                neighbor_row: nn_row,
                original_prediction: original_prediction.clone(),
                counterfactual_prediction: preds[k].clone(),
            });
        }
    }
}

/// Predicts `x`, derives its target region and generates its counterfactual.
pub fn explain(
    x: &Instance,
    cache: &TrainCache,
    model: &ModelHandle,
    tolerance: Option<Tolerance>,
    cfg: &NiceConfig,
) -> Result<CounterfactualResult> {
    let pred = model.predict_one(x)?;
    let region = cache.region_for(&pred, tolerance)?;
    generate_counterfactual(x, &pred, cache, model, &region, cfg)
}

/// Counterfactuals for many instances whose predictions are already known.
/// Results keep input order regardless of `workers`.
pub fn explain_batch(
    rows: &[Instance],
    predictions: &[Prediction],
    cache: &TrainCache,
    model: &ModelHandle,
    tolerance: Option<Tolerance>,
    cfg: &NiceConfig,
    workers: usize,
) -> Vec<Result<CounterfactualResult>> {
    let run = |i: usize| -> Result<CounterfactualResult> {
        let region = cache.region_for(&predictions[i], tolerance)?;
        generate_counterfactual(&rows[i], &predictions[i], cache, model, &region, cfg)
    };
    if workers <= 1 {
        return (0..rows.len()).map(run).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(|| (0..rows.len()).into_par_iter().map(run).collect()),
        Err(_) => (0..rows.len()).map(run).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heom::DistanceConfig;
    use crate::model::{Backend, Predictor};
    use crate::tabular::{compute_norm_stats, FeatureSpec, NormMethod, Schema};
    use std::sync::Arc;

    fn binary_target() -> TargetSpec {
        TargetSpec {
            name: "y".into(),
            task: Task::Binary,
            classes: vec!["reject".into(), "accept".into()],
            favorable: None,
        }
    }

    fn class_pred(c: &str) -> Prediction {
        Prediction {
            label: Label::Class(c.into()),
            scores: None,
        }
    }

    #[test]
    fn regression_band_worked_example() {
        let spec = TargetSpec {
            name: "price".into(),
            task: Task::Regression,
            classes: vec![],
            favorable: None,
        };
        let p = Prediction {
            label: Label::Real(10000.0),
            scores: None,
        };
        let r = target_region(&p, &spec, Some(Tolerance::symmetric(100.0)), Some(10.0)).unwrap();
        let at = |y: f64| r.accepts_label(&Label::Real(y));
        assert!(at(8999.99) && at(11000.01));
        assert!(!at(9000.0) && !at(11000.0) && !at(10000.0));
        assert!(matches!(
            target_region(&p, &spec, None, Some(10.0)),
            Err(NiceError::MissingTolerance)
        ));
        let above = Tolerance {
            side: Side::AboveOnly,
            ..Tolerance::symmetric(100.0)
        };
        let r = target_region(&p, &spec, Some(above), Some(10.0)).unwrap();
        assert!(!r.accepts_label(&Label::Real(8000.0)) && r.accepts_label(&Label::Real(12000.0)));
    }

    #[test]
    fn class_regions() {
        let r = target_region(&class_pred("accept"), &binary_target(), None, None).unwrap();
        assert!(r.accepts(&class_pred("reject")) && !r.accepts(&class_pred("accept")));
        let five = TargetSpec {
            name: "species".into(),
            task: Task::Multiclass,
            classes: (1..=5).map(|i| format!("c{i}")).collect(),
            favorable: None,
        };
        let r = target_region(&class_pred("c3"), &five, None, None).unwrap();
        let accepted: Vec<_> = five
            .classes
            .iter()
            .filter(|c| r.accepts(&class_pred(c)))
            .cloned()
            .collect();
        assert_eq!(accepted, vec!["c1", "c2", "c4", "c5"]);
    }

    /// Accepts iff income ≥ 40000 and years ≥ 7, regardless of job.
    struct LoanRule;

    impl Predictor for LoanRule {
        fn backend(&self) -> Backend {
            Backend::Builtin
        }

        fn predict(&self, batch: &[Instance]) -> crate::model::Result<Vec<Prediction>> {
            Ok(batch
                .iter()
                .map(|x| {
                    let ok = x[0].as_num().unwrap() >= 40000.0 && x[1].as_num().unwrap() >= 7.0;
                    class_pred(if ok { "accept" } else { "reject" })
                })
                .collect())
        }
    }

    fn loan_fixture() -> (TrainCache, ModelHandle, NiceConfig) {
        let schema = Arc::new(
            Schema::new(
                vec![
                    FeatureSpec::numerical("income"),
                    FeatureSpec::numerical("years"),
                    FeatureSpec::categorical("job"),
                ],
                binary_target(),
                vec![],
            )
            .unwrap(),
        );
        let rows = [
            (20000.0, 2.0, "government", "reject"),
            (40000.0, 7.0, "business", "accept"),
            (60000.0, 12.0, "business", "accept"),
            (30000.0, 10.0, "private", "reject"),
            (90000.0, 3.0, "private", "reject"),
        ];
        let data = Dataset::new(
            schema,
            rows.iter()
                .map(|(i, y, j, _)| Instance(vec![(*i).into(), (*y).into(), (*j).into()]))
                .collect(),
            rows.iter().map(|r| Label::Class(r.3.into())).collect(),
        )
        .unwrap();
        let model = ModelHandle::new(Arc::new(LoanRule), binary_target());
        let stats = compute_norm_stats(&data, NormMethod::Range).unwrap();
        let cache = TrainCache::build(data, &model).unwrap();
        (
            cache,
            model,
            NiceConfig::new(DistanceConfig::euclidean(stats)),
        )
    }

    #[test]
    fn loan_explanation_changes_income_and_years_only() {
        let (cache, model, cfg) = loan_fixture();
        let x = Instance(vec![35000.0.into(), 6.0.into(), "private".into()]);
        let r = explain(&x, &cache, &model, None, &cfg).unwrap();
        assert_eq!(r.counterfactual[0], 40000.0.into());
        assert_eq!(r.counterfactual[1], 7.0.into());
        assert_eq!(r.counterfactual[2], "private".into());
        assert_eq!(r.changed_features, vec![0, 1]);
        assert_eq!(r.neighbor_row, 1);
        assert!(
            r.distance <= crate::heom::heom(&x, &r.neighbor, &cache.data.schema, &cfg.distance)
        );
    }

    #[test]
    fn single_difference_returns_neighbor() {
        let (cache, model, cfg) = loan_fixture();
        let x = Instance(vec![40000.0.into(), 6.0.into(), "business".into()]);
        let r = explain(&x, &cache, &model, None, &cfg).unwrap();
        assert_eq!(r.counterfactual, cache.data.rows[1]);
        assert_eq!((r.n_changed(), r.query_count), (1, 1));
    }

    #[test]
    fn mislabeled_neighbor_is_excluded() {
        let (mut cache, _model, mut cfg) = loan_fixture();
        // Row 1 predicted accept but labelled reject.
        cache.data.labels[1] = Label::Class("reject".into());
        let x = Instance(vec![40000.0.into(), 6.0.into(), "business".into()]);
        let region = cache.region_for(&class_pred("reject"), None).unwrap();
        assert_eq!(
            nearest_unlike_neighbor(&x, &cache, &region, &cfg).unwrap(),
            2
        );
        cfg.require_correct_neighbor = false;
        assert_eq!(
            nearest_unlike_neighbor(&x, &cache, &region, &cfg).unwrap(),
            1
        );
    }

    #[test]
    fn constant_model_has_no_unlike_neighbor() {
        let (cache, _, cfg) = loan_fixture();
        let mut cache = cache;
        cache.predictions = vec![class_pred("reject"); cache.data.len()];
        let region = cache.region_for(&class_pred("reject"), None).unwrap();
        let x = cache.data.rows[0].clone();
        assert!(matches!(
            nearest_unlike_neighbor(&x, &cache, &region, &cfg),
            Err(NiceError::NoUnlikeNeighbor)
        ));
    }

    #[test]
    fn budget_is_enforced() {
        let (cache, model, mut cfg) = loan_fixture();
        cfg.max_queries = 1;
        let x = Instance(vec![35000.0.into(), 6.0.into(), "private".into()]);
        assert!(matches!(
            explain(&x, &cache, &model, None, &cfg),
            Err(NiceError::QueryBudgetExceeded { .. })
        ));
    }

    #[test]
    fn parallel_batch_matches_serial() {
        let (cache, model, cfg) = loan_fixture();
        let rows: Vec<Instance> = (0..12)
            .map(|i| {
                Instance(vec![
                    (20000.0 + 2000.0 * i as f64).into(),
                    ((i % 7) as f64).into(),
                    "private".into(),
                ])
            })
            .collect();
        let preds = model.predict_batch(&rows).unwrap();
        let serial = explain_batch(&rows, &preds, &cache, &model, None, &cfg, 1);
        let parallel = explain_batch(&rows, &preds, &cache, &model, None, &cfg, 4);
        assert_eq!(serial.len(), parallel.len());
        for (a, b) in serial.iter().zip(&parallel) {
            assert_eq!(a.as_ref().ok(), b.as_ref().ok());
        }
    }
}
