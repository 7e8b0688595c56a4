//! Counterfactual flip-test over protected attributes, with optional synthetic
//! counterfactual augmentation, plus disparate impact.
//!
//! For every subgroup `S_v` (rows whose protected value is `v`) each member is
//! matched to its nearest neighbour in the alternate group under MAD-normalized
//! HEOM, with the protected coordinates left out of the distance. A subgroup's
//! flip rate is `|F⁺ − F⁻| / |S_v|`, where `F⁺` counts unfavorable members whose
//! neighbour is favorable and `F⁻` the reverse.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heom::{Aggregation, DistanceConfig, Heom};
use crate::model::{ModelError, ModelHandle, Prediction};
use crate::nice::{explain_batch, NiceConfig, NiceError, Tolerance, TrainCache};
use crate::tabular::{
    compute_norm_stats, Dataset, Favorable, Label, NormMethod, TabularError, TargetSpec, Task,
};

#[derive(Debug, Error)]
pub enum FairnessError {
    #[error("`{0}` is not a protected attribute of the schema")]
    NotProtected(String),
    #[error("subgroup `{0}` is empty")]
    EmptySubgroup(String),
    #[error("attribute `{0}` has a single value; no alternate group exists")]
    EmptyAlternateGroup(String),
    #[error("favorable rate undefined for facet `{0}`: facet and complement have no favorable predictions")]
    UndefinedRate(String),
    #[error("unknown favorable class `{0}`")]
    UnknownClass(String),
    #[error("favorable range is empty")]
    EmptyRange,
    #[error("regression fairness needs a favorable prediction range")]
    MissingFavorable,
    #[error("every intersectional cell is empty")]
    AllCellsEmpty,
    #[error("intersectional analysis needs at least one attribute")]
    NoAttributes,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nice(#[from] NiceError),
    #[error(transparent)]
    Tabular(#[from] TabularError),
}

pub type Result<T> = std::result::Result<T, FairnessError>;

/// Binary partition of the outcome space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FavorableOutcome {
    Class(String),
    /// Closed range; a missing end is unbounded.
    Range {
        min: Option<f64>,
        max: Option<f64>,
    },
}

impl FavorableOutcome {
    pub fn is_favorable(&self, label: &Label) -> bool {
        match (self, label) {
            (FavorableOutcome::Class(c), Label::Class(l)) => c == l,
            (FavorableOutcome::Range { min, max }, Label::Real(y)) => {
                min.is_none_or(|lo| *y >= lo) && max.is_none_or(|hi| *y <= hi)
            }
            _ => false,
        }
    }

    pub fn describe(&self) -> String {
        match self {
            FavorableOutcome::Class(c) => c.clone(),
            FavorableOutcome::Range { min, max } => format!(
                "[{}, {}]",
                min.map_or("-inf".into(), |v| v.to_string()),
                max.map_or("inf".into(), |v| v.to_string())
            ),
        }
    }
}

pub fn adapt_favorable(spec: &TargetSpec, choice: &Favorable) -> Result<FavorableOutcome> {
    match (spec.task, choice) {
        (Task::Regression, Favorable::Range { min, max }) => {
            if let (Some(lo), Some(hi)) = (min, max) {
                if lo > hi {
                    return Err(FairnessError::EmptyRange);
                }
            }
            if min.is_none() && max.is_none() {
                return Err(FairnessError::EmptyRange);
            }
            Ok(FavorableOutcome::Range {
                min: *min,
                max: *max,
            })
        }
        (Task::Regression, Favorable::Class(c)) => Err(FairnessError::UnknownClass(c.clone())),
        (_, Favorable::Class(c)) => spec
            .class_index(c)
            .map(|_| FavorableOutcome::Class(c.clone()))
            .ok_or_else(|| FairnessError::UnknownClass(c.clone())),
        (_, Favorable::Range { .. }) => Err(FairnessError::UnknownClass(format!("{choice:?}"))),
    }
}

/// Outcomes to audit: the explicit choice, else the schema's favorable outcome,
/// else (binary) the second class or (multiclass) every class in turn.
pub fn favorable_outcomes(
    spec: &TargetSpec,
    choice: Option<&Favorable>,
) -> Result<Vec<FavorableOutcome>> {
    if let Some(c) = choice.or(spec.favorable.as_ref()) {
        return Ok(vec![adapt_favorable(spec, c)?]);
    }
    match spec.task {
        Task::Regression => Err(FairnessError::MissingFavorable),
        Task::Binary => Ok(vec![FavorableOutcome::Class(spec.classes[1].clone())]),
        Task::Multiclass => Ok(spec
            .classes
            .iter()
            .cloned()
            .map(FavorableOutcome::Class)
            .collect()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FairnessMode {
    /// Flip-test against the data augmented with synthetic counterfactuals.
    #[default]
    Synthetic,
    /// Flip-test against real instances only.
    Real,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubgroupResult {
    pub attribute: String,
    pub value: String,
    pub size: usize,
    pub f_plus: usize,
    pub f_minus: usize,
    pub flip_rate: f64,
    pub fairness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeReport {
    pub attribute: String,
    pub favorable: String,
    pub subgroups: Vec<SubgroupResult>,
    /// Minimum subgroup fairness.
    pub score: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub empty_cells: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacetDi {
    pub value: String,
    pub rate: f64,
    pub complement_rate: f64,
    /// `None` when the complement has no favorable predictions (unbounded).
    pub di: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisparateImpactReport {
    pub attribute: String,
    pub favorable: String,
    pub facets: Vec<FacetDi>,
    pub final_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationStats {
    pub attribute: String,
    pub original: usize,
    pub synthetic: usize,
    pub total: usize,
    /// Counterfactuals dropped because they changed the protected value.
    pub filtered: usize,
    pub duplicates: usize,
    /// Rows without a counterfactual (no unlike neighbour or budget exhausted).
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlipTestReport {
    pub mode: FairnessMode,
    pub attributes: Vec<AttributeReport>,
    pub disparate_impact: Vec<DisparateImpactReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub augmentation: Vec<AugmentationStats>,
    /// Minimum over every attribute (and favorable class) score.
    pub score: f64,
}

/// A partition of rows into subgroups keyed by one or more protected values.
#[derive(Debug, Clone)]
pub struct Grouping {
    pub name: String,
    pub features: Vec<usize>,
    pub keys: Vec<String>,
}

const CELL_SEP: &str = " & ";

impl Grouping {
    pub fn new(data: &Dataset, attrs: &[String]) -> Result<Self> {
        if attrs.is_empty() {
            return Err(FairnessError::NoAttributes);
        }
        let features = attrs
            .iter()
            .map(|a| {
                if !data.schema.protected.contains(a) {
                    return Err(FairnessError::NotProtected(a.clone()));
                }
                Ok(data.schema.feature_index(a).expect("validated schema"))
            })
            .collect::<Result<Vec<_>>>()?;
        let keys = data
            .rows
            .iter()
            .map(|r| {
                features
                    .iter()
                    .map(|&j| r[j].to_string())
                    .collect::<Vec<_>>()
                    .join(CELL_SEP)
            })
            .collect();
        Ok(Self {
            name: attrs.join(CELL_SEP),
            features,
            keys,
        })
    }

    fn values(&self) -> BTreeSet<&str> {
        self.keys.iter().map(String::as_str).collect()
    }

    /// Cross product of observed per-attribute values with no rows.
    fn empty_cells(&self, data: &Dataset) -> Vec<String> {
        if self.features.len() < 2 {
            return Vec::new();
        }
        let per_attr: Vec<BTreeSet<String>> = self
            .features
            .iter()
            .map(|&j| data.rows.iter().map(|r| r[j].to_string()).collect())
            .collect();
        let mut cells = vec![String::new()];
        for (i, vals) in per_attr.iter().enumerate() {
            cells = cells
                .iter()
                .flat_map(|prefix| {
                    vals.iter().map(move |v| {
                        if i == 0 {
                            v.clone()
                        } else {
                            format!("{prefix}{CELL_SEP}{v}")
                        }
                    })
                })
                .collect();
        }
        let present = self.values();
        cells
            .into_iter()
            .filter(|c| !present.contains(c.as_str()))
            .collect()
    }
}

/// Nearest row of the alternate group for each query row, with its distance.
/// Ties go to the lowest row index.
pub fn nearest_alternates(
    data: &Dataset,
    keys: &[String],
    metric: &Heom,
    value: &str,
    workers: usize,
) -> Vec<(usize, usize, f64)> {
    let members: Vec<usize> = (0..data.len()).filter(|&i| keys[i] == value).collect();
    let alternates: Vec<usize> = (0..data.len()).filter(|&i| keys[i] != value).collect();
    let nn = |&i: &usize| -> (usize, usize, f64) {
        let mut best = (usize::MAX, f64::INFINITY);
        for &o in &alternates {
            let d = metric.distance(&data.rows[i], &data.rows[o]);
            if d < best.1 {
                best = (o, d);
            }
        }
        (i, best.0, best.1)
    };
    with_workers(workers, || {
        if workers <= 1 {
            members.iter().map(nn).collect()
        } else {
            members.par_iter().map(nn).collect()
        }
    })
}

fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> T {
    if workers <= 1 {
        return f();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(workers).build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}

/// MAD-normalized HEOM over `data` with the grouping's coordinates excluded.
pub fn flip_metric(data: &Dataset, grouping: &Grouping, aggregation: Aggregation) -> Result<Heom> {
    let stats = compute_norm_stats(data, NormMethod::Mad)?;
    let cfg = DistanceConfig {
        norm_stats: stats,
        aggregation,
        clamp_numeric: false,
    };
    Ok(Heom::new(&data.schema, &cfg).excluding(&grouping.features))
}

/// Flip-test on precomputed predictions.
pub fn flip_test_with(
    data: &Dataset,
    grouping: &Grouping,
    predictions: &[Prediction],
    favorable: &FavorableOutcome,
    metric: &Heom,
    workers: usize,
) -> Result<AttributeReport> {
    let values = grouping.values();
    if values.is_empty() {
        return Err(FairnessError::EmptySubgroup(grouping.name.clone()));
    }
    if values.len() < 2 {
        return Err(FairnessError::EmptyAlternateGroup(grouping.name.clone()));
    }
    let outcome: Vec<bool> = predictions
        .iter()
        .map(|p| favorable.is_favorable(&p.label))
        .collect();
    let mut subgroups = Vec::new();
    for v in values {
        let pairs = nearest_alternates(data, &grouping.keys, metric, v, workers);
        let f_plus = pairs
            .iter()
            .filter(|(i, o, _)| !outcome[*i] && outcome[*o])
            .count();
        let f_minus = pairs
            .iter()
            .filter(|(i, o, _)| outcome[*i] && !outcome[*o])
            .count();
        let size = pairs.len();
        let flip_rate = f_plus.abs_diff(f_minus) as f64 / size as f64;
        subgroups.push(SubgroupResult {
            attribute: grouping.name.clone(),
            value: v.to_string(),
            size,
            f_plus,
            f_minus,
            flip_rate,
            fairness: (1.0 - flip_rate) * 100.0,
        });
    }
    let score = subgroups
        .iter()
        .map(|s| s.fairness)
        .fold(f64::INFINITY, f64::min);
    Ok(AttributeReport {
        attribute: grouping.name.clone(),
        favorable: favorable.describe(),
        subgroups,
        score,
        empty_cells: grouping.empty_cells(data),
    })
}

/// Flip-test of `data` over the (possibly composite) attribute `attrs`.
pub fn flip_test(
    data: &Dataset,
    attrs: &[String],
    model: &ModelHandle,
    favorable: &FavorableOutcome,
    aggregation: Aggregation,
    workers: usize,
) -> Result<AttributeReport> {
    let grouping = Grouping::new(data, attrs)?;
    let preds = model.predict_batch(&data.rows)?;
    let metric = flip_metric(data, &grouping, aggregation)?;
    flip_test_with(data, &grouping, &preds, favorable, &metric, workers)
}

/// Composite flip-test over the cross product of several protected attributes.
pub fn intersectional_fairness(
    data: &Dataset,
    attrs: &[String],
    model: &ModelHandle,
    favorable: &FavorableOutcome,
    aggregation: Aggregation,
    workers: usize,
) -> Result<AttributeReport> {
    if data.is_empty() {
        return Err(FairnessError::AllCellsEmpty);
    }
    let report = flip_test(data, attrs, model, favorable, aggregation, workers)?;
    for cell in &report.empty_cells {
        tracing::warn!(cell = %cell, "intersectional cell has no rows; skipped");
    }
    Ok(report)
}

pub struct Augmented {
    pub data: Dataset,
    pub stats: AugmentationStats,
}

/// Adds every counterfactual that keeps its source row's protected values and
/// is not already present. Counterfactuals search the whole of `data`.
pub fn synth_cf_augment(
    data: &Dataset,
    attrs: &[String],
    model: &ModelHandle,
    cfg: &NiceConfig,
    tolerance: Option<Tolerance>,
    workers: usize,
) -> Result<Augmented> {
    let grouping = Grouping::new(data, attrs)?;
    if data.is_empty() {
        return Err(FairnessError::EmptySubgroup(grouping.name));
    }
    let cache = TrainCache::build(data.clone(), model)?;
    let results = explain_batch(
        &data.rows,
        &cache.predictions,
        &cache,
        model,
        tolerance,
        cfg,
        workers,
    );

    let mut skipped = 0;
    let mut found = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(r) => found.push(Some(r)),
            Err(NiceError::NoUnlikeNeighbor | NiceError::QueryBudgetExceeded { .. }) => {
                skipped += 1;
                found.push(None);
            }
            Err(e) => return Err(e.into()),
        }
    }

    let mut seen: HashSet<Vec<crate::tabular::KeyPart<'_>>> =
        data.rows.iter().map(|r| r.key()).collect();
    let mut synthetic = Vec::new();
    let (mut filtered, mut duplicates) = (0, 0);
    // Subgroups in value order, members in row order.
    let mut by_value: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, k) in grouping.keys.iter().enumerate() {
        by_value.entry(k).or_default().push(i);
    }
    for (value, members) in &by_value {
        for r in members.iter().filter_map(|&i| found[i].as_ref()) {
            let cf_key: Vec<String> = grouping
                .features
                .iter()
                .map(|&j| r.counterfactual[j].to_string())
                .collect();
            if cf_key.join(CELL_SEP) != *value {
                filtered += 1;
                continue;
            }
            if !seen.insert(r.counterfactual.key()) {
                duplicates += 1;
                continue;
            }
            synthetic.push((
                r.counterfactual.clone(),
                r.counterfactual_prediction.label.clone(),
            ));
        }
    }
    let n_syn = synthetic.len();
    let mut out = data.clone();
    for (row, label) in synthetic {
        out.rows.push(row);
        out.labels.push(label);
    }
    let stats = AugmentationStats {
        attribute: grouping.name,
        original: data.len(),
        synthetic: n_syn,
        total: out.len(),
        filtered,
        duplicates,
        skipped,
    };
    Ok(Augmented { data: out, stats })
}

/// Ratio of the smallest to the largest facet DI; unbounded facets count as +∞.
pub fn final_di(facets: &[Option<f64>]) -> f64 {
    let min = facets
        .iter()
        .map(|d| d.unwrap_or(f64::INFINITY))
        .fold(f64::INFINITY, f64::min);
    let max = facets
        .iter()
        .map(|d| d.unwrap_or(f64::INFINITY))
        .fold(0.0, f64::max);
    if max.is_infinite() {
        if min.is_infinite() {
            1.0
        } else {
            0.0
        }
    } else if max > 0.0 {
        min / max
    } else {
        1.0
    }
}

pub fn disparate_impact_with(
    grouping: &Grouping,
    predictions: &[Prediction],
    favorable: &FavorableOutcome,
) -> Result<DisparateImpactReport> {
    let values = grouping.values();
    if values.len() < 2 {
        return Err(FairnessError::EmptyAlternateGroup(grouping.name.clone()));
    }
    let outcome: Vec<bool> = predictions
        .iter()
        .map(|p| favorable.is_favorable(&p.label))
        .collect();
    let rate = |sel: &dyn Fn(usize) -> bool| -> f64 {
        let idx: Vec<usize> = (0..outcome.len()).filter(|&i| sel(i)).collect();
        idx.iter().filter(|&&i| outcome[i]).count() as f64 / idx.len() as f64
    };
    let mut facets = Vec::new();
    for v in values {
        let r = rate(&|i| grouping.keys[i] == v);
        let c = rate(&|i| grouping.keys[i] != v);
        let di = if c > 0.0 {
            Some(r / c)
        } else if r > 0.0 {
            None
        } else {
            return Err(FairnessError::UndefinedRate(v.to_string()));
        };
        facets.push(FacetDi {
            value: v.to_string(),
            rate: r,
            complement_rate: c,
            di,
        });
    }
    let final_ratio = final_di(&facets.iter().map(|f| f.di).collect::<Vec<_>>());
    Ok(DisparateImpactReport {
        attribute: grouping.name.clone(),
        favorable: favorable.describe(),
        facets,
        final_ratio,
    })
}

pub fn disparate_impact(
    data: &Dataset,
    attr: &str,
    model: &ModelHandle,
    favorable: &FavorableOutcome,
) -> Result<DisparateImpactReport> {
    let grouping = Grouping::new(data, &[attr.to_string()])?;
    let preds = model.predict_batch(&data.rows)?;
    disparate_impact_with(&grouping, &preds, favorable)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessOptions {
    pub attributes: Vec<String>,
    pub favorable: Option<Favorable>,
    pub mode: FairnessMode,
    pub intersectional: bool,
    pub aggregation: Aggregation,
}

/// Full fairness audit: per attribute (and composite, when intersectional),
/// optional augmentation, flip-test and disparate impact for every favorable outcome.
pub fn fairness_audit(
    data: &Dataset,
    opts: &FairnessOptions,
    model: &ModelHandle,
    nice: &NiceConfig,
    tolerance: Option<Tolerance>,
    workers: usize,
) -> Result<FlipTestReport> {
    if opts.attributes.is_empty() {
        return Err(FairnessError::NoAttributes);
    }
    let outcomes = favorable_outcomes(&data.schema.target, opts.favorable.as_ref())?;
    let mut groups: Vec<Vec<String>> = opts.attributes.iter().map(|a| vec![a.clone()]).collect();
    if opts.intersectional && opts.attributes.len() >= 2 {
        groups.push(opts.attributes.clone());
    }
    let mut attributes = Vec::new();
    let mut disparate = Vec::new();
    let mut augmentation = Vec::new();
    for attrs in &groups {
        let x = match opts.mode {
            FairnessMode::Real => data.clone(),
            FairnessMode::Synthetic => {
                let aug = synth_cf_augment(data, attrs, model, nice, tolerance, workers)?;
                augmentation.push(aug.stats);
                aug.data
            }
        };
        let grouping = Grouping::new(&x, attrs)?;
        let preds = model.predict_batch(&x.rows)?;
        let metric = flip_metric(&x, &grouping, opts.aggregation)?;
        for fav in &outcomes {
            attributes.push(flip_test_with(
                &x, &grouping, &preds, fav, &metric, workers,
            )?);
            match disparate_impact_with(&grouping, &preds, fav) {
                Ok(d) => disparate.push(d),
                Err(FairnessError::UndefinedRate(v)) => {
                    tracing::warn!(attribute = %grouping.name, facet = %v, "disparate impact undefined")
                }
                Err(e) => return Err(e),
            }
        }
    }
    let score = attributes
        .iter()
        .map(|a| a.score)
        .fold(f64::INFINITY, f64::min);
    Ok(FlipTestReport {
        mode: opts.mode,
        attributes,
        disparate_impact: disparate,
        augmentation,
        score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Backend, Predictor};
    use crate::tabular::{FeatureSpec, Instance, Schema};
    use approx::assert_abs_diff_eq;
    use std::sync::Arc;

    fn schema() -> Arc<Schema> {
        Arc::new(
            Schema::new(
                vec![
                    FeatureSpec::numerical("score"),
                    FeatureSpec::categorical("sex"),
                ],
                TargetSpec {
                    name: "y".into(),
                    task: Task::Binary,
                    classes: vec!["0".into(), "1".into()],
                    favorable: None,
                },
                vec!["sex".into()],
            )
            .unwrap(),
        )
    }

    fn data(rows: &[(f64, &str)]) -> Dataset {
        Dataset::new(
            schema(),
            rows.iter()
                .map(|(x, s)| Instance(vec![(*x).into(), (*s).into()]))
                .collect(),
            rows.iter()
                .map(|(x, _)| Label::Class(if *x >= 5.0 { "1" } else { "0" }.into()))
                .collect(),
        )
        .unwrap()
    }

    struct Threshold;

    impl Predictor for Threshold {
        fn backend(&self) -> Backend {
            Backend::Builtin
        }

        fn predict(&self, batch: &[Instance]) -> crate::model::Result<Vec<Prediction>> {
            Ok(batch
                .iter()
                .map(|x| Prediction {
                    label: Label::Class(
                        if x[0].as_num().unwrap() >= 5.0 {
                            "1"
                        } else {
                            "0"
                        }
                        .into(),
                    ),
                    scores: None,
                })
                .collect())
        }
    }

    fn model() -> ModelHandle {
        ModelHandle::new(Arc::new(Threshold), schema().target.clone())
    }

    fn fav() -> FavorableOutcome {
        FavorableOutcome::Class("1".into())
    }

    #[test]
    fn symmetric_data_and_blind_model_is_fair() {
        let d = data(&[
            (1.0, "m"),
            (1.0, "f"),
            (7.0, "m"),
            (7.0, "f"),
            (3.0, "m"),
            (3.0, "f"),
        ]);
        let r = flip_test(
            &d,
            &["sex".into()],
            &model(),
            &fav(),
            Aggregation::Euclidean,
            1,
        )
        .unwrap();
        for s in &r.subgroups {
            assert_eq!((s.f_plus, s.f_minus, s.fairness), (0, 0, 100.0));
        }
    }

    #[test]
    fn subgroup_of_four_with_one_flip() {
        // Female 4.9 is unfavorable, its nearest male (5.1) is favorable.
        let d = data(&[
            (4.9, "f"),
            (1.0, "f"),
            (8.0, "f"),
            (9.0, "f"),
            (5.1, "m"),
            (1.0, "m"),
            (8.0, "m"),
            (9.0, "m"),
        ]);
        let r = flip_test(
            &d,
            &["sex".into()],
            &model(),
            &fav(),
            Aggregation::Euclidean,
            1,
        )
        .unwrap();
        let f = r.subgroups.iter().find(|s| s.value == "f").unwrap();
        assert_eq!((f.size, f.f_plus, f.f_minus), (4, 1, 0));
        assert_abs_diff_eq!(f.flip_rate, 0.25);
        assert_abs_diff_eq!(f.fairness, 75.0);
        let m = r.subgroups.iter().find(|s| s.value == "m").unwrap();
        assert_eq!((m.f_plus, m.f_minus), (0, 1));
        assert_eq!(r.score, 75.0);
    }

    #[test]
    fn single_valued_attribute() {
        let d = data(&[(1.0, "m"), (7.0, "m")]);
        assert!(matches!(
            flip_test(
                &d,
                &["sex".into()],
                &model(),
                &fav(),
                Aggregation::Euclidean,
                1
            ),
            Err(FairnessError::EmptyAlternateGroup(_))
        ));
        assert!(matches!(
            flip_test(
                &d,
                &["score".into()],
                &model(),
                &fav(),
                Aggregation::Euclidean,
                1
            ),
            Err(FairnessError::NotProtected(_))
        ));
    }

    #[test]
    fn di_values() {
        assert_abs_diff_eq!(
            final_di(&[Some(0.41), Some(0.70)]),
            0.41 / 0.70,
            epsilon = 1e-12
        );
        // Facet rates 0.2 vs 0.4.
        let d = data(&[
            (6.0, "a"),
            (1.0, "a"),
            (1.0, "a"),
            (1.0, "a"),
            (1.0, "a"),
            (6.0, "b"),
            (6.0, "b"),
            (1.0, "b"),
            (1.0, "b"),
            (1.0, "b"),
        ]);
        let r = disparate_impact(&d, "sex", &model(), &fav()).unwrap();
        assert_abs_diff_eq!(r.facets[0].di.unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.facets[1].di.unwrap(), 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.final_ratio, 0.25, epsilon = 1e-12);

        let parity = data(&[(6.0, "a"), (1.0, "a"), (6.0, "b"), (1.0, "b")]);
        let r = disparate_impact(&parity, "sex", &model(), &fav()).unwrap();
        assert_eq!(r.final_ratio, 1.0);

        let none = data(&[(1.0, "a"), (1.0, "b")]);
        assert!(matches!(
            disparate_impact(&none, "sex", &model(), &fav()),
            Err(FairnessError::UndefinedRate(_))
        ));
        let one_sided = data(&[(6.0, "a"), (1.0, "b")]);
        let r = disparate_impact(&one_sided, "sex", &model(), &fav()).unwrap();
        assert_eq!(r.facets[0].di, None);
        assert_eq!(r.final_ratio, 0.0);
    }

    #[test]
    fn favorable_adapters() {
        let spec = TargetSpec {
            name: "y".into(),
            task: Task::Multiclass,
            classes: vec!["c1".into(), "c2".into(), "c3".into()],
            favorable: None,
        };
        let f = adapt_favorable(&spec, &Favorable::Class("c2".into())).unwrap();
        assert!(
            f.is_favorable(&Label::Class("c2".into()))
                && !f.is_favorable(&Label::Class("c1".into()))
        );
        assert!(matches!(
            adapt_favorable(&spec, &Favorable::Class("c9".into())),
            Err(FairnessError::UnknownClass(_))
        ));
        assert_eq!(favorable_outcomes(&spec, None).unwrap().len(), 3);

        let reg = TargetSpec {
            name: "y".into(),
            task: Task::Regression,
            classes: vec![],
            favorable: None,
        };
        let f = adapt_favorable(&reg, &"50000:".parse().unwrap()).unwrap();
        assert!(f.is_favorable(&Label::Real(50000.0)) && !f.is_favorable(&Label::Real(49999.0)));
        assert!(matches!(
            adapt_favorable(&reg, &"10:5".parse().unwrap()),
            Err(FairnessError::EmptyRange)
        ));
        assert!(matches!(
            favorable_outcomes(&reg, None),
            Err(FairnessError::MissingFavorable)
        ));
    }

    #[test]
    fn augmentation_keeps_protected_value() {
        let rows: Vec<(f64, &str)> = (0..30)
            .map(|i| ((i % 10) as f64 + 0.5, if i < 15 { "m" } else { "f" }))
            .collect();
        let d = data(&rows);
        let stats = compute_norm_stats(&d, NormMethod::Range).unwrap();
        let cfg = NiceConfig::new(DistanceConfig::euclidean(stats));
        let aug = synth_cf_augment(&d, &["sex".into()], &model(), &cfg, None, 1).unwrap();
        assert_eq!(aug.stats.total, d.len() + aug.stats.synthetic);
        assert_eq!(&aug.data.rows[..d.len()], &d.rows[..]);
        // Each counterfactual only changes `score`, so the protected value holds.
        assert_eq!(aug.stats.filtered, 0);
    }

    #[test]
    fn constant_model_is_perfectly_fair() {
        struct Constant;
        impl Predictor for Constant {
            fn backend(&self) -> Backend {
                Backend::Builtin
            }
            fn predict(&self, batch: &[Instance]) -> crate::model::Result<Vec<Prediction>> {
                Ok(vec![
                    Prediction {
                        label: Label::Class("1".into()),
                        scores: None
                    };
                    batch.len()
                ])
            }
        }
        let m = ModelHandle::new(Arc::new(Constant), schema().target.clone());
        let d = data(&[(1.0, "m"), (2.0, "f"), (9.0, "m"), (3.0, "f")]);
        let r = flip_test(&d, &["sex".into()], &m, &fav(), Aggregation::Euclidean, 1).unwrap();
        assert!(r.subgroups.iter().all(|s| s.fairness == 100.0));
    }
}
