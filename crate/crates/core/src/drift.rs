//! Drift susceptibility: NDCG similarity between the counterfactual feature
//! importance ranking on training data and on an out-of-time window.
//!
//! Relevance of a feature is always its training share, so the ideal ordering
//! is the training ranking and the score is at most 1.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelHandle};
use crate::nice::{explain_batch, NiceConfig, NiceError, Tolerance, TrainCache};
use crate::scores::{feature_importance, AttributionVector, ScoreError};
use crate::tabular::Dataset;

pub const DEFAULT_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error)]
pub enum DriftError {
    #[error("train and OOT attributions cover different features")]
    FeatureSetMismatch,
    #[error("training attribution is zero for every feature")]
    ZeroTrainAttribution,
    #[error("OOT window is empty")]
    EmptyWindow,
    #[error("no counterfactual could be generated for the {0} data")]
    NoCounterfactuals(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nice(#[from] NiceError),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

pub type Result<T> = std::result::Result<T, DriftError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub train_attr: AttributionVector,
    pub oot_attr: AttributionVector,
    pub dcg: f64,
    pub idcg: f64,
    pub score: f64,
    pub threshold: f64,
    pub alert: bool,
    /// Rows without a counterfactual (no unlike neighbour or budget exhausted), per side.
    #[serde(default)]
    pub skipped_train: usize,
    #[serde(default)]
    pub skipped_oot: usize,
}

fn discount(position: usize) -> f64 {
    // position is 0-based; the first rank gets log2(2) = 1.
    ((position + 2) as f64).log2()
}

pub fn drift_score(
    train_attr: &AttributionVector,
    oot_attr: &AttributionVector,
    threshold: f64,
) -> Result<DriftReport> {
    let mut a = train_attr.features.clone();
    let mut b = oot_attr.features.clone();
    a.sort();
    b.sort();
    if a != b {
        return Err(DriftError::FeatureSetMismatch);
    }
    if !train_attr.shares.iter().any(|s| *s > 0.0) {
        return Err(DriftError::ZeroTrainAttribution);
    }
    let relevance = |f: &String| train_attr.share_of(f).unwrap_or(0.0);
    let gain = |ranking: &[String]| -> f64 {
        ranking
            .iter()
            .enumerate()
            .map(|(i, f)| relevance(f) / discount(i))
            .sum()
    };
    let idcg = gain(&train_attr.ranking);
    let dcg = gain(&oot_attr.ranking);
    let score = (dcg / idcg).min(1.0);
    Ok(DriftReport {
        train_attr: train_attr.clone(),
        oot_attr: oot_attr.clone(),
        dcg,
        idcg,
        score,
        threshold,
        alert: score < threshold,
        skipped_train: 0,
        skipped_oot: 0,
    })
}

/// Feature importance for `rows` against the cache, plus the number of rows without a counterfactual.
/// Other errors abort.
pub fn attribution_for(
    rows: &Dataset,
    cache: &TrainCache,
    model: &ModelHandle,
    tolerance: Option<Tolerance>,
    cfg: &NiceConfig,
    workers: usize,
) -> Result<(Option<AttributionVector>, usize)> {
    let preds = model.predict_batch(&rows.rows)?;
    let mut results = Vec::with_capacity(rows.len());
    let mut skipped = 0;
    for r in explain_batch(&rows.rows, &preds, cache, model, tolerance, cfg, workers) {
        match r {
            Ok(r) => results.push(r),
            Err(NiceError::NoUnlikeNeighbor | NiceError::QueryBudgetExceeded { .. }) => {
                skipped += 1
            }
            Err(e) => return Err(e.into()),
        }
    }
    if results.is_empty() {
        return Ok((None, skipped));
    }
    Ok((Some(feature_importance(&results, &rows.schema)?), skipped))
}

/// Runs counterfactual feature importance on the training data and on the OOT
/// window, then compares the rankings.
pub fn oot_drift(
    model: &ModelHandle,
    cache: &TrainCache,
    oot: &Dataset,
    tolerance: Option<Tolerance>,
    cfg: &NiceConfig,
    threshold: f64,
    workers: usize,
) -> Result<DriftReport> {
    if oot.is_empty() {
        return Err(DriftError::EmptyWindow);
    }
    let (train_attr, skipped_train) =
        attribution_for(&cache.data, cache, model, tolerance, cfg, workers)?;
    let (oot_attr, skipped_oot) = attribution_for(oot, cache, model, tolerance, cfg, workers)?;
    let train_attr = train_attr.ok_or(DriftError::NoCounterfactuals("training"))?;
    let oot_attr = oot_attr.ok_or(DriftError::NoCounterfactuals("OOT"))?;
    let mut report = drift_score(&train_attr, &oot_attr, threshold)?;
    report.skipped_train = skipped_train;
    report.skipped_oot = skipped_oot;
    Ok(report)
}
