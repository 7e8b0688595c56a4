//! Heterogeneous Euclidean Overlap Measurement over mixed-type instances.
//!
//! Categorical features contribute an overlap term (0 when equal, 1 otherwise),
//! numerical features contribute `|x - c| / η` with η taken from [`NormStats`].
//! A numerical feature whose normalizer is zero behaves like an overlap term.

use serde::{Deserialize, Serialize};

use crate::tabular::{FeatureKind, FeatureSpec, Instance, NormMethod, NormStats, Schema, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `sqrt(Σ d_j²)`
    #[default]
    Euclidean,
    /// `(Σ d_j) / m`, used with clamped range-normalized terms to land in `[0, 1]`.
    MeanClamped,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceConfig {
    pub norm_stats: NormStats,
    pub aggregation: Aggregation,
    pub clamp_numeric: bool,
}

impl DistanceConfig {
    pub fn euclidean(norm_stats: NormStats) -> Self {
        Self {
            norm_stats,
            aggregation: Aggregation::Euclidean,
            clamp_numeric: false,
        }
    }

    /// Percentage-scale configuration: range normalizer, per-feature cap at 1,
    /// mean over features.
    pub fn percentage_scale(norm_stats: &NormStats) -> Self {
        Self {
            norm_stats: norm_stats.with_method(NormMethod::Range),
            aggregation: Aggregation::MeanClamped,
            clamp_numeric: true,
        }
    }
}

pub fn heom_feature(
    x: &Value,
    c: &Value,
    spec: &FeatureSpec,
    normalizer: Option<f64>,
    clamp: bool,
) -> f64 {
    term(spec.kind, x, c, normalizer, clamp)
}

fn term(kind: FeatureKind, x: &Value, c: &Value, eta: Option<f64>, clamp: bool) -> f64 {
    match (kind, x.as_num(), c.as_num(), eta) {
        (FeatureKind::Numerical, Some(a), Some(b), Some(eta)) if eta > 0.0 => {
            let d = (a - b).abs() / eta;
            if clamp {
                d.min(1.0)
            } else {
                d
            }
        }
        _ => overlap(x, c),
    }
}

fn overlap(x: &Value, c: &Value) -> f64 {
    if x == c {
        0.0
    } else {
        1.0
    }
}

/// Precomputed per-feature normalizers for repeated distance evaluation.
#[derive(Debug, Clone)]
pub struct Heom {
    kinds: Vec<FeatureKind>,
    eta: Vec<Option<f64>>,
    aggregation: Aggregation,
    clamp: bool,
    excluded: Vec<bool>,
}

impl Heom {
    pub fn new(schema: &Schema, cfg: &DistanceConfig) -> Self {
        let m = schema.len();
        Self {
            kinds: schema.features.iter().map(|f| f.kind).collect(),
            eta: (0..m).map(|j| cfg.norm_stats.normalizer(j)).collect(),
            aggregation: cfg.aggregation,
            clamp: cfg.clamp_numeric,
            excluded: vec![false; m],
        }
    }

    /// Drops the given feature coordinates from every distance.
    pub fn excluding(mut self, features: &[usize]) -> Self {
        for &j in features {
            self.excluded[j] = true;
        }
        self
    }

    pub fn feature(&self, j: usize, x: &Value, c: &Value) -> f64 {
        term(self.kinds[j], x, c, self.eta[j], self.clamp)
    }

    pub fn distance(&self, x: &Instance, c: &Instance) -> f64 {
        let terms = (0..self.kinds.len())
            .filter(|&j| !self.excluded[j])
            .map(|j| self.feature(j, &x[j], &c[j]));
        match self.aggregation {
            Aggregation::Euclidean => terms.map(|d| d * d).sum::<f64>().sqrt(),
            Aggregation::MeanClamped => {
                let used = self.excluded.iter().filter(|e| !**e).count().max(1);
                terms.sum::<f64>() / used as f64
            }
        }
    }
}

pub fn heom(x: &Instance, c: &Instance, schema: &Schema, cfg: &DistanceConfig) -> f64 {
    Heom::new(schema, cfg).distance(x, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::{FeatureStats, TargetSpec, Task};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn schema() -> Schema {
        Schema::new(
            vec![FeatureSpec::categorical("job"), FeatureSpec::numerical("x")],
            TargetSpec {
                name: "y".into(),
                task: Task::Binary,
                classes: vec!["0".into(), "1".into()],
                favorable: None,
            },
            vec![],
        )
        .unwrap()
    }

    fn stats(range: f64) -> NormStats {
        NormStats {
            method: NormMethod::Range,
            stats: vec![
                None,
                Some(FeatureStats {
                    range,
                    std: 1.0,
                    mad: 1.0,
                }),
            ],
        }
    }

    fn inst(job: &str, x: f64) -> Instance {
        Instance(vec![job.into(), x.into()])
    }

    #[test]
    fn per_feature_terms() {
        let s = schema();
        let cat = &s.features[0];
        let num = &s.features[1];
        assert_eq!(
            heom_feature(&"private".into(), &"private".into(), cat, None, false),
            0.0
        );
        assert_eq!(
            heom_feature(&"private".into(), &"business".into(), cat, None, false),
            1.0
        );
        assert_abs_diff_eq!(
            heom_feature(&2.0.into(), &5.0.into(), num, Some(10.0), false),
            0.3
        );
        assert_eq!(
            heom_feature(&2.0.into(), &50.0.into(), num, Some(10.0), true),
            1.0
        );
    }

    #[test]
    fn zero_normalizer_is_overlap() {
        let s = schema();
        let num = &s.features[1];
        assert_eq!(
            heom_feature(&5.0.into(), &5.0.into(), num, Some(0.0), false),
            0.0
        );
        assert_eq!(
            heom_feature(&5.0.into(), &5.5.into(), num, Some(0.0), false),
            1.0
        );
    }

    #[test]
    fn aggregations() {
        let s = schema();
        let x = inst("private", 2.0);
        let c = inst("business", 5.0);
        let cfg = DistanceConfig::euclidean(stats(10.0));
        // Hand aggregation: terms (1, 0.3).
        assert_abs_diff_eq!(heom(&x, &c, &s, &cfg), 1.09f64.sqrt(), epsilon = 1e-12);
        let cfg = DistanceConfig::percentage_scale(&stats(10.0));
        assert_abs_diff_eq!(heom(&x, &c, &s, &cfg), 0.65, epsilon = 1e-12);
        assert_eq!(heom(&x, &x, &s, &cfg), 0.0);
    }

    #[test]
    fn exclusion_drops_coordinate() {
        let s = schema();
        let cfg = DistanceConfig::euclidean(stats(10.0));
        let h = Heom::new(&s, &cfg).excluding(&[0]);
        assert_abs_diff_eq!(
            h.distance(&inst("a", 2.0), &inst("b", 5.0)),
            0.3,
            epsilon = 1e-12
        );
    }

    fn arb_inst() -> impl Strategy<Value = Instance> {
        (prop::sample::select(vec!["a", "b", "c"]), -50.0..50.0f64).prop_map(|(j, x)| inst(j, x))
    }

    proptest! {
        #[test]
        fn metric_properties(x in arb_inst(), c in arb_inst(), mean in any::<bool>()) {
            let s = schema();
            let cfg = if mean { DistanceConfig::percentage_scale(&stats(10.0)) } else { DistanceConfig::euclidean(stats(10.0)) };
            let d = heom(&x, &c, &s, &cfg);
            prop_assert!(d >= 0.0);
            prop_assert_eq!(d, heom(&c, &x, &s, &cfg));
            prop_assert_eq!(heom(&x, &x, &s, &cfg), 0.0);
            if mean {
                prop_assert!(d <= 1.0);
            }
            // Making one more feature equal never increases the distance.
            for j in 0..2 {
                let mut closer = c.clone();
                closer.0[j] = x.0[j].clone();
                prop_assert!(heom(&x, &closer, &s, &cfg) <= d);
            }
        }
    }
}
