//! Seeded synthetic datasets for demos, tests and benchmarks.
//!
//! Labels come from a fixed random linear rule over standardized features, so
//! the builtin models learn them well and counterfactuals exist for most rows.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::model::ModelSelector;
use crate::tabular::{
    Dataset, Favorable, FeatureSpec, Instance, Label, Result, Schema, TabularError, TargetSpec,
    Task, Value,
};
use crate::workbench::ScanConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub task: Task,
    pub numeric: usize,
    pub categorical: usize,
    /// Number of classes for multiclass tasks.
    pub classes: usize,
    /// Adds a two-valued protected attribute `group` with a small label bias.
    pub protected: bool,
    /// Standard deviation of the noise added to the latent score.
    pub noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(task: Task, seed: u64) -> Self {
        Self {
            task,
            numeric: 4,
            categorical: 2,
            classes: 3,
            protected: false,
            noise: 0.1,
            seed,
        }
    }

    pub fn schema(&self) -> Schema {
        let mut features: Vec<FeatureSpec> = (0..self.numeric)
            .map(|j| FeatureSpec::numerical(format!("x{}", j + 1)))
            .collect();
        for j in 0..self.categorical {
            let mut f = FeatureSpec::categorical(format!("c{}", j + 1));
            f.allowed_values = Some(LEVELS.iter().map(|s| s.to_string()).collect());
            features.push(f);
        }
        let mut protected = Vec::new();
        if self.protected {
            let mut f = FeatureSpec::categorical("group");
            f.allowed_values = Some(vec!["g0".into(), "g1".into()]);
            features.push(f);
            protected.push("group".to_string());
        }
        let (classes, favorable) = match self.task {
            Task::Binary => (
                vec!["no".into(), "yes".into()],
                Some(Favorable::Class("yes".into())),
            ),
            Task::Multiclass => (
                (0..self.classes.max(3)).map(|k| format!("k{k}")).collect(),
                None,
            ),
            Task::Regression => (Vec::new(), None),
        };
        Schema::new(
            features,
            TargetSpec {
                name: "y".into(),
                task: self.task,
                classes,
                favorable,
            },
            protected,
        )
        .expect("synthetic schema is valid")
    }

    /// `n` rows drawn with `row_seed`; the labelling rule depends only on `seed`.
    pub fn sample(&self, n: usize, row_seed: u64) -> Dataset {
        self.sample_shifted(n, row_seed, 0.0)
    }

    /// Like [`sample`](Self::sample), then adds Gaussian noise with standard
    /// deviation `shift` (in feature units) to `x1`, the most influential
    /// feature, after labelling.
    pub fn sample_shifted(&self, n: usize, row_seed: u64, shift: f64) -> Dataset {
        let schema = Arc::new(self.schema());
        let rule = Rule::new(self);
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ row_seed);
        let std_normal = Normal::new(0.0, 1.0).expect("valid normal");
        let mut rows = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let z: Vec<f64> = (0..self.numeric)
                .map(|_| std_normal.sample(&mut rng))
                .collect();
            let cats: Vec<usize> = (0..self.categorical)
                .map(|_| rng.random_range(0..LEVELS.len()))
                .collect();
            let group = rng.random_range(0..2usize);
            let label = rule.label(self, &z, &cats, group, &mut rng, &std_normal);
            let mut values: Vec<Value> = z
                .iter()
                .enumerate()
                .map(|(j, zj)| Value::Num(round2(rule.mean[j] + rule.scale[j] * zj)))
                .collect();
            if shift > 0.0 && self.numeric > 0 {
                let noise = Normal::new(0.0, shift)
                    .expect("valid noise")
                    .sample(&mut rng);
                if let Value::Num(x) = &mut values[0] {
                    *x = round2(*x + noise);
                }
            }
            values.extend(cats.iter().map(|&c| Value::Cat(LEVELS[c].to_string())));
            if self.protected {
                values.push(Value::Cat(format!("g{group}")));
            }
            rows.push(Instance(values));
            labels.push(label);
        }
        Dataset::new(schema, rows, labels).expect("synthetic rows conform")
    }
}

const LEVELS: [&str; 3] = ["a", "b", "c"];

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

/// Fixed linear labelling rule.
struct Rule {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Per output (one for binary/regression, one per class otherwise):
    /// numeric weights then categorical level effects.
    weights: Vec<Vec<f64>>,
    level_effects: Vec<Vec<[f64; 3]>>,
}

impl Rule {
    fn new(spec: &SynthSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mean = (0..spec.numeric)
            .map(|_| rng.random_range(-50.0..50.0f64).round())
            .collect();
        let scale = (0..spec.numeric)
            .map(|_| rng.random_range(1.0..20.0f64).round())
            .collect();
        let outputs = if spec.task == Task::Multiclass {
            spec.classes.max(3)
        } else {
            1
        };
        let mut weights = Vec::new();
        let mut level_effects = Vec::new();
        for _ in 0..outputs {
            let mut w: Vec<f64> = (0..spec.numeric)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            if let Some(first) = w.first_mut() {
                // x1 dominates so drift simulations know where to perturb.
                *first = 2.5_f64.copysign(*first);
            }
            weights.push(w);
            level_effects.push(
                (0..spec.categorical)
                    .map(|_| {
                        [
                            0.0,
                            rng.random_range(-0.8..0.8),
                            rng.random_range(-0.8..0.8),
                        ]
                    })
                    .collect(),
            );
        }
        Self {
            mean,
            scale,
            weights,
            level_effects,
        }
    }

    fn score(&self, k: usize, z: &[f64], cats: &[usize], group: usize, protected: bool) -> f64 {
        let num: f64 = self.weights[k].iter().zip(z).map(|(w, x)| w * x).sum();
        let cat: f64 = self.level_effects[k]
            .iter()
            .zip(cats)
            .map(|(e, &c)| e[c])
            .sum();
        let bias = if protected && group == 1 { 0.4 } else { 0.0 };
        num + cat + bias
    }

    fn label(
        &self,
        spec: &SynthSpec,
        z: &[f64],
        cats: &[usize],
        group: usize,
        rng: &mut ChaCha8Rng,
        n: &Normal<f64>,
    ) -> Label {
        let noise = |rng: &mut ChaCha8Rng| spec.noise * n.sample(rng);
        match spec.task {
            Task::Binary => {
                let s = self.score(0, z, cats, group, spec.protected) + noise(rng);
                Label::Class(if s > 0.0 { "yes" } else { "no" }.into())
            }
            Task::Multiclass => {
                let k = (0..self.weights.len())
                    .map(|k| self.score(k, z, cats, group, spec.protected) + noise(rng))
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, s)| {
                        if s > best.1 {
                            (k, s)
                        } else {
                            best
                        }
                    })
                    .0;
                Label::Class(format!("k{k}"))
            }
            Task::Regression => {
                let s = self.score(0, z, cats, group, spec.protected) + noise(rng);
                Label::Real(round2(100.0 + 20.0 * s))
            }
        }
    }
}

/// Loan-approval data with a `credit_history` flag: approvals for applicants
/// without a credit history are close to a coin flip, so models underperform
/// on that slice. `gender` and `married` are protected.
pub fn loan_dataset(n: usize, seed: u64) -> Dataset {
    let schema = Arc::new(loan_schema());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let income = Normal::new(5000.0, 1800.0).expect("valid normal");
    let noise = Normal::new(0.0, 0.3).expect("valid normal");
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let inc: f64 = income.sample(&mut rng);
        let inc = inc.max(800.0).round();
        let amount = (inc * rng.random_range(0.01..0.06f64)).round();
        let history = rng.random_bool(0.8);
        let female = rng.random_bool(0.35);
        let married = rng.random_bool(0.6);
        let area = ["Urban", "Semiurban", "Rural"][rng.random_range(0..3)];
        let approve = if history {
            let ratio = 100.0 * amount / inc;
            let s = 2.0 - 0.5 * ratio + 0.3 * f64::from(u8::from(married))
                - 0.4 * f64::from(u8::from(female && !married))
                + noise.sample(&mut rng);
            s > 0.0
        } else {
            rng.random_bool(0.35)
        };
        rows.push(Instance(vec![
            Value::Num(inc),
            Value::Num(amount),
            Value::Cat(if history { "1" } else { "0" }.into()),
            Value::Cat(if female { "Female" } else { "Male" }.into()),
            Value::Cat(if married { "Yes" } else { "No" }.into()),
            Value::Cat(area.into()),
        ]));
        labels.push(Label::Class(if approve { "Y" } else { "N" }.into()));
    }
    Dataset::new(schema, rows, labels).expect("loan rows conform")
}

pub fn loan_schema() -> Schema {
    let cat = |name: &str, values: &[&str]| {
        let mut f = FeatureSpec::categorical(name);
        f.allowed_values = Some(values.iter().map(|s| s.to_string()).collect());
        f
    };
    Schema::new(
        vec![
            FeatureSpec::numerical("applicant_income"),
            FeatureSpec::numerical("loan_amount"),
            cat("credit_history", &["0", "1"]),
            cat("gender", &["Male", "Female"]),
            cat("married", &["Yes", "No"]),
            cat("property_area", &["Urban", "Semiurban", "Rural"]),
        ],
        TargetSpec {
            name: "loan_status".into(),
            task: Task::Binary,
            classes: vec!["N".into(), "Y".into()],
            favorable: Some(Favorable::Class("Y".into())),
        },
        vec!["gender".into(), "married".into()],
    )
    .expect("loan schema is valid")
}

/// Files of a generated scan workspace.
pub struct DemoFiles {
    pub config: ScanConfig,
    pub config_path: std::path::PathBuf,
}

/// Writes `schema.json`, `train.csv`, `validation.csv`, `oot.csv` and a
/// `scan.json` referencing them into `dir`.
pub fn write_workspace(
    dir: &Path,
    train: &Dataset,
    validation: &Dataset,
    oot: Option<&Dataset>,
    model: ModelSelector,
) -> Result<DemoFiles> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("schema.json"),
        serde_json::to_string_pretty(&*train.schema)? + "\n",
    )?;
    train.write_csv_file(dir.join("train.csv"))?;
    validation.write_csv_file(dir.join("validation.csv"))?;
    let mut config = ScanConfig::new(
        "schema.json".into(),
        "train.csv".into(),
        "validation.csv".into(),
        model,
    );
    if let Some(o) = oot {
        o.write_csv_file(dir.join("oot.csv"))?;
        config.oot = Some("oot.csv".into());
    }
    let config_path = dir.join("scan.json");
    fs::write(&config_path, serde_json::to_string_pretty(&config)? + "\n")?;
    config.resolve_paths(dir);
    Ok(DemoFiles {
        config,
        config_path,
    })
}

/// The loan demo: 600 training, 200 validation and 200 out-of-time rows.
pub fn write_loan_demo(dir: &Path, seed: u64) -> Result<DemoFiles> {
    let all = loan_dataset(1000, seed);
    let idx: Vec<usize> = (0..all.len()).collect();
    let train = all.subset(&idx[..600]);
    let validation = all.subset(&idx[600..800]);
    let oot = all.subset(&idx[800..]);
    let model = "builtin:logistic"
        .parse()
        .map_err(|e: crate::model::ModelError| TabularError::InvalidSchema(e.to_string()))?;
    write_workspace(dir, &train, &validation, Some(&oot), model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_data() {
        for task in [Task::Binary, Task::Multiclass, Task::Regression] {
            let spec = SynthSpec::new(task, 7);
            assert_eq!(spec.sample(50, 1).rows, spec.sample(50, 1).rows);
            assert_ne!(spec.sample(50, 1).rows, spec.sample(50, 2).rows);
        }
    }

    #[test]
    fn binary_labels_are_mixed() {
        let d = SynthSpec::new(Task::Binary, 3).sample(400, 0);
        let yes = d
            .labels
            .iter()
            .filter(|l| l.as_class() == Some("yes"))
            .count();
        assert!(yes > 40 && yes < 360, "{yes}");
    }

    #[test]
    fn loan_slice_is_noisier() {
        let d = loan_dataset(500, 1);
        assert_eq!(d.schema.protected, vec!["gender", "married"]);
        assert!(d.rows.iter().any(|r| r[2] == Value::Cat("0".into())));
    }
}
