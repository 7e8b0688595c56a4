//! Black-box prediction contract and its backends.
//!
//! Every model is reached through [`ModelHandle::predict_batch`], which splits
//! requests at the batch cap, validates responses and counts queries. Three
//! backends exist: built-in reference models, a child process speaking
//! newline-delimited JSON, and an HTTP endpoint speaking the same JSON.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::heom::{DistanceConfig, Heom};
use crate::tabular::{
    compute_norm_stats, json_token, Dataset, FeatureKind, Instance, Label, NormMethod, Schema,
    TargetSpec, Task, Value,
};

pub const DEFAULT_BATCH_CAP: usize = 1024;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model bridge failure: {reason}")]
    BridgeFailure { reason: String, payload: String },
    #[error("model returned {got} predictions for {expected} instances")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("model kind `{kind}` cannot serve a {task:?} task")]
    IncompatibleTask { kind: String, task: Task },
    #[error("degenerate training data: {0}")]
    DegenerateData(String),
    #[error("invalid model selector `{0}`")]
    InvalidSelector(String),
}

impl ModelError {
    fn bridge(reason: impl Into<String>, payload: impl Into<String>) -> Self {
        ModelError::BridgeFailure {
            reason: reason.into(),
            payload: payload.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    /// Per-class values aligned to `TargetSpec::classes`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<Vec<f64>>,
}

impl Prediction {
    pub fn value(&self) -> Option<f64> {
        self.label.as_real()
    }
}

/// Index of the largest score; ties go to the earliest class.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Builtin,
    Subprocess,
    Http,
}

/// A raw model backend. Implementations must be deterministic within a session.
pub trait Predictor: Send + Sync {
    fn backend(&self) -> Backend;
    fn predict(&self, batch: &[Instance]) -> Result<Vec<Prediction>>;
}

#[derive(Clone)]
pub struct ModelHandle {
    predictor: Arc<dyn Predictor>,
    target: TargetSpec,
    queries: Arc<AtomicU64>,
    batch_cap: usize,
}

impl fmt::Debug for ModelHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelHandle")
            .field("backend", &self.backend())
            .field("task", &self.target.task)
            .field("queries", &self.query_count())
            .finish()
    }
}

impl ModelHandle {
    pub fn new(predictor: Arc<dyn Predictor>, target: TargetSpec) -> Self {
        Self {
            predictor,
            target,
            queries: Arc::new(AtomicU64::new(0)),
            batch_cap: DEFAULT_BATCH_CAP,
        }
    }

    pub fn with_batch_cap(mut self, cap: usize) -> Self {
        self.batch_cap = cap.max(1);
        self
    }

    pub fn task(&self) -> Task {
        self.target.task
    }

    pub fn target(&self) -> &TargetSpec {
        &self.target
    }

    pub fn backend(&self) -> Backend {
        self.predictor.backend()
    }

    /// Total instances predicted through this handle and its clones.
    pub fn query_count(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }

    pub fn predict_batch(&self, batch: &[Instance]) -> Result<Vec<Prediction>> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(self.batch_cap) {
            let preds = self.predictor.predict(chunk)?;
            if preds.len() != chunk.len() {
                return Err(ModelError::ShapeMismatch {
                    expected: chunk.len(),
                    got: preds.len(),
                });
            }
            for p in &preds {
                self.check(p)?;
            }
            self.queries
                .fetch_add(chunk.len() as u64, Ordering::Relaxed);
            out.extend(preds);
        }
        Ok(out)
    }

    pub fn predict_one(&self, x: &Instance) -> Result<Prediction> {
        Ok(self.predict_batch(std::slice::from_ref(x))?.remove(0))
    }

    fn check(&self, p: &Prediction) -> Result<()> {
        let payload = || serde_json::to_string(p).unwrap_or_default();
        match (&p.label, self.target.task) {
            (Label::Real(y), Task::Regression) if y.is_finite() => Ok(()),
            (Label::Class(c), task) if task.is_classification() => {
                let idx = self
                    .target
                    .class_index(c)
                    .ok_or_else(|| ModelError::bridge(format!("unknown class `{c}`"), payload()))?;
                if let Some(scores) = &p.scores {
                    if scores.len() != self.target.classes.len()
                        || scores.iter().any(|s| !s.is_finite())
                    {
                        return Err(ModelError::bridge(
                            "scores do not match the declared classes",
                            payload(),
                        ));
                    }
                    if scores[argmax(scores)] > scores[idx] {
                        return Err(ModelError::bridge(
                            "label disagrees with argmax of scores",
                            payload(),
                        ));
                    }
                }
                Ok(())
            }
            _ => Err(ModelError::bridge(
                "prediction type does not match the task",
                payload(),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BuiltinKind {
    Logistic,
    Linear,
    Knn,
}

impl FromStr for BuiltinKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "logistic" => Ok(BuiltinKind::Logistic),
            "linear" => Ok(BuiltinKind::Linear),
            "knn" => Ok(BuiltinKind::Knn),
            other => Err(ModelError::InvalidSelector(format!("builtin:{other}"))),
        }
    }
}

pub type Hyper = BTreeMap<String, f64>;

fn hyper(h: &Hyper, key: &str, default: f64) -> f64 {
    h.get(key).copied().unwrap_or(default)
}

/// One-hot for categorical features, optional standardization for numerical ones.
/// Categories unseen at fit time encode as all zeros.
#[derive(Debug, Clone)]
struct Encoder {
    columns: Vec<Column>,
    width: usize,
}

#[derive(Debug, Clone)]
enum Column {
    Numerical { center: f64, scale: f64 },
    Categorical { categories: Vec<String> },
}

impl Encoder {
    fn fit(train: &Dataset, standardize: bool) -> Self {
        let columns: Vec<Column> = train
            .schema
            .features
            .iter()
            .enumerate()
            .map(|(j, f)| match f.kind {
                FeatureKind::Numerical => {
                    if standardize {
                        let xs = train.numeric_column(j);
                        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
                        let std = crate::tabular::population_std(&xs);
                        Column::Numerical {
                            center: mean,
                            scale: if std > 0.0 { std } else { 1.0 },
                        }
                    } else {
                        Column::Numerical {
                            center: 0.0,
                            scale: 1.0,
                        }
                    }
                }
                FeatureKind::Categorical => {
                    let mut categories: Vec<String> = Vec::new();
                    for r in &train.rows {
                        let token = r[j].as_cat().unwrap_or_default();
                        if !categories.iter().any(|c| c == token) {
                            categories.push(token.to_string());
                        }
                    }
                    Column::Categorical { categories }
                }
            })
            .collect();
        let width = columns
            .iter()
            .map(|c| match c {
                Column::Numerical { .. } => 1,
                Column::Categorical { categories } => categories.len(),
            })
            .sum();
        Self { columns, width }
    }

    fn encode_into(&self, x: &Instance, out: &mut Vec<f64>) {
        out.clear();
        for (col, v) in self.columns.iter().zip(x.values()) {
            match (col, v) {
                (Column::Numerical { center, scale }, Value::Num(x)) => {
                    out.push((x - center) / scale)
                }
                (Column::Categorical { categories }, v) => {
                    let token = v.as_cat();
                    out.extend(categories.iter().map(|c| {
                        if Some(c.as_str()) == token {
                            1.0
                        } else {
                            0.0
                        }
                    }));
                }
                (Column::Numerical { .. }, _) => out.push(0.0),
            }
        }
    }

    fn encode(&self, x: &Instance) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.width);
        self.encode_into(x, &mut v);
        v
    }
}

/// Multinomial logistic regression fit by full-batch gradient descent from zero.
#[derive(Debug, Clone)]
pub struct Logistic {
    encoder: Encoder,
    classes: Vec<String>,
    /// `classes × (width + 1)`, bias last.
    weights: Vec<Vec<f64>>,
}

impl Logistic {
    pub fn fit(train: &Dataset, h: &Hyper) -> Result<Self> {
        let target = &train.schema.target;
        if !target.task.is_classification() {
            return Err(ModelError::IncompatibleTask {
                kind: "logistic".into(),
                task: target.task,
            });
        }
        let y: Vec<usize> = train
            .labels
            .iter()
            .map(|l| {
                target
                    .class_index(l.as_class().unwrap_or_default())
                    .unwrap_or(0)
            })
            .collect();
        let mut present = y.clone();
        present.sort_unstable();
        present.dedup();
        if present.len() < 2 {
            return Err(ModelError::DegenerateData(
                "fewer than two classes present".into(),
            ));
        }
        let iterations = hyper(h, "iterations", 300.0) as usize;
        let lr = hyper(h, "learning_rate", 0.5);
        let l2 = hyper(h, "l2", 1e-4);

        let encoder = Encoder::fit(train, true);
        let xs: Vec<Vec<f64>> = train.rows.iter().map(|r| encoder.encode(r)).collect();
        let k = target.classes.len();
        let d = encoder.width + 1;
        let n = xs.len() as f64;
        let mut w = vec![vec![0.0; d]; k];
        let mut grad = vec![vec![0.0; d]; k];
        let mut probs = vec![0.0; k];
        for _ in 0..iterations {
            grad.iter_mut()
                .for_each(|g| g.iter_mut().for_each(|v| *v = 0.0));
            for (x, &yi) in xs.iter().zip(&y) {
                softmax_into(&w, x, &mut probs);
                for c in 0..k {
                    let err = probs[c] - if c == yi { 1.0 } else { 0.0 };
                    let g = &mut grad[c];
                    for (gj, xj) in g.iter_mut().zip(x) {
                        *gj += err * xj;
                    }
                    g[d - 1] += err;
                }
            }
            for c in 0..k {
                for j in 0..d {
                    let reg = if j + 1 < d { l2 * w[c][j] } else { 0.0 };
                    w[c][j] -= lr * (grad[c][j] / n + reg);
                }
            }
        }
        Ok(Self {
            encoder,
            classes: target.classes.clone(),
            weights: w,
        })
    }

    fn predict_one(&self, x: &Instance) -> Prediction {
        let enc = self.encoder.encode(x);
        let mut probs = vec![0.0; self.classes.len()];
        softmax_into(&self.weights, &enc, &mut probs);
        Prediction {
            label: Label::Class(self.classes[argmax(&probs)].clone()),
            scores: Some(probs),
        }
    }
}

fn softmax_into(w: &[Vec<f64>], x: &[f64], out: &mut [f64]) {
    for (o, wc) in out.iter_mut().zip(w) {
        let d = wc.len();
        *o = wc[..d - 1].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + wc[d - 1];
    }
    let max = out.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for o in out.iter_mut() {
        *o = (*o - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Ordinary least squares on raw numerical values and one-hot categories,
/// solved as a minimum-norm least-squares problem.
#[derive(Debug, Clone)]
pub struct Linear {
    encoder: Encoder,
    coefficients: Vec<f64>,
    intercept: f64,
}

impl Linear {
    pub fn fit(train: &Dataset) -> Result<Self> {
        let task = train.schema.target.task;
        if task != Task::Regression {
            return Err(ModelError::IncompatibleTask {
                kind: "linear".into(),
                task,
            });
        }
        if train.is_empty() {
            return Err(ModelError::DegenerateData("empty training set".into()));
        }
        let encoder = Encoder::fit(train, false);
        let d = encoder.width + 1;
        let n = train.len();
        let mut buf = Vec::with_capacity(d);
        let design = nalgebra::DMatrix::from_fn(n, d, |_, _| 0.0);
        let mut design = design;
        for (i, r) in train.rows.iter().enumerate() {
            encoder.encode_into(r, &mut buf);
            for (j, v) in buf.iter().enumerate() {
                design[(i, j)] = *v;
            }
            design[(i, d - 1)] = 1.0;
        }
        let y = nalgebra::DVector::from_iterator(
            n,
            train.labels.iter().map(|l| l.as_real().unwrap_or(0.0)),
        );
        let svd = design.svd(true, true);
        let beta = svd
            .solve(&y, 1e-10)
            .map_err(|e| ModelError::DegenerateData(e.to_string()))?;
        Ok(Self {
            encoder,
            coefficients: beta.iter().take(d - 1).copied().collect(),
            intercept: beta[d - 1],
        })
    }

    /// Coefficients over the encoded columns (numerical values, then one-hot blocks in feature order).
    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }

    fn predict_one(&self, x: &Instance) -> Prediction {
        let enc = self.encoder.encode(x);
        let y = enc
            .iter()
            .zip(&self.coefficients)
            .map(|(a, b)| a * b)
            .sum::<f64>()
            + self.intercept;
        Prediction {
            label: Label::Real(y),
            scores: None,
        }
    }
}

/// k-nearest neighbours under range-normalized HEOM; ties by lowest row index.
#[derive(Debug, Clone)]
pub struct Knn {
    train: Dataset,
    metric: Heom,
    k: usize,
}

impl Knn {
    pub fn fit(train: &Dataset, h: &Hyper) -> Result<Self> {
        let stats = compute_norm_stats(train, NormMethod::Range)
            .map_err(|_| ModelError::DegenerateData("empty training set".into()))?;
        let k = (hyper(h, "k", 5.0) as usize).clamp(1, train.len());
        Ok(Self {
            metric: Heom::new(&train.schema, &DistanceConfig::euclidean(stats)),
            train: train.clone(),
            k,
        })
    }

    fn predict_one(&self, x: &Instance) -> Prediction {
        let mut dists: Vec<(f64, usize)> = self
            .train
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| (self.metric.distance(x, r), i))
            .collect();
        dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let nearest = &dists[..self.k];
        let target = &self.train.schema.target;
        match target.task {
            Task::Regression => {
                let y = nearest
                    .iter()
                    .map(|&(_, i)| self.train.labels[i].as_real().unwrap_or(0.0))
                    .sum::<f64>()
                    / self.k as f64;
                Prediction {
                    label: Label::Real(y),
                    scores: None,
                }
            }
            _ => {
                let mut votes = vec![0.0; target.classes.len()];
                for &(_, i) in nearest {
                    if let Some(c) = self.train.labels[i]
                        .as_class()
                        .and_then(|c| target.class_index(c))
                    {
                        votes[c] += 1.0 / self.k as f64;
                    }
                }
                Prediction {
                    label: Label::Class(target.classes[argmax(&votes)].clone()),
                    scores: Some(votes),
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Builtin {
    Logistic(Logistic),
    Linear(Linear),
    Knn(Knn),
}

impl Predictor for Builtin {
    fn backend(&self) -> Backend {
        Backend::Builtin
    }

    fn predict(&self, batch: &[Instance]) -> Result<Vec<Prediction>> {
        Ok(batch
            .iter()
            .map(|x| match self {
                Builtin::Logistic(m) => m.predict_one(x),
                Builtin::Linear(m) => m.predict_one(x),
                Builtin::Knn(m) => m.predict_one(x),
            })
            .collect())
    }
}

pub fn train_builtin(kind: BuiltinKind, train: &Dataset, h: &Hyper) -> Result<ModelHandle> {
    let model = match kind {
        BuiltinKind::Logistic => Builtin::Logistic(Logistic::fit(train, h)?),
        BuiltinKind::Linear => Builtin::Linear(Linear::fit(train)?),
        BuiltinKind::Knn => Builtin::Knn(Knn::fit(train, h)?),
    };
    Ok(ModelHandle::new(
        Arc::new(model),
        train.schema.target.clone(),
    ))
}

#[derive(Serialize)]
struct WireRequest<'a> {
    id: u64,
    instances: &'a [Instance],
}

#[derive(Deserialize)]
struct WireResponse {
    id: Option<u64>,
    predictions: Vec<serde_json::Value>,
    #[serde(default)]
    scores: Option<Vec<Vec<f64>>>,
}

fn decode_response(raw: &str, id: u64, n: usize, task: Task) -> Result<Vec<Prediction>> {
    let resp: WireResponse = serde_json::from_str(raw)
        .map_err(|e| ModelError::bridge(format!("malformed response: {e}"), raw))?;
    if resp.id != Some(id) {
        return Err(ModelError::bridge(
            format!("response id {:?} does not match request {id}", resp.id),
            raw,
        ));
    }
    if resp.predictions.len() != n {
        return Err(ModelError::ShapeMismatch {
            expected: n,
            got: resp.predictions.len(),
        });
    }
    if let Some(scores) = &resp.scores {
        if scores.len() != n {
            return Err(ModelError::ShapeMismatch {
                expected: n,
                got: scores.len(),
            });
        }
    }
    resp.predictions
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let label = match task {
                Task::Regression => Label::Real(v.as_f64().ok_or_else(|| {
                    ModelError::bridge("regression prediction is not a number", raw)
                })?),
                _ => Label::Class(
                    json_token(v)
                        .ok_or_else(|| ModelError::bridge("prediction is not a label", raw))?,
                ),
            };
            Ok(Prediction {
                label,
                scores: resp.scores.as_ref().map(|s| s[i].clone()),
            })
        })
        .collect()
}

struct ChildIo {
    child: Child,
    stdin: Option<ChildStdin>,
    stdout: BufReader<ChildStdout>,
}

/// Child process speaking one JSON request/response per line; calls are
/// serialized through a single channel.
pub struct SubprocessModel {
    io: Mutex<ChildIo>,
    next_id: AtomicU64,
    task: Task,
}

impl SubprocessModel {
    pub fn spawn(command: &str, task: Task) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ModelError::bridge(format!("cannot spawn `{command}`: {e}"), ""))?;
        let stdin = child.stdin.take();
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            io: Mutex::new(ChildIo {
                child,
                stdin,
                stdout,
            }),
            next_id: AtomicU64::new(1),
            task,
        })
    }
}

impl Predictor for SubprocessModel {
    fn backend(&self) -> Backend {
        Backend::Subprocess
    }

    fn predict(&self, batch: &[Instance]) -> Result<Vec<Prediction>> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let line = serde_json::to_string(&WireRequest {
            id,
            instances: batch,
        })
        .expect("serializable request");
        let mut io = self.io.lock().unwrap_or_else(|e| e.into_inner());
        let stdin = io
            .stdin
            .as_mut()
            .ok_or_else(|| ModelError::bridge("model process stdin closed", ""))?;
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.write_all(b"\n"))
            .and_then(|_| stdin.flush())
            .map_err(|e| {
                ModelError::bridge(format!("write to model process failed: {e}"), &line)
            })?;
        let mut reply = String::new();
        let read = io
            .stdout
            .read_line(&mut reply)
            .map_err(|e| ModelError::bridge(format!("read from model process failed: {e}"), ""))?;
        if read == 0 {
            return Err(ModelError::bridge("model process exited", ""));
        }
        decode_response(reply.trim_end(), id, batch.len(), self.task)
    }
}

impl Drop for SubprocessModel {
    fn drop(&mut self) {
        let io = self.io.get_mut().unwrap_or_else(|e| e.into_inner());
        drop(io.stdin.take());
        let _ = io.child.wait();
    }
}

/// Counting semaphore bounding concurrent HTTP requests.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// `POST <base>/predict` with the subprocess wire format.
pub struct HttpModel {
    client: reqwest::blocking::Client,
    url: String,
    next_id: AtomicU64,
    permits: Permits,
    task: Task,
}

impl HttpModel {
    pub fn new(base: &str, task: Task, max_in_flight: usize) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .build()
            .map_err(|e| ModelError::bridge(format!("cannot build http client: {e}"), ""))?;
        Ok(Self {
            client,
            url: format!("{}/predict", base.trim_end_matches('/')),
            next_id: AtomicU64::new(1),
            permits: Permits {
                free: Mutex::new(max_in_flight.max(1)),
                cv: Condvar::new(),
            },
            task,
        })
    }
}

impl Predictor for HttpModel {
    fn backend(&self) -> Backend {
        Backend::Http
    }

    fn predict(&self, batch: &[Instance]) -> Result<Vec<Prediction>> {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let _permit = self.permits.acquire();
        let resp = self
            .client
            .post(&self.url)
            .json(&WireRequest {
                id,
                instances: batch,
            })
            .send()
            .map_err(|e| ModelError::bridge(format!("request to {} failed: {e}", self.url), ""))?;
        let status = resp.status();
        let body = resp
            .text()
            .map_err(|e| ModelError::bridge(format!("cannot read response body: {e}"), ""))?;
        if !status.is_success() {
            return Err(ModelError::bridge(format!("http status {status}"), body));
        }
        decode_response(&body, id, batch.len(), self.task)
    }
}

/// Command-line model selector: `builtin:<kind>`, `exec:<command>` or an `http(s)://` base URL.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModelSelector {
    Builtin(BuiltinKind),
    Exec(String),
    Http(String),
}

impl FromStr for ModelSelector {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(kind) = s.strip_prefix("builtin:") {
            Ok(ModelSelector::Builtin(kind.parse()?))
        } else if let Some(cmd) = s.strip_prefix("exec:") {
            let cmd = cmd.trim().trim_matches('"');
            if cmd.is_empty() {
                return Err(ModelError::InvalidSelector(s.into()));
            }
            Ok(ModelSelector::Exec(cmd.to_string()))
        } else if s.starts_with("http://") || s.starts_with("https://") {
            Ok(ModelSelector::Http(s.to_string()))
        } else {
            Err(ModelError::InvalidSelector(s.into()))
        }
    }
}

impl TryFrom<String> for ModelSelector {
    type Error = ModelError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModelSelector> for String {
    fn from(m: ModelSelector) -> String {
        m.to_string()
    }
}

impl fmt::Display for ModelSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelSelector::Builtin(k) => write!(
                f,
                "builtin:{}",
                serde_json::to_value(k).unwrap().as_str().unwrap()
            ),
            ModelSelector::Exec(c) => write!(f, "exec:{c}"),
            ModelSelector::Http(u) => f.write_str(u),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BridgeOptions {
    pub batch_cap: usize,
    pub max_in_flight: usize,
}

impl Default for BridgeOptions {
    fn default() -> Self {
        Self {
            batch_cap: DEFAULT_BATCH_CAP,
            max_in_flight: 4,
        }
    }
}

impl ModelSelector {
    /// Trains (builtin) or connects (bridges) a model for `train.schema`.
    pub fn open(&self, train: &Dataset, h: &Hyper, opts: &BridgeOptions) -> Result<ModelHandle> {
        let schema: &Schema = &train.schema;
        let handle = match self {
            ModelSelector::Builtin(kind) => train_builtin(*kind, train, h)?,
            ModelSelector::Exec(cmd) => ModelHandle::new(
                Arc::new(SubprocessModel::spawn(cmd, schema.task())?),
                schema.target.clone(),
            ),
            ModelSelector::Http(base) => ModelHandle::new(
                Arc::new(HttpModel::new(base, schema.task(), opts.max_in_flight)?),
                schema.target.clone(),
            ),
        };
        Ok(handle.with_batch_cap(opts.batch_cap))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tabular::{FeatureSpec, Schema};

    fn binary_schema() -> Arc<Schema> {
        Arc::new(
            Schema::new(
                vec![FeatureSpec::numerical("x"), FeatureSpec::categorical("c")],
                TargetSpec {
                    name: "y".into(),
                    task: Task::Binary,
                    classes: vec!["A".into(), "B".into()],
                    favorable: None,
                },
                vec![],
            )
            .unwrap(),
        )
    }

    fn data(rows: &[(f64, &str, &str)]) -> Dataset {
        Dataset::new(
            binary_schema(),
            rows.iter()
                .map(|(x, c, _)| Instance(vec![(*x).into(), (*c).into()]))
                .collect(),
            rows.iter()
                .map(|(_, _, y)| Label::Class(y.to_string()))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn knn_memorizes() {
        let d = data(&[(0.0, "p", "A"), (10.0, "q", "B")]);
        let mut h = Hyper::new();
        h.insert("k".into(), 1.0);
        let m = train_builtin(BuiltinKind::Knn, &d, &h).unwrap();
        let p = m.predict_batch(&d.rows).unwrap();
        assert_eq!(p[0].label, Label::Class("A".into()));
        assert_eq!(p[1].label, Label::Class("B".into()));
        assert_eq!(m.query_count(), 2);
    }

    #[test]
    fn logistic_rejects_single_class_and_regression() {
        let d = data(&[(0.0, "p", "A"), (1.0, "q", "A")]);
        assert!(matches!(
            train_builtin(BuiltinKind::Logistic, &d, &Hyper::new()),
            Err(ModelError::DegenerateData(_))
        ));
        assert!(matches!(
            train_builtin(BuiltinKind::Linear, &d, &Hyper::new()),
            Err(ModelError::IncompatibleTask { .. })
        ));
    }

    #[test]
    fn separable_blob() {
        let rows: Vec<(f64, &str, &str)> = (0..40)
            .map(|i| {
                let x = i as f64;
                if i < 20 {
                    (x, "p", "A")
                } else {
                    (x + 5.0, "q", "B")
                }
            })
            .collect();
        let d = data(&rows);
        let m = train_builtin(BuiltinKind::Logistic, &d, &Hyper::new()).unwrap();
        let p = m.predict_batch(&d.rows).unwrap();
        let correct = p
            .iter()
            .zip(&d.labels)
            .filter(|(p, y)| &p.label == *y)
            .count();
        assert!(correct as f64 / d.len() as f64 >= 0.95);
        for q in &p {
            let s = q.scores.as_ref().unwrap();
            assert!((s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn batching_invariance_and_cap() {
        let rows: Vec<(f64, &str, &str)> = (0..30)
            .map(|i| {
                (
                    i as f64,
                    if i % 2 == 0 { "p" } else { "q" },
                    if i < 15 { "A" } else { "B" },
                )
            })
            .collect();
        let d = data(&rows);
        let m = train_builtin(BuiltinKind::Logistic, &d, &Hyper::new())
            .unwrap()
            .with_batch_cap(7);
        let all = m.predict_batch(&d.rows).unwrap();
        let mut split = m.predict_batch(&d.rows[..11]).unwrap();
        split.extend(m.predict_batch(&d.rows[11..]).unwrap());
        assert_eq!(all, split);
        assert_eq!(all, m.predict_batch(&d.rows).unwrap());
        assert_eq!(m.query_count(), 90);
    }

    #[test]
    fn decode_checks_shape_and_id() {
        let ok = r#"{"id":3,"predictions":[1,0],"scores":[[0.2,0.8],[0.9,0.1]]}"#;
        let p = decode_response(ok, 3, 2, Task::Binary).unwrap();
        assert_eq!(p[0].label, Label::Class("1".into()));
        assert!(matches!(
            decode_response(ok, 3, 3, Task::Binary),
            Err(ModelError::ShapeMismatch {
                expected: 3,
                got: 2
            })
        ));
        assert!(matches!(
            decode_response(ok, 4, 2, Task::Binary),
            Err(ModelError::BridgeFailure { .. })
        ));
        assert!(matches!(
            decode_response("not json", 1, 1, Task::Binary),
            Err(ModelError::BridgeFailure { .. })
        ));
    }

    #[test]
    fn selectors() {
        assert_eq!(
            "builtin:logistic".parse::<ModelSelector>().unwrap(),
            ModelSelector::Builtin(BuiltinKind::Logistic)
        );
        assert_eq!(
            r#"exec:"python serve_model.py""#.parse::<ModelSelector>().unwrap(),
            ModelSelector::Exec("python serve_model.py".into())
        );
        assert_eq!(
            "http://localhost:9000".parse::<ModelSelector>().unwrap(),
            ModelSelector::Http("http://localhost:9000".into())
        );
        assert!("builtin:forest".parse::<ModelSelector>().is_err());
        assert!("model.pkl".parse::<ModelSelector>().is_err());
        assert_eq!(
            ModelSelector::Builtin(BuiltinKind::Knn).to_string(),
            "builtin:knn"
        );
    }
}
