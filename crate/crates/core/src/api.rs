//! Request and response bodies of the HTTP API that are not engine types.

use serde::{Deserialize, Serialize};

use crate::scores::MetricWeights;
use crate::tabular::{SliceQuery, Task};
use crate::workbench::RowCounts;

/// Body of every non-2xx response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    /// Machine-readable code, e.g. `SchemaViolation` or `EmptySlice`.
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
    /// Row support, set for slice errors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub ready: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub engine_version: String,
    pub format: u32,
    pub task: Task,
    pub model: String,
    pub features: Vec<String>,
    pub protected: Vec<String>,
    pub rows: RowCounts,
}

/// `POST /api/slice` body: a slice query with optional metric weights.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SliceRequest {
    #[serde(flatten)]
    pub query: SliceQuery,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metric_weights: Option<MetricWeights>,
}
