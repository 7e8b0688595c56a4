//! Async client for the ComplAI service API.
//!
//! ```no_run
//! # async fn demo() -> Result<(), complai_client::ClientError> {
//! let client = complai_client::Client::new("http://127.0.0.1:8501")?;
//! let report = client.report().await?;
//! println!("trust {:?}", report.scorecard.trust);
//! # Ok(())
//! # }
//! ```

use complai_core::api::{ErrorBody, Health, Meta, SliceRequest};
use complai_core::drift::DriftReport;
use complai_core::fairness::FlipTestReport;
use complai_core::tabular::Schema;
use complai_core::workbench::{ScanReport, SliceReport, WhatIfResponse};
use reqwest::{Method, StatusCode};
use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid base URL `{0}`")]
    BadUrl(String),
    /// The service answered with an error body.
    #[error("{status}: {code}: {message}")]
    Api {
        status: StatusCode,
        code: String,
        message: String,
        support: Option<usize>,
    },
    #[error("unexpected {status} response: {body}")]
    Unexpected { status: StatusCode, body: String },
    #[error(transparent)]
    Transport(#[from] reqwest::Error),
}

impl ClientError {
    /// Machine-readable error code for service errors.
    pub fn code(&self) -> Option<&str> {
        match self {
            ClientError::Api { code, .. } => Some(code),
            _ => None,
        }
    }
}

pub type Result<T> = std::result::Result<T, ClientError>;

#[derive(Debug, Clone)]
pub struct Client {
    base: String,
    http: reqwest::Client,
}

impl Client {
    pub fn new(base: &str) -> Result<Self> {
        let base = base.trim_end_matches('/');
        if !(base.starts_with("http://") || base.starts_with("https://")) {
            return Err(ClientError::BadUrl(base.to_string()));
        }
        Ok(Self {
            base: base.to_string(),
            http: reqwest::Client::new(),
        })
    }

    pub fn base(&self) -> &str {
        &self.base
    }

    async fn send<T: DeserializeOwned>(
        &self,
        method: Method,
        path: &str,
        body: Option<&impl Serialize>,
    ) -> Result<T> {
        let mut req = self.http.request(method, format!("{}{path}", self.base));
        if let Some(b) = body {
            req = req.json(b);
        }
        let resp = req.send().await?;
        let status = resp.status();
        let bytes = resp.bytes().await?;
        if status.is_success() {
            return serde_json::from_slice(&bytes).map_err(|e| ClientError::Unexpected {
                status,
                body: format!("{e}: {}", String::from_utf8_lossy(&bytes)),
            });
        }
        match serde_json::from_slice::<ErrorBody>(&bytes) {
            Ok(err) => Err(ClientError::Api {
                status,
                code: err.error.code,
                message: err.error.message,
                support: err.error.support,
            }),
            Err(_) => Err(ClientError::Unexpected {
                status,
                body: String::from_utf8_lossy(&bytes).into_owned(),
            }),
        }
    }

    async fn get<T: DeserializeOwned>(&self, path: &str) -> Result<T> {
        self.send(Method::GET, path, None::<&()>).await
    }

    pub async fn health(&self) -> Result<Health> {
        self.get("/healthz").await
    }

    pub async fn meta(&self) -> Result<Meta> {
        self.get("/api/meta").await
    }

    pub async fn report(&self) -> Result<ScanReport> {
        self.get("/api/report").await
    }

    pub async fn schema(&self) -> Result<Schema> {
        self.get("/api/schema").await
    }

    /// `None` when the report has no fairness section.
    pub async fn fairness(&self) -> Result<Option<FlipTestReport>> {
        not_applicable_as_none(self.get("/api/fairness").await)
    }

    /// `None` when the report has no drift section.
    pub async fn drift(&self) -> Result<Option<DriftReport>> {
        not_applicable_as_none(self.get("/api/drift").await)
    }

    /// `instance` is a `{feature: value}` object or an array in schema order.
    pub async fn whatif(&self, instance: &serde_json::Value) -> Result<WhatIfResponse> {
        self.send(Method::POST, "/api/whatif", Some(instance)).await
    }

    pub async fn slice(&self, request: &SliceRequest) -> Result<SliceReport> {
        self.send(Method::POST, "/api/slice", Some(request)).await
    }
}

fn not_applicable_as_none<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(e) if e.code() == Some("NotApplicable") => Ok(None),
        Err(e) => Err(e),
    }
}
