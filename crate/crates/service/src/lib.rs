//! HTTP/JSON service over a loaded scan session.
//!
//! Routes:
//!
//! | method | path            | body                     |
//! |--------|-----------------|--------------------------|
//! | GET    | `/healthz`      |                          |
//! | GET    | `/api/meta`     |                          |
//! | GET    | `/api/report`   |                          |
//! | GET    | `/api/schema`   |                          |
//! | GET    | `/api/fairness` |                          |
//! | GET    | `/api/drift`    |                          |
//! | POST   | `/api/whatif`   | instance object or array |
//! | POST   | `/api/slice`    | slice query              |
//!
//! Every `/api` route answers 503 until the session has loaded.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use complai_core::api::{ErrorBody, ErrorDetail, Health, Meta, SliceRequest};
use complai_core::workbench::{ScanConfig, ScanReport, Session, WorkbenchError, REPORT_FORMAT};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

pub const DEFAULT_PORT: u16 = 8501;

const CONSOLE_HTML: &str = include_str!("../assets/index.html");

/// A session together with its scan report.
pub struct Loaded {
    pub session: Session,
    pub report: ScanReport,
    report_json: String,
}

impl Loaded {
    pub fn new(session: Session, report: ScanReport) -> Self {
        let report_json = report.to_json();
        Self {
            session,
            report,
            report_json,
        }
    }
}

/// Opens the session for `config` and reads the report at `report` (default:
/// the config's output path). When no report exists yet a scan is run and
/// persisted first.
pub fn load(config: ScanConfig, report: Option<PathBuf>) -> Result<Loaded, WorkbenchError> {
    let path = report.unwrap_or_else(|| config.out.clone());
    let session = Session::open(config)?;
    let report = if path.is_file() {
        ScanReport::load(&path)?
    } else {
        tracing::info!(path = %path.display(), "no report on disk; scanning");
        let r = session.scan()?;
        r.save(&path)?;
        session.write_artifacts(&r)?;
        r
    };
    Ok(Loaded::new(session, report))
}

#[derive(Clone, Default)]
pub struct AppState {
    inner: Arc<RwLock<Option<Arc<Loaded>>>>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ready(loaded: Loaded) -> Self {
        let s = Self::new();
        s.set(loaded);
        s
    }

    pub fn set(&self, loaded: Loaded) {
        *self.inner.write().unwrap_or_else(|e| e.into_inner()) = Some(Arc::new(loaded));
    }

    pub fn get(&self) -> Option<Arc<Loaded>> {
        self.inner.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    /// Loads the session on a blocking thread and publishes it when done.
    pub fn load_in_background(
        &self,
        config: ScanConfig,
        report: Option<PathBuf>,
    ) -> JoinHandle<Result<(), WorkbenchError>> {
        let state = self.clone();
        tokio::task::spawn_blocking(move || {
            let loaded = load(config, report)?;
            state.set(loaded);
            tracing::info!("session loaded");
            Ok(())
        })
    }
}

/// Error response: status plus machine-readable body.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                error: ErrorDetail {
                    code: code.to_string(),
                    message: message.into(),
                    stage: None,
                    support: None,
                },
            },
        }
    }

    fn not_ready() -> Self {
        Self::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "NotReady",
            "scan artifacts are still loading",
        )
    }

    fn not_applicable(what: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "NotApplicable",
            format!("the report has no {what} section"),
        )
    }

    fn malformed(e: serde_json::Error) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "MalformedRequest", e.to_string())
    }
}

impl From<WorkbenchError> for ApiError {
    fn from(e: WorkbenchError) -> Self {
        let code = e.code();
        let status = if e.is_client_error() {
            StatusCode::BAD_REQUEST
        } else if matches!(code, "BridgeFailure" | "ShapeMismatch") {
            StatusCode::BAD_GATEWAY
        } else {
            StatusCode::INTERNAL_SERVER_ERROR
        };
        let mut err = ApiError::new(status, code, e.to_string());
        err.body.error.stage = e.stage().map(|s| s.to_string());
        if matches!(e, WorkbenchError::EmptySlice) {
            err.body.error.support = Some(0);
        }
        err
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn loaded(state: &AppState) -> ApiResult<Arc<Loaded>> {
    state.get().ok_or_else(ApiError::not_ready)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/", get(console))
        .route("/healthz", get(health))
        .route("/api/meta", get(meta))
        .route("/api/report", get(report))
        .route("/api/schema", get(schema))
        .route("/api/fairness", get(fairness))
        .route("/api/drift", get(drift))
        .route("/api/whatif", post(whatif))
        .route("/api/slice", post(slice))
        .with_state(state)
}

async fn console() -> Html<&'static str> {
    Html(CONSOLE_HTML)
}

async fn health(State(state): State<AppState>) -> Json<Health> {
    Json(Health {
        status: "ok".into(),
        ready: state.get().is_some(),
    })
}

async fn meta(State(state): State<AppState>) -> ApiResult<Json<Meta>> {
    let l = loaded(&state)?;
    let s = &l.session;
    Ok(Json(Meta {
        engine_version: l.report.engine_version.clone(),
        format: REPORT_FORMAT,
        task: s.schema.task(),
        model: s.config.model.to_string(),
        features: s.schema.features.iter().map(|f| f.name.clone()).collect(),
        protected: s.protected_attributes(),
        rows: l.report.rows.clone(),
    }))
}

async fn report(State(state): State<AppState>) -> ApiResult<Response> {
    let l = loaded(&state)?;
    Ok((
        [(header::CONTENT_TYPE, "application/json")],
        l.report_json.clone(),
    )
        .into_response())
}

async fn schema(State(state): State<AppState>) -> ApiResult<Response> {
    let l = loaded(&state)?;
    Ok(Json(&*l.session.schema).into_response())
}

async fn fairness(State(state): State<AppState>) -> ApiResult<Response> {
    let l = loaded(&state)?;
    match &l.report.fairness {
        Some(f) => Ok(Json(f).into_response()),
        None => Err(ApiError::not_applicable("fairness")),
    }
}

async fn drift(State(state): State<AppState>) -> ApiResult<Response> {
    let l = loaded(&state)?;
    match &l.report.drift {
        Some(d) => Ok(Json(d).into_response()),
        None => Err(ApiError::not_applicable("drift")),
    }
}

/// Runs a blocking engine call off the async workers.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, WorkbenchError> + Send + 'static,
) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "Internal",
            e.to_string(),
        )),
    }
}

async fn whatif(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let l = loaded(&state)?;
    let value: serde_json::Value = serde_json::from_slice(&body).map_err(ApiError::malformed)?;
    let response = blocking(move || {
        let x = l.session.parse_instance(&value)?;
        l.session.whatif(x)
    })
    .await?;
    Ok(Json(response).into_response())
}

async fn slice(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let l = loaded(&state)?;
    let req: SliceRequest = serde_json::from_slice(&body).map_err(ApiError::malformed)?;
    let report = blocking(move || {
        l.session
            .slice_report(&req.query, req.metric_weights.as_ref())
    })
    .await?;
    Ok(Json(report).into_response())
}

/// Serves `router(state)` on `listener` until the task is cancelled.
pub async fn serve(listener: TcpListener, state: AppState) -> std::io::Result<()> {
    if let Ok(addr) = listener.local_addr() {
        tracing::info!(%addr, "listening");
    }
    axum::serve(listener, router(state)).await
}

pub fn default_addr() -> SocketAddr {
    SocketAddr::from(([127, 0, 0, 1], DEFAULT_PORT))
}
