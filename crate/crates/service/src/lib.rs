//! Versioned HTTP API over a pipeline store.
//!
//! All routes live under `/v1` and exchange JSON. Long-running phases are
//! executed on blocking worker threads; poll `GET /v1/runs/{id}` for progress.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use copersona_core::classifier::FeatureWeight;
use copersona_core::pipeline::{now_unix, Phase, PhaseOptions, Pipeline, PipelineConfig, PipelineError};
use copersona_core::store::{Store, StoreError};
use copersona_core::validation::{Decision, ReviewDecision, Stage};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::RwLock;

pub const DEFAULT_PORT: u16 = 8080;
pub const MAX_PAGE: usize = 500;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub store_root: PathBuf,
    pub port: u16,
    pub bind: [u8; 4],
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("invalid service configuration: {0}")]
    Config(String),
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("server error: {0}")]
    Serve(#[from] std::io::Error),
}

impl ServiceConfig {
    /// Reads `COPERSONA_STORE` (required) and `COPERSONA_PORT`.
    pub fn from_env() -> Result<Self, ServiceError> {
        let store_root = std::env::var_os("COPERSONA_STORE")
            .map(PathBuf::from)
            .ok_or_else(|| ServiceError::Config("COPERSONA_STORE is not set".into()))?;
        let port = match std::env::var("COPERSONA_PORT") {
            Ok(p) => p
                .parse()
                .map_err(|_| ServiceError::Config(format!("COPERSONA_PORT={p:?} is not a port")))?,
            Err(_) => DEFAULT_PORT,
        };
        Ok(Self {
            store_root,
            port,
            bind: [127, 0, 0, 1],
        })
    }
}

#[derive(Clone)]
pub struct AppState {
    pipeline: Arc<Pipeline>,
    /// Background phases hold a read guard; shutdown takes the write side to
    /// wait for them.
    inflight: Arc<RwLock<()>>,
}

impl AppState {
    pub fn new(pipeline: Pipeline) -> Self {
        Self {
            pipeline: Arc::new(pipeline),
            inflight: Arc::new(RwLock::new(())),
        }
    }

    pub fn pipeline(&self) -> &Pipeline {
        &self.pipeline
    }

    /// Resolves once no background phase is running.
    pub async fn drain(&self) {
        let _ = self.inflight.write().await;
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/runs", get(list_runs).post(create_run))
        .route("/v1/runs/{id}", get(get_run))
        .route("/v1/runs/{id}/phase", post(run_phase))
        .route("/v1/runs/{id}/review", get(get_board))
        .route("/v1/taxonomies/{id}", get(get_taxonomy))
        .route("/v1/review/queue", get(review_queue))
        .route("/v1/review/items/{id}/decision", post(decide))
        .route("/v1/reports/{run}", get(get_report))
        .route("/v1/metrics/{run}/confusion", get(get_confusion))
        .with_state(state)
}

/// Binds, serves until ctrl-c, then waits for background phases to finish.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let store = Store::open(&config.store_root)?;
    let _lock = store.lock()?;
    let state = AppState::new(Pipeline::new(store));
    let addr = SocketAddr::from((config.bind, config.port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServiceError::Bind { addr, source })?;
    tracing::info!(%addr, root = %config.store_root.display(), "listening");
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            tracing::info!("shutting down");
        })
        .await?;
    state.drain().await;
    Ok(())
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    kind: String,
    message: String,
}

impl ApiError {
    fn bad_request(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            kind: "bad_request".into(),
            message: message.into(),
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        let kind = e.kind();
        let status = match kind {
            "not_found" => StatusCode::NOT_FOUND,
            "conflict" | "gate" | "ambiguous" | "invalid_state" | "locked" => StatusCode::CONFLICT,
            "config" | "validation" | "schema" => StatusCode::UNPROCESSABLE_ENTITY,
            "transport" => StatusCode::BAD_GATEWAY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self {
            status,
            kind: kind.to_string(),
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"kind": self.kind, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs blocking pipeline work off the async executor.
async fn blocking<T, F>(state: &AppState, f: F) -> ApiResult<T>
where
    F: FnOnce(&Pipeline) -> Result<T, PipelineError> + Send + 'static,
    T: Send + 'static,
{
    let pipeline = state.pipeline.clone();
    tokio::task::spawn_blocking(move || f(&pipeline))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            kind: "internal".into(),
            message: e.to_string(),
        })?
        .map_err(ApiError::from)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Page<T> {
    pub items: Vec<T>,
    pub total: usize,
    pub offset: usize,
    pub limit: usize,
}

#[derive(Debug, Default, Deserialize)]
pub struct PageParams {
    #[serde(default)]
    offset: usize,
    #[serde(default)]
    limit: Option<usize>,
}

fn paginate<T>(all: Vec<T>, p: &PageParams) -> Page<T> {
    let limit = p.limit.unwrap_or(100).clamp(1, MAX_PAGE);
    let total = all.len();
    let items = all.into_iter().skip(p.offset).take(limit).collect();
    Page {
        items,
        total,
        offset: p.offset,
        limit,
    }
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({"status": "ok", "version": copersona_core::VERSION}))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRun {
    /// Path to a pipeline TOML file readable by the service.
    #[serde(default)]
    pub config_path: Option<PathBuf>,
    /// Inline configuration with absolute paths.
    #[serde(default)]
    pub config: Option<PipelineConfig>,
}

async fn create_run(State(state): State<AppState>, Json(body): Json<CreateRun>) -> ApiResult<Response> {
    let run = blocking(&state, move |p| {
        let cfg = match (body.config_path, body.config) {
            (Some(path), None) => PipelineConfig::load(path)?,
            (None, Some(cfg)) => cfg,
            _ => {
                return Err(PipelineError::Config(
                    "give exactly one of config_path or config".into(),
                ))
            }
        };
        p.create_run(cfg)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(run)).into_response())
}

async fn list_runs(State(state): State<AppState>, Query(page): Query<PageParams>) -> ApiResult<Json<Page<serde_json::Value>>> {
    let runs = blocking(&state, |p| p.list_runs()).await?;
    let summaries = runs
        .into_iter()
        .map(|r| {
            json!({
                "run_id": r.run_id, "phase": r.phase, "running": r.running,
                "current_draft": r.current_draft, "approved_draft": r.approved_draft,
                "created_at": r.created_at, "updated_at": r.updated_at,
            })
        })
        .collect();
    Ok(Json(paginate(summaries, &page)))
}

async fn get_run(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let run = blocking(&state, move |p| p.load_run(&id)).await?;
    Ok(Json(run).into_response())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseRequest {
    #[serde(default)]
    pub phase: Option<Phase>,
    #[serde(default)]
    pub threshold: Option<f64>,
    /// Block until the phase finishes instead of running it in the background.
    #[serde(default)]
    pub wait: bool,
}

async fn run_phase(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Option<Json<PhaseRequest>>,
) -> ApiResult<Response> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let opts = PhaseOptions {
        threshold: req.threshold,
    };
    if req.wait {
        let run = blocking(&state, move |p| p.run_phase(&id, req.phase, opts)).await?;
        return Ok(Json(run).into_response());
    }
    // fail fast on unknown runs and gate violations that are visible up front
    let run = {
        let id = id.clone();
        blocking(&state, move |p| p.load_run(&id)).await?
    };
    let target = req.phase.unwrap_or(run.phase);
    if target > run.phase || run.phase == Phase::Done {
        return Err(PipelineError::Gate(format!("cannot start {target}: run is at {}", run.phase)).into());
    }
    let guard = state.inflight.clone().read_owned().await;
    let pipeline = state.pipeline.clone();
    let run_id = id.clone();
    tokio::task::spawn_blocking(move || {
        let _guard = guard;
        if let Err(e) = pipeline.run_phase(&run_id, req.phase, opts) {
            tracing::warn!(run = %run_id, error = %e, "background phase failed");
        }
    });
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({"run_id": id, "phase": target, "status": "started"})),
    )
        .into_response())
}

async fn get_board(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let board = blocking(&state, move |p| p.board(&id)).await?;
    Ok(Json(board).into_response())
}

async fn get_taxonomy(State(state): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let draft = blocking(&state, move |p| p.load_draft(&id)).await?;
    Ok(Json(draft).into_response())
}

#[derive(Debug, Deserialize)]
pub struct QueueParams {
    #[serde(default)]
    stage: Option<Stage>,
    #[serde(default)]
    run: Option<String>,
    #[serde(default)]
    offset: usize,
    #[serde(default)]
    limit: Option<usize>,
}

async fn review_queue(State(state): State<AppState>, Query(q): Query<QueueParams>) -> ApiResult<Response> {
    let page = PageParams {
        offset: q.offset,
        limit: q.limit,
    };
    let entries = blocking(&state, move |p| p.queue(q.run.as_deref(), q.stage)).await?;
    Ok(Json(paginate(entries, &page)).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionRequest {
    #[serde(default)]
    pub run_id: Option<String>,
    pub reviewer_id: String,
    pub stage: Stage,
    pub decision: Decision,
    #[serde(default)]
    pub comment: String,
    #[serde(default)]
    pub weight_edits: Vec<FeatureWeight>,
    #[serde(default)]
    pub challenge: Option<String>,
}

async fn decide(
    State(state): State<AppState>,
    Path(item_id): Path<String>,
    Json(req): Json<DecisionRequest>,
) -> ApiResult<Response> {
    if req.reviewer_id.trim().is_empty() {
        return Err(ApiError::bad_request("reviewer_id must not be empty"));
    }
    let decision = ReviewDecision {
        reviewer_id: req.reviewer_id,
        stage: req.stage,
        item_id: item_id.clone(),
        decision: req.decision,
        comment: req.comment,
        weight_edits: req.weight_edits,
        challenge: req.challenge.filter(|c| !c.trim().is_empty()),
        timestamp: now_unix(),
    };
    let run_id = req.run_id;
    let (run_id, board) = blocking(&state, move |p| p.decide(run_id.as_deref(), decision)).await?;
    let item = board.item(&item_id).cloned();
    Ok(Json(json!({
        "run_id": run_id,
        "item": item,
        "state": board.state,
        "round": board.round,
        "pending_challenges": board.pending_challenges(),
    }))
    .into_response())
}

async fn get_report(State(state): State<AppState>, Path(run): Path<String>) -> ApiResult<Response> {
    let report = blocking(&state, move |p| p.report(&run)).await?;
    Ok(Json(report).into_response())
}

async fn get_confusion(State(state): State<AppState>, Path(run): Path<String>) -> ApiResult<Response> {
    let m = blocking(&state, move |p| p.confusion(&run)).await?;
    Ok(Json(json!({
        "labels": m.labels(),
        "counts": m.counts(),
        "total": m.total(),
        "trace": m.trace(),
    }))
    .into_response())
}
