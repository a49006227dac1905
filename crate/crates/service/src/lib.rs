//! HTTP facade over an interactive correction session.
//!
//! Every mutation goes through one mutex around the [`Session`], so answers
//! are applied one at a time in arrival order. Because expansion waits for
//! the round to advance, the arrival order never changes the outcome.

pub mod render;

use std::collections::{BTreeMap, HashMap};
use std::future::Future;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use alc_core::acquisition::AcquisitionKind;
use alc_core::correction::{AnswerError, QueryStatus, Verdict};
use alc_core::model::{BudgetLedger, RoundPhase};
use alc_core::session::{Session, SessionError};
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use tokio::sync::Notify;
use tower_http::services::ServeDir;

pub const DEFAULT_LEASE: Duration = Duration::from_secs(120);

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub session_id: String,
    /// How long a query handed to one annotator is withheld from others.
    pub lease: Duration,
    /// Directory of UI assets served at `/`.
    pub static_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            session_id: "session".into(),
            lease: DEFAULT_LEASE,
            static_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionInfo {
    pub session_id: String,
    pub class_names: Vec<String>,
    pub round: u32,
    pub rounds: u32,
    pub phase: RoundPhase,
    pub batch_size: usize,
    pub queries_issued: usize,
    pub queries_pending: usize,
    pub queries_answered: usize,
    pub ledger: BudgetLedger,
    pub epsilon: f64,
    pub kind: AcquisitionKind,
    pub corrected_histogram: BTreeMap<u16, u64>,
    pub export_available: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelView {
    pub id: u16,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryView {
    pub query_id: String,
    pub round: u32,
    pub image_id: String,
    pub x: u32,
    pub y: u32,
    /// Inclusive `[x0, y0, x1, y1]`.
    pub bbox: [u32; 4],
    pub pseudo_label: LabelView,
    pub class_names: Vec<String>,
    pub image_url: String,
    pub overlay_url: String,
    pub lease_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerAck {
    pub query_id: String,
    pub ledger: BudgetLedger,
}

#[derive(Debug, Serialize)]
struct ErrorBody {
    error: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn no_session() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "no active session")
    }

    fn not_found(what: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("{what} not found"))
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let status = match &e {
            SessionError::UnknownQuery(_) => StatusCode::NOT_FOUND,
            SessionError::Answer(AnswerError::StaleAnswer(..))
            | SessionError::OutstandingQueries(_)
            | SessionError::WrongPhase(_) => StatusCode::CONFLICT,
            SessionError::Answer(AnswerError::InvalidLabel { .. }) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

struct Lease {
    annotator: String,
    expires: Instant,
}

struct Shared {
    session: Option<Session>,
    leases: HashMap<String, Lease>,
}

#[derive(Clone)]
pub struct AppState {
    shared: Arc<Mutex<Shared>>,
    config: Arc<ServiceConfig>,
    finished: Arc<Notify>,
}

impl AppState {
    /// Wraps a session and issues its first batch if none is open yet.
    pub fn new(session: Option<Session>, config: ServiceConfig) -> Result<Self, SessionError> {
        let state = Self {
            shared: Arc::new(Mutex::new(Shared {
                session: None,
                leases: HashMap::new(),
            })),
            config: Arc::new(config),
            finished: Arc::new(Notify::new()),
        };
        if let Some(mut session) = session {
            session.set_checkpoint_every_answer(true);
            state.open_round(&mut session)?;
            state.lock().session = Some(session);
        }
        Ok(state)
    }

    fn lock(&self) -> MutexGuard<'_, Shared> {
        self.shared.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Moves the session forward until it either has queries out or is done.
    fn open_round(&self, session: &mut Session) -> Result<(), SessionError> {
        if session.phase() == RoundPhase::AwaitingPredictions {
            session.refresh_predictions()?;
        }
        if session.phase() == RoundPhase::Ready {
            session.begin_round()?;
        }
        if session.phase() == RoundPhase::Finished {
            self.finished.notify_one();
        }
        Ok(())
    }

    /// Read access to the session, for reporting after the server stops.
    pub fn inspect<R>(&self, f: impl FnOnce(Option<&Session>) -> R) -> R {
        f(self.lock().session.as_ref())
    }

    /// Resolves once the session reaches its final round.
    pub async fn finished(&self) {
        self.finished.notified().await
    }
}

fn session_info(session: &Session, config: &ServiceConfig) -> SessionInfo {
    let s = session.summary();
    SessionInfo {
        session_id: config.session_id.clone(),
        class_names: session.dataset().class_names.clone(),
        round: s.round,
        rounds: s.rounds,
        phase: s.phase,
        batch_size: s.batch_size,
        queries_issued: s.queries_issued,
        queries_pending: s.queries_pending,
        queries_answered: s.queries_answered,
        ledger: s.ledger,
        epsilon: s.epsilon,
        kind: s.kind,
        corrected_histogram: session
            .metrics()
            .last()
            .map(|m| m.corrected_histogram.clone())
            .unwrap_or_default(),
        export_available: s.phase == RoundPhase::Finished && session.export_dir().is_some(),
    }
}

pub fn router(state: AppState) -> Router {
    let static_dir = state.config.static_dir.clone();
    let api = Router::new()
        .route("/api/session", get(get_session))
        .route("/api/queries/next", get(next_query))
        .route("/api/queries/{id}/answer", post(post_answer))
        .route("/api/rounds/advance", post(advance))
        .route("/api/images/{file}", get(image_png))
        .route("/api/overlays/{file}", get(overlay_png))
        .with_state(state);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Serves until `shutdown` resolves or the session finishes.
pub async fn serve(
    listener: tokio::net::TcpListener,
    state: AppState,
    shutdown: impl Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    let done = state.clone();
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async move {
            tokio::select! {
                _ = shutdown => {}
                _ = done.finished() => {}
            }
        })
        .await
}

async fn get_session(State(state): State<AppState>) -> Result<Json<SessionInfo>, ApiError> {
    let shared = state.lock();
    let session = shared.session.as_ref().ok_or_else(ApiError::no_session)?;
    Ok(Json(session_info(session, &state.config)))
}

#[derive(Debug, Deserialize)]
struct AnnotatorParam {
    annotator: Option<String>,
}

async fn next_query(State(state): State<AppState>, Query(params): Query<AnnotatorParam>) -> Result<Response, ApiError> {
    let annotator = params.annotator.unwrap_or_else(|| "anonymous".into());
    let mut guard = state.lock();
    let shared = &mut *guard;
    let session = shared.session.as_ref().ok_or_else(ApiError::no_session)?;
    if session.phase() != RoundPhase::Querying {
        return Ok(StatusCode::NO_CONTENT.into_response());
    }
    let now = Instant::now();
    let pending = || session.queries().iter().filter(|q| q.status == QueryStatus::Pending);
    let held = pending().find(|q| {
        shared
            .leases
            .get(&q.query_id)
            .is_some_and(|l| l.annotator == annotator && l.expires > now)
    });
    let free = || pending().find(|q| shared.leases.get(&q.query_id).is_none_or(|l| l.expires <= now));
    let Some(query) = held.or_else(free) else {
        return Ok(StatusCode::NO_CONTENT.into_response());
    };
    let segment = session
        .query_segment(query)
        .ok_or_else(|| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "query segment missing"))?;
    let names = &session.dataset().class_names;
    let view = QueryView {
        query_id: query.query_id.clone(),
        round: query.round,
        image_id: query.pixel.image_id.clone(),
        x: query.pixel.x,
        y: query.pixel.y,
        bbox: segment.bbox(),
        pseudo_label: LabelView {
            id: query.pseudo_label.0,
            name: names.get(query.pseudo_label.index()).cloned().unwrap_or_default(),
        },
        class_names: names.clone(),
        image_url: format!("/api/images/{}.png", query.pixel.image_id),
        overlay_url: format!("/api/overlays/{}.png", query.query_id),
        lease_seconds: state.config.lease.as_secs_f64(),
    };
    shared.leases.insert(
        view.query_id.clone(),
        Lease {
            annotator,
            expires: now + state.config.lease,
        },
    );
    Ok(Json(view).into_response())
}

async fn post_answer(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(params): Query<AnnotatorParam>,
    Json(verdict): Json<Verdict>,
) -> Result<Json<AnswerAck>, ApiError> {
    let mut guard = state.lock();
    let shared = &mut *guard;
    let session = shared.session.as_mut().ok_or_else(ApiError::no_session)?;
    let annotator = params
        .annotator
        .or_else(|| shared.leases.get(&id).map(|l| l.annotator.clone()))
        .unwrap_or_else(|| "anonymous".into());
    let at = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let ledger = session.submit_answer(&id, verdict, &annotator, at)?.clone();
    shared.leases.remove(&id);
    Ok(Json(AnswerAck { query_id: id, ledger }))
}

async fn advance(State(state): State<AppState>) -> Result<Json<SessionInfo>, ApiError> {
    let worker = state.clone();
    tokio::task::spawn_blocking(move || {
        let mut guard = worker.lock();
        let shared = &mut *guard;
        let session = shared.session.as_mut().ok_or_else(ApiError::no_session)?;
        match session.phase() {
            RoundPhase::Finished => return Err(ApiError::new(StatusCode::CONFLICT, "session already finished")),
            RoundPhase::Querying => session.complete_round()?,
            _ => {}
        }
        shared.leases.clear();
        worker.open_round(session)?;
        Ok(Json(session_info(session, &worker.config)))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn image_png(State(state): State<AppState>, Path(file): Path<String>) -> Result<Response, ApiError> {
    let id = file.strip_suffix(".png").ok_or_else(|| ApiError::not_found("image"))?;
    let shared = state.lock();
    let session = shared.session.as_ref().ok_or_else(ApiError::no_session)?;
    let img = session
        .dataset()
        .image(id)
        .ok_or_else(|| ApiError::not_found("image"))?;
    Ok(png(render::rgb_png(&img.rgb, img.width, img.height)))
}

async fn overlay_png(State(state): State<AppState>, Path(file): Path<String>) -> Result<Response, ApiError> {
    let id = file.strip_suffix(".png").ok_or_else(|| ApiError::not_found("query"))?;
    let shared = state.lock();
    let session = shared.session.as_ref().ok_or_else(ApiError::no_session)?;
    let query = session
        .queries()
        .iter()
        .find(|q| q.query_id == id)
        .ok_or_else(|| ApiError::not_found("query"))?;
    let segment = session
        .query_segment(query)
        .ok_or_else(|| ApiError::not_found("segment"))?;
    let height = session.dataset().image(&query.pixel.image_id).map_or(0, |i| i.height);
    Ok(png(render::overlay_png(
        &segment,
        height,
        (query.pixel.x, query.pixel.y),
    )))
}
