use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{FromRequest, FromRequestParts, Path, Request, State};
use axum::http::request::Parts;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use nebula_core::{Area, NodeId, Selection, SubgraphPayload};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast::error::RecvError;
use tower_http::services::ServeDir;

use crate::config::ServiceConfig;
use crate::datasets::{DatasetInfo, DatasetStats, Registry};
use crate::error::{ApiError, ServeError};
use crate::protocol::{ClientMessage, ControlMessage, ServerMessage};
use crate::session::{Event, SessionHandle, SessionInfo, SessionManager, SessionParams};

pub const DEFAULT_SEARCH_LIMIT: usize = 20;
pub const MAX_SEARCH_LIMIT: usize = 1000;

pub struct AppInner {
    pub config: ServiceConfig,
    pub registry: Registry,
    pub sessions: SessionManager,
}

#[derive(Clone)]
pub struct AppState(pub Arc<AppInner>);

impl AppState {
    /// Opens every configured store.
    pub fn new(config: ServiceConfig) -> Result<Self, ServeError> {
        config.validate()?;
        let registry = Registry::open(&config.stores)?;
        let sessions = SessionManager::new(config.max_sessions);
        Ok(Self(Arc::new(AppInner {
            config,
            registry,
            sessions,
        })))
    }

    pub fn sessions(&self) -> &SessionManager {
        &self.0.sessions
    }

    pub fn registry(&self) -> &Registry {
        &self.0.registry
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.0.config
    }
}

/// JSON body extractor whose rejections use the `{code, message}` shape.
pub struct ApiJson<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for ApiJson<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, ApiError> {
        Json::<T>::from_request(req, state)
            .await
            .map(|Json(v)| ApiJson(v))
            .map_err(|r: JsonRejection| ApiError::bad_request(r.body_text()))
    }
}

pub struct ApiQuery<T>(pub T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequestParts<S> for ApiQuery<T> {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &S) -> Result<Self, ApiError> {
        axum::extract::Query::<T>::from_request_parts(parts, state)
            .await
            .map(|q| ApiQuery(q.0))
            .map_err(|r: QueryRejection| ApiError::bad_request(r.body_text()))
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct SearchQuery {
    pub q: String,
    #[serde(default)]
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub id: NodeId,
    pub external_id: String,
    pub label: String,
    pub degree: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InduceRequest {
    pub selection: Selection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSessionRequest {
    pub dataset_id: String,
    pub selection: Selection,
    #[serde(default)]
    pub seed: u64,
    /// `[width, height]`; defaults to 1000 x 1000.
    #[serde(default)]
    pub area: Option<[f64; 2]>,
    #[serde(default)]
    pub frame_rate: Option<f64>,
    #[serde(default)]
    pub iters_per_frame: Option<u32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSessionResponse {
    pub session_id: String,
    pub subgraph: SubgraphPayload,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpandRequest {
    pub index: usize,
    pub hops: usize,
    pub cap: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpandResponse {
    /// First frame carrying the expanded node list.
    pub frame_no: u32,
    pub subgraph: SubgraphPayload,
}

pub fn router(state: AppState) -> Router {
    let mut app = Router::new()
        .route("/datasets", get(list_datasets))
        .route("/datasets/{id}/stats", get(dataset_stats))
        .route("/datasets/{id}/search", get(search))
        .route("/datasets/{id}/induce", post(induce))
        .route("/sessions", post(create_session).get(list_sessions))
        .route("/sessions/{id}", get(session_info).delete(delete_session))
        .route("/sessions/{id}/expand", post(expand_session))
        .route("/sessions/{id}/stream", get(stream));
    app = match &state.config().static_dir {
        Some(dir) => app.fallback_service(ServeDir::new(dir)),
        None => app.fallback(not_found),
    };
    app.with_state(state)
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route")
}

async fn blocking<T, F>(f: F) -> Result<T, ApiError>
where
    F: FnOnce() -> Result<T, ApiError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn list_datasets(State(app): State<AppState>) -> Json<Vec<DatasetInfo>> {
    Json(app.registry().list())
}

async fn dataset_stats(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<DatasetStats>, ApiError> {
    Ok(Json(app.registry().get(&id)?.stats()))
}

async fn search(
    State(app): State<AppState>,
    Path(id): Path<String>,
    ApiQuery(query): ApiQuery<SearchQuery>,
) -> Result<Json<Vec<SearchHit>>, ApiError> {
    let ds = app.registry().get(&id)?.clone();
    let limit = query.limit.unwrap_or(DEFAULT_SEARCH_LIMIT);
    if limit > MAX_SEARCH_LIMIT {
        return Err(ApiError::bad_request(format!(
            "limit must be at most {MAX_SEARCH_LIMIT}"
        )));
    }
    blocking(move || {
        ds.store
            .search_labels(&query.q, limit)
            .into_iter()
            .map(|(node, _)| {
                let r = ds.store.record(node)?;
                Ok(SearchHit {
                    id: node,
                    external_id: r.external_id,
                    label: r.label,
                    degree: r.degree,
                })
            })
            .collect::<Result<Vec<_>, ApiError>>()
    })
    .await
    .map(Json)
}

async fn induce(
    State(app): State<AppState>,
    Path(id): Path<String>,
    ApiJson(req): ApiJson<InduceRequest>,
) -> Result<Json<SubgraphPayload>, ApiError> {
    let ds = app.registry().get(&id)?.clone();
    blocking(move || {
        let sub = req.selection.induce(&ds.store)?;
        if sub.nodes.is_empty() {
            return Err(ApiError::empty_selection());
        }
        ds.payload(&sub)
    })
    .await
    .map(Json)
}

async fn create_session(
    State(app): State<AppState>,
    ApiJson(req): ApiJson<CreateSessionRequest>,
) -> Result<(StatusCode, Json<CreateSessionResponse>), ApiError> {
    let ds = app.registry().get(&req.dataset_id)?.clone();
    let cfg = app.config();
    let area = req.area.map(|[w, h]| Area::new(w, h)).unwrap_or_default();
    let params = SessionParams {
        seed: req.seed,
        area,
        frame_rate: req.frame_rate.unwrap_or(cfg.frame_rate),
        iters_per_frame: req.iters_per_frame.unwrap_or(cfg.iters_per_frame),
    };
    let state = app.clone();
    let (handle, payload) =
        blocking(move || state.sessions().create(ds, &req.selection, params)).await?;
    tracing::info!(session = handle.id(), nodes = payload.nodes.len(), "session created");
    Ok((
        StatusCode::CREATED,
        Json(CreateSessionResponse {
            session_id: handle.id().to_owned(),
            subgraph: (*payload).clone(),
        }),
    ))
}

async fn list_sessions(State(app): State<AppState>) -> Json<Vec<SessionInfo>> {
    Json(app.sessions().list())
}

async fn session_info(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<SessionInfo>, ApiError> {
    let handle = app.sessions().get(&id)?;
    handle.touch();
    Ok(Json(handle.info()))
}

async fn delete_session(
    State(app): State<AppState>,
    Path(id): Path<String>,
) -> Result<StatusCode, ApiError> {
    app.sessions().remove(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn expand_session(
    State(app): State<AppState>,
    Path(id): Path<String>,
    ApiJson(req): ApiJson<ExpandRequest>,
) -> Result<Json<ExpandResponse>, ApiError> {
    let handle = app.sessions().get(&id)?;
    let applied = handle
        .apply(ControlMessage::Expand {
            index: req.index,
            hops: req.hops,
            cap: req.cap,
        })
        .await?;
    Ok(Json(ExpandResponse {
        frame_no: applied.frame_no,
        subgraph: (*applied.subgraph).clone(),
    }))
}

async fn stream(
    State(app): State<AppState>,
    Path(id): Path<String>,
    ws: WebSocketUpgrade,
) -> Result<Response, ApiError> {
    let handle = app.sessions().get(&id)?;
    Ok(ws
        .on_upgrade(move |socket| run_stream(socket, handle, app))
        .into_response())
}

fn bad_message(text: &str, err: impl std::fmt::Display) -> ServerMessage {
    // Echo the sequence number when the message got far enough to carry one.
    let seq = serde_json::from_str::<serde_json::Value>(text)
        .ok()
        .and_then(|v| v.get("seq").and_then(|s| s.as_u64()));
    ServerMessage::Error {
        seq,
        code: "bad_message".into(),
        message: err.to_string(),
    }
}

async fn run_stream(mut socket: WebSocket, handle: Arc<SessionHandle>, app: AppState) {
    let mut events = handle.subscribe();
    handle.touch();
    let hello = handle.subgraph_message();
    if socket.send(Message::Text(hello.as_ref().into())).await.is_err() {
        return;
    }
    loop {
        tokio::select! {
            ev = events.recv() => match ev {
                Ok(Event::Frame(f)) => {
                    if socket.send(Message::Binary(f.bytes)).await.is_err() {
                        break;
                    }
                }
                Ok(Event::Text(t)) => {
                    if socket.send(Message::Text(t.as_ref().into())).await.is_err() {
                        break;
                    }
                }
                Err(RecvError::Lagged(n)) => {
                    tracing::warn!(session = handle.id(), skipped = n, "stream client lagging");
                }
                Ok(Event::Closed) | Err(RecvError::Closed) => {
                    let _ = socket.send(Message::Close(None)).await;
                    break;
                }
            },
            msg = socket.recv() => match msg {
                Some(Ok(Message::Text(text))) => {
                    handle.touch();
                    match ClientMessage::parse(&text) {
                        Ok(m) if m.control == ControlMessage::Close => {
                            let _ = app.sessions().remove(handle.id());
                        }
                        Ok(m) => {
                            if handle.send(m).is_err() {
                                break;
                            }
                        }
                        Err(e) => {
                            let reply = bad_message(&text, e).to_json();
                            if socket.send(Message::Text(reply.into())).await.is_err() {
                                break;
                            }
                        }
                    }
                }
                Some(Ok(Message::Binary(_))) => {
                    let reply = bad_message("", "control messages must be JSON text").to_json();
                    if socket.send(Message::Text(reply.into())).await.is_err() {
                        break;
                    }
                }
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                Some(Ok(_)) => {}
            },
        }
    }
}
