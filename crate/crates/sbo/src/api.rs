//! HTTP+JSON facade over live sessions.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use sbo_core::engine::SessionConfig;
use sbo_core::preference::Channel;
use sbo_core::SboError;

use crate::session::{LiveSession, SessionError, Winner};
use crate::store::EventStore;

type Shared = Arc<Mutex<LiveSession>>;

#[derive(Clone, Default)]
pub struct AppState {
    sessions: Arc<RwLock<HashMap<String, Shared>>>,
    store: Option<EventStore>,
    facilitator_token: Option<String>,
}

impl AppState {
    pub fn new(store: Option<EventStore>, facilitator_token: Option<String>) -> Self {
        Self {
            sessions: Arc::default(),
            store,
            facilitator_token,
        }
    }

    /// Replays every log in the store. Returns the number of sessions loaded.
    pub fn restore(&self) -> Result<usize, SessionError> {
        let Some(store) = &self.store else {
            return Ok(0);
        };
        let ids = store.ids().map_err(|e| SessionError::Log(e.to_string()))?;
        let mut map = self.sessions.write().expect("session map poisoned");
        for id in &ids {
            let s = LiveSession::replay(&store.load(id)?)?;
            map.insert(id.clone(), Arc::new(Mutex::new(s)));
        }
        Ok(ids.len())
    }

    pub fn session(&self, id: &str) -> Option<Shared> {
        self.sessions.read().expect("session map poisoned").get(id).cloned()
    }

    fn persist(&self, s: &LiveSession, from: usize) -> Result<(), ApiError> {
        if let Some(store) = &self.store {
            store
                .append(&s.id, &s.events()[from..])
                .map_err(|e| ApiError::Internal(format!("event log: {e}")))?;
        }
        Ok(())
    }
}

#[derive(Debug)]
pub enum ApiError {
    NotFound(String),
    BadRequest(String),
    Conflict(String),
    Precondition(String),
    Unauthorized(String),
    Internal(String),
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::NotFound(m) => ApiError::NotFound(m),
            SessionError::Conflict(m) => ApiError::Conflict(m),
            SessionError::Unauthorized(m) => ApiError::Unauthorized(m),
            SessionError::Log(m) => ApiError::Internal(m),
            SessionError::Engine(e) => match e {
                SboError::Argument(m) => ApiError::BadRequest(m),
                SboError::Protocol(m) => ApiError::Conflict(format!("protocol violation: {m}")),
                SboError::State(m) => ApiError::Precondition(m),
                other => ApiError::Internal(other.to_string()),
            },
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind, msg) = match self {
            ApiError::NotFound(m) => (StatusCode::NOT_FOUND, "not_found", m),
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, "invalid", m),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, "conflict", m),
            ApiError::Precondition(m) => (StatusCode::PRECONDITION_FAILED, "precondition", m),
            ApiError::Unauthorized(m) => (StatusCode::UNAUTHORIZED, "unauthorized", m),
            ApiError::Internal(m) => (StatusCode::INTERNAL_SERVER_ERROR, "internal", m),
        };
        (status, Json(json!({ "error": kind, "message": msg }))).into_response()
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next-pair", get(next_pair))
        .route("/sessions/{id}/votes", post(submit_vote))
        .route("/sessions/{id}/estimate", get(estimate))
        .route("/sessions/{id}/trace", get(trace))
        .with_state(state)
}

fn check_facilitator(state: &AppState, headers: &HeaderMap) -> Result<(), ApiError> {
    let Some(expected) = &state.facilitator_token else {
        return Ok(());
    };
    let given = headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    if given == Some(expected.as_str()) {
        Ok(())
    } else {
        Err(ApiError::Unauthorized("facilitator token required".into()))
    }
}

fn lookup(state: &AppState, id: &str) -> Result<Shared, ApiError> {
    state.session(id).ok_or_else(|| ApiError::NotFound(format!("no session {id}")))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    pub round: usize,
    pub voter_tokens: Vec<String>,
}

async fn create_session(
    State(state): State<AppState>,
    headers: HeaderMap,
    body: String,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    check_facilitator(&state, &headers)?;
    let config = SessionConfig::from_json(&body).map_err(|e| ApiError::from(SessionError::from(e)))?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let tokens: Vec<String> = (0..config.n).map(|_| uuid::Uuid::new_v4().simple().to_string()).collect();
    let st = state.clone();
    let created = tokio::task::spawn_blocking(move || -> Result<Created, ApiError> {
        let s = LiveSession::create(id.clone(), config, tokens.clone())?;
        st.persist(&s, 0)?;
        st.sessions
            .write()
            .expect("session map poisoned")
            .insert(id.clone(), Arc::new(Mutex::new(s)));
        Ok(Created {
            id,
            round: 0,
            voter_tokens: tokens,
        })
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn next_pair(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let s = lookup(&state, &id)?;
    let pair = s.lock().expect("session poisoned").next_pair();
    Ok(Json(pair).into_response())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VoteRequest {
    pub agent: usize,
    pub channel: Channel,
    pub winner: Winner,
    pub token: String,
}

async fn submit_vote(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<VoteRequest>,
) -> Result<Response, ApiError> {
    let s = lookup(&state, &id)?;
    let st = state.clone();
    let ack = tokio::task::spawn_blocking(move || -> Result<_, ApiError> {
        let mut guard = s.lock().expect("session poisoned");
        let before = guard.events().len();
        let result = guard.submit_vote(req.agent, req.channel, req.winner, &req.token);
        st.persist(&guard, before)?;
        Ok(result?)
    })
    .await
    .map_err(|e| ApiError::Internal(e.to_string()))??;
    Ok(Json(ack).into_response())
}

async fn estimate(State(state): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> Result<Response, ApiError> {
    check_facilitator(&state, &headers)?;
    let s = lookup(&state, &id)?;
    let est = s.lock().expect("session poisoned").estimate()?;
    Ok(Json(est).into_response())
}

async fn trace(State(state): State<AppState>, headers: HeaderMap, Path(id): Path<String>) -> Result<Response, ApiError> {
    check_facilitator(&state, &headers)?;
    let s = lookup(&state, &id)?;
    let csv = s.lock().expect("session poisoned").trace_csv();
    Ok(([(header::CONTENT_TYPE, "text/csv; charset=utf-8")], csv).into_response())
}
