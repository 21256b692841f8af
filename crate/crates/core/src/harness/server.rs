use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use super::kappa_report::{kappa_report, metrics_from_rows, MetricScores};
use super::pairs::PairSession;
use super::ratings::{Choice, RatingRecord, RatingStore};
use super::report::{read_scores, KappaMatrix};
use crate::error::{MsmError, Result};

/// Sessions, their images and the rating store shared by all handlers.
#[derive(Debug)]
pub struct ServerState {
    sessions: BTreeMap<String, PairSession>,
    images_dir: PathBuf,
    store: Mutex<RatingStore>,
    metrics: Vec<MetricScores>,
}

impl ServerState {
    /// Loads every session file in `sessions_dir` (images are expected in
    /// `sessions_dir/images`) and replays the ratings in `ratings_path`.
    pub fn load(sessions_dir: impl AsRef<Path>, ratings_path: impl AsRef<Path>, score_files: &[PathBuf]) -> Result<Self> {
        let dir = sessions_dir.as_ref();
        let mut sessions = BTreeMap::new();
        let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| MsmError::file(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        entries.sort();
        for path in entries {
            let s = PairSession::load(&path)?;
            sessions.insert(s.id.clone(), s);
        }
        if sessions.is_empty() {
            return Err(MsmError::arg(format!("no pair sessions in {}", dir.display())));
        }
        let mut metrics = Vec::new();
        for f in score_files {
            metrics.extend(metrics_from_rows(&read_scores(f)?)?);
        }
        Ok(Self {
            sessions,
            images_dir: dir.join("images"),
            store: Mutex::new(RatingStore::open(ratings_path)?),
            metrics,
        })
    }

    fn session(&self, id: &str) -> Result<&PairSession> {
        self.sessions.get(id).ok_or_else(|| MsmError::NotFound(format!("session {id}")))
    }

    fn ratings_of(&self, session_id: &str) -> Vec<RatingRecord> {
        let store = self.store.lock().expect("rating store lock");
        store.records().iter().filter(|r| r.session_id == session_id).cloned().collect()
    }
}

struct ApiError(MsmError);

impl From<MsmError> for ApiError {
    fn from(e: MsmError) -> Self {
        Self(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            MsmError::NotFound(_) => StatusCode::NOT_FOUND,
            MsmError::Conflict(_) => StatusCode::CONFLICT,
            MsmError::InvalidArgument(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        (status, Json(serde_json::json!({ "error": self.0.to_string() }))).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Serialize)]
struct SessionSummary {
    id: String,
    n_pairs: usize,
    /// Ratings recorded so far, per rater.
    ratings_by: BTreeMap<String, usize>,
}

#[derive(Deserialize)]
struct RaterQuery {
    rater: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RatingRequest {
    pair_id: String,
    rater: String,
    choice: Choice,
    #[serde(default)]
    elapsed_ms: u64,
}

fn check_rater(rater: &str) -> Result<()> {
    if rater.is_empty() || rater.len() > 64 || rater.chars().any(char::is_control) {
        return Err(MsmError::arg("rater must be 1 to 64 printable characters"));
    }
    Ok(())
}

async fn list_sessions(State(state): State<Arc<ServerState>>) -> Json<Vec<SessionSummary>> {
    let store = state.store.lock().expect("rating store lock");
    let out = state
        .sessions
        .values()
        .map(|s| {
            let mut ratings_by = BTreeMap::new();
            for r in store.records().iter().filter(|r| r.session_id == s.id) {
                *ratings_by.entry(r.rater.clone()).or_insert(0) += 1;
            }
            SessionSummary { id: s.id.clone(), n_pairs: s.pairs.len(), ratings_by }
        })
        .collect();
    Json(out)
}

async fn next_pair(
    State(state): State<Arc<ServerState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<RaterQuery>,
) -> ApiResult<Response> {
    let session = state.session(&id)?;
    let rater = q.rater.ok_or_else(|| MsmError::arg("missing rater"))?;
    check_rater(&rater)?;
    let store = state.store.lock().expect("rating store lock");
    Ok(match session.pairs.iter().find(|p| !store.contains(&id, &rater, &p.pair_id)) {
        Some(p) => Json(session.view(p)).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn post_rating(
    State(state): State<Arc<ServerState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<serde_json::Value>> {
    let session = state.session(&id)?;
    let req: RatingRequest =
        serde_json::from_slice(&body).map_err(|e| MsmError::arg(format!("bad rating body: {e}")))?;
    check_rater(&req.rater)?;
    let pair = session.pair(&req.pair_id).ok_or_else(|| MsmError::NotFound(format!("pair {}", req.pair_id)))?;
    let timestamp_ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
    let record = RatingRecord {
        session_id: id,
        pair_id: pair.pair_id.clone(),
        rater: req.rater,
        choice: req.choice,
        left_item: pair.left.clone(),
        right_item: pair.right.clone(),
        timestamp_ms,
        elapsed_ms: req.elapsed_ms,
    };
    state.store.lock().expect("rating store lock").append(record)?;
    Ok(Json(serde_json::json!({ "accepted": true })))
}

async fn session_report(
    State(state): State<Arc<ServerState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<KappaMatrix>> {
    let session = state.session(&id)?;
    let ratings = state.ratings_of(&id);
    if ratings.is_empty() {
        return Ok(Json(KappaMatrix { total_pairs: session.pairs.len(), ..KappaMatrix::default() }));
    }
    Ok(Json(kappa_report(session, &ratings, &state.metrics)?))
}

async fn image(State(state): State<Arc<ServerState>>, UrlPath(file): UrlPath<String>) -> ApiResult<Response> {
    let hash = file.strip_suffix(".png").unwrap_or("");
    let known = hash.len() == 64
        && hash.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
        && state.sessions.values().any(|s| s.items.iter().any(|i| i.image_hash == hash));
    if !known {
        return Err(MsmError::NotFound(format!("image {file}")).into());
    }
    let path = state.images_dir.join(&file);
    let bytes = std::fs::read(&path).map_err(|e| MsmError::file(&path, e))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

pub fn router(state: Arc<ServerState>) -> Router {
    Router::new()
        .route("/api/sessions", get(list_sessions))
        .route("/api/sessions/:id/next", get(next_pair))
        .route("/api/sessions/:id/ratings", post(post_rating))
        .route("/api/sessions/:id/report", get(session_report))
        .route("/images/:file", get(image))
        .with_state(state)
}

/// Serves the rating API until ctrl-c.
pub async fn serve(state: Arc<ServerState>, addr: SocketAddr) -> Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
