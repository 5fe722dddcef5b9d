//! HTTP front end of the annotation service.
//!
//! Requests name the annotator explicitly (`annotator` query parameter or
//! body field); the role defaults to the one the endpoint serves.

use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use cfpref_core::annotation::{AnnotationError, AnnotationService, AnnotatorSession, Role};

/// Error body shared by every endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn invalid(message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            body: ErrorBody {
                code: "invalid-argument".into(),
                message: message.into(),
            },
        }
    }
}

pub fn status_for(code: &str) -> StatusCode {
    match code {
        "invalid-argument" | "format-error" => StatusCode::BAD_REQUEST,
        "wrong-role" => StatusCode::FORBIDDEN,
        "not-found" => StatusCode::NOT_FOUND,
        "stale-task" | "duplicate-record" => StatusCode::CONFLICT,
        "out-of-bounds" | "degenerate-target" | "degenerate-path" | "scale-out-of-range" => {
            StatusCode::UNPROCESSABLE_ENTITY
        }
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

impl From<AnnotationError> for ApiError {
    fn from(e: AnnotationError) -> Self {
        let code = e.code();
        Self {
            status: status_for(code),
            body: ErrorBody {
                code: code.to_owned(),
                message: e.to_string(),
            },
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::invalid(e.body_text())
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::invalid(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

#[derive(Clone)]
struct AppState {
    service: Arc<AnnotationService>,
    export_dir: PathBuf,
}

#[derive(Debug, Deserialize)]
struct TaskQuery {
    role: String,
    annotator: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetBody {
    obs: String,
    annotator: String,
    #[serde(default)]
    role: Option<String>,
    #[serde(default)]
    x: Option<f64>,
    #[serde(default)]
    y: Option<f64>,
    #[serde(default)]
    stop: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PreferenceBody {
    task_id: String,
    choice: usize,
    annotator: String,
    #[serde(default)]
    role: Option<String>,
}

fn session(annotator: &str, role: Option<&str>, default: Role) -> Result<AnnotatorSession, ApiError> {
    if annotator.trim().is_empty() {
        return Err(ApiError::invalid("annotator id is empty"));
    }
    let role = match role {
        None => default,
        Some(r) => Role::parse(r).ok_or_else(|| ApiError::invalid(format!("unknown role {r:?}")))?,
    };
    Ok(AnnotatorSession::new(annotator, role))
}

async fn get_task(
    State(st): State<AppState>,
    query: Result<Query<TaskQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) = query?;
    let role = Role::parse(&q.role).ok_or_else(|| ApiError::invalid(format!("unknown role {:?}", q.role)))?;
    let s = session(&q.annotator, None, role)?;
    Ok(match st.service.next_task(&s) {
        Some(task) => Json(task).into_response(),
        None => StatusCode::NO_CONTENT.into_response(),
    })
}

async fn post_target(
    State(st): State<AppState>,
    body: Result<Json<TargetBody>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(b) = body?;
    let s = session(&b.annotator, b.role.as_deref(), Role::TargetProvider)?;
    let click = match (b.x, b.y) {
        (Some(x), Some(y)) => Some((x, y)),
        (None, None) => None,
        _ => return Err(ApiError::invalid("x and y must be given together")),
    };
    let accepted = st.service.submit_target(&s, &b.obs, click, b.stop)?;
    Ok(Json(accepted).into_response())
}

#[derive(Serialize)]
struct PreferenceAccepted {
    task_id: String,
    y: u8,
}

async fn post_preference(
    State(st): State<AppState>,
    body: Result<Json<PreferenceBody>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(b) = body?;
    let s = session(&b.annotator, b.role.as_deref(), Role::PreferenceLabeler)?;
    let rec = st.service.submit_preference(&s, &b.task_id, b.choice)?;
    Ok(Json(PreferenceAccepted {
        task_id: b.task_id,
        y: u8::from(rec.preferred_i),
    })
    .into_response())
}

async fn get_export(State(st): State<AppState>) -> Result<Response, ApiError> {
    let svc = st.service.clone();
    let dir = st.export_dir.clone();
    let summary = tokio::task::spawn_blocking(move || svc.export_dataset(&dir))
        .await
        .map_err(|e| ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            body: ErrorBody {
                code: "internal".into(),
                message: e.to_string(),
            },
        })??;
    Ok(Json(summary).into_response())
}

async fn fallback() -> ApiError {
    ApiError {
        status: StatusCode::NOT_FOUND,
        body: ErrorBody {
            code: "not-found".into(),
            message: "no such endpoint".into(),
        },
    }
}

/// Routes: `GET /task`, `POST /target`, `POST /preference`, `GET /export`.
/// `GET /task` answers 204 when nothing is left for the session.
pub fn router(service: Arc<AnnotationService>, export_dir: PathBuf) -> Router {
    Router::new()
        .route("/task", get(get_task))
        .route("/target", post(post_target))
        .route("/preference", post(post_preference))
        .route("/export", get(get_export))
        .fallback(fallback)
        .with_state(AppState { service, export_dir })
}
