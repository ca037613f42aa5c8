//! HTTP front end. Readers get pre-rendered views published after every
//! processed submission; submissions go through a single validator lock.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use parking_lot::{Mutex, RwLock};
use serde::Serialize;

use crate::program::{Program, SubmitError};
use crate::ServiceError;

pub const SUBMITTER_HEADER: &str = "x-submitter-key";

/// Rendered response bodies for the read endpoints.
struct Views {
    model: String,
    transcript: String,
    leaderboard: String,
    test_report: String,
    schema: String,
    train_csv: Arc<str>,
}

impl Views {
    fn render(program: &Program, train_csv: Arc<str>) -> Self {
        Views {
            model: to_json(&program.model_view()),
            transcript: to_json(&program.transcript_view()),
            leaderboard: to_json(&program.leaderboard_view()),
            test_report: to_json(&program.test_report()),
            schema: program.schema_json(),
            train_csv,
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("views serialize")
}

pub struct AppState {
    program: Mutex<Program>,
    views: RwLock<Arc<Views>>,
}

impl AppState {
    pub fn new(program: Program) -> Arc<Self> {
        let views = Views::render(&program, program.train_csv().into());
        Arc::new(AppState {
            program: Mutex::new(program),
            views: RwLock::new(Arc::new(views)),
        })
    }

    fn views(&self) -> Arc<Views> {
        Arc::clone(&self.views.read())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let body_limit = {
        let program = state.program.lock();
        program.config().max_doc_bytes.saturating_mul(2).saturating_add(4096)
    };
    Router::new()
        .route("/v1/model", get(get_model))
        .route("/v1/train-data", get(get_train_data))
        .route("/v1/test-report", get(get_test_report))
        .route("/v1/schema", get(get_schema))
        .route("/v1/transcript", get(get_transcript))
        .route("/v1/leaderboard", get(get_leaderboard))
        .route("/v1/submissions", post(post_submission))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}

fn json_body(body: String) -> Response {
    ([(header::CONTENT_TYPE, "application/json")], body).into_response()
}

async fn get_model(State(state): State<Arc<AppState>>) -> Response {
    json_body(state.views().model.clone())
}

async fn get_train_data(State(state): State<Arc<AppState>>) -> Response {
    let csv = state.views().train_csv.to_string();
    ([(header::CONTENT_TYPE, "text/csv")], csv).into_response()
}

async fn get_test_report(State(state): State<Arc<AppState>>) -> Response {
    json_body(state.views().test_report.clone())
}

async fn get_schema(State(state): State<Arc<AppState>>) -> Response {
    json_body(state.views().schema.clone())
}

async fn get_transcript(State(state): State<Arc<AppState>>) -> Response {
    json_body(state.views().transcript.clone())
}

async fn get_leaderboard(State(state): State<Arc<AppState>>) -> Response {
    json_body(state.views().leaderboard.clone())
}

#[derive(Serialize)]
struct ErrorBody {
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    error: String,
}

fn error(status: StatusCode, id: Option<u64>, message: String) -> Response {
    (status, json_body(to_json(&ErrorBody { id, error: message }))).into_response()
}

async fn post_submission(
    State(state): State<Arc<AppState>>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let submitter = match headers.get(SUBMITTER_HEADER).map(|v| v.to_str()) {
        Some(Ok(key)) if !key.trim().is_empty() => key.trim().to_owned(),
        _ => {
            return error(
                StatusCode::BAD_REQUEST,
                None,
                format!("missing {SUBMITTER_HEADER} header"),
            )
        }
    };
    let worker = Arc::clone(&state);
    let result = tokio::task::spawn_blocking(move || {
        let mut program = worker.program.lock();
        let result = program.submit(&submitter, &body);
        if !matches!(result, Err(SubmitError::Halted | SubmitError::Unavailable)) {
            let train_csv = Arc::clone(&worker.views.read().train_csv);
            *worker.views.write() = Arc::new(Views::render(&program, train_csv));
        }
        result
    })
    .await;
    match result {
        Ok(Ok(receipt)) => json_body(to_json(&receipt)),
        Ok(Err(SubmitError::Malformed { id, message })) => {
            error(StatusCode::BAD_REQUEST, Some(id), message)
        }
        Ok(Err(SubmitError::TooLarge { id, message })) => {
            error(StatusCode::PAYLOAD_TOO_LARGE, Some(id), message)
        }
        Ok(Err(e @ SubmitError::Halted)) => error(StatusCode::GONE, None, e.to_string()),
        Ok(Err(e)) => error(StatusCode::SERVICE_UNAVAILABLE, None, e.to_string()),
        Err(_) => error(
            StatusCode::INTERNAL_SERVER_ERROR,
            None,
            "validator failed".into(),
        ),
    }
}

/// Binds the configured address and serves until Ctrl-C. `on_bound` gets
/// the actual address (useful with port 0).
pub async fn serve(
    program: Program,
    on_bound: impl FnOnce(SocketAddr),
) -> Result<(), ServiceError> {
    let addr = (program.config().bind.clone(), program.config().port);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    on_bound(listener.local_addr()?);
    let app = router(AppState::new(program));
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
