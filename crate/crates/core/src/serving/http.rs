use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use tokio::net::TcpListener;

use super::{LookupResult, ServeError, SnapshotStore, Source};
use crate::schema::Schema;

#[derive(Clone)]
struct AppState {
    store: Arc<SnapshotStore>,
    schema: Arc<Schema>,
}

#[derive(Deserialize)]
struct RefreshBody {
    path: PathBuf,
}

fn json(status: StatusCode, body: String) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn error(status: StatusCode, msg: &str) -> Response {
    json(status, serde_json::json!({ "error": msg }).to_string())
}

/// Built by hand so the payload bytes are exactly the snapshot bytes.
fn render(r: &LookupResult) -> String {
    let source = match r.source {
        Source::Cache => "cache",
        Source::Fallback => "fallback",
    };
    let version = r.snapshot_version.map_or("null".to_string(), |v| v.to_string());
    format!(
        "{{\"query\":{},\"source\":\"{source}\",\"snapshot_version\":{version},\"output\":{}}}",
        serde_json::to_string(&r.query).expect("string serializes"),
        r.payload
    )
}

async fn qp(State(st): State<AppState>, Query(params): Query<HashMap<String, String>>) -> Response {
    let Some(q) = params.get("q") else {
        return error(StatusCode::BAD_REQUEST, "missing query parameter `q`");
    };
    match st.store.lookup(q) {
        Ok(r) => json(StatusCode::OK, render(&r)),
        Err(ServeError::Unavailable) => error(StatusCode::SERVICE_UNAVAILABLE, "no snapshot loaded"),
        Err(e) => error(StatusCode::NOT_FOUND, &e.to_string()),
    }
}

async fn refresh(State(st): State<AppState>, body: Result<Json<RefreshBody>, axum::extract::rejection::JsonRejection>) -> Response {
    let Ok(Json(body)) = body else {
        return error(StatusCode::BAD_REQUEST, "expected JSON body {\"path\": ...}");
    };
    let store = st.store.clone();
    let schema = st.schema.clone();
    // parsing a large snapshot is blocking work
    let res = tokio::task::spawn_blocking(move || store.refresh(&body.path, &schema)).await;
    match res {
        Ok(Ok(previous)) => {
            let h = st.store.health();
            json(
                StatusCode::OK,
                serde_json::json!({ "previous": previous, "version": h.version, "entries": h.entries }).to_string(),
            )
        }
        Ok(Err(e @ ServeError::StaleVersion { .. })) => error(StatusCode::CONFLICT, &e.to_string()),
        Ok(Err(e @ ServeError::Format(_))) => error(StatusCode::UNPROCESSABLE_ENTITY, &e.to_string()),
        Ok(Err(e)) => error(StatusCode::BAD_REQUEST, &e.to_string()),
        Err(e) => error(StatusCode::INTERNAL_SERVER_ERROR, &e.to_string()),
    }
}

async fn health(State(st): State<AppState>) -> Response {
    json(StatusCode::OK, serde_json::to_string(&st.store.health()).expect("health serializes"))
}

pub fn router(store: Arc<SnapshotStore>, schema: Schema) -> Router {
    Router::new()
        .route("/v1/qp", get(qp))
        .route("/v1/refresh", post(refresh))
        .route("/v1/health", get(health))
        .with_state(AppState { store, schema: Arc::new(schema) })
}

pub async fn serve(listener: TcpListener, store: Arc<SnapshotStore>, schema: Schema) -> std::io::Result<()> {
    axum::serve(listener, router(store, schema)).await
}
