//! HTTP front end for forecasting against one fitted model.
//!
//! * `GET /healthz`: service version and the SHA-256 of the loaded model file.
//! * `GET /v1/model/summary`: cluster weights, presence probabilities and onset summaries.
//! * `POST /v1/forecast`: a `PatientQuery` body, answered with a `ForecastResponse`.
//!
//! Errors are JSON `ErrorBody` documents: 400 for malformed or invalid
//! queries, 422 for unknown condition codes, 503 when no model is loaded.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use accrual_core::io::model_from_str;
use accrual_core::model::FittedModel;
use accrual_core::wire::{
    forecast, sha256_hex, ErrorBody, FieldError, ForecastError, ModelSummary, PatientQuery, QueryError,
};
use axum::body::Bytes;
use axum::extract::State;
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use serde::Serialize;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// A model plus what the service precomputes from it.
#[derive(Debug)]
pub struct LoadedModel {
    pub model: FittedModel,
    pub sha256: String,
    summary_body: Vec<u8>,
}

impl LoadedModel {
    /// Parse a model document; `sha256` is taken over the exact bytes.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> accrual_core::Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|e| accrual_core::Error::Parse {
            path: origin.display().to_string(),
            line: 0,
            column: 0,
            message: format!("model file is not UTF-8: {e}"),
        })?;
        let model = model_from_str(text, origin)?;
        Ok(Self::new(model, sha256_hex(bytes)))
    }

    pub fn load(path: impl AsRef<Path>) -> accrual_core::Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| accrual_core::Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes, path)
    }

    pub fn new(model: FittedModel, sha256: String) -> Self {
        let summary_body = serde_json::to_vec(&ModelSummary::new(&model, &sha256)).expect("summary serializes");
        Self { model, sha256, summary_body }
    }
}

#[derive(Debug, Clone, Default)]
pub struct AppState {
    pub model: Option<Arc<LoadedModel>>,
}

impl AppState {
    pub fn with_model(model: LoadedModel) -> Self {
        Self { model: Some(Arc::new(model)) }
    }
}

#[derive(Serialize)]
struct Health<'a> {
    status: &'a str,
    version: &'a str,
    model_loaded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    model_sha256: Option<&'a str>,
}

fn json_bytes(status: StatusCode, body: Vec<u8>) -> Response {
    (status, [(header::CONTENT_TYPE, "application/json")], body).into_response()
}

fn json<T: Serialize>(status: StatusCode, value: &T) -> Response {
    json_bytes(status, serde_json::to_vec(value).expect("response serializes"))
}

fn error(status: StatusCode, body: ErrorBody) -> Response {
    json(status, &body)
}

fn no_model() -> Response {
    error(
        StatusCode::SERVICE_UNAVAILABLE,
        ErrorBody {
            error: "no_model".into(),
            message: "no model is loaded".into(),
            fields: Vec::new(),
            unknown_codes: Vec::new(),
        },
    )
}

async fn healthz(State(state): State<AppState>) -> Response {
    let sha = state.model.as_ref().map(|m| m.sha256.as_str());
    json(
        StatusCode::OK,
        &Health { status: "ok", version: VERSION, model_loaded: sha.is_some(), model_sha256: sha },
    )
}

async fn summary(State(state): State<AppState>) -> Response {
    match &state.model {
        Some(m) => json_bytes(StatusCode::OK, m.summary_body.clone()),
        None => no_model(),
    }
}

/// Decode a body, naming the offending field on failure.
pub fn parse_query(body: &[u8]) -> Result<PatientQuery, ErrorBody> {
    let malformed = |field: String, message: String| ErrorBody {
        error: "malformed_request".into(),
        message: format!("malformed request body: {message}"),
        fields: vec![FieldError { field, message }],
        unknown_codes: Vec::new(),
    };
    let mut de = serde_json::Deserializer::from_slice(body);
    let query: PatientQuery = serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let field = e.path().to_string();
        let field = if field == "." { String::new() } else { field };
        malformed(field, e.inner().to_string())
    })?;
    de.end().map_err(|e| malformed(String::new(), e.to_string()))?;
    Ok(query)
}

async fn forecast_handler(State(state): State<AppState>, body: Bytes) -> Response {
    let Some(loaded) = &state.model else {
        return no_model();
    };
    let query = match parse_query(&body) {
        Ok(q) => q,
        Err(e) => return error(StatusCode::BAD_REQUEST, e),
    };
    match forecast(&loaded.model, &loaded.sha256, &query) {
        Ok(resp) => json(StatusCode::OK, &resp),
        Err(ForecastError::Query(e)) => {
            let status = match e {
                QueryError::UnknownCodes(_) => StatusCode::UNPROCESSABLE_ENTITY,
                QueryError::Invalid(_) => StatusCode::BAD_REQUEST,
            };
            error(status, ErrorBody::from(&e))
        }
        Err(ForecastError::Model(e)) => {
            log::error!("forecast failed: {e}");
            error(
                StatusCode::INTERNAL_SERVER_ERROR,
                ErrorBody {
                    error: "internal".into(),
                    message: e.to_string(),
                    fields: Vec::new(),
                    unknown_codes: Vec::new(),
                },
            )
        }
    }
}

async fn not_found() -> Response {
    error(
        StatusCode::NOT_FOUND,
        ErrorBody {
            error: "not_found".into(),
            message: "no such endpoint".into(),
            fields: Vec::new(),
            unknown_codes: Vec::new(),
        },
    )
}

pub fn app(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/v1/model/summary", get(summary))
        .route("/v1/forecast", post(forecast_handler))
        .fallback(not_found)
        .with_state(state)
}

/// Serve until Ctrl-C.
pub async fn serve(addr: SocketAddr, state: AppState) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    serve_listener(listener, state).await
}

/// Serve on an already bound listener until Ctrl-C.
pub async fn serve_listener(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
