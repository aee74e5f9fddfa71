//! HTTP inference service over an immutable model.
//!
//! Every generation request runs on the blocking pool with its own seed, so
//! requests share nothing mutable.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use pyragen_core::apps::{self, Generated, Model};
use pyragen_core::data::ClassLabel;
use pyragen_core::image::Image;
use serde::de::DeserializeOwned;

use crate::error::Error;
use crate::imageio;
use crate::wire::*;

#[derive(Clone)]
pub struct AppState {
    model: Arc<Model>,
}

impl AppState {
    pub fn new(model: Model) -> Self {
        AppState {
            model: Arc::new(model),
        }
    }

    pub fn model(&self) -> &Model {
        &self.model
    }
}

#[derive(Debug)]
pub enum ApiError {
    /// Malformed request; `path` names the offending field.
    BadRequest {
        path: String,
        message: String,
    },
    /// Well-formed request the model cannot honor.
    Unprocessable {
        kind: &'static str,
        message: String,
    },
    Internal {
        id: String,
    },
}

impl ApiError {
    fn bad(path: &str, message: impl ToString) -> Self {
        ApiError::BadRequest {
            path: path.into(),
            message: message.to_string(),
        }
    }

    fn internal(detail: impl std::fmt::Display) -> Self {
        let id = uuid::Uuid::new_v4().to_string();
        tracing::error!(%id, "internal error: {detail}");
        ApiError::Internal { id }
    }
}

impl From<pyragen_core::Error> for ApiError {
    fn from(e: pyragen_core::Error) -> Self {
        use pyragen_core::Error as E;
        let kind = match &e {
            E::UnknownLevel(_) => "unknown_level",
            E::LabelOutOfRange { .. } => "unknown_class",
            E::DegenerateRegion(_) => "degenerate_region",
            E::Validation(_) | E::Preprocess(_) | E::Parameter(_) => "invalid_input",
            _ => return ApiError::internal(e),
        };
        ApiError::Unprocessable {
            kind,
            message: e.to_string(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, body) = match self {
            ApiError::BadRequest { path, message } => (
                StatusCode::BAD_REQUEST,
                ErrorBody {
                    error: "bad_request".into(),
                    message,
                    path: Some(path),
                    id: None,
                },
            ),
            ApiError::Unprocessable { kind, message } => (
                StatusCode::UNPROCESSABLE_ENTITY,
                ErrorBody {
                    error: kind.into(),
                    message,
                    path: None,
                    id: None,
                },
            ),
            ApiError::Internal { id } => (
                StatusCode::INTERNAL_SERVER_ERROR,
                ErrorBody {
                    error: "internal".into(),
                    message: "internal error".into(),
                    path: None,
                    id: Some(id),
                },
            ),
        };
        (status, Json(body)).into_response()
    }
}

/// Deserialize with the failing field's path kept for the 400 response.
fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ApiError::bad(&path, e.into_inner())
    })
}

fn decode_b64(field: &str, data: &str) -> Result<Vec<u8>, ApiError> {
    B64.decode(data)
        .map_err(|e| ApiError::bad(field, format!("invalid base64: {e}")))
}

fn image_field(field: &str, data: &str) -> Result<Image, ApiError> {
    imageio::decode_image(&decode_b64(field, data)?).map_err(|e| ApiError::bad(field, e))
}

fn check_samples(n: usize) -> Result<(), ApiError> {
    if n == 0 || n > MAX_SAMPLES {
        return Err(ApiError::bad(
            "num_samples",
            format!("must be between 1 and {MAX_SAMPLES}, got {n}"),
        ));
    }
    Ok(())
}

/// The client's seed, or a fresh one that is echoed back.
fn seed_or_draw(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| uuid::Uuid::new_v4().as_u64_pair().0)
}

fn respond(g: Generated) -> Result<Json<GenerateResponse>, ApiError> {
    let samples = g
        .samples
        .iter()
        .map(|im| imageio::encode_image(im).map(|b| B64.encode(b)))
        .collect::<Result<Vec<_>, Error>>()
        .map_err(ApiError::internal)?;
    Ok(Json(GenerateResponse {
        samples,
        seed_used: g.provenance.seed,
        label_used: g.provenance.label,
        provenance: (&g.provenance).into(),
    }))
}

async fn blocking<F>(state: AppState, f: F) -> Result<Json<GenerateResponse>, ApiError>
where
    F: FnOnce(&Model) -> pyragen_core::Result<Generated> + Send + 'static,
{
    let g = tokio::task::spawn_blocking(move || f(&state.model))
        .await
        .map_err(ApiError::internal)??;
    respond(g)
}

async fn meta(State(state): State<AppState>) -> Json<Meta> {
    let spec = state.model.spec();
    Json(Meta {
        levels: spec.tap_names.clone(),
        classes: (0..spec.num_classes).map(|c| c.to_string()).collect(),
        image_size: spec.input_size,
    })
}

async fn invert(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<Json<GenerateResponse>, ApiError> {
    let req: InvertRequest = parse_body(&body)?;
    check_samples(req.num_samples)?;
    let image = image_field("image", &req.image)?;
    let seed = seed_or_draw(req.seed);
    blocking(state, move |m| {
        apps::invert_at_level(
            m,
            &image,
            &req.level,
            req.num_samples,
            seed,
            req.label.map(ClassLabel),
        )
    })
    .await
}

async fn repaint(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<Json<GenerateResponse>, ApiError> {
    let req: RepaintRequest = parse_body(&body)?;
    check_samples(req.num_samples)?;
    let image = image_field("image", &req.image)?;
    let region = imageio::decode_region(&decode_b64("region", &req.region)?)
        .map_err(|e| ApiError::bad("region", e))?;
    apps::check_region(&region)?;
    let seed = seed_or_draw(req.seed);
    blocking(state, move |m| {
        apps::repaint(
            m,
            &image,
            &region,
            &req.level,
            req.num_samples,
            seed,
            req.label.map(ClassLabel),
        )
    })
    .await
}

async fn composite(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<Json<GenerateResponse>, ApiError> {
    let req: CompositeRequest = parse_body(&body)?;
    check_samples(req.num_samples)?;
    let base = image_field("base", &req.base)?;
    let patch = image_field("patch", &req.patch)?;
    let seed = seed_or_draw(req.seed);
    blocking(state, move |m| {
        apps::composite(
            m,
            &base,
            &patch,
            req.placement.into(),
            &req.level,
            req.num_samples,
            seed,
            req.label.map(ClassLabel),
        )
    })
    .await
}

async fn relabel(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<Json<GenerateResponse>, ApiError> {
    let req: RelabelRequest = parse_body(&body)?;
    check_samples(req.num_samples)?;
    let image = image_field("image", &req.image)?;
    let seed = seed_or_draw(req.seed);
    blocking(state, move |m| {
        apps::relabel(m, &image, ClassLabel(req.label), req.num_samples, seed)
    })
    .await
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/meta", get(meta))
        .route("/api/invert", post(invert))
        .route("/api/repaint", post(repaint))
        .route("/api/composite", post(composite))
        .route("/api/relabel", post(relabel))
        .with_state(state)
}

/// Serve until Ctrl-C.
pub async fn serve(model: Model, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(AppState::new(model)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
