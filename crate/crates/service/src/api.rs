//! HTTP API. Every JSON body, request or response, carries `"v": 1`.
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/v1/frames` | ingest `{v, stream?, frames}` |
//! | GET | `/v1/triage?status=&offset=&limit=` | queue page, oldest first |
//! | GET | `/v1/triage/{id}` | one item |
//! | POST | `/v1/triage/{id}/label` | `{v, label, engineer?}` |
//! | POST | `/v1/triage/{id}/dismiss` | `{v}` |
//! | POST | `/v1/retrain` | `{v, epochs?, batch_size?, lr?, val_fraction?, warm_start?}` → 202 |
//! | GET | `/v1/retrain/{id}` | job status |
//! | GET | `/v1/model` | active model |
//! | GET | `/v1/health` | liveness, no token needed |
//!
//! Errors: 400 malformed JSON, frame or query, 401 missing/wrong bearer token,
//! 404 unknown item or job, 409 state conflict, 413 oversized batch or
//! body, 422 well-formed but invalid content.

use crate::service::{RetrainRequest, Service, ServiceError, StatusFilter, API_VERSION, DEFAULT_PAGE};
use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use bayescan::can::FrameRecord;
use bayescan::ClassLabel;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::sync::Arc;

impl ServiceError {
    pub fn status(&self) -> StatusCode {
        match self {
            ServiceError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ServiceError::Unprocessable(_) => StatusCode::UNPROCESSABLE_ENTITY,
            ServiceError::NotFound(_) => StatusCode::NOT_FOUND,
            ServiceError::Conflict(_) => StatusCode::CONFLICT,
            ServiceError::TooLarge(_) => StatusCode::PAYLOAD_TOO_LARGE,
            ServiceError::Unauthorized(_) => StatusCode::UNAUTHORIZED,
            ServiceError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            ServiceError::BadRequest(_) => "bad_request",
            ServiceError::Unprocessable(_) => "unprocessable",
            ServiceError::NotFound(_) => "not_found",
            ServiceError::Conflict(_) => "conflict",
            ServiceError::TooLarge(_) => "too_large",
            ServiceError::Unauthorized(_) => "unauthorized",
            ServiceError::Internal(_) => "internal",
        }
    }
}

impl IntoResponse for ServiceError {
    fn into_response(self) -> Response {
        if let ServiceError::Internal(msg) = &self {
            tracing::error!(%msg, "request failed");
        }
        let body = json!({"v": API_VERSION, "error": {"code": self.code(), "message": self.to_string()}});
        (self.status(), Json(body)).into_response()
    }
}

type ApiResult = Result<Response, ServiceError>;

/// Wrap a serializable value as `{"v":1, ...fields}`.
fn reply<T: Serialize>(status: StatusCode, body: &T) -> ApiResult {
    let mut v = serde_json::to_value(body).map_err(|e| ServiceError::Internal(e.to_string()))?;
    match &mut v {
        Value::Object(map) => {
            map.insert("v".into(), API_VERSION.into());
        }
        _ => v = json!({"v": API_VERSION, "data": v}),
    }
    Ok((status, Json(v)).into_response())
}

/// Parse a JSON body: syntax errors are 400, shape or value errors 422.
fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ServiceError> {
    parse_as(body, ServiceError::Unprocessable)
}

/// As [`parse`], with `shape_error` building the error for content that
/// does not fit `T`.
fn parse_as<T: DeserializeOwned>(body: &Bytes, shape_error: fn(String) -> ServiceError) -> Result<T, ServiceError> {
    #[derive(Deserialize)]
    struct Versioned {
        v: Option<u32>,
    }
    let raw: Value =
        serde_json::from_slice(body).map_err(|e| ServiceError::BadRequest(format!("invalid JSON: {e}")))?;
    if !raw.is_object() {
        return Err(ServiceError::BadRequest("body must be a JSON object".into()));
    }
    match serde_json::from_value::<Versioned>(raw.clone()).ok().and_then(|x| x.v) {
        Some(API_VERSION) => {}
        Some(other) => return Err(ServiceError::Unprocessable(format!("unsupported API version {other}"))),
        None => return Err(ServiceError::Unprocessable("missing \"v\"".into())),
    }
    serde_json::from_value(raw).map_err(|e| shape_error(e.to_string()))
}

fn parse_or_empty<T: DeserializeOwned + Default>(body: &Bytes) -> Result<T, ServiceError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        Ok(T::default())
    } else {
        parse(body)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FramesRequest {
    #[allow(dead_code)]
    v: u32,
    #[serde(default = "default_stream")]
    stream: String,
    frames: Vec<FrameRecord>,
}

fn default_stream() -> String {
    "default".into()
}

#[derive(Deserialize)]
#[serde(untagged)]
enum LabelValue {
    Code(u8),
    Name(String),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRequest {
    #[allow(dead_code)]
    v: u32,
    label: LabelValue,
    #[serde(default = "anonymous")]
    engineer: String,
}

fn anonymous() -> String {
    "anonymous".into()
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct VersionOnly {
    #[allow(dead_code)]
    #[serde(default)]
    v: u32,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RetrainBody {
    #[allow(dead_code)]
    #[serde(default)]
    v: u32,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    val_fraction: Option<f64>,
    warm_start: Option<bool>,
}

async fn post_frames(State(svc): State<Arc<Service>>, body: Bytes) -> ApiResult {
    // A frame that does not decode is a malformed frame: 400.
    let req: FramesRequest = parse_as(&body, ServiceError::BadRequest)?;
    let max = svc.config().max_frames_per_request;
    if req.frames.len() > max {
        return Err(ServiceError::TooLarge(format!(
            "{} frames exceed the limit of {max}",
            req.frames.len()
        )));
    }
    let worker = Arc::clone(&svc);
    let out = tokio::task::spawn_blocking(move || worker.ingest(&req.stream, &req.frames))
        .await
        .map_err(|e| ServiceError::Internal(e.to_string()))??;
    reply(StatusCode::OK, &out)
}

#[derive(Deserialize)]
struct PageQuery {
    status: Option<String>,
    offset: Option<String>,
    limit: Option<String>,
}

fn query_number(name: &str, raw: Option<&str>, default: usize) -> Result<usize, ServiceError> {
    match raw {
        None => Ok(default),
        Some(s) => s
            .parse()
            .map_err(|_| ServiceError::BadRequest(format!("{name} must be a non-negative integer, got {s:?}"))),
    }
}

async fn get_triage(State(svc): State<Arc<Service>>, Query(q): Query<PageQuery>) -> ApiResult {
    let filter = match q.status.as_deref() {
        None | Some("pending") => StatusFilter::Pending,
        Some("labeled") => StatusFilter::Labeled,
        Some("dismissed") => StatusFilter::Dismissed,
        Some("all") => StatusFilter::All,
        Some(other) => return Err(ServiceError::BadRequest(format!("unknown status {other:?}"))),
    };
    let offset = query_number("offset", q.offset.as_deref(), 0)?;
    let limit = query_number("limit", q.limit.as_deref(), DEFAULT_PAGE)?;
    reply(StatusCode::OK, &svc.triage_page(filter, offset, limit)?)
}

fn path_id(raw: &str) -> Result<u64, ServiceError> {
    raw.parse()
        .map_err(|_| ServiceError::BadRequest(format!("id must be an integer, got {raw:?}")))
}

async fn get_item(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult {
    let item = svc.item(path_id(&id)?)?;
    reply(StatusCode::OK, &json!({ "item": item }))
}

async fn post_label(State(svc): State<Arc<Service>>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let id = path_id(&id)?;
    let req: LabelRequest = parse(&body)?;
    let label = match req.label {
        LabelValue::Code(c) => ClassLabel::from_code(c)
            .ok_or_else(|| ServiceError::Unprocessable(format!("class code {c} out of range")))?,
        LabelValue::Name(n) => n.parse().map_err(|e| ServiceError::Unprocessable(format!("{e}")))?,
    };
    let item = svc.label(id, label, &req.engineer)?;
    reply(StatusCode::OK, &json!({ "item": item }))
}

async fn post_dismiss(State(svc): State<Arc<Service>>, Path(id): Path<String>, body: Bytes) -> ApiResult {
    let id = path_id(&id)?;
    let _: VersionOnly = parse_or_empty(&body)?;
    let item = svc.dismiss(id)?;
    reply(StatusCode::OK, &json!({ "item": item }))
}

async fn post_retrain(State(svc): State<Arc<Service>>, body: Bytes) -> ApiResult {
    let o: RetrainBody = parse_or_empty(&body)?;
    let job = svc.start_retrain(&RetrainRequest {
        epochs: o.epochs,
        batch_size: o.batch_size,
        lr: o.lr,
        val_fraction: o.val_fraction,
        warm_start: o.warm_start,
    })?;
    reply(StatusCode::ACCEPTED, &json!({ "job": job }))
}

async fn get_job(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> ApiResult {
    let job = svc.job(path_id(&id)?)?;
    reply(StatusCode::OK, &json!({ "job": job }))
}

async fn get_model(State(svc): State<Arc<Service>>) -> ApiResult {
    reply(StatusCode::OK, &svc.model_info())
}

async fn get_health(State(svc): State<Arc<Service>>) -> ApiResult {
    reply(StatusCode::OK, &svc.health())
}

async fn require_token(State(svc): State<Arc<Service>>, req: Request, next: Next) -> Response {
    if let Some(token) = &svc.config().api_token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|h| h.to_str().ok())
            .and_then(|h| h.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return ServiceError::Unauthorized("missing or invalid bearer token".into()).into_response();
        }
    }
    next.run(req).await
}

/// Map axum's own rejections (body limit, unknown route) to the JSON
/// error shape.
async fn json_errors(req: Request, next: Next) -> Response {
    let res = next.run(req).await;
    let is_json = res
        .headers()
        .get(header::CONTENT_TYPE)
        .is_some_and(|v| v.as_bytes().starts_with(b"application/json"));
    if is_json || res.status().is_success() {
        return res;
    }
    let msg = res.status().canonical_reason().unwrap_or("error").to_string();
    match res.status() {
        StatusCode::PAYLOAD_TOO_LARGE => ServiceError::TooLarge(msg).into_response(),
        StatusCode::NOT_FOUND => ServiceError::NotFound(msg).into_response(),
        StatusCode::BAD_REQUEST => ServiceError::BadRequest(msg).into_response(),
        _ => res,
    }
}

pub fn router(svc: Arc<Service>) -> Router {
    let protected = Router::new()
        .route("/v1/frames", post(post_frames))
        .route("/v1/triage", get(get_triage))
        .route("/v1/triage/{id}", get(get_item))
        .route("/v1/triage/{id}/label", post(post_label))
        .route("/v1/triage/{id}/dismiss", post(post_dismiss))
        .route("/v1/retrain", post(post_retrain))
        .route("/v1/retrain/{id}", get(get_job))
        .route("/v1/model", get(get_model))
        .route_layer(middleware::from_fn_with_state(Arc::clone(&svc), require_token));
    Router::new()
        .route("/v1/health", get(get_health))
        .merge(protected)
        .layer(DefaultBodyLimit::max(svc.config().max_body_bytes))
        .layer(middleware::from_fn(json_errors))
        .with_state(svc)
}
