//! Interactive flythrough service.
//!
//! Each session owns a [`GenerationSession`] behind its own async mutex, so
//! requests against one session run one at a time while different sessions
//! proceed concurrently. The model is a frozen snapshot shared by all
//! sessions and only ever read.
//!
//! Routes (JSON unless noted; errors are `{"code", "message"}` with a 4xx/5xx
//! status):
//!
//! | method | path | body | response |
//! |---|---|---|---|
//! | GET | `/config` | | [`ServiceInfo`] |
//! | POST | `/sessions` | [`CreateRequest`] | [`FrameResponse`] |
//! | POST | `/sessions/{id}/step` | [`StepRequest`] | [`FrameResponse`] |
//! | GET | `/sessions/{id}/frame` | | `image/png` |
//! | DELETE | `/sessions/{id}` | | [`CloseResponse`] |
//! | GET (upgrade) | `/sessions/{id}/stream` | | WebSocket of binary frames |
//!
//! Stream messages are an 8-byte little-endian step index followed by the
//! PNG bytes of that step's frame. The current frame is sent on connect.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast;

use nz_core::data::decode_image;
use nz_core::generation::{GenerationConfig, GenerationSession, StepOutput};
use nz_core::geometry::{CameraPose, Vec3};
use nz_core::image::RgbdImage;
use nz_core::model::RefinerState;
use nz_core::trajectory::Provenance;

/// Largest per-step control magnitudes accepted by `/step`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    pub max_forward: f64,
    pub max_lateral: f64,
    pub max_yaw_deg: f64,
    pub max_pitch_deg: f64,
}

impl Default for ControlBounds {
    fn default() -> Self {
        Self {
            max_forward: 0.2,
            max_lateral: 0.1,
            max_yaw_deg: 10.0,
            max_pitch_deg: 10.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlightConfig {
    pub bounds: ControlBounds,
    pub generation: GenerationConfig,
    /// Disparity plane used for uploads that come without a disparity map.
    pub upload_disparity: f64,
    /// Seed for sessions that do not request one.
    pub default_seed: u64,
}

impl Default for FlightConfig {
    fn default() -> Self {
        Self {
            bounds: ControlBounds::default(),
            generation: GenerationConfig::default(),
            upload_disparity: 0.5,
            default_seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
#[error("{message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no session `{id}`"))
    }

    fn internal(message: impl Into<String>) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", message)
    }
}

/// Error body.
#[derive(Debug, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            code: self.code.to_string(),
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request(format!("request body: {}", r.body_text()))
    }
}

/// `POST /sessions` body. Exactly one of `image_png_base64` and
/// `dataset_index` must be set.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    /// PNG or JPEG bytes, base64 encoded.
    #[serde(default)]
    pub image_png_base64: Option<String>,
    /// Optional 16-bit grayscale disparity PNG matching the upload.
    #[serde(default)]
    pub disparity_png_base64: Option<String>,
    /// Index into the server's start gallery.
    #[serde(default)]
    pub dataset_index: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// `POST /sessions/{id}/step` body. Translations are in scene units,
/// rotations in degrees; omitted fields are zero. With `autopilot` set the
/// deltas must be absent or zero.
#[derive(Debug, Default, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepRequest {
    #[serde(default)]
    pub forward: f64,
    #[serde(default)]
    pub yaw: f64,
    #[serde(default)]
    pub pitch: f64,
    #[serde(default)]
    pub lateral: f64,
    #[serde(default)]
    pub autopilot: bool,
}

impl StepRequest {
    /// Relative pose for manual control, checking every bound.
    pub fn to_pose(&self, b: &ControlBounds) -> Result<CameraPose, ApiError> {
        let checks = [
            ("forward", self.forward, "max_forward", b.max_forward),
            ("lateral", self.lateral, "max_lateral", b.max_lateral),
            ("yaw", self.yaw, "max_yaw_deg", b.max_yaw_deg),
            ("pitch", self.pitch, "max_pitch_deg", b.max_pitch_deg),
        ];
        for (field, v, bound, limit) in checks {
            if !v.is_finite() || v.abs() > limit {
                return Err(ApiError::new(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    "out_of_bounds",
                    format!("`{field}` = {v} exceeds bound {bound} = {limit}"),
                ));
            }
        }
        Ok(CameraPose::from_euler_deg(self.yaw, self.pitch, 0.0, Vec3::new(self.lateral, 0.0, self.forward)))
    }
}

/// A frame together with where it was taken.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameResponse {
    pub id: String,
    /// Completed steps; 0 for the start frame.
    pub step: u64,
    /// Camera pose relative to the start view, 4×4 row-major.
    pub pose: [[f64; 4]; 4],
    /// Relative pose applied by this step, absent for the start frame.
    pub relative: Option<[[f64; 4]; 4]>,
    pub provenance: Option<Provenance>,
    pub frame_png_base64: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CloseResponse {
    pub id: String,
    pub closed: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ServiceInfo {
    pub bounds: ControlBounds,
    pub image_size: usize,
    pub gallery_size: usize,
}

struct Live {
    session: GenerationSession,
    png: Vec<u8>,
}

struct Slot {
    /// `None` once closed, so waiters queued behind a close see it.
    live: Arc<tokio::sync::Mutex<Option<Live>>>,
    frames: broadcast::Sender<(u64, Arc<Vec<u8>>)>,
}

/// Shared server state.
#[derive(Clone)]
pub struct AppState {
    model: Arc<RefinerState>,
    gallery: Arc<Vec<RgbdImage>>,
    cfg: Arc<FlightConfig>,
    sessions: Arc<Mutex<HashMap<String, Arc<Slot>>>>,
}

impl AppState {
    pub fn new(model: RefinerState, gallery: Vec<RgbdImage>, cfg: FlightConfig) -> Self {
        Self {
            model: Arc::new(model),
            gallery: Arc::new(gallery),
            cfg: Arc::new(cfg),
            sessions: Arc::default(),
        }
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().unwrap().len()
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        self.sessions.lock().unwrap().get(id).cloned().ok_or_else(|| ApiError::not_found(id))
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/config", get(info))
        .route("/sessions", post(create))
        .route("/sessions/{id}", axum::routing::delete(close))
        .route("/sessions/{id}/step", post(step))
        .route("/sessions/{id}/frame", get(frame))
        .route("/sessions/{id}/stream", get(stream))
        .with_state(state)
}

/// Serve until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

async fn info(State(s): State<AppState>) -> Json<ServiceInfo> {
    Json(ServiceInfo {
        bounds: s.cfg.bounds,
        image_size: s.model.config.image_size,
        gallery_size: s.gallery.len(),
    })
}

fn decode_b64(field: &str, text: &str) -> Result<Vec<u8>, ApiError> {
    B64.decode(text.trim())
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "decode_error", format!("cannot decode `{field}` as base64: {e}")))
}

fn frame_response(id: &str, out: Option<&StepOutput>, session: &GenerationSession, png: &[u8]) -> FrameResponse {
    FrameResponse {
        id: id.to_string(),
        step: session.step_index(),
        pose: session.pose().to_matrix(),
        relative: out.map(|o| o.relative.to_matrix()),
        provenance: None,
        frame_png_base64: B64.encode(png),
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

async fn create(State(s): State<AppState>, body: Result<Json<CreateRequest>, JsonRejection>) -> Result<Json<FrameResponse>, ApiError> {
    let Json(req) = body?;
    let size = s.model.config.image_size;
    let start = match (&req.image_png_base64, req.dataset_index) {
        (Some(img), None) => {
            let bytes = decode_b64("image_png_base64", img)?;
            let disp = req.disparity_png_base64.as_deref().map(|d| decode_b64("disparity_png_base64", d)).transpose()?;
            let fallback = s.cfg.upload_disparity;
            blocking(move || {
                decode_image(&bytes, disp.as_deref(), size, fallback).map_err(|e| {
                    ApiError::new(StatusCode::BAD_REQUEST, "decode_error", format!("cannot decode upload: {e}"))
                })
            })
            .await?
        }
        (None, Some(i)) => s
            .gallery
            .get(i)
            .cloned()
            .ok_or_else(|| ApiError::bad_request(format!("dataset_index {i} out of range (gallery has {})", s.gallery.len())))?,
        _ => return Err(ApiError::bad_request("set exactly one of `image_png_base64` and `dataset_index`")),
    };
    let seed = req.seed.unwrap_or(s.cfg.default_seed);
    let gen = s.cfg.generation;
    let (session, png) = blocking(move || {
        let session = GenerationSession::new(start, gen, seed).map_err(|e| ApiError::bad_request(e.to_string()))?;
        let png = session.current().png_bytes().map_err(|e| ApiError::internal(e.to_string()))?;
        Ok((session, png))
    })
    .await?;
    let id = uuid::Uuid::new_v4().simple().to_string();
    let resp = frame_response(&id, None, &session, &png);
    let (frames, _) = broadcast::channel(64);
    let slot = Slot {
        live: Arc::new(tokio::sync::Mutex::new(Some(Live { session, png }))),
        frames,
    };
    s.sessions.lock().unwrap().insert(id.clone(), Arc::new(slot));
    log::info!("session {id} created");
    Ok(Json(resp))
}

async fn step(
    State(s): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<StepRequest>, JsonRejection>,
) -> Result<Json<FrameResponse>, ApiError> {
    let Json(req) = body?;
    let manual = if req.autopilot {
        if req.forward != 0.0 || req.yaw != 0.0 || req.pitch != 0.0 || req.lateral != 0.0 {
            return Err(ApiError::bad_request("autopilot steps take no control deltas"));
        }
        None
    } else {
        Some(req.to_pose(&s.cfg.bounds)?)
    };
    let slot = s.slot(&id)?;
    let mut guard = slot.live.clone().lock_owned().await;
    if guard.is_none() {
        return Err(ApiError::not_found(&id));
    }
    let model = s.model.clone();
    let (guard, resp, png) = blocking(move || {
        let live = guard.as_mut().expect("checked above");
        let rel = manual.unwrap_or_else(|| live.session.autopilot_pose());
        let out = live.session.advance(&model, &rel).map_err(|e| ApiError::internal(e.to_string()))?;
        live.png = out.frame.png_bytes().map_err(|e| ApiError::internal(e.to_string()))?;
        let mut resp = frame_response(&id, Some(&out), &live.session, &live.png);
        resp.provenance = Some(if manual.is_some() { Provenance::User } else { Provenance::Autopilot });
        let png = Arc::new(live.png.clone());
        Ok((guard, resp, png))
    })
    .await?;
    // no receivers is fine
    let _ = slot.frames.send((resp.step, png));
    drop(guard);
    Ok(Json(resp))
}

async fn frame(State(s): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let slot = s.slot(&id)?;
    let guard = slot.live.lock().await;
    let live = guard.as_ref().ok_or_else(|| ApiError::not_found(&id))?;
    let step = live.session.step_index().to_string();
    Ok(([(header::CONTENT_TYPE, "image/png".to_string()), (header::HeaderName::from_static("x-step-index"), step)], live.png.clone()).into_response())
}

async fn close(State(s): State<AppState>, Path(id): Path<String>) -> Result<Json<CloseResponse>, ApiError> {
    let slot = s.sessions.lock().unwrap().remove(&id).ok_or_else(|| ApiError::not_found(&id))?;
    *slot.live.lock().await = None;
    log::info!("session {id} closed");
    Ok(Json(CloseResponse { id, closed: true }))
}

/// Binary stream message: step index then PNG bytes.
pub fn encode_stream_message(step: u64, png: &[u8]) -> Vec<u8> {
    let mut m = Vec::with_capacity(8 + png.len());
    m.extend_from_slice(&step.to_le_bytes());
    m.extend_from_slice(png);
    m
}

/// Inverse of [`encode_stream_message`].
pub fn decode_stream_message(msg: &[u8]) -> Option<(u64, &[u8])> {
    let (head, png) = msg.split_at_checked(8)?;
    Some((u64::from_le_bytes(head.try_into().ok()?), png))
}

async fn stream(State(s): State<AppState>, Path(id): Path<String>, ws: WebSocketUpgrade) -> Result<Response, ApiError> {
    let slot = s.slot(&id)?;
    // subscribe before reading the current frame so no step is missed
    let rx = slot.frames.subscribe();
    let first = {
        let guard = slot.live.lock().await;
        let live = guard.as_ref().ok_or_else(|| ApiError::not_found(&id))?;
        (live.session.step_index(), live.png.clone())
    };
    Ok(ws.on_upgrade(move |socket| push_frames(socket, first, rx)))
}

async fn push_frames(mut socket: WebSocket, first: (u64, Vec<u8>), mut rx: broadcast::Receiver<(u64, Arc<Vec<u8>>)>) {
    let mut last = first.0;
    if socket.send(Message::Binary(encode_stream_message(first.0, &first.1).into())).await.is_err() {
        return;
    }
    loop {
        tokio::select! {
            msg = rx.recv() => match msg {
                Ok((step, png)) => {
                    if step <= last {
                        continue;
                    }
                    last = step;
                    if socket.send(Message::Binary(encode_stream_message(step, &png).into())).await.is_err() {
                        return;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => log::warn!("stream lagged by {n} frames"),
                // session closed
                Err(broadcast::error::RecvError::Closed) => {
                    let _ = socket.send(Message::Close(None)).await;
                    return;
                }
            },
            incoming = socket.recv() => match incoming {
                Some(Ok(Message::Close(_))) | None | Some(Err(_)) => return,
                Some(Ok(_)) => {}
            },
        }
    }
}
