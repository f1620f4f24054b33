use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use futures_util::StreamExt;
use serde_json::{json, Value};

use nz_core::generation::{GenerationConfig, GenerationSession};
use nz_core::model::{RefinerConfig, RefinerState};
use nz_core::synthetic::synthetic_collection;
use nz_flight::{decode_stream_message, AppState, FlightConfig, FrameResponse, StepRequest};

const SIZE: usize = 16;

fn model() -> RefinerState {
    RefinerState::new(RefinerConfig::for_size(SIZE, 4, 8).unwrap(), 11).unwrap()
}

fn gallery() -> Vec<nz_core::image::RgbdImage> {
    synthetic_collection(3, SIZE, 5).unwrap()
}

struct Server {
    base: String,
    state: AppState,
    client: reqwest::Client,
}

async fn start() -> Server {
    let state = AppState::new(model(), gallery(), FlightConfig::default());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(nz_flight::serve(listener, state.clone()));
    Server {
        base: format!("http://{addr}"),
        state,
        client: reqwest::Client::new(),
    }
}

impl Server {
    async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self.client.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        (r.status().as_u16(), r.json().await.unwrap())
    }

    async fn create(&self, body: Value) -> FrameResponse {
        let (status, v) = self.post("/sessions", body).await;
        assert_eq!(status, 200, "{v}");
        serde_json::from_value(v).unwrap()
    }

    async fn step(&self, id: &str, body: Value) -> FrameResponse {
        let (status, v) = self.post(&format!("/sessions/{id}/step"), body).await;
        assert_eq!(status, 200, "{v}");
        serde_json::from_value(v).unwrap()
    }

    async fn delete(&self, id: &str) -> u16 {
        self.client.delete(format!("{}/sessions/{id}", self.base)).send().await.unwrap().status().as_u16()
    }
}

fn png_b64(img: &nz_core::image::RgbdImage) -> String {
    B64.encode(img.png_bytes().unwrap())
}

/// The same session run directly against the library.
fn reference(start: nz_core::image::RgbdImage, seed: u64, controls: &[StepRequest]) -> Vec<String> {
    let m = model();
    let mut s = GenerationSession::new(start, GenerationConfig::default(), seed).unwrap();
    controls
        .iter()
        .map(|c| {
            let rel = if c.autopilot { s.autopilot_pose() } else { c.to_pose(&Default::default()).unwrap() };
            png_b64(&s.advance(&m, &rel).unwrap().frame)
        })
        .collect()
}

#[tokio::test]
async fn upload_create_and_decode_errors() {
    let srv = start().await;
    let img = gallery().remove(1);
    let a = srv.create(json!({"image_png_base64": png_b64(&img)})).await;
    let b = srv.create(json!({"dataset_index": 0})).await;
    assert_ne!(a.id, b.id);
    assert_eq!(a.step, 0);
    assert!(B64.decode(&a.frame_png_base64).unwrap().starts_with(b"\x89PNG"));
    assert_eq!(b.frame_png_base64, png_b64(&gallery()[0]));

    let (status, v) = srv.post("/sessions", json!({"image_png_base64": B64.encode(b"not an image at all")})).await;
    assert!((400..500).contains(&status));
    assert!(v["message"].as_str().unwrap().contains("decode"), "{v}");
    assert!(v["code"].is_string());

    let (status, v) = srv.post("/sessions", json!({"image_png_base64": "%%%"})).await;
    assert!((400..500).contains(&status) && v["message"].as_str().unwrap().contains("decode"));

    let (status, _) = srv.post("/sessions", json!({"dataset_index": 99})).await;
    assert_eq!(status, 400);
    let (status, _) = srv.post("/sessions", json!({})).await;
    assert_eq!(status, 400);
    assert_eq!(srv.state.session_count(), 2);
}

#[tokio::test]
async fn bounds_are_enforced_and_named() {
    let srv = start().await;
    let s = srv.create(json!({"dataset_index": 0})).await;
    let info: Value = srv.client.get(format!("{}/config", srv.base)).send().await.unwrap().json().await.unwrap();
    assert_eq!(info["image_size"], SIZE);
    let max_fwd = info["bounds"]["max_forward"].as_f64().unwrap();
    for (body, bound) in [
        (json!({"forward": max_fwd * 2.0}), "max_forward"),
        (json!({"yaw": -45.0}), "max_yaw_deg"),
        (json!({"pitch": 11.0}), "max_pitch_deg"),
        (json!({"lateral": 1.0}), "max_lateral"),
    ] {
        let (status, v) = srv.post(&format!("/sessions/{}/step", s.id), body).await;
        assert_eq!(status, 422);
        assert_eq!(v["code"], "out_of_bounds");
        assert!(v["message"].as_str().unwrap().contains(bound), "{v}");
    }
    let (status, _) = srv.post(&format!("/sessions/{}/step", s.id), json!({"speed": 1.0})).await;
    assert_eq!(status, 400);
    // rejected steps leave the session untouched
    assert_eq!(srv.step(&s.id, json!({})).await.step, 1);
}

#[tokio::test]
async fn fifty_forward_steps_and_frame_endpoint() {
    let srv = start().await;
    let s = srv.create(json!({"dataset_index": 1, "seed": 3})).await;
    let mut last = None;
    for i in 1..=50u64 {
        let r = srv.step(&s.id, json!({"forward": 0.05})).await;
        assert_eq!(r.step, i);
        last = Some(r);
    }
    let last = last.unwrap();
    // cumulative pose of 50 straight steps
    assert!((last.pose[2][3] - 2.5).abs() < 1e-9, "{:?}", last.pose);
    let resp = srv.client.get(format!("{}/sessions/{}/frame", srv.base, s.id)).send().await.unwrap();
    assert_eq!(resp.status().as_u16(), 200);
    assert_eq!(resp.headers()["content-type"], "image/png");
    assert_eq!(resp.headers()["x-step-index"], "50");
    assert_eq!(B64.encode(resp.bytes().await.unwrap()), last.frame_png_base64);
}

#[tokio::test]
async fn close_semantics() {
    let srv = start().await;
    let s = srv.create(json!({"dataset_index": 0})).await;
    assert_eq!(srv.delete(&s.id).await, 200);
    let (status, v) = srv.post(&format!("/sessions/{}/step", s.id), json!({})).await;
    assert_eq!(status, 404);
    assert_eq!(v["code"], "not_found");
    assert_eq!(srv.delete(&s.id).await, 404);
    let frame = srv.client.get(format!("{}/sessions/{}/frame", srv.base, s.id)).send().await.unwrap();
    assert_eq!(frame.status().as_u16(), 404);
    assert_eq!(srv.state.session_count(), 0);
}

#[tokio::test]
async fn sessions_are_isolated_and_match_library_runs() {
    let srv = start().await;
    let starts = gallery();
    let controls_a: Vec<StepRequest> = (0..6)
        .map(|i| StepRequest {
            forward: 0.05,
            yaw: if i % 2 == 0 { 3.0 } else { -2.0 },
            autopilot: i == 4,
            ..Default::default()
        })
        .map(|c| if c.autopilot { StepRequest { autopilot: true, ..Default::default() } } else { c })
        .collect();
    let controls_b: Vec<StepRequest> = (0..6).map(|_| StepRequest { autopilot: true, ..Default::default() }).collect();
    let ref_a = reference(starts[0].clone(), 7, &controls_a);
    let ref_b = reference(starts[2].clone(), 8, &controls_b);

    let a = srv.create(json!({"dataset_index": 0, "seed": 7})).await;
    let b = srv.create(json!({"dataset_index": 2, "seed": 8})).await;
    let mut got_a = Vec::new();
    let mut got_b = Vec::new();
    // interleaved, with pairs in flight concurrently
    for (ca, cb) in controls_a.iter().zip(&controls_b) {
        let (ra, rb) = tokio::join!(
            srv.step(&a.id, serde_json::to_value(ca).unwrap()),
            srv.step(&b.id, serde_json::to_value(cb).unwrap())
        );
        got_a.push(ra.frame_png_base64);
        got_b.push(rb.frame_png_base64);
    }
    assert_eq!(got_a, ref_a);
    assert_eq!(got_b, ref_b);
}

#[tokio::test]
async fn autopilot_delegates_to_policy() {
    let srv = start().await;
    let start_img = gallery().remove(1);
    let s = srv.create(json!({"dataset_index": 1, "seed": 2})).await;
    let local = GenerationSession::new(start_img, GenerationConfig::default(), 2).unwrap();
    let r = srv.step(&s.id, json!({"autopilot": true})).await;
    assert_eq!(r.relative.unwrap(), local.autopilot_pose().to_matrix());
    assert_eq!(r.provenance, Some(nz_core::trajectory::Provenance::Autopilot));
    let (status, _) = srv.post(&format!("/sessions/{}/step", s.id), json!({"autopilot": true, "forward": 0.1})).await;
    assert_eq!(status, 400);
}

#[tokio::test]
async fn zero_delta_step_only_refines() {
    let srv = start().await;
    let s = srv.create(json!({"dataset_index": 0})).await;
    let r = srv.step(&s.id, json!({})).await;
    assert_eq!(r.relative.unwrap(), nz_core::geometry::CameraPose::identity().to_matrix());
    assert_eq!(r.pose, nz_core::geometry::CameraPose::identity().to_matrix());
}

#[tokio::test]
async fn websocket_pushes_tagged_frames() {
    let srv = start().await;
    let s = srv.create(json!({"dataset_index": 0})).await;
    let url = format!("{}/sessions/{}/stream", srv.base.replace("http", "ws"), s.id);
    let (mut ws, _) = tokio_tungstenite::connect_async(url).await.unwrap();

    let next = |m: tokio_tungstenite::tungstenite::Message| {
        let data = m.into_data();
        let (step, png) = decode_stream_message(&data).unwrap();
        (step, B64.encode(png))
    };
    let first = next(ws.next().await.unwrap().unwrap());
    assert_eq!(first, (0, s.frame_png_base64.clone()));
    let mut sent = Vec::new();
    for _ in 0..3 {
        let r = srv.step(&s.id, json!({"forward": 0.05})).await;
        sent.push((r.step, r.frame_png_base64));
    }
    for want in &sent {
        assert_eq!(&next(ws.next().await.unwrap().unwrap()), want);
    }
    assert_eq!(srv.delete(&s.id).await, 200);
    // the stream ends once the session is gone
    let end = ws.next().await;
    assert!(matches!(end, None | Some(Ok(tokio_tungstenite::tungstenite::Message::Close(_))) | Some(Err(_))));

    let missing = format!("{}/sessions/nope/stream", srv.base.replace("http", "ws"));
    assert!(tokio_tungstenite::connect_async(missing).await.is_err());
}
