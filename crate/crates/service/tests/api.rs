use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use gcrf_core::edits::{Edit, EditSet, PropagateConfig};
use gcrf_core::image::RgbImage;
use gcrf_core::io::{decode_png, encode_png};
use gcrf_core::pipeline::{ModelConfig, ToyModel};
use gcrf_service::{router, AppState, ServiceConfig, MAX_UPLOAD_BYTES};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

fn app(config: ServiceConfig) -> Router {
    router(AppState::new(config))
}

fn png(width: usize, height: usize, f: impl Fn(usize, usize) -> [u8; 3]) -> Vec<u8> {
    let pixels = (0..width * height).map(|i| f(i / width, i % width)).collect();
    encode_png(&RgbImage::new(width, height, pixels).unwrap()).unwrap()
}

fn constant_png() -> Vec<u8> {
    png(64, 64, |_, _| [128, 128, 128])
}

fn halves_png() -> Vec<u8> {
    png(32, 32, |_, c| if c < 16 { [50, 50, 50] } else { [210, 210, 210] })
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, headers, body)
}

fn post(uri: &str, body: impl Into<Body>) -> Request<Body> {
    Request::post(uri).body(body.into()).unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

async fn json_of(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let (status, _, body) = send(app, req).await;
    (status, serde_json::from_slice(&body).unwrap_or(Value::Null))
}

async fn new_session(app: &Router, image: Vec<u8>) -> String {
    let (status, v) = json_of(app, post("/session", image)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

fn edits_json(edits: &[(i64, i64, f64, f64)]) -> String {
    let set = EditSet::new(
        edits.iter().map(|&(row, col, a, b)| Edit { row, col, a, b }).collect(),
        5.0,
    );
    set.to_json()
}

#[tokio::test]
async fn upload_returns_default_grid_and_distinct_ids() {
    let app = app(ServiceConfig::default());
    let (status, v) = json_of(&app, post("/session", constant_png())).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!((v["grid_w"].as_u64(), v["grid_h"].as_u64()), (Some(32), Some(32)));
    assert_eq!((v["width"].as_u64(), v["height"].as_u64()), (Some(64), Some(64)));
    let second = new_session(&app, constant_png()).await;
    assert_ne!(v["session_id"].as_str().unwrap(), second);
}

#[tokio::test]
async fn corrupt_and_oversized_uploads_are_rejected() {
    let app = app(ServiceConfig::default());
    let (status, v) = json_of(&app, post("/session", b"\x89PNG not really".to_vec())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "bad_request");
    let (status, _, _) = send(&app, post("/session", vec![0u8; MAX_UPLOAD_BYTES + 1])).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn unknown_session_is_404_everywhere() {
    let app = app(ServiceConfig::default());
    let body = edits_json(&[(0, 0, 10.0, 10.0)]);
    for req in [
        post("/session/nope/colorize", body.clone()),
        post("/session/nope/diverse", r#"{"n": 1}"#),
        get("/session/nope/similarity_row?p=0"),
        get("/session/nope"),
    ] {
        let (status, v) = json_of(&app, req).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
        assert_eq!(v["error"], "unknown_session");
    }
}

#[tokio::test]
async fn single_edit_on_constant_image_colors_everything() {
    let app = app(ServiceConfig::default());
    let id = new_session(&app, constant_png()).await;
    let (status, v) = json_of(&app, post(&format!("/session/{id}/colorize"), edits_json(&[(5, 7, 30.0, -40.0)]))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["stats"]["revealed"], 1);
    assert!(v["stats"]["residual"].as_f64().unwrap() <= 1e-10);
    let img = decode_png(&BASE64.decode(v["image_png"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!((img.width, img.height), (64, 64));
    assert!(img.pixels.iter().all(|p| *p == img.pixels[0]));
    assert_ne!(img.pixels[0], [128, 128, 128]);
}

#[tokio::test]
async fn edit_errors_map_to_status_codes() {
    let app = app(ServiceConfig::default());
    let id = new_session(&app, constant_png()).await;
    let uri = format!("/session/{id}/colorize");

    let (status, v) = json_of(&app, post(&uri, r#"{"beta": 5.0, "edits": []}"#)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(v["error"], "empty_edits");

    let (status, v) = json_of(&app, post(&uri, edits_json(&[(3, 3, 1.0, 1.0), (-1, 0, 5.0, 5.0)]))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["index"], 1);

    let (status, _) = json_of(&app, post(&uri, r#"{"edits": [{"row": 1}]}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = json_of(&app, post(&uri, r#"{"beta": -2, "edits": [{"row": 1, "col": 1, "a": 0, "b": 0}]}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn same_mask_factorizes_once_across_five_calls() {
    let app = app(ServiceConfig::default());
    let id = new_session(&app, halves_png()).await;
    let uri = format!("/session/{id}/colorize");
    for k in 0..5 {
        let shift = 7.0 * k as f64;
        let body = edits_json(&[(4, 4, 20.0 + shift, -10.0), (20, 25, -30.0, 15.0 - shift)]);
        let (status, headers, bytes) = send(&app, post(&uri, body)).await;
        assert_eq!(status, StatusCode::OK);
        let v: Value = serde_json::from_slice(&bytes).unwrap();
        assert_eq!(v["cache_hit"], k > 0);
        assert_eq!(headers["x-cache"], if k > 0 { "hit" } else { "miss" });
        assert_eq!(v["factorizations"], 1);
    }
    let (_, info) = json_of(&app, get(&format!("/session/{id}"))).await;
    assert_eq!(info["factorizations"], 1);

    // a different mask, or the same mask at another beta, refactorizes
    let (_, v) = json_of(&app, post(&uri, edits_json(&[(4, 5, 20.0, -10.0)]))).await;
    assert_eq!((v["cache_hit"].as_bool(), v["factorizations"].as_u64()), (Some(false), Some(2)));
    let other_beta = r#"{"beta": 2.0, "edits": [{"row": 4, "col": 5, "a": 20.0, "b": -10.0}]}"#;
    let (_, v) = json_of(&app, post(&uri, other_beta)).await;
    assert_eq!((v["cache_hit"].as_bool(), v["factorizations"].as_u64()), (Some(false), Some(3)));
}

#[tokio::test]
async fn replayed_requests_give_identical_bytes_even_after_restart() {
    let body = edits_json(&[(2, 3, 25.0, 35.0), (28, 30, -45.0, -5.0)]);
    let mut runs = Vec::new();
    for _ in 0..2 {
        // a fresh router stands in for a restarted server
        let app = app(ServiceConfig::default());
        let id = new_session(&app, halves_png()).await;
        let uri = format!("/session/{id}/colorize");
        let (_, first) = json_of(&app, post(&uri, body.clone())).await;
        let (_, again) = json_of(&app, post(&uri, body.clone())).await;
        assert_eq!(first["image_png"], again["image_png"]);
        assert_eq!(again["cache_hit"], true);
        runs.push((id, first["image_png"].clone()));
    }
    assert_eq!(runs[0], runs[1]);
}

#[tokio::test]
async fn similarity_row_concentrates_in_own_region() {
    let app = app(ServiceConfig::default());
    let id = new_session(&app, halves_png()).await;
    let (status, v) = json_of(&app, get(&format!("/session/{id}/similarity_row?p=100"))).await;
    assert_eq!(status, StatusCode::OK);
    let row: Vec<f64> = serde_json::from_value(v["row"].clone()).unwrap();
    assert_eq!(row.len(), 32 * 32);
    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    // pixel 100 is at column 4, in the dark left half
    let own: f64 = row.iter().enumerate().filter(|(j, _)| j % 32 < 16).map(|(_, w)| w).sum();
    assert!(own >= 0.9, "own-region mass {own}");

    let (status, _) = json_of(&app, get(&format!("/session/{id}/similarity_row?p=1024"))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = json_of(&app, get(&format!("/session/{id}/similarity_row"))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

fn with_model() -> ServiceConfig {
    let model = ToyModel::init(ModelConfig::default(), 5).unwrap();
    ServiceConfig {
        model: Some(Arc::new(model)),
        sample_seed: 11,
        ..ServiceConfig::default()
    }
}

#[tokio::test]
async fn diverse_needs_a_model() {
    let app = app(ServiceConfig::default());
    let id = new_session(&app, constant_png()).await;
    let (status, v) = json_of(&app, post(&format!("/session/{id}/diverse"), r#"{"n": 2}"#)).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(v["error"], "no_model");
}

#[tokio::test]
async fn diverse_samples_are_bounded_and_deterministic() {
    let app = app(with_model());
    let id = new_session(&app, halves_png()).await;
    let uri = format!("/session/{id}/diverse");

    let (status, one) = json_of(&app, post(&uri, r#"{"n": 1}"#)).await;
    assert_eq!(status, StatusCode::OK, "{one}");
    assert_eq!(one["images"].as_array().unwrap().len(), 1);
    assert!(one["mean_pairwise_ssim"].is_null());

    let (_, a) = json_of(&app, post(&uri, r#"{"n": 8}"#)).await;
    let (_, b) = json_of(&app, post(&uri, r#"{"n": 8}"#)).await;
    assert_eq!(a["images"].as_array().unwrap().len(), 8);
    assert_eq!(a, b);
    assert!(a["variance"].as_f64().unwrap() >= 0.0);

    let (_, c) = json_of(&app, post(&uri, r#"{"n": 8, "seed": 12}"#)).await;
    assert_ne!(a["images"], c["images"]);

    for bad in [r#"{"n": 0}"#, r#"{"n": 9}"#, r#"{"count": 2}"#] {
        let (status, _) = json_of(&app, post(&uri, bad)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{bad}");
    }
}

#[tokio::test]
async fn least_recently_used_session_is_evicted() {
    let app = app(ServiceConfig {
        max_sessions: 2,
        propagate: PropagateConfig {
            grid_width: 8,
            grid_height: 8,
            ..PropagateConfig::default()
        },
        ..ServiceConfig::default()
    });
    let first = new_session(&app, constant_png()).await;
    let second = new_session(&app, constant_png()).await;
    // touching the first makes the second the eviction candidate
    let (status, _) = json_of(&app, get(&format!("/session/{first}"))).await;
    assert_eq!(status, StatusCode::OK);
    let _third = new_session(&app, constant_png()).await;
    let (status, _) = json_of(&app, get(&format!("/session/{second}"))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = json_of(&app, get(&format!("/session/{first}"))).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn cors_headers_follow_the_configured_origin() {
    let app = app(ServiceConfig {
        cors_origins: vec!["http://localhost:5173".into()],
        ..ServiceConfig::default()
    });
    let preflight = Request::builder()
        .method("OPTIONS")
        .uri("/session")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .header(header::ACCESS_CONTROL_REQUEST_HEADERS, "content-type")
        .body(Body::empty())
        .unwrap();
    let (status, headers, _) = send(&app, preflight).await;
    assert!(status.is_success());
    assert_eq!(headers[header::ACCESS_CONTROL_ALLOW_ORIGIN], "http://localhost:5173");

    let foreign = Request::post("/session")
        .header(header::ORIGIN, "http://evil.example")
        .body(Body::from(constant_png()))
        .unwrap();
    let (_, headers, _) = send(&app, foreign).await;
    assert!(!headers.contains_key(header::ACCESS_CONTROL_ALLOW_ORIGIN));

    let open = router(AppState::new(ServiceConfig::default()));
    let req = Request::get("/session/x").header(header::ORIGIN, "http://any.example").body(Body::empty()).unwrap();
    let (_, headers, _) = send(&open, req).await;
    assert_eq!(headers[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
}

#[tokio::test]
async fn static_assets_are_served_when_configured() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<!doctype html><title>ui</title>").unwrap();
    std::fs::write(dir.path().join("app.js"), "console.log(1)").unwrap();
    let app = app(ServiceConfig {
        static_dir: Some(dir.path().to_path_buf()),
        ..ServiceConfig::default()
    });
    let (status, _, body) = send(&app, get("/")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("<title>ui</title>"));
    let (status, headers, _) = send(&app, get("/app.js")).await;
    assert_eq!(status, StatusCode::OK);
    assert!(headers[header::CONTENT_TYPE].to_str().unwrap().contains("javascript"));
    let (status, _, _) = send(&app, get("/missing.css")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let bare = router(AppState::new(ServiceConfig::default()));
    let (status, _, _) = send(&bare, get("/")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}
