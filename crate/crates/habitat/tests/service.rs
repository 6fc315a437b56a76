mod common;

use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use habitat::checkpoint::{save_checkpoint, CheckpointMeta};
use habitat::core::metrics::rank_labels;
use habitat::core::preprocess::{preprocess_eval, PreprocessConfig};
use habitat::core::ClassTaxonomy;
use habitat::imaging::{decode_image, encode_jpeg, encode_png};
use habitat::model::{BackboneKind, Classifier, ClassifierConfig};
use habitat::service::{
    router, AppState, ClassEntry, LoadedModel, PredictionResponse, ServiceConfig, FEEDBACK_CSV_HEADER,
};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

const BOUNDARY: &str = "habitat-test-boundary";

fn multipart(files: &[(&str, &[u8])]) -> Vec<u8> {
    let mut body = Vec::new();
    for (name, bytes) in files {
        body.extend_from_slice(
            format!(
                "--{BOUNDARY}\r\nContent-Disposition: form-data; name=\"files\"; filename=\"{name}\"\r\nContent-Type: application/octet-stream\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(bytes);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

fn predict_request(files: &[(&str, &[u8])]) -> Request<Body> {
    Request::post("/predict")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(multipart(files)))
        .unwrap()
}

fn feedback_request(body: Value) -> Request<Body> {
    Request::post("/feedback")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

async fn send(app: &axum::Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

fn model(taxonomy: &ClassTaxonomy, dir: &Path) -> LoadedModel {
    let cfg = ClassifierConfig {
        n_classes: taxonomy.len(),
        backbone: BackboneKind::Tiny,
        pretrained: false,
        input_size: 32,
        seed: 11,
        ..Default::default()
    };
    let m = Classifier::initialised(&cfg).unwrap();
    let path = dir.join("model.safetensors");
    save_checkpoint(&m, &CheckpointMeta::new(&m, taxonomy, 4, 0.5), &path).unwrap();
    LoadedModel::from_checkpoint(&path, taxonomy).unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    app: axum::Router,
    state: Arc<AppState>,
}

fn fixture(with_model: bool, configure: impl FnOnce(&mut ServiceConfig)) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let taxonomy = ClassTaxonomy::living_england();
    let loaded = with_model.then(|| model(&taxonomy, dir.path()));
    let mut config = ServiceConfig::under(&dir.path().join("state"));
    configure(&mut config);
    let state = Arc::new(AppState::new(loaded, taxonomy, config).unwrap());
    Fixture {
        _dir: dir,
        app: router(state.clone()),
        state,
    }
}

fn photo(seed: u64) -> Vec<u8> {
    encode_png(&common::textured([90, 140, 60], 48, seed))
}

fn count_files(dir: &Path) -> usize {
    std::fs::read_dir(dir).map_or(0, |d| d.count())
}

#[tokio::test]
async fn predict_returns_ranked_top3_in_input_order() {
    let f = fixture(true, |_| {});
    let a = photo(1);
    let b = encode_jpeg(&common::textured([20, 60, 190], 40, 2));
    let (status, body) = send(&f.app, predict_request(&[("first.png", &a), ("second.JPG", &b)])).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let preds: Vec<PredictionResponse> = serde_json::from_value(body).unwrap();
    assert_eq!(preds.len(), 2);
    assert_eq!(preds[0].filename, "first.png");
    assert_eq!(preds[1].filename, "second.JPG");
    assert_ne!(preds[0].image_id, preds[1].image_id);
    for p in &preds {
        assert_eq!(p.top3.len(), 3);
        assert!(p.model_version.starts_with("tiny/"));
        assert!(p.top3.windows(2).all(|w| w[0].probability >= w[1].probability));
        assert!(p.top3.iter().map(|r| r.probability).sum::<f64>() <= 1.0 + 1e-9);
        for r in &p.top3 {
            assert!((0.0..=1.0).contains(&r.probability));
            assert_eq!(r.probability_display, format!("{:.4}", r.probability));
            assert!(!r.definition.is_empty() && !r.name.is_empty());
        }
    }
    assert_eq!(f.state.session_count(), 2);
}

#[tokio::test]
async fn predict_matches_offline_ranking() {
    let f = fixture(true, |_| {});
    let dir = tempfile::tempdir().unwrap();
    let taxonomy = ClassTaxonomy::living_england();
    let offline = model(&taxonomy, dir.path());
    let bytes = photo(5);
    let (_, body) = send(&f.app, predict_request(&[("x.png", &bytes)])).await;
    let preds: Vec<PredictionResponse> = serde_json::from_value(body).unwrap();
    let tensor = preprocess_eval(
        &decode_image(&bytes, "x.png").unwrap(),
        &PreprocessConfig {
            target_size: 32,
            ..Default::default()
        },
    )
    .unwrap();
    let probs = offline.classifier.predict_probabilities(&[tensor]).unwrap();
    let expected = rank_labels(&probs[0], &taxonomy, 3);
    for (got, want) in preds[0].top3.iter().zip(&expected) {
        assert_eq!(got.abbreviation, want.abbreviation);
        assert!((got.probability - want.probability).abs() < 1e-6);
    }
}

#[tokio::test]
async fn predict_rejects_bad_uploads() {
    let f = fixture(true, |_| {});
    let (status, body) = send(&f.app, predict_request(&[("a.gif", b"GIF89a")])).await;
    assert_eq!(status, StatusCode::UNSUPPORTED_MEDIA_TYPE);
    assert_eq!(body["supported_formats"], json!(["jpg", "jpeg", "png"]));

    let png = photo(3);
    let (status, body) = send(&f.app, predict_request(&[("ok.png", &png), ("broken.png", &png[..png.len() / 2])])).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(body["filename"], "broken.png");
    assert!(body["error"].as_str().unwrap().contains("broken.png"));
    assert_eq!(f.state.session_count(), 0);

    let (status, _) = send(&f.app, predict_request(&[])).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn oversized_upload_is_413() {
    let f = fixture(true, |_| {});
    let big = vec![0u8; 25 * 1024 * 1024];
    let (status, _) = send(&f.app, predict_request(&[("huge.jpg", &big)])).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn no_model_means_503() {
    let f = fixture(false, |_| {});
    let (status, _) = send(&f.app, predict_request(&[("a.png", &photo(1))])).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    let (status, body) = send(&f.app, Request::get("/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(body["model_version"], Value::Null);
}

#[tokio::test]
async fn health_echoes_model_version() {
    let f = fixture(true, |_| {});
    let (status, body) = send(&f.app, Request::get("/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert!(body["model_version"].as_str().unwrap().starts_with("tiny/living-england-18/v1/epoch4/"));
    assert!(body["uptime_seconds"].is_u64());
}

#[tokio::test]
async fn classes_listing() {
    let f = fixture(false, |_| {});
    let get = || Request::get("/classes").body(Body::empty()).unwrap();
    let (status, first) = send(&f.app, get()).await;
    assert_eq!(status, StatusCode::OK);
    let classes: Vec<ClassEntry> = serde_json::from_value(first.clone()).unwrap();
    assert_eq!(classes.len(), 18);
    assert_eq!(classes[0].abbreviation, "AH");
    let (_, second) = send(&f.app, get()).await;
    assert_eq!(first, second);

    let dir = tempfile::tempdir().unwrap();
    let state = AppState::new(None, common::colour_taxonomy(), ServiceConfig::under(dir.path())).unwrap();
    let (_, body) = send(&router(Arc::new(state)), get()).await;
    assert_eq!(body.as_array().unwrap().len(), 2);
}

async fn predicted(f: &Fixture, seed: u64) -> PredictionResponse {
    let (status, body) = send(&f.app, predict_request(&[("p.png", &photo(seed))])).await;
    assert_eq!(status, StatusCode::OK);
    serde_json::from_value::<Vec<PredictionResponse>>(body).unwrap().remove(0)
}

fn feedback_body(p: &PredictionResponse, verdict: &str, consent: bool) -> Value {
    json!({
        "image_id": p.image_id,
        "predicted_label": p.top3[0].abbreviation,
        "verdict": verdict,
        "confidence_shown": p.top3[0].probability,
        "consent_to_store": consent,
    })
}

#[tokio::test]
async fn feedback_logging_and_retention() {
    let f = fixture(true, |_| {});
    let cfg = f.state.config().clone();

    let kept = predicted(&f, 1).await;
    let (status, body) = send(&f.app, feedback_request(feedback_body(&kept, "confirm", true))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["retained"], true);
    assert_eq!(count_files(&cfg.retention_dir), 1);

    let dropped = predicted(&f, 2).await;
    let mut corrected = feedback_body(&dropped, "correct", false);
    corrected["corrected_label"] = json!("UG");
    let (status, _) = send(&f.app, feedback_request(corrected)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(count_files(&cfg.retention_dir), 1);
    assert_eq!(count_files(&cfg.upload_dir), 0);

    let csv = std::fs::read_to_string(cfg.log_dir.join("feedback.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], FEEDBACK_CSV_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[2].contains(",correct,UG,,"), "{}", lines[2]);
    let jsonl = std::fs::read_to_string(cfg.log_dir.join("feedback.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 2);

    // A second submission for the same image is refused.
    let (status, _) = send(&f.app, feedback_request(feedback_body(&kept, "confirm", true))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn feedback_validation_errors() {
    let f = fixture(true, |_| {});
    let p = predicted(&f, 4).await;
    let (status, _) = send(&f.app, feedback_request(feedback_body(&p, "correct", false))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let mut unknown = feedback_body(&p, "correct", false);
    unknown["corrected_label"] = json!("NOPE");
    assert_eq!(send(&f.app, feedback_request(unknown)).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(
        send(&f.app, feedback_request(feedback_body(&p, "custom", false))).await.0,
        StatusCode::BAD_REQUEST
    );
    assert_eq!(
        send(&f.app, feedback_request(json!({"image_id": p.image_id}))).await.0,
        StatusCode::BAD_REQUEST
    );
    let mut ghost = feedback_body(&p, "confirm", false);
    ghost["image_id"] = json!("00000000-0000-0000-0000-000000000000");
    assert_eq!(send(&f.app, feedback_request(ghost)).await.0, StatusCode::NOT_FOUND);
    // Rejected attempts leave the session usable and the logs empty.
    assert!(!f.state.config().log_dir.join("feedback.csv").exists());
    let mut custom = feedback_body(&p, "custom", false);
    custom["custom_label"] = json!("Saltmarsh, grazed");
    assert_eq!(send(&f.app, feedback_request(custom)).await.0, StatusCode::OK);
}

#[tokio::test]
async fn expired_sessions_are_purged() {
    let f = fixture(true, |c| c.session_ttl = std::time::Duration::ZERO);
    let p = predicted(&f, 6).await;
    let (status, _) = send(&f.app, feedback_request(feedback_body(&p, "confirm", true))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(count_files(&f.state.config().upload_dir), 0);
    assert_eq!(count_files(&f.state.config().retention_dir), 0);
}

#[tokio::test]
async fn bearer_token_guards_everything_but_health() {
    let f = fixture(true, |c| c.auth_token = Some("s3cret".into()));
    let (status, _) = send(&f.app, Request::get("/classes").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::UNAUTHORIZED);
    let authed = Request::get("/classes")
        .header(header::AUTHORIZATION, "Bearer s3cret")
        .body(Body::empty())
        .unwrap();
    assert_eq!(send(&f.app, authed).await.0, StatusCode::OK);
    let (status, _) = send(&f.app, Request::get("/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
}
